#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "neon/cgmh.hpp"
#include "neon/config.hpp"
#include "neon/corpus.hpp"
#include "neon/error.hpp"
#include "neon/explain.hpp"
#include "neon/gateway.hpp"
#include "neon/http.hpp"
#include "neon/icl.hpp"
#include "neon/instantiation.hpp"
#include "neon/io.hpp"
#include "neon/metrics.hpp"
#include "neon/mock_backend.hpp"
#include "neon/parallel.hpp"
#include "neon/random.hpp"
#include "neon/retrieve.hpp"

namespace neon::pipeline {

namespace fs = std::filesystem;

/// A stage stopped on one item. `validation` marks bad input rather than a
/// runtime failure.
class StageFailure : public Error {
  public:
    StageFailure(Stage stage, std::string item, const std::string& what, bool validation)
        : Error("stage " + std::string(to_string(stage)) + (item.empty() ? "" : ", item '" + item + "'") + ": " + what),
          stage_(stage), item_(std::move(item)), validation_(validation)
    {}

    Stage stage() const noexcept { return stage_; }
    const std::string& item() const noexcept { return item_; }
    bool validation() const noexcept { return validation_; }

  private:
    Stage stage_;
    std::string item_;
    bool validation_;
};

/// Typed view of a RunConfig, produced only by validate().
struct Settings {
    Task task = Task::comve;
    Split split = Split::test;
    fs::path pairs_path;
    std::optional<fs::path> train_path;
    std::optional<fs::path> omcs_path;
    std::size_t limit = 0;
    std::size_t pool_size = default_pool_size;
    std::uint64_t seed = 0;
    std::size_t threads = 1;

    std::string gateway;
    MockOptions mock;
    GatewayOptions gateway_options;
    std::chrono::seconds timeout{120};

    InstantiationMethod phase1 = InstantiationMethod::icl;
    icl::IclConfig icl;
    cgmh::Config cgmh;
    std::vector<explain::Method> methods;

    std::size_t ensemble_size = explain::default_ensemble_size;
    std::size_t retrieval_k = 5;
    retrieve::Bm25Params bm25;
    explain::Mode mode = explain::Mode::explain_false;

    explain::TemplateName template_name = explain::TemplateName::default_A;
    std::optional<fs::path> templates_dir;

    bool per_record = true;
    std::size_t embed_batch = 64;

    bool uses(explain::Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

    bool needs(InstantiationMethod im) const
    {
        const bool top1 = uses(explain::Method::top1) && phase1 == im;
        if (im == InstantiationMethod::icl) return top1 || uses(explain::Method::neon_icl);
        if (im == InstantiationMethod::cgmh) return top1 || uses(explain::Method::neon_cgmh);
        return false;
    }

    bool needs_corpus() const
    {
        return uses(explain::Method::retrieval_bm25) || uses(explain::Method::retrieval_embed);
    }
};

inline Settings validate(const RunConfig& c)
{
    Settings s;
    auto positive = [&](std::string_view key) {
        const auto v = c.integer(key);
        if (v < 1) throw ValidationError("config key '" + std::string(key) + "' must be >= 1");
        return static_cast<std::size_t>(v);
    };
    auto non_negative = [&](std::string_view key) {
        const auto v = c.integer(key);
        if (v < 0) throw ValidationError("config key '" + std::string(key) + "' must be >= 0");
        return static_cast<std::size_t>(v);
    };
    auto existing = [&](std::string_view key, bool required) -> std::optional<fs::path> {
        if (c.str(key).empty()) {
            if (required) throw ValidationError("config key '" + std::string(key) + "' is required");
            return std::nullopt;
        }
        auto p = c.path(key);
        if (!fs::exists(p)) throw ValidationError("config key '" + std::string(key) + "': no such path " + p.string());
        return p;
    };

    s.task = parse_task(c.str("task"));
    s.split = parse_split(c.str("split"));
    s.pairs_path = *existing("data.pairs", true);
    s.train_path = existing("data.train", false);
    s.limit = non_negative("data.limit");
    s.pool_size = positive("pool.size");
    s.seed = c.u64("seed");
    const auto threads = non_negative("threads");
    s.threads = threads == 0 ? default_concurrency() : threads;

    s.gateway = c.str("gateway");
    if (s.gateway != "mock" && s.gateway.rfind("http://", 0) != 0 && s.gateway.rfind("https://", 0) != 0) {
        throw ValidationError("gateway must be 'mock' or an http(s) URL");
    }
    s.mock.seed = c.u64("gateway.mock_seed");
    s.mock.classifier = c.boolean("gateway.mock_classifier");
    s.gateway_options.context_budget = positive("gateway.context_budget");
    s.gateway_options.max_in_flight = positive("gateway.max_in_flight");
    s.gateway_options.max_retries = static_cast<int>(non_negative("gateway.max_retries"));
    s.timeout = std::chrono::seconds(positive("gateway.timeout_s"));

    s.phase1 = parse_instantiation_method(c.str("phase1.method"));
    if (s.phase1 != InstantiationMethod::icl && s.phase1 != InstantiationMethod::cgmh) {
        throw ValidationError("phase1.method must be icl or cgmh");
    }
    s.icl.k = positive("icl.k");
    s.icl.n_samples = static_cast<int>(positive("icl.n_samples"));
    s.icl.top_p = c.real("icl.top_p");
    if (!(s.icl.top_p > 0.0 && s.icl.top_p <= 1.0)) throw ValidationError("icl.top_p must lie in (0, 1]");
    s.icl.temperature = c.real("icl.temperature");
    if (!(s.icl.temperature >= 0.0)) throw ValidationError("icl.temperature must be >= 0");
    s.icl.context_budget = s.gateway_options.context_budget;

    s.cgmh = cgmh::Config::for_task(s.task);
    s.cgmh.steps = static_cast<int>(non_negative("cgmh.steps"));
    s.cgmh.top_k = positive("cgmh.top_k");
    s.cgmh.scoring_top_k = positive("cgmh.scoring_top_k");
    s.cgmh.chains = static_cast<int>(positive("cgmh.chains"));
    s.cgmh.actions = {c.real("cgmh.p_replace"), c.real("cgmh.p_insert"), c.real("cgmh.p_delete")};
    s.cgmh.actions.validate();

    std::set<explain::Method> seen;
    for (const auto& m : c.list("methods")) {
        const auto method = explain::parse_method(m);
        if (!seen.insert(method).second) throw ValidationError("method '" + m + "' listed twice");
        s.methods.push_back(method);
    }
    if (s.methods.empty()) throw ValidationError("at least one method is required");

    s.ensemble_size = positive("ensemble_size");
    s.retrieval_k = positive("retrieval.k");
    s.bm25 = {c.real("bm25.k1"), c.real("bm25.b")};
    if (!(s.bm25.k1 > 0.0)) throw ValidationError("bm25.k1 must be > 0");
    if (!(s.bm25.b >= 0.0 && s.bm25.b <= 1.0)) throw ValidationError("bm25.b must lie in [0, 1]");
    s.mode = explain::parse_mode(c.str("mode"));
    if (s.mode == explain::Mode::explain_correct && s.uses(explain::Method::ground_truth)) {
        throw ValidationError("ground_truth is undefined when explaining correct statements");
    }
    s.omcs_path = existing("data.omcs", s.needs_corpus());

    s.template_name = explain::parse_template_name(c.str("template"));
    if (s.template_name == explain::TemplateName::original) {
        throw ValidationError("template 'original' is reserved for the original baseline");
    }
    s.templates_dir = existing("templates.dir", false);

    s.per_record = c.boolean("metrics.per_record");
    s.embed_batch = positive("metrics.embed_batch");
    return s;
}

inline std::shared_ptr<Backend> make_backend(const Settings& s)
{
    if (s.gateway == "mock") return std::make_shared<MockBackend>(s.mock);
    return std::make_shared<HttpBackend>(s.gateway, s.timeout);
}

/// Hint list for one (source, method).
struct HintSet {
    std::string source_id;
    explain::Method method = explain::Method::original;
    std::vector<std::string> hints;

    friend bool operator==(const HintSet&, const HintSet&) = default;
};

inline json to_json(const HintSet& h)
{
    return json{{"source_id", h.source_id}, {"method", explain::to_string(h.method)}, {"hints", h.hints}};
}

inline HintSet hint_set_from_json(const json& j)
{
    return HintSet{j.at("source_id").get<std::string>(), explain::parse_method(j.at("method").get<std::string>()),
                   j.at("hints").get<std::vector<std::string>>()};
}

/// Orders instantiations as hints: sample order for ICL, descending fluency
/// (then sample index) for CGMH.
inline std::vector<std::string> ordered_hints(std::vector<Instantiation> insts)
{
    std::stable_sort(insts.begin(), insts.end(), [](const Instantiation& a, const Instantiation& b) {
        if (a.method == InstantiationMethod::cgmh && b.method == InstantiationMethod::cgmh) {
            const double fa = a.fluency.value_or(0.0), fb = b.fluency.value_or(0.0);
            if (fa != fb) return fa > fb;
        }
        return a.sample_index < b.sample_index;
    });
    std::vector<std::string> out;
    for (auto& i : insts) out.push_back(std::move(i.text));
    return out;
}

/// Exactly `size` hints, repeating from the start when fewer exist.
inline std::vector<std::string> ensemble(const std::vector<std::string>& ordered, std::size_t size)
{
    if (ordered.empty()) return {};
    std::vector<std::string> out;
    for (std::size_t i = 0; i < size; ++i) out.push_back(ordered[i % ordered.size()]);
    return out;
}

struct RunOptions {
    bool force = false;
    /// Directory of an earlier run whose matching stages may be copied.
    std::optional<fs::path> reuse_from;
};

inline constexpr std::string_view manifest_format = "neon-run";
inline constexpr int manifest_version = 1;

/// Paths (relative to the run directory) each stage owns.
inline std::vector<std::string> stage_outputs(Stage s)
{
    switch (s) {
    case Stage::ingest: return {"pairs.jsonl", "pool.jsonl"};
    case Stage::instantiate: return {"instantiations"};
    case Stage::hints: return {"hints.jsonl", "index.json"};
    case Stage::explain: return {"records"};
    case Stage::score: return {"reports", "report.txt", "report.csv"};
    }
    return {};
}

inline std::string instantiation_file(InstantiationMethod m)
{
    return "instantiations/" + std::string(to_string(m)) + ".jsonl";
}

inline std::string records_file(explain::Method m) { return "records/" + std::string(explain::to_string(m)) + ".jsonl"; }

// ---------------------------------------------------------------- report table

struct TableRow {
    std::string run;
    metrics::MetricReport report;
};

inline std::string table_csv(const std::vector<TableRow>& rows)
{
    auto full = [](double v) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    std::string out = "run,method,n_records,bleu,rouge1,rouge2,rougeL,bertscore_f1,sbert_cosine\n";
    for (const auto& r : rows) {
        const auto& m = r.report;
        out += metrics::csv_quote(r.run) + "," + metrics::csv_quote(m.method) + "," + std::to_string(m.n_records);
        for (double v : {m.bleu, m.rouge.rouge1, m.rouge.rouge2, m.rouge.rougeL, m.bertscore_f1, m.sbert_cosine}) {
            out += "," + full(v);
        }
        out += "\n";
    }
    return out;
}

/// Aligned text table; ROUGE is the ROUGE-L F1 column.
inline std::string table_text(const std::vector<TableRow>& rows)
{
    std::vector<std::array<std::string, 7>> cells;
    cells.push_back({"run", "method", "n", "BLEU", "ROUGE", "BERTScore", "S-BERT"});
    for (const auto& r : rows) {
        const auto& m = r.report;
        cells.push_back({r.run, m.method, std::to_string(m.n_records), metrics::fixed(m.bleu),
                         metrics::fixed(m.rouge.rougeL), metrics::fixed(m.bertscore_f1), metrics::fixed(m.sbert_cosine)});
    }
    std::array<std::size_t, 7> width{};
    for (const auto& row : cells) {
        for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
    }
    std::string out;
    for (const auto& row : cells) {
        std::string line;
        for (std::size_t c = 0; c < row.size(); ++c) {
            const auto pad = std::string(width[c] - row[c].size(), ' ');
            if (c) line += "  ";
            line += c < 2 ? row[c] + pad : pad + row[c];  // text left, numbers right
        }
        while (!line.empty() && line.back() == ' ') line.pop_back();
        out += line + "\n";
    }
    return out;
}

/// Parses table_csv output back into rows (metric fields only).
inline std::vector<TableRow> parse_table_csv(const std::string& csv)
{
    std::vector<TableRow> rows;
    auto lines = text::split(csv, '\n');
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto f = text::split(lines[i], ',');
        if (f.size() != 9) throw ParseError("<report csv>", i, "expected 9 fields");
        TableRow r;
        r.run = f[0];
        r.report.method = f[1];
        r.report.n_records = std::stoul(f[2]);
        r.report.bleu = std::stod(f[3]);
        r.report.rouge = {std::stod(f[4]), std::stod(f[5]), std::stod(f[6])};
        r.report.bertscore_f1 = std::stod(f[7]);
        r.report.sbert_cosine = std::stod(f[8]);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline json read_manifest(const fs::path& run_dir)
{
    const auto p = run_dir / "manifest.json";
    if (!fs::exists(p)) throw ValidationError(run_dir.string() + " is not a run directory (no manifest.json)");
    auto j = json::parse(io::read_file(p));
    if (j.value("format", "") != manifest_format) throw ValidationError(p.string() + " is not a run manifest");
    return j;
}

/// Metric reports of a completed run, in the run's configured method order.
inline std::pair<Task, std::vector<metrics::MetricReport>> load_run_reports(const fs::path& run_dir)
{
    const auto manifest = read_manifest(run_dir);
    if (!manifest.at("stages").contains(std::string(to_string(Stage::score)))) {
        throw ValidationError(run_dir.string() + " has not completed the score stage");
    }
    const auto task = parse_task(manifest.at("config").at("task").get<std::string>());
    std::vector<metrics::MetricReport> out;
    for (const auto& m : text::split(manifest.at("config").at("methods").get<std::string>(), ',')) {
        const auto p = run_dir / "reports" / (std::string(text::trim(m)) + ".json");
        if (fs::exists(p)) out.push_back(metrics::metric_report_from_json(json::parse(io::read_file(p))));
    }
    return {task, std::move(out)};
}

/// Comparison table over runs, rows in the order given.
inline std::vector<TableRow> collect_rows(const std::vector<std::pair<std::string, fs::path>>& runs)
{
    if (runs.empty()) throw ValidationError("report needs at least one run directory");
    std::optional<Task> task;
    std::vector<TableRow> rows;
    for (const auto& [label, dir] : runs) {
        auto [t, reports] = load_run_reports(dir);
        if (task && *task != t) throw ValidationError("cannot compare runs of different tasks");
        task = t;
        for (auto& r : reports) rows.push_back({label, std::move(r)});
    }
    return rows;
}

// ---------------------------------------------------------------- runner

class Runner {
  public:
    Runner(RunConfig config, fs::path run_dir, RunOptions options = {})
        : config_(std::move(config)), settings_(validate(config_)), dir_(std::move(run_dir)), options_(std::move(options))
    {
        for (auto s : all_stages) seeds_[s] = derive_seed(settings_.seed, to_string(s));
    }

    const Settings& settings() const noexcept { return settings_; }
    const fs::path& dir() const noexcept { return dir_; }

    /// Runs every stage up to and including `last`, skipping stages whose
    /// recorded fingerprint matches the current configuration.
    void run_until(Stage last)
    {
        fs::create_directories(dir_);
        load_or_init_manifest();
        for (auto s : all_stages) {
            if (static_cast<int>(s) > static_cast<int>(last)) break;
            if (!options_.force && current(s)) continue;
            if (!options_.force && adopt(s)) continue;
            invalidate_from(s);
            execute(s);
            manifest_["stages"][std::string(to_string(s))] = config_.fingerprint(s);
            save_manifest();
        }
        options_.force = false;
    }

    void run() { run_until(Stage::score); }

    const json& manifest() const noexcept { return manifest_; }

  private:
    // ---- manifest

    void load_or_init_manifest()
    {
        const auto p = dir_ / "manifest.json";
        if (fs::exists(p) && !options_.force) {
            manifest_ = read_manifest(dir_);
        } else {
            manifest_ = json{{"format", manifest_format}, {"version", manifest_version}};
            manifest_["stages"] = json::object();
            manifest_["stage_info"] = json::object();
        }
        manifest_["config"] = config_.to_json();
        manifest_["config_hash"] = config_.hash();
        json seeds = json::object();
        for (auto s : all_stages) seeds[std::string(to_string(s))] = seeds_[s];
        manifest_["seeds"] = seeds;
        manifest_["gateway"] = settings_.gateway == "mock" ? MockBackend(settings_.mock).identity()
                                                           : "http:" + settings_.gateway;
        // Entries for stages whose inputs changed are dropped here.
        bool stale = false;
        for (auto s : all_stages) {
            const auto key = std::string(to_string(s));
            if (stale || !manifest_["stages"].contains(key) || manifest_["stages"][key] != config_.fingerprint(s)) {
                stale = true;
                manifest_["stages"].erase(key);
                manifest_["stage_info"].erase(key);
            }
        }
        save_manifest();
    }

    void save_manifest() { io::write_file_atomic(dir_ / "manifest.json", manifest_.dump(2) + "\n"); }

    bool current(Stage s) const
    {
        const auto key = std::string(to_string(s));
        if (!manifest_["stages"].contains(key)) return false;
        return fs::exists(dir_ / stage_outputs(s).front());
    }

    /// Copies a matching stage from options_.reuse_from.
    bool adopt(Stage s)
    {
        if (!options_.reuse_from) return false;
        const auto& src = *options_.reuse_from;
        if (!fs::exists(src / "manifest.json")) return false;
        const auto other = read_manifest(src);
        const auto key = std::string(to_string(s));
        if (!other.at("stages").contains(key) || other["stages"][key] != config_.fingerprint(s)) return false;
        invalidate_from(s);
        for (const auto& out : stage_outputs(s)) {
            if (fs::exists(src / out)) fs::copy(src / out, dir_ / out, fs::copy_options::recursive);
        }
        manifest_["stages"][key] = config_.fingerprint(s);
        if (other.contains("stage_info") && other["stage_info"].contains(key)) {
            manifest_["stage_info"][key] = other["stage_info"][key];
        }
        save_manifest();
        return true;
    }

    void invalidate_from(Stage s)
    {
        for (auto later : all_stages) {
            if (static_cast<int>(later) < static_cast<int>(s)) continue;
            for (const auto& out : stage_outputs(later)) fs::remove_all(dir_ / out);
            manifest_["stages"].erase(std::string(to_string(later)));
            manifest_["stage_info"].erase(std::string(to_string(later)));
        }
        save_manifest();
    }

    void execute(Stage s)
    {
        try {
            switch (s) {
            case Stage::ingest: ingest(); break;
            case Stage::instantiate: instantiate(); break;
            case Stage::hints: hints(); break;
            case Stage::explain: explain(); break;
            case Stage::score: score(); break;
            }
        } catch (const StageFailure&) {
            throw;
        } catch (const ValidationError& e) {
            throw StageFailure(s, "", e.what(), true);
        } catch (const ParseError& e) {
            throw StageFailure(s, "", e.what(), true);
        } catch (const std::exception& e) {
            throw StageFailure(s, "", e.what(), false);
        }
    }

    /// Runs fn over items in parallel, tagging failures with the item id.
    template <class T, class F>
    void for_each_item(Stage s, const std::vector<T>& items, F&& fn, auto&& id_of)
    {
        parallel_for(items.size(), settings_.threads, [&](std::size_t i) {
            try {
                fn(i);
            } catch (const ValidationError& e) {
                throw StageFailure(s, id_of(items[i]), e.what(), true);
            } catch (const std::exception& e) {
                throw StageFailure(s, id_of(items[i]), e.what(), false);
            }
        });
    }

    Gateway& gateway()
    {
        if (!gateway_) gateway_ = std::make_unique<Gateway>(make_backend(settings_), settings_.gateway_options);
        return *gateway_;
    }

    json& info(Stage s) { return manifest_["stage_info"][std::string(to_string(s))]; }

    std::vector<StatementPair> pairs() const { return load_pairs_jsonl(dir_ / "pairs.jsonl"); }

    std::vector<StatementPair> training_pairs(EsnliLoadStats* stats = nullptr) const
    {
        if (!settings_.train_path) return pairs();
        return load_pairs(*settings_.train_path, settings_.task, Split::train, stats);
    }

    // ---- stages

    void ingest()
    {
        EsnliLoadStats stats;
        auto ps = load_pairs(settings_.pairs_path, settings_.task, settings_.split, &stats);
        for (const auto& p : ps) {
            if (p.task != settings_.task) throw ValidationError("pair '" + p.id + "' belongs to another task");
        }
        if (settings_.limit > 0 && ps.size() > settings_.limit) ps.resize(settings_.limit);
        if (ps.empty()) throw ValidationError("no statement pairs loaded from " + settings_.pairs_path.string());
        std::set<std::string> ids;
        for (const auto& p : ps) {
            if (!ids.insert(p.id).second) throw ValidationError("duplicate pair id '" + p.id + "'");
        }
        save_pairs_jsonl(dir_ / "pairs.jsonl", ps);

        EsnliLoadStats train_stats;
        const auto train = settings_.train_path ? training_pairs(&train_stats) : ps;
        const auto pool = sample_exemplar_pool(train, seeds_[Stage::ingest], settings_.pool_size);
        save_pairs_jsonl(dir_ / "pool.jsonl", pool.items);

        auto& j = info(Stage::ingest);
        j = json{{"n_pairs", ps.size()}, {"n_pool", pool.items.size()}};
        if (settings_.task == Task::esnli) {
            j["esnli"] = {{"reference_mapping", esnli_reference_mapping},
                          {"rows", stats.rows},
                          {"premises", stats.premises},
                          {"dropped_premises", stats.dropped}};
        }
    }

    void instantiate()
    {
        const auto ps = pairs();
        ExemplarPool pool{load_pairs_jsonl(dir_ / "pool.jsonl"), seeds_[Stage::ingest]};
        fs::create_directories(dir_ / "instantiations");
        auto& j = info(Stage::instantiate);
        j = json::object();
        for (auto im : {InstantiationMethod::icl, InstantiationMethod::cgmh}) {
            if (!settings_.needs(im)) continue;
            const auto base = derive_seed(seeds_[Stage::instantiate], to_string(im));
            std::vector<std::vector<Instantiation>> per_pair(ps.size());
            for_each_item(
                Stage::instantiate, ps,
                [&](std::size_t i) {
                    const auto seed = derive_seed(base, ps[i].id);
                    per_pair[i] = im == InstantiationMethod::icl
                                      ? icl::instantiate(pool, ps[i], settings_.icl, gateway(), seed)
                                      : cgmh::run_chain(ps[i], settings_.cgmh, gateway(), seed);
                },
                [](const StatementPair& p) { return p.id; });
            std::vector<json> all;
            json empty = json::array();
            for (std::size_t i = 0; i < ps.size(); ++i) {
                if (per_pair[i].empty()) empty.push_back(ps[i].id);
                for (const auto& h : per_pair[i]) all.push_back(to_json(h));
            }
            io::write_jsonl(dir_ / instantiation_file(im), all);
            j[std::string(to_string(im))] = {{"n_instantiations", all.size()}, {"pairs_without_instantiations", empty}};
        }
    }

    std::map<std::string, std::vector<Instantiation>> load_instantiations(InstantiationMethod im) const
    {
        std::map<std::string, std::vector<Instantiation>> by_source;
        for (const auto& row : io::read_jsonl(dir_ / instantiation_file(im))) {
            auto h = instantiation_from_json(row);
            by_source[h.source_id].push_back(std::move(h));
        }
        return by_source;
    }

    void hints()
    {
        using explain::Method;
        const auto ps = pairs();
        const auto seed = seeds_[Stage::hints];

        std::map<InstantiationMethod, std::map<std::string, std::vector<Instantiation>>> insts;
        for (auto im : {InstantiationMethod::icl, InstantiationMethod::cgmh}) {
            if (settings_.needs(im)) insts[im] = load_instantiations(im);
        }
        auto ordered = [&](InstantiationMethod im, const std::string& id) {
            auto it = insts[im].find(id);
            return it == insts[im].end() ? std::vector<std::string>{} : ordered_hints(it->second);
        };

        std::optional<KnowledgeCorpus> corpus;
        std::optional<retrieve::EmbeddingIndex> index;
        if (settings_.needs_corpus()) {
            corpus = load_omcs(*settings_.omcs_path);
            if (corpus->empty()) throw ValidationError("knowledge corpus " + settings_.omcs_path->string() + " is empty");
            if (settings_.uses(Method::retrieval_embed)) {
                index = retrieve::EmbeddingIndex::build(*corpus, gateway());
            }
            retrieve::save_index(dir_ / "index.json", *corpus, index ? &*index : nullptr);
        }

        std::vector<StatementPair> random_source;
        if (settings_.uses(Method::random)) random_source = training_pairs();

        std::vector<std::vector<HintSet>> per_pair(ps.size());
        for_each_item(
            Stage::hints, ps,
            [&](std::size_t i) {
                const auto& p = ps[i];
                const auto& statement = explain::explained_statement(p, settings_.mode);
                for (auto m : settings_.methods) {
                    HintSet h{p.id, m, {}};
                    switch (m) {
                    case Method::original: break;
                    case Method::ground_truth: h.hints = {p.correct}; break;
                    case Method::random: {
                        std::vector<StatementPair> others;
                        for (const auto& q : random_source) {
                            if (q.id != p.id) others.push_back(q);
                        }
                        h.hints = {retrieve::random_correct(others.empty() ? random_source : others,
                                                            derive_seed(derive_seed(seed, "random"), p.id))};
                        break;
                    }
                    case Method::retrieval_bm25:
                    case Method::retrieval_embed: {
                        const auto r = m == Method::retrieval_bm25
                                           ? retrieve::retrieve_bm25(statement, *corpus, settings_.retrieval_k,
                                                                     settings_.bm25, p.id)
                                           : retrieve::retrieve_embed(statement, *corpus, *index, gateway(),
                                                                      settings_.retrieval_k, p.id);
                        for (const auto& hit : r.hits) h.hints.push_back(hit.text);
                        break;
                    }
                    case Method::top1: {
                        auto o = ordered(settings_.phase1, p.id);
                        if (o.empty()) continue;
                        h.hints = {o.front()};
                        break;
                    }
                    case Method::neon_icl:
                    case Method::neon_cgmh: {
                        auto o = ordered(m == Method::neon_icl ? InstantiationMethod::icl : InstantiationMethod::cgmh, p.id);
                        if (o.empty()) continue;
                        h.hints = ensemble(o, settings_.ensemble_size);
                        break;
                    }
                    }
                    per_pair[i].push_back(std::move(h));
                }
            },
            [](const StatementPair& p) { return p.id; });

        // Method-major order: all pairs of the first method, then the next.
        std::vector<json> rows;
        json skipped = json::object();
        for (auto m : settings_.methods) {
            json missing = json::array();
            for (std::size_t i = 0; i < ps.size(); ++i) {
                auto it = std::find_if(per_pair[i].begin(), per_pair[i].end(), [&](const HintSet& h) { return h.method == m; });
                if (it == per_pair[i].end()) {
                    missing.push_back(ps[i].id);
                } else {
                    rows.push_back(to_json(*it));
                }
            }
            if (!missing.empty()) skipped[std::string(explain::to_string(m))] = missing;
        }
        io::write_jsonl(dir_ / "hints.jsonl", rows);
        info(Stage::hints) = json{{"n_hint_sets", rows.size()}, {"skipped_no_instantiations", skipped}};
    }

    void explain()
    {
        const auto ps = pairs();
        std::map<std::string, const StatementPair*> by_id;
        for (const auto& p : ps) by_id[p.id] = &p;
        const auto registry = settings_.templates_dir ? explain::TemplateRegistry::load_directory(*settings_.templates_dir)
                                                      : explain::TemplateRegistry::builtin();
        std::vector<HintSet> sets;
        for (const auto& row : io::read_jsonl(dir_ / "hints.jsonl")) sets.push_back(hint_set_from_json(row));

        std::vector<explain::ExplanationRecord> records(sets.size());
        for_each_item(
            Stage::explain, sets,
            [&](std::size_t i) {
                const auto& h = sets[i];
                auto it = by_id.find(h.source_id);
                if (it == by_id.end()) throw ValidationError("hints refer to unknown pair");
                records[i] = explain::explain_pair(*it->second, h.method, h.hints, settings_.template_name,
                                                   settings_.mode, gateway(), registry);
                explain::check_record(records[i], settings_.ensemble_size);
            },
            [](const HintSet& h) { return h.source_id + " (" + std::string(explain::to_string(h.method)) + ")"; });

        fs::create_directories(dir_ / "records");
        json empties = json::object();
        for (auto m : settings_.methods) {
            std::vector<json> rows;
            std::size_t empty = 0;
            for (const auto& r : records) {
                if (r.method != m) continue;
                rows.push_back(explain::to_json(r));
                if (r.empty_explanation) ++empty;
            }
            io::write_jsonl(dir_ / records_file(m), rows);
            empties[std::string(explain::to_string(m))] = empty;
        }
        info(Stage::explain) = json{{"n_records", records.size()}, {"empty_explanations", empties}};
    }

    void score()
    {
        fs::create_directories(dir_ / "reports");
        std::vector<TableRow> rows;
        json skipped = json::array();
        for (auto m : settings_.methods) {
            std::vector<explain::ExplanationRecord> records;
            for (const auto& row : io::read_jsonl(dir_ / records_file(m))) records.push_back(explain::record_from_json(row));
            if (records.empty()) {
                skipped.push_back(explain::to_string(m));
                continue;
            }
            metrics::EvaluateOptions opts;
            opts.keep_rows = settings_.per_record;
            opts.embed_batch = settings_.embed_batch;
            opts.threads = settings_.threads;
            auto rep = metrics::evaluate_run(records, gateway(), opts);
            const auto stem = dir_ / "reports" / std::string(explain::to_string(m));
            io::write_file_atomic(stem.string() + ".json", metrics::to_json(rep).dump(2) + "\n");
            if (rep.per_record) io::write_file_atomic(stem.string() + ".csv", metrics::per_record_csv(*rep.per_record));
            rep.per_record.reset();
            rows.push_back({".", std::move(rep)});
        }
        io::write_file_atomic(dir_ / "report.txt", table_text(rows));
        io::write_file_atomic(dir_ / "report.csv", table_csv(rows));
        info(Stage::score) = json{{"methods_without_records", skipped}};
    }

    RunConfig config_;
    Settings settings_;
    fs::path dir_;
    RunOptions options_;
    std::map<Stage, std::uint64_t> seeds_;
    json manifest_;
    std::unique_ptr<Gateway> gateway_;
};

/// Runs one configuration per value of `key` under out_dir/<key>=<value>,
/// reusing stages that the value does not affect, then writes a combined
/// sweep.txt / sweep.csv.
inline std::vector<TableRow> sweep(const RunConfig& base, const std::string& key, const std::vector<std::string>& values,
                                   const fs::path& out_dir, bool force = false)
{
    if (!find_config_key(key)) throw ValidationError("unknown sweep key '" + key + "'");
    if (values.empty()) throw ValidationError("sweep needs at least one value");
    std::vector<std::pair<std::string, fs::path>> runs;
    std::optional<fs::path> first;
    for (const auto& v : values) {
        auto cfg = base;
        cfg.set(key, v);
        const auto label = key + "=" + v;
        const auto dir = out_dir / label;
        Runner runner(cfg, dir, RunOptions{force, first});
        runner.run();
        if (!first) first = dir;
        runs.emplace_back(label, dir);
    }
    auto rows = collect_rows(runs);
    io::write_file_atomic(out_dir / "sweep.txt", table_text(rows));
    io::write_file_atomic(out_dir / "sweep.csv", table_csv(rows));
    return rows;
}

}  // namespace neon::pipeline
