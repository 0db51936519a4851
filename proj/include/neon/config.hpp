#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neon/error.hpp"
#include "neon/io.hpp"
#include "neon/text.hpp"

namespace neon {

enum class Stage { ingest, instantiate, hints, explain, score };

inline constexpr std::array all_stages{Stage::ingest, Stage::instantiate, Stage::hints, Stage::explain, Stage::score};

inline std::string_view to_string(Stage s) noexcept
{
    switch (s) {
    case Stage::ingest: return "ingest";
    case Stage::instantiate: return "instantiate";
    case Stage::hints: return "hints";
    case Stage::explain: return "explain";
    case Stage::score: return "score";
    }
    return "ingest";
}

struct ConfigKey {
    std::string_view key;
    std::string_view default_value;
    /// First stage whose output depends on this key.
    Stage stage;
    std::string_view help;
};

// Every recognised key. Unknown keys are rejected.
inline constexpr ConfigKey config_schema[] = {
    {"task", "comve", Stage::ingest, "comve or esnli"},
    {"split", "test", Stage::ingest, "split label of data.pairs: train, dev or test"},
    {"data.pairs", "", Stage::ingest, "statement pairs to explain (.csv or .jsonl)"},
    {"data.train", "", Stage::ingest, "training pairs for the exemplar pool and random baseline; empty = data.pairs"},
    {"data.limit", "0", Stage::ingest, "use only the first N pairs (0 = all)"},
    {"pool.size", "200", Stage::ingest, "exemplar pool size"},
    {"seed", "0", Stage::ingest, "master seed; stage seeds derive from it"},

    {"gateway", "mock", Stage::instantiate, "'mock' or an http(s) base URL of a gateway server"},
    {"gateway.mock_seed", "0", Stage::instantiate, "seed of the mock backend"},
    {"gateway.mock_classifier", "true", Stage::instantiate, "whether the mock exposes a classifier"},
    {"gateway.context_budget", "2048", Stage::instantiate, "context window in tokens"},
    {"gateway.max_in_flight", "8", Stage::instantiate, "concurrent backend calls"},
    {"gateway.max_retries", "3", Stage::instantiate, "retries on transport failures"},
    {"gateway.timeout_s", "120", Stage::instantiate, "HTTP timeout in seconds"},
    {"phase1.method", "icl", Stage::instantiate, "instantiation source for top1: icl or cgmh"},
    {"icl.k", "16", Stage::instantiate, "exemplars per prompt"},
    {"icl.n_samples", "10", Stage::instantiate, "instantiations requested per pair"},
    {"icl.top_p", "0.9", Stage::instantiate, "nucleus threshold"},
    {"icl.temperature", "0", Stage::instantiate, "sampling temperature (0 = greedy)"},
    {"cgmh.steps", "50", Stage::instantiate, "Metropolis-Hastings steps per chain"},
    {"cgmh.top_k", "50", Stage::instantiate, "masked-LM candidates per edit"},
    {"cgmh.scoring_top_k", "1000", Stage::instantiate, "masked-LM candidates when scoring"},
    {"cgmh.chains", "5", Stage::instantiate, "independent chains per pair"},
    {"cgmh.p_replace", "0.7", Stage::instantiate, "replace probability"},
    {"cgmh.p_insert", "0.2", Stage::instantiate, "insert probability"},
    {"cgmh.p_delete", "0.1", Stage::instantiate, "delete probability"},
    {"methods", "original,random,retrieval_bm25,retrieval_embed,ground_truth,top1,neon_icl", Stage::instantiate,
     "explanation methods, comma separated"},

    {"data.omcs", "", Stage::hints, "knowledge corpus for retrieval (one statement per line)"},
    {"ensemble_size", "5", Stage::hints, "hints per NEON prompt"},
    {"retrieval.k", "5", Stage::hints, "retrieved statements per query"},
    {"bm25.k1", "1.2", Stage::hints, "BM25 k1"},
    {"bm25.b", "0.75", Stage::hints, "BM25 b"},
    {"mode", "explain_false", Stage::hints, "explain_false or explain_correct"},

    {"template", "default_A", Stage::explain, "default_A, annotator_B, annotator_C or instruction"},
    {"templates.dir", "", Stage::explain, "template directory (empty = built-in templates)"},

    {"metrics.per_record", "true", Stage::score, "write per-record metric rows"},
    {"metrics.embed_batch", "64", Stage::score, "texts per embedding call"},

    {"threads", "0", Stage::ingest, "worker threads (0 = hardware concurrency); does not affect outputs"},
};

inline const ConfigKey* find_config_key(std::string_view key)
{
    for (const auto& k : config_schema) {
        if (k.key == key) return &k;
    }
    return nullptr;
}

/// Flat key/value configuration. Files use `key = value` lines with `#`
/// comments and optional `[section]` headers that prefix following keys.
class RunConfig {
  public:
    RunConfig()
    {
        for (const auto& k : config_schema) values_[std::string(k.key)] = std::string(k.default_value);
    }

    static RunConfig parse(std::string_view content, std::string_view origin = "<config>")
    {
        RunConfig c;
        std::string section;
        std::size_t lineno = 0;
        for (const auto& raw : text::split(content, '\n')) {
            ++lineno;
            auto line = std::string(text::trim(strip_comment(raw)));
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ParseError(std::string(origin), lineno, "unterminated section header");
                section = std::string(text::trim(std::string_view(line).substr(1, line.size() - 2)));
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ParseError(std::string(origin), lineno, "expected key = value");
            auto key = std::string(text::trim(std::string_view(line).substr(0, eq)));
            if (!section.empty()) key = section + "." + key;
            try {
                c.set(key, unquote(text::trim(std::string_view(line).substr(eq + 1))));
            } catch (const ValidationError& e) {
                throw ParseError(std::string(origin), lineno, e.what());
            }
        }
        return c;
    }

    static RunConfig load(const std::filesystem::path& path)
    {
        auto c = parse(io::read_file(path), path.string());
        c.base_dir_ = path.parent_path();
        return c;
    }

    void set(std::string_view key, std::string value)
    {
        if (!find_config_key(key)) throw ValidationError("unknown config key '" + std::string(key) + "'");
        values_[std::string(key)] = std::move(value);
    }

    /// Applies a "key=value" override.
    void apply_override(std::string_view kv)
    {
        const auto eq = kv.find('=');
        if (eq == std::string_view::npos) throw ValidationError("override '" + std::string(kv) + "' is not key=value");
        set(text::trim(kv.substr(0, eq)), unquote(text::trim(kv.substr(eq + 1))));
    }

    const std::string& str(std::string_view key) const
    {
        auto it = values_.find(std::string(key));
        if (it == values_.end()) throw ValidationError("unknown config key '" + std::string(key) + "'");
        return it->second;
    }

    std::int64_t integer(std::string_view key) const
    {
        const auto& v = str(key);
        std::int64_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || p != v.data() + v.size()) bad(key, "an integer");
        return out;
    }

    std::uint64_t u64(std::string_view key) const
    {
        const auto& v = str(key);
        std::uint64_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || p != v.data() + v.size()) bad(key, "a non-negative integer");
        return out;
    }

    double real(std::string_view key) const
    {
        const auto& v = str(key);
        try {
            std::size_t used = 0;
            double d = std::stod(v, &used);
            if (used != v.size()) bad(key, "a number");
            return d;
        } catch (const std::logic_error&) {
            bad(key, "a number");
        }
    }

    bool boolean(std::string_view key) const
    {
        const auto& v = str(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        bad(key, "true or false");
    }

    std::vector<std::string> list(std::string_view key) const
    {
        std::vector<std::string> out;
        for (const auto& part : text::split(str(key), ',')) {
            auto t = std::string(text::trim(part));
            if (!t.empty()) out.push_back(std::move(t));
        }
        return out;
    }

    /// Path value resolved against the config file's directory.
    std::filesystem::path path(std::string_view key) const
    {
        std::filesystem::path p = str(key);
        if (p.empty() || p.is_absolute() || base_dir_.empty()) return p;
        return base_dir_ / p;
    }

    void set_base_dir(std::filesystem::path dir) { base_dir_ = std::move(dir); }
    const std::filesystem::path& base_dir() const noexcept { return base_dir_; }

    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    /// Keys with resolved paths, as written into manifests.
    json to_json() const
    {
        json j = json::object();
        for (const auto& [k, v] : values_) {
            if (k == "threads") continue;
            j[k] = is_path_key(k) && !v.empty() ? path(k).lexically_normal().string() : v;
        }
        return j;
    }

    /// Hash of every key that can change stage `s` or an earlier stage.
    std::string fingerprint(Stage s) const
    {
        std::string material;
        for (const auto& k : config_schema) {
            if (k.key == "threads" || static_cast<int>(k.stage) > static_cast<int>(s)) continue;
            material += std::string(k.key) + "=" + to_json().at(std::string(k.key)).get<std::string>() + "\n";
        }
        return text::sha256_hex(material);
    }

    std::string hash() const { return fingerprint(Stage::score); }

  private:
    static bool is_path_key(std::string_view k)
    {
        return k == "data.pairs" || k == "data.train" || k == "data.omcs" || k == "templates.dir";
    }

    [[noreturn]] static void bad(std::string_view key, std::string_view what)
    {
        throw ValidationError("config key '" + std::string(key) + "' must be " + std::string(what));
    }

    static std::string_view strip_comment(std::string_view line)
    {
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) return line.substr(0, i);
        }
        return line;
    }

    static std::string unquote(std::string_view v)
    {
        if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return std::string(v.substr(1, v.size() - 2));
        if (v.size() >= 2 && v.front() == '[' && v.back() == ']') {
            // TOML-style array of strings -> comma list.
            std::string out;
            for (const auto& part : text::split(v.substr(1, v.size() - 2), ',')) {
                auto t = text::trim(part);
                if (t.size() >= 2 && t.front() == '"' && t.back() == '"') t = t.substr(1, t.size() - 2);
                if (t.empty()) continue;
                if (!out.empty()) out += ",";
                out += t;
            }
            return out;
        }
        return std::string(v);
    }

    std::map<std::string, std::string> values_;
    std::filesystem::path base_dir_;
};

}  // namespace neon
