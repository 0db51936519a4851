#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <httplib.h>

#include "neon/corpus.hpp"
#include "neon/error.hpp"
#include "neon/explain.hpp"
#include "neon/gateway.hpp"
#include "neon/http.hpp"
#include "neon/instantiation.hpp"
#include "neon/io.hpp"
#include "neon/random.hpp"
#include "neon/text.hpp"

namespace neon::evalsvc {

class NotFound : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

class DuplicateSubmission : public ValidationError {
  public:
    using ValidationError::ValidationError;
};

enum class Protocol { head_to_head, instantiation_quality };

inline std::string_view to_string(Protocol p) noexcept
{
    return p == Protocol::head_to_head ? "head_to_head" : "instantiation_quality";
}

inline Protocol parse_protocol(std::string_view s)
{
    if (s == "head_to_head") return Protocol::head_to_head;
    if (s == "instantiation_quality") return Protocol::instantiation_quality;
    throw ValidationError("unknown protocol '" + std::string(s) + "'");
}

inline constexpr std::size_t default_n_items = 100;
inline constexpr std::size_t required_annotators = 3;

inline constexpr std::array<std::string_view, 2> aspects{"preferred", "conflict_point"};
inline constexpr std::array<std::string_view, 3> sides{"left", "tie", "right"};
inline constexpr std::array<std::string_view, 5> criteria{"acceptability", "grammaticality", "factuality",
                                                         "diversity", "commonality"};
inline constexpr std::array<std::string_view, 2> acceptability_values{"accept", "reject"};
inline constexpr int likert_min = 1;
inline constexpr int likert_max = 3;

// ---------------------------------------------------------------- agreement

/// Rows are items, columns are categories; every row sums to the rater count.
using RatingMatrix = std::vector<std::vector<std::size_t>>;

/// Fleiss' kappa. Sums are taken over integers so the result does not depend
/// on item or category order.
inline double fleiss_kappa(const RatingMatrix& m)
{
    if (m.empty()) throw ValidationError("kappa needs at least one item");
    const std::size_t k = m.front().size();
    if (k == 0) throw ValidationError("kappa needs at least one category");
    const std::uint64_t n = std::accumulate(m.front().begin(), m.front().end(), std::uint64_t{0});
    if (n < 2) throw ValidationError("kappa needs at least two raters per item");
    std::vector<std::uint64_t> col(k, 0);
    std::uint64_t sum_sq = 0;
    for (const auto& row : m) {
        if (row.size() != k) throw ValidationError("rating rows differ in category count");
        std::uint64_t s = 0;
        for (std::size_t j = 0; j < k; ++j) {
            s += row[j];
            col[j] += row[j];
            sum_sq += static_cast<std::uint64_t>(row[j]) * row[j];
        }
        if (s != n) throw ValidationError("rating rows do not all sum to the rater count");
    }
    const std::uint64_t N = m.size();
    if (sum_sq == N * n * n) return 1.0;  // P-bar = 1
    const long double p_bar = static_cast<long double>(sum_sq - N * n) / static_cast<long double>(N * n * (n - 1));
    long double col_sq = 0;
    for (auto c : col) col_sq += static_cast<long double>(c) * c;
    const long double total = static_cast<long double>(N * n);
    const long double p_e = col_sq / (total * total);
    if (p_e >= 1.0L) throw ValidationError("kappa undefined: expected agreement is 1");
    return static_cast<double>((p_bar - p_e) / (1.0L - p_e));
}

// ---------------------------------------------------------------- sessions

struct Item {
    std::string item_id;
    std::string source_id;
    std::string statement;
    std::optional<std::string> premise;
    // head_to_head
    std::string explanation_a;
    std::string explanation_b;
    bool a_on_left = true;
    // instantiation_quality
    std::vector<std::string> instantiations;
};

struct Session {
    std::string session_id;
    Protocol protocol = Protocol::head_to_head;
    std::uint64_t seed = 0;
    std::vector<std::string> annotators;
    std::string method_a;
    std::string method_b;
    std::vector<Item> items;
    /// Per annotator, item indices in serving order.
    std::map<std::string, std::vector<std::size_t>> orders;

    const Item& item(std::string_view item_id) const
    {
        for (const auto& it : items) {
            if (it.item_id == item_id) return it;
        }
        throw NotFound("unknown item '" + std::string(item_id) + "'");
    }

    bool has_annotator(std::string_view a) const
    {
        return std::find(annotators.begin(), annotators.end(), a) != annotators.end();
    }

    /// Method labels that must never reach an annotator.
    std::vector<std::string> hidden_labels() const
    {
        std::vector<std::string> out;
        for (const auto& m : {method_a, method_b}) {
            if (!m.empty()) out.push_back(m);
        }
        return out;
    }
};

inline json to_json(const Item& it, Protocol p)
{
    json j{{"item_id", it.item_id}, {"source_id", it.source_id}, {"statement", it.statement}};
    if (it.premise) j["premise"] = *it.premise;
    if (p == Protocol::head_to_head) {
        j["explanation_a"] = it.explanation_a;
        j["explanation_b"] = it.explanation_b;
        j["a_on_left"] = it.a_on_left;
    } else {
        j["instantiations"] = it.instantiations;
    }
    return j;
}

inline Item item_from_json(const json& j, Protocol p)
{
    Item it;
    it.item_id = j.at("item_id").get<std::string>();
    it.source_id = j.at("source_id").get<std::string>();
    it.statement = j.at("statement").get<std::string>();
    if (j.contains("premise")) it.premise = j.at("premise").get<std::string>();
    if (p == Protocol::head_to_head) {
        it.explanation_a = j.at("explanation_a").get<std::string>();
        it.explanation_b = j.at("explanation_b").get<std::string>();
        it.a_on_left = j.at("a_on_left").get<bool>();
    } else {
        it.instantiations = j.at("instantiations").get<std::vector<std::string>>();
    }
    return it;
}

inline json to_json(const Session& s)
{
    json items = json::array();
    for (const auto& it : s.items) items.push_back(to_json(it, s.protocol));
    json orders = json::object();
    for (const auto& [a, o] : s.orders) orders[a] = o;
    return json{{"session_id", s.session_id}, {"protocol", to_string(s.protocol)}, {"seed", s.seed},
                {"annotators", s.annotators},  {"method_a", s.method_a},           {"method_b", s.method_b},
                {"items", items},              {"orders", orders}};
}

inline Session session_from_json(const json& j)
{
    Session s;
    s.session_id = j.at("session_id").get<std::string>();
    s.protocol = parse_protocol(j.at("protocol").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    s.annotators = j.at("annotators").get<std::vector<std::string>>();
    s.method_a = j.at("method_a").get<std::string>();
    s.method_b = j.at("method_b").get<std::string>();
    for (const auto& it : j.at("items")) s.items.push_back(item_from_json(it, s.protocol));
    for (const auto& [a, o] : j.at("orders").items()) s.orders[a] = o.get<std::vector<std::size_t>>();
    return s;
}

struct HeadToHeadSource {
    std::string source_id;
    std::string statement;
    std::optional<std::string> premise;
    std::string explanation_a;
    std::string explanation_b;
};

struct QualitySource {
    std::string source_id;
    std::string statement;
    std::optional<std::string> premise;
    std::vector<std::string> instantiations;
};

struct SessionSpec {
    std::optional<std::string> session_id;
    std::size_t n_items = default_n_items;
    std::uint64_t seed = 0;
    std::vector<std::string> annotators{"annotator-1", "annotator-2", "annotator-3"};
    std::string method_a;
    std::string method_b;
};

namespace detail {

inline void check_spec(const SessionSpec& spec, std::size_t available)
{
    if (spec.annotators.size() != required_annotators) {
        throw ValidationError("a session needs exactly " + std::to_string(required_annotators) + " annotators");
    }
    std::set<std::string> uniq(spec.annotators.begin(), spec.annotators.end());
    if (uniq.size() != spec.annotators.size()) throw ValidationError("annotator ids must be distinct");
    for (const auto& a : spec.annotators) {
        if (a.empty()) throw ValidationError("annotator ids must be non-empty");
    }
    if (spec.n_items == 0) throw ValidationError("a session needs at least one item");
    if (spec.n_items > available) {
        throw ValidationError("requested " + std::to_string(spec.n_items) + " items but only " +
                              std::to_string(available) + " are available");
    }
}

/// Indices of `n_items` sources chosen by seed, in sampled order.
inline std::vector<std::size_t> sample_indices(std::size_t available, std::size_t n_items, std::uint64_t seed)
{
    std::vector<std::size_t> idx(available);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(derive_seed(seed, "items"));
    for (std::size_t i = 0; i < n_items; ++i) {
        std::swap(idx[i], idx[i + uniform_index(rng, available - i)]);
    }
    idx.resize(n_items);
    return idx;
}

inline std::vector<std::size_t> permutation(std::size_t n, std::uint64_t seed)
{
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[uniform_index(rng, i)]);
    return p;
}

template <class Source>
void check_unique_ids(const std::vector<Source>& sources)
{
    std::set<std::string> ids;
    for (const auto& s : sources) {
        if (!ids.insert(s.source_id).second) throw ValidationError("duplicate source id '" + s.source_id + "'");
    }
}

template <class Source, class Fill>
Session build_session(const SessionSpec& spec, Protocol protocol, std::vector<Source> sources, Fill fill)
{
    check_spec(spec, sources.size());
    check_unique_ids(sources);
    std::sort(sources.begin(), sources.end(), [](const auto& a, const auto& b) { return a.source_id < b.source_id; });
    Session s;
    s.protocol = protocol;
    s.seed = spec.seed;
    s.annotators = spec.annotators;
    s.method_a = spec.method_a;
    s.method_b = spec.method_b;
    Rng side_rng(derive_seed(spec.seed, "sides"));
    const auto chosen = sample_indices(sources.size(), spec.n_items, spec.seed);
    for (std::size_t i = 0; i < chosen.size(); ++i) {
        const auto& src = sources[chosen[i]];
        Item it;
        it.item_id = "item-" + std::to_string(i + 1);
        it.source_id = src.source_id;
        it.statement = src.statement;
        it.premise = src.premise;
        it.a_on_left = uniform01(side_rng) < 0.5;
        fill(it, src);
        s.items.push_back(std::move(it));
    }
    for (const auto& a : s.annotators) {
        s.orders[a] = permutation(s.items.size(), derive_seed(spec.seed, "order:" + a));
    }
    s.session_id = spec.session_id ? *spec.session_id : "s-" + text::sha256_hex(to_json(s).dump()).substr(0, 12);
    if (s.session_id.empty() || s.session_id.find_first_of("/\\. ") != std::string::npos) {
        throw ValidationError("session id must be non-empty and contain no '/', '\\', '.' or spaces");
    }
    return s;
}

}  // namespace detail

inline Session create_head_to_head(const SessionSpec& spec, std::vector<HeadToHeadSource> sources)
{
    if (spec.method_a.empty() || spec.method_b.empty()) throw ValidationError("head-to-head needs two method labels");
    return detail::build_session(spec, Protocol::head_to_head, std::move(sources),
                                 [](Item& it, const HeadToHeadSource& src) {
                                     it.explanation_a = src.explanation_a;
                                     it.explanation_b = src.explanation_b;
                                 });
}

inline Session create_quality(const SessionSpec& spec, std::vector<QualitySource> sources)
{
    for (const auto& s : sources) {
        if (s.instantiations.empty()) throw ValidationError("source '" + s.source_id + "' has no instantiations");
    }
    return detail::build_session(spec, Protocol::instantiation_quality, std::move(sources),
                                 [](Item& it, const QualitySource& src) { it.instantiations = src.instantiations; });
}

/// Joins two explanation record sets on source_id. Both sets must cover
/// exactly the same sources.
inline std::vector<HeadToHeadSource> align_records(std::span<const StatementPair> pairs,
                                                   std::span<const explain::ExplanationRecord> a,
                                                   std::span<const explain::ExplanationRecord> b)
{
    std::map<std::string, const StatementPair*> by_id;
    for (const auto& p : pairs) by_id[p.id] = &p;
    std::map<std::string, const explain::ExplanationRecord*> rb;
    for (const auto& r : b) {
        if (!rb.emplace(r.source_id, &r).second) throw ValidationError("duplicate record for '" + r.source_id + "'");
    }
    if (a.size() != b.size()) throw ValidationError("record sets differ in size");
    std::vector<HeadToHeadSource> out;
    std::set<std::string> seen;
    for (const auto& r : a) {
        if (!seen.insert(r.source_id).second) throw ValidationError("duplicate record for '" + r.source_id + "'");
        auto it = rb.find(r.source_id);
        if (it == rb.end()) throw ValidationError("record sets are not aligned: '" + r.source_id + "' missing");
        auto p = by_id.find(r.source_id);
        if (p == by_id.end()) throw ValidationError("no statement pair for '" + r.source_id + "'");
        out.push_back({r.source_id, explain::explained_statement(*p->second, r.template_id.mode), p->second->premise,
                       r.explanation, it->second->explanation});
    }
    return out;
}

/// Groups instantiations by source in sample order.
inline std::vector<QualitySource> quality_sources(std::span<const StatementPair> pairs,
                                                  std::span<const Instantiation> insts)
{
    std::map<std::string, std::vector<const Instantiation*>> grouped;
    for (const auto& i : insts) grouped[i.source_id].push_back(&i);
    std::vector<QualitySource> out;
    for (const auto& p : pairs) {
        auto it = grouped.find(p.id);
        if (it == grouped.end()) continue;
        auto v = it->second;
        std::stable_sort(v.begin(), v.end(), [](auto* x, auto* y) { return x->sample_index < y->sample_index; });
        QualitySource q{p.id, p.incorrect, p.premise, {}};
        for (auto* i : v) q.instantiations.push_back(i->text);
        out.push_back(std::move(q));
    }
    return out;
}

// ---------------------------------------------------------------- responses

/// Checks that `responses` answers exactly the aspects or criteria of the
/// protocol with allowed values.
inline void validate_responses(Protocol p, const json& responses)
{
    if (!responses.is_object()) throw ValidationError("responses must be an object");
    auto expect_keys = [&](auto keys) {
        for (const auto& k : keys) {
            if (!responses.contains(std::string(k))) throw ValidationError("missing response for '" + std::string(k) + "'");
        }
        if (responses.size() != keys.size()) throw ValidationError("responses contain unknown keys");
    };
    auto in = [](const json& v, auto allowed) {
        if (!v.is_string()) return false;
        const auto s = v.get<std::string>();
        return std::find(allowed.begin(), allowed.end(), s) != allowed.end();
    };
    if (p == Protocol::head_to_head) {
        expect_keys(aspects);
        for (auto a : aspects) {
            if (!in(responses.at(std::string(a)), sides)) {
                throw ValidationError("invalid category for '" + std::string(a) + "': expected left, tie or right");
            }
        }
        return;
    }
    expect_keys(criteria);
    if (!in(responses.at("acceptability"), acceptability_values)) {
        throw ValidationError("invalid category for 'acceptability': expected accept or reject");
    }
    for (auto c : std::span(criteria).subspan(1)) {
        const auto& v = responses.at(std::string(c));
        if (!v.is_number_integer() || v.get<int>() < likert_min || v.get<int>() > likert_max) {
            throw ValidationError("invalid category for '" + std::string(c) + "': expected 1, 2 or 3");
        }
    }
}

// ---------------------------------------------------------------- report

struct CategorySummary {
    std::string name;
    std::vector<std::string> categories;
    std::vector<std::size_t> counts;
    std::vector<double> percent;
    std::optional<double> mean;
    std::optional<double> kappa;
    /// Items rated by every annotator; kappa is computed over these.
    std::size_t kappa_items = 0;

    std::size_t votes() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }
};

struct SessionReport {
    std::string session_id;
    Protocol protocol = Protocol::head_to_head;
    bool partial = false;
    std::size_t n_items = 0;
    std::size_t n_submissions = 0;
    std::string method_a;
    std::string method_b;
    std::vector<CategorySummary> summaries;
};

inline json to_json(const SessionReport& r)
{
    json sums = json::array();
    for (const auto& s : r.summaries) {
        json counts = json::object(), pct = json::object();
        for (std::size_t c = 0; c < s.categories.size(); ++c) {
            counts[s.categories[c]] = s.counts[c];
            pct[s.categories[c]] = s.percent[c];
        }
        json j{{"name", s.name}, {"votes", s.votes()}, {"counts", counts}, {"percent", pct}};
        if (s.mean) j["mean"] = *s.mean;
        j["kappa"] = s.kappa ? json(*s.kappa) : json(nullptr);
        j["kappa_items"] = s.kappa_items;
        sums.push_back(std::move(j));
    }
    json j{{"session_id", r.session_id}, {"protocol", to_string(r.protocol)}, {"partial", r.partial},
           {"n_items", r.n_items},        {"n_submissions", r.n_submissions}};
    if (r.protocol == Protocol::head_to_head) {
        j["method_a"] = r.method_a;
        j["method_b"] = r.method_b;
    }
    j[r.protocol == Protocol::head_to_head ? "aspects" : "criteria"] = std::move(sums);
    return j;
}

using Submissions = std::map<std::string, std::map<std::string, json>>;  // annotator -> item -> responses

/// Per-vote tallies. Head-to-head sides are mapped back to methods through
/// each item's hidden side assignment. Category columns for head-to-head are
/// (method_a, tie, method_b).
inline SessionReport build_report(const Session& s, const Submissions& subs, bool allow_partial)
{
    SessionReport r;
    r.session_id = s.session_id;
    r.protocol = s.protocol;
    r.n_items = s.items.size();
    r.method_a = s.method_a;
    r.method_b = s.method_b;
    for (const auto& [a, items] : subs) r.n_submissions += items.size();
    if (r.n_submissions == 0) throw ValidationError("session '" + s.session_id + "' has no submissions");
    r.partial = r.n_submissions < s.items.size() * s.annotators.size();
    if (r.partial && !allow_partial) {
        throw ValidationError("session '" + s.session_id + "' is incomplete; request a partial report explicitly");
    }

    struct Dim {
        std::string name;
        std::vector<std::string> categories;
        std::function<std::size_t(const Item&, const json&)> category_of;
        bool likert = false;
    };
    std::vector<Dim> dims;
    if (s.protocol == Protocol::head_to_head) {
        for (auto a : aspects) {
            dims.push_back({std::string(a), {"method_a", "tie", "method_b"},
                            [key = std::string(a)](const Item& it, const json& resp) -> std::size_t {
                                const auto v = resp.at(key).get<std::string>();
                                if (v == "tie") return 1;
                                const bool left = v == "left";
                                return left == it.a_on_left ? 0 : 2;
                            }});
        }
    } else {
        dims.push_back({"acceptability", {"accept", "reject"}, [](const Item&, const json& resp) -> std::size_t {
                            return resp.at("acceptability").get<std::string>() == "accept" ? 0 : 1;
                        }});
        for (auto c : std::span(criteria).subspan(1)) {
            dims.push_back({std::string(c), {"1", "2", "3"},
                            [key = std::string(c)](const Item&, const json& resp) -> std::size_t {
                                return static_cast<std::size_t>(resp.at(key).get<int>() - likert_min);
                            },
                            true});
        }
    }

    for (const auto& d : dims) {
        CategorySummary cs;
        cs.name = d.name;
        cs.categories = d.categories;
        cs.counts.assign(d.categories.size(), 0);
        RatingMatrix matrix;
        for (const auto& it : s.items) {
            std::vector<std::size_t> row(d.categories.size(), 0);
            std::size_t raters = 0;
            for (const auto& a : s.annotators) {
                auto sa = subs.find(a);
                if (sa == subs.end()) continue;
                auto sv = sa->second.find(it.item_id);
                if (sv == sa->second.end()) continue;
                const auto c = d.category_of(it, sv->second);
                ++row[c];
                ++cs.counts[c];
                ++raters;
            }
            if (raters == s.annotators.size()) matrix.push_back(std::move(row));
        }
        const double total = static_cast<double>(cs.votes());
        for (auto c : cs.counts) cs.percent.push_back(total > 0 ? 100.0 * static_cast<double>(c) / total : 0.0);
        if (d.likert && total > 0) {
            double sum = 0.0;
            for (std::size_t c = 0; c < cs.counts.size(); ++c) sum += static_cast<double>((c + likert_min) * cs.counts[c]);
            cs.mean = sum / total;
        }
        cs.kappa_items = matrix.size();
        if (!matrix.empty()) {
            try {
                cs.kappa = fleiss_kappa(matrix);
            } catch (const ValidationError&) {
                cs.kappa.reset();
            }
        }
        r.summaries.push_back(std::move(cs));
    }
    return r;
}

// ---------------------------------------------------------------- store

inline std::string utc_timestamp()
{
    using namespace std::chrono;
    const auto now = system_clock::now();
    const auto t = system_clock::to_time_t(now);
    const auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
    char out[48];
    std::snprintf(out, sizeof out, "%s.%03dZ", buf, static_cast<int>(ms));
    return out;
}

/// Sessions as JSON files plus one append-only event log. The in-memory
/// index is rebuilt from disk on construction; a submission is acknowledged
/// only after its event is fsynced.
class Store {
  public:
    explicit Store(std::filesystem::path dir) : dir_(std::move(dir))
    {
        std::filesystem::create_directories(dir_ / "sessions");
        for (const auto& e : std::filesystem::directory_iterator(dir_ / "sessions")) {
            if (e.path().extension() != ".json") continue;
            auto s = session_from_json(json::parse(io::read_file(e.path())));
            auto id = s.session_id;
            sessions_.emplace(std::move(id), std::move(s));
        }
        replay_events();
        log_.emplace(events_path());
    }

    std::filesystem::path events_path() const { return dir_ / "events.jsonl"; }

    /// Persists `s` before it can be served. Re-creating an identical session
    /// is a no-op; reusing an id for different content is an error.
    const Session& create(Session s)
    {
        std::lock_guard lock(mu_);
        auto it = sessions_.find(s.session_id);
        if (it != sessions_.end()) {
            if (to_json(it->second) != to_json(s)) throw ValidationError("session '" + s.session_id + "' already exists");
            return it->second;
        }
        io::write_file_atomic(dir_ / "sessions" / (s.session_id + ".json"), to_json(s).dump(2) + "\n");
        auto id = s.session_id;
        return sessions_.emplace(std::move(id), std::move(s)).first->second;
    }

    std::vector<std::string> session_ids() const
    {
        std::lock_guard lock(mu_);
        std::vector<std::string> ids;
        for (const auto& [id, s] : sessions_) ids.push_back(id);
        return ids;
    }

    Session session(std::string_view id) const
    {
        std::lock_guard lock(mu_);
        return find(id);
    }

    /// Annotator-facing payload for the next pending item, or a done marker.
    json next(std::string_view session_id, std::string_view annotator) const
    {
        std::lock_guard lock(mu_);
        const auto& s = find(session_id);
        if (!s.has_annotator(annotator)) throw NotFound("unknown annotator '" + std::string(annotator) + "'");
        const auto& order = s.orders.at(std::string(annotator));
        const auto* done = submitted(s.session_id, annotator);
        std::size_t n_done = done ? done->size() : 0;
        for (auto idx : order) {
            const auto& it = s.items[idx];
            if (done && done->contains(it.item_id)) continue;
            return served_payload(s, it, n_done);
        }
        return json{{"session_id", s.session_id}, {"done", true}, {"progress", {{"done", n_done}, {"total", order.size()}}}};
    }

    /// Validates and durably records one submission.
    json submit(std::string_view session_id, std::string_view annotator, std::string_view item_id,
                const json& responses)
    {
        std::lock_guard lock(mu_);
        const auto& s = find(session_id);
        if (!s.has_annotator(annotator)) throw NotFound("unknown annotator '" + std::string(annotator) + "'");
        s.item(item_id);
        if (const auto* done = submitted(s.session_id, annotator); done && done->contains(std::string(item_id))) {
            throw DuplicateSubmission("annotator '" + std::string(annotator) + "' already submitted '" +
                                      std::string(item_id) + "'");
        }
        validate_responses(s.protocol, responses);
        json event{{"ts", utc_timestamp()},
                   {"session", s.session_id},
                   {"annotator", annotator},
                   {"item", item_id},
                   {"responses", responses}};
        log_->append(event.dump());
        submissions_[s.session_id][std::string(annotator)][std::string(item_id)] = responses;
        return json{{"ack", true}, {"session_id", s.session_id}, {"annotator", annotator}, {"item_id", item_id}};
    }

    SessionReport report(std::string_view session_id, bool allow_partial) const
    {
        std::lock_guard lock(mu_);
        const auto& s = find(session_id);
        static const Submissions none;
        auto it = submissions_.find(s.session_id);
        return build_report(s, it == submissions_.end() ? none : it->second, allow_partial);
    }

    Submissions submissions(std::string_view session_id) const
    {
        std::lock_guard lock(mu_);
        auto it = submissions_.find(std::string(session_id));
        return it == submissions_.end() ? Submissions{} : it->second;
    }

    /// Fields an annotator may see. Sides are resolved here; method labels
    /// and source ids never leave the store.
    static json served_payload(const Session& s, const Item& it, std::size_t n_done)
    {
        json j{{"session_id", s.session_id},
               {"done", false},
               {"protocol", to_string(s.protocol)},
               {"item_id", it.item_id},
               {"statement", it.statement}};
        if (it.premise) j["premise"] = *it.premise;
        if (s.protocol == Protocol::head_to_head) {
            j["explanation_left"] = it.a_on_left ? it.explanation_a : it.explanation_b;
            j["explanation_right"] = it.a_on_left ? it.explanation_b : it.explanation_a;
            j["aspects"] = aspects;
            j["options"] = sides;
        } else {
            j["instantiations"] = it.instantiations;
            j["criteria"] = criteria;
            j["options"] = {{"acceptability", acceptability_values}, {"likert", {1, 2, 3}}};
        }
        j["progress"] = {{"done", n_done}, {"total", s.items.size()}};
        return j;
    }

  private:
    const Session& find(std::string_view id) const
    {
        auto it = sessions_.find(std::string(id));
        if (it == sessions_.end()) throw NotFound("unknown session '" + std::string(id) + "'");
        return it->second;
    }

    const std::map<std::string, json>* submitted(const std::string& session, std::string_view annotator) const
    {
        auto s = submissions_.find(session);
        if (s == submissions_.end()) return nullptr;
        auto a = s->second.find(std::string(annotator));
        return a == s->second.end() ? nullptr : &a->second;
    }

    /// A trailing line without a newline was never acknowledged; it is cut
    /// off so later appends start on a fresh line.
    void replay_events()
    {
        const auto path = events_path();
        if (!std::filesystem::exists(path)) return;
        const auto content = io::read_file(path);
        const auto last_nl = content.rfind('\n');
        const std::size_t complete = last_nl == std::string::npos ? 0 : last_nl + 1;
        if (complete != content.size()) std::filesystem::resize_file(path, complete);
        std::size_t lineno = 0, pos = 0;
        while (pos < complete) {
            const auto nl = content.find('\n', pos);
            const auto line = std::string_view(content).substr(pos, nl - pos);
            pos = nl + 1;
            ++lineno;
            if (text::trim(line).empty()) continue;
            json e;
            try {
                e = json::parse(line);
            } catch (const nlohmann::json::exception& ex) {
                throw ParseError(path.string(), lineno, ex.what());
            }
            submissions_[e.at("session").get<std::string>()][e.at("annotator").get<std::string>()]
                        [e.at("item").get<std::string>()] = e.at("responses");
        }
    }

    std::filesystem::path dir_;
    mutable std::mutex mu_;
    std::map<std::string, Session> sessions_;
    std::map<std::string, Submissions> submissions_;
    std::optional<io::DurableAppender> log_;
};

// ---------------------------------------------------------------- classifier filter

struct InstantiationSet {
    std::string source_id;
    std::vector<Instantiation> instantiations;
};

struct FilterResult {
    bool skipped = false;
    std::string reason;
    double threshold = 0.5;
    std::size_t min_kept = 5;
    std::size_t n_sources = 0;
    /// Sets with only the instantiations that passed, classifier_prob filled.
    std::vector<InstantiationSet> sets;
    std::vector<std::string> top1_survivors;
    std::vector<std::string> ensemble_survivors;
};

/// Keeps instantiations whose classifier probability is at least `threshold`.
/// Without a classifier the result is an explicit skip, never a pass-through.
inline FilterResult filter_by_classifier(std::span<const InstantiationSet> sets, Task task, Gateway& gateway,
                                         double threshold = 0.5, std::size_t min_kept = 5)
{
    if (!(threshold >= 0.0 && threshold <= 1.0)) throw ValidationError("threshold must lie in [0, 1]");
    FilterResult r;
    r.threshold = threshold;
    r.min_kept = min_kept;
    r.n_sources = sets.size();
    try {
        for (const auto& set : sets) {
            InstantiationSet kept{set.source_id, {}};
            for (auto inst : set.instantiations) {
                inst.classifier_prob = gateway.classify(inst.text, task);
                if (*inst.classifier_prob >= threshold) kept.instantiations.push_back(std::move(inst));
            }
            if (!kept.instantiations.empty()) r.top1_survivors.push_back(set.source_id);
            if (kept.instantiations.size() >= min_kept) r.ensemble_survivors.push_back(set.source_id);
            r.sets.push_back(std::move(kept));
        }
    } catch (const CapabilityError& e) {
        FilterResult skip;
        skip.skipped = true;
        skip.reason = e.what();
        skip.threshold = threshold;
        skip.min_kept = min_kept;
        skip.n_sources = sets.size();
        return skip;
    }
    return r;
}

inline json to_json(const FilterResult& r)
{
    json j{{"skipped", r.skipped}, {"threshold", r.threshold}, {"min_kept", r.min_kept}, {"n_sources", r.n_sources}};
    if (r.skipped) {
        j["reason"] = r.reason;
        return j;
    }
    j["top1_survivors"] = r.top1_survivors.size();
    j["ensemble_survivors"] = r.ensemble_survivors.size();
    return j;
}

// ---------------------------------------------------------------- HTTP

inline HeadToHeadSource h2h_source_from_json(const json& j)
{
    HeadToHeadSource s{j.at("source_id").get<std::string>(), j.at("statement").get<std::string>(), std::nullopt,
                       j.at("explanation_a").get<std::string>(), j.at("explanation_b").get<std::string>()};
    if (j.contains("premise")) s.premise = j.at("premise").get<std::string>();
    return s;
}

inline QualitySource quality_source_from_json(const json& j)
{
    QualitySource s{j.at("source_id").get<std::string>(), j.at("statement").get<std::string>(), std::nullopt,
                    j.at("instantiations").get<std::vector<std::string>>()};
    if (j.contains("premise")) s.premise = j.at("premise").get<std::string>();
    return s;
}

inline json to_json(const HeadToHeadSource& s)
{
    json j{{"source_id", s.source_id}, {"statement", s.statement}};
    if (s.premise) j["premise"] = *s.premise;
    j["explanation_a"] = s.explanation_a;
    j["explanation_b"] = s.explanation_b;
    return j;
}

inline json to_json(const QualitySource& s)
{
    json j{{"source_id", s.source_id}, {"statement", s.statement}};
    if (s.premise) j["premise"] = *s.premise;
    j["instantiations"] = s.instantiations;
    return j;
}

/// Body of POST /sessions: protocol, n_items, seed, annotators, optional
/// session_id, method_a/method_b (head-to-head) and the candidate sources.
inline Session session_from_request(const json& body)
{
    const auto protocol = parse_protocol(body.at("protocol").get<std::string>());
    SessionSpec spec;
    if (body.contains("session_id")) spec.session_id = body.at("session_id").get<std::string>();
    spec.n_items = body.value("n_items", default_n_items);
    spec.seed = body.value("seed", std::uint64_t{0});
    if (body.contains("annotators")) spec.annotators = body.at("annotators").get<std::vector<std::string>>();
    spec.method_a = body.value("method_a", std::string{});
    spec.method_b = body.value("method_b", std::string{});
    const auto& items = body.at("sources");
    if (protocol == Protocol::head_to_head) {
        std::vector<HeadToHeadSource> src;
        for (const auto& j : items) src.push_back(h2h_source_from_json(j));
        return create_head_to_head(spec, std::move(src));
    }
    std::vector<QualitySource> src;
    for (const auto& j : items) src.push_back(quality_source_from_json(j));
    return create_quality(spec, std::move(src));
}

class Server {
  public:
    explicit Server(Store& store) : store_(store), runner_(server_)
    {
        server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                const auto& s = store_.create(session_from_request(json::parse(req.body)));
                return std::pair{201, json{{"session_id", s.session_id},
                                           {"protocol", to_string(s.protocol)},
                                           {"n_items", s.items.size()},
                                           {"annotators", s.annotators},
                                           {"pending", s.items.size() * s.annotators.size()}}};
            });
        });
        server_.Get(R"(/sessions/([^/]+)/next)", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                if (!req.has_param("annotator")) throw ValidationError("missing annotator parameter");
                return std::pair{200, store_.next(req.matches[1].str(), req.get_param_value("annotator"))};
            });
        });
        server_.Post(R"(/sessions/([^/]+)/submit)", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                const auto body = json::parse(req.body);
                return std::pair{200, store_.submit(req.matches[1].str(), body.at("annotator").get<std::string>(),
                                                    body.at("item_id").get<std::string>(), body.at("responses"))};
            });
        });
        server_.Get(R"(/sessions/([^/]+)/report)", [this](const httplib::Request& req, httplib::Response& res) {
            handle(res, [&] {
                const bool partial = req.has_param("partial") && req.get_param_value("partial") != "0" &&
                                     req.get_param_value("partial") != "false";
                return std::pair{200, to_json(store_.report(req.matches[1].str(), partial))};
            });
        });
    }

    int start(const std::string& host = "127.0.0.1", int port = 0) { return runner_.start(host, port); }
    void stop() { runner_.stop(); }
    httplib::Server& server() noexcept { return server_; }

  private:
    template <class F>
    static void handle(httplib::Response& res, F&& f)
    {
        try {
            auto [status, body] = f();
            http::reply(res, status, body);
        } catch (const NotFound& e) {
            http::reply_error(res, 404, "not_found", e.what());
        } catch (const DuplicateSubmission& e) {
            http::reply_error(res, 409, "duplicate_submission", e.what());
        } catch (const ValidationError& e) {
            http::reply_error(res, 400, "bad_request", e.what());
        } catch (const nlohmann::json::exception& e) {
            http::reply_error(res, 400, "bad_request", e.what());
        } catch (const std::exception& e) {
            http::reply_error(res, 500, "internal", e.what());
        }
    }

    Store& store_;
    httplib::Server server_;
    http::ServerThread runner_;
};

}  // namespace neon::evalsvc
