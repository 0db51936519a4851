#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "neon/error.hpp"
#include "neon/io.hpp"
#include "neon/random.hpp"
#include "neon/task.hpp"
#include "neon/text.hpp"

namespace neon {

/// One dataset instance: a correct statement, its false counterpart and the
/// reference explanations.
struct StatementPair {
    std::string id;
    std::optional<std::string> premise;  // e-SNLI only
    std::string correct;
    std::string incorrect;
    std::vector<std::string> refs_incorrect;
    std::vector<std::string> refs_correct;
    Split split = Split::test;
    Task task = Task::comve;

    friend bool operator==(const StatementPair&, const StatementPair&) = default;
};

/// Throws ValidationError when `p` breaks the pair invariants.
inline void validate(const StatementPair& p)
{
    auto fail = [&](const std::string& why) { throw ValidationError("pair '" + p.id + "': " + why); };
    if (text::trim(p.correct).empty()) fail("empty correct statement");
    if (text::trim(p.incorrect).empty()) fail("empty incorrect statement");
    if (p.correct == p.incorrect) fail("correct and incorrect statements are identical");
    if (p.refs_incorrect.size() > 3 || p.refs_correct.size() > 3) fail("more than 3 references");
    if (p.task == Task::comve) {
        if (p.premise) fail("comve pairs carry no premise");
        if (p.refs_incorrect.size() != 3) fail("comve pairs need exactly 3 references");
    } else if (!p.premise || text::trim(*p.premise).empty()) {
        fail("esnli pairs need a premise");
    }
}

inline json to_json(const StatementPair& p)
{
    json j;
    j["id"] = p.id;
    j["task"] = to_string(p.task);
    j["split"] = to_string(p.split);
    if (p.premise) j["premise"] = *p.premise;
    j["correct"] = p.correct;
    j["incorrect"] = p.incorrect;
    j["refs_incorrect"] = p.refs_incorrect;
    j["refs_correct"] = p.refs_correct;
    return j;
}

inline StatementPair pair_from_json(const json& j)
{
    StatementPair p;
    p.id = j.at("id").get<std::string>();
    p.task = parse_task(j.at("task").get<std::string>());
    p.split = parse_split(j.at("split").get<std::string>());
    if (j.contains("premise") && !j["premise"].is_null()) p.premise = j["premise"].get<std::string>();
    p.correct = j.at("correct").get<std::string>();
    p.incorrect = j.at("incorrect").get<std::string>();
    p.refs_incorrect = j.value("refs_incorrect", std::vector<std::string>{});
    p.refs_correct = j.value("refs_correct", std::vector<std::string>{});
    return p;
}

inline void save_pairs_jsonl(const std::filesystem::path& path, std::span<const StatementPair> pairs)
{
    std::string out;
    for (const auto& p : pairs) out += to_json(p).dump() + "\n";
    io::write_file_atomic(path, out);
}

inline std::vector<StatementPair> load_pairs_jsonl(const std::filesystem::path& path)
{
    std::vector<StatementPair> pairs;
    std::size_t row = 0;
    for (const auto& j : io::read_jsonl(path)) {
        ++row;
        try {
            pairs.push_back(pair_from_json(j));
            validate(pairs.back());
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string(), row, e.what());
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), row, e.what());
        }
    }
    return pairs;
}

/// Loads a ComVE CSV with columns id, correct, incorrect, ref1, ref2, ref3.
/// A leading header row (first field "id") is skipped.
inline std::vector<StatementPair> load_comve(const std::filesystem::path& path, Split split)
{
    if (!std::filesystem::exists(path)) throw IoError("missing file " + path.string());
    auto reader = io::CsvReader::open(path);
    std::vector<StatementPair> pairs;
    std::vector<std::string> f;
    std::size_t row = 0;
    bool first = true;
    while (reader.next(f)) {
        if (io::is_blank_record(f)) continue;
        if (first) {
            first = false;
            if (text::to_lower(text::trim(f[0])) == "id") continue;
        }
        ++row;
        if (f.size() != 6) {
            throw ParseError(path.string(), row, "expected 6 columns, got " + std::to_string(f.size()));
        }
        StatementPair p;
        p.id = std::string(text::trim(f[0]));
        p.correct = std::string(text::trim(f[1]));
        p.incorrect = std::string(text::trim(f[2]));
        if (p.correct.empty() || p.incorrect.empty()) throw ParseError(path.string(), row, "empty statement field");
        for (int i = 3; i < 6; ++i) p.refs_incorrect.emplace_back(text::trim(f[i]));
        p.split = split;
        p.task = Task::comve;
        try {
            validate(p);
        } catch (const ValidationError& e) {
            throw ParseError(path.string(), row, e.what());
        }
        pairs.push_back(std::move(p));
    }
    return pairs;
}

struct EsnliLoadStats {
    std::size_t rows = 0;
    std::size_t premises = 0;
    /// Premises lacking either an entailment or a contradiction hypothesis.
    std::size_t dropped = 0;
};

/// Which reference fields land where; recorded in run manifests.
inline constexpr std::string_view esnli_reference_mapping =
    "refs_incorrect = explanations of the first contradiction hypothesis; "
    "refs_correct = explanations of the first entailment hypothesis";

/// Loads an e-SNLI CSV (official column names or premise/hypothesis/label/explanation*)
/// and pairs the first entailment with the first contradiction of every premise.
inline std::vector<StatementPair> load_esnli(const std::filesystem::path& path, Split split,
                                             EsnliLoadStats* stats = nullptr)
{
    if (!std::filesystem::exists(path)) throw IoError("missing file " + path.string());
    auto reader = io::CsvReader::open(path);
    std::vector<std::string> header;
    if (!reader.next(header)) return {};

    auto find_col = [&](std::initializer_list<std::string_view> names) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < header.size(); ++i) {
            auto h = text::to_lower(text::trim(header[i]));
            for (auto n : names) {
                if (h == n) return i;
            }
        }
        return std::nullopt;
    };
    auto premise_col = find_col({"sentence1", "premise"});
    auto hyp_col = find_col({"sentence2", "hypothesis"});
    auto label_col = find_col({"gold_label", "label"});
    auto id_col = find_col({"pairid", "id"});
    if (!premise_col || !hyp_col || !label_col) {
        throw ParseError(path.string(), 0, "header lacks premise/hypothesis/label columns");
    }
    std::vector<std::size_t> expl_cols;
    for (std::size_t i = 0; i < header.size(); ++i) {
        auto h = text::to_lower(text::trim(header[i]));
        if (h.rfind("explanation", 0) == 0) expl_cols.push_back(i);
    }

    struct Hyp {
        std::string id;
        std::string text;
        std::vector<std::string> explanations;
    };
    struct Group {
        std::string premise;
        std::optional<Hyp> entailment;
        std::optional<Hyp> contradiction;
    };
    std::vector<Group> groups;
    std::unordered_map<std::string, std::size_t> index;

    std::vector<std::string> f;
    std::size_t row = 0;
    while (reader.next(f)) {
        if (io::is_blank_record(f)) continue;
        ++row;
        if (f.size() != header.size()) {
            throw ParseError(path.string(), row,
                             "expected " + std::to_string(header.size()) + " columns, got " + std::to_string(f.size()));
        }
        auto label = text::to_lower(text::trim(f[*label_col]));
        if (label != "entailment" && label != "contradiction" && label != "neutral") {
            throw ParseError(path.string(), row, "unparseable label '" + label + "'");
        }
        std::string premise(text::trim(f[*premise_col]));
        auto [it, inserted] = index.try_emplace(premise, groups.size());
        if (inserted) groups.push_back(Group{premise, {}, {}});
        if (label == "neutral") continue;
        Hyp h;
        h.id = id_col ? std::string(text::trim(f[*id_col])) : std::string{};
        h.text = std::string(text::trim(f[*hyp_col]));
        for (auto c : expl_cols) {
            auto e = text::trim(f[c]);
            if (!e.empty()) h.explanations.emplace_back(e);
        }
        auto& g = groups[it->second];
        auto& slot = label == "entailment" ? g.entailment : g.contradiction;
        if (!slot) slot = std::move(h);
    }

    std::vector<StatementPair> pairs;
    std::size_t dropped = 0;
    for (auto& g : groups) {
        if (!g.entailment || !g.contradiction || g.entailment->text.empty() ||
            g.contradiction->text.empty() || g.entailment->text == g.contradiction->text || g.premise.empty()) {
            ++dropped;
            continue;
        }
        StatementPair p;
        p.id = !g.contradiction->id.empty()
                   ? g.contradiction->id
                   : std::string(to_string(split)) + "-" + std::to_string(pairs.size());
        p.premise = g.premise;
        p.correct = g.entailment->text;
        p.incorrect = g.contradiction->text;
        p.refs_incorrect = g.contradiction->explanations;
        p.refs_correct = g.entailment->explanations;
        if (p.refs_incorrect.size() > 3) p.refs_incorrect.resize(3);
        if (p.refs_correct.size() > 3) p.refs_correct.resize(3);
        p.split = split;
        p.task = Task::esnli;
        pairs.push_back(std::move(p));
    }
    if (stats) *stats = EsnliLoadStats{row, groups.size(), dropped};
    return pairs;
}

/// Loads pairs from either the canonical JSONL sidecar or an official CSV.
inline std::vector<StatementPair> load_pairs(const std::filesystem::path& path, Task task, Split split,
                                             EsnliLoadStats* stats = nullptr)
{
    if (path.extension() == ".jsonl") return load_pairs_jsonl(path);
    return task == Task::comve ? load_comve(path, split) : load_esnli(path, split, stats);
}

struct Document {
    std::size_t doc_id;
    std::string text;
};

struct CorpusStats {
    std::unordered_map<std::string, std::size_t> df;
    std::vector<std::size_t> doc_len;
    double avg_doc_len = 0.0;

    std::size_t num_docs() const noexcept { return doc_len.size(); }
};

/// Term counts of one document under the retrieval tokenizer.
struct DocTerms {
    std::unordered_map<std::string, std::size_t> tf;
    std::size_t length = 0;
};

/// An immutable statement corpus with the statistics BM25 needs. Duplicate
/// statements are kept as distinct documents.
class KnowledgeCorpus {
  public:
    KnowledgeCorpus() = default;

    static KnowledgeCorpus from_texts(std::vector<std::string> texts)
    {
        KnowledgeCorpus c;
        c.docs_.reserve(texts.size());
        c.terms_.reserve(texts.size());
        std::size_t total = 0;
        for (auto& t : texts) {
            DocTerms dt;
            for (auto& tok : text::bm25_tokenize(t)) {
                ++dt.tf[tok];
                ++dt.length;
            }
            for (const auto& [term, _] : dt.tf) ++c.stats_.df[term];
            c.stats_.doc_len.push_back(dt.length);
            total += dt.length;
            c.docs_.push_back(Document{c.docs_.size(), std::move(t)});
            c.terms_.push_back(std::move(dt));
        }
        c.stats_.avg_doc_len = c.docs_.empty() ? 0.0 : static_cast<double>(total) / c.docs_.size();
        return c;
    }

    const std::vector<Document>& docs() const noexcept { return docs_; }
    const CorpusStats& stats() const noexcept { return stats_; }
    const DocTerms& terms(std::size_t doc_id) const { return terms_.at(doc_id); }
    std::size_t size() const noexcept { return docs_.size(); }
    bool empty() const noexcept { return docs_.empty(); }

    std::string content_hash() const
    {
        std::string all;
        for (const auto& d : docs_) {
            all += d.text;
            all.push_back('\n');
        }
        return text::sha256_hex(all);
    }

  private:
    std::vector<Document> docs_;
    std::vector<DocTerms> terms_;
    CorpusStats stats_;
};

/// One statement per line; blank lines are skipped.
inline KnowledgeCorpus load_omcs(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<std::string> texts;
    std::string line;
    while (std::getline(in, line)) {
        auto t = text::trim(line);
        if (!t.empty()) texts.emplace_back(t);
    }
    return KnowledgeCorpus::from_texts(std::move(texts));
}

inline constexpr std::size_t default_pool_size = 200;

struct ExemplarPool {
    std::vector<StatementPair> items;
    std::uint64_t seed = 0;
};

/// Samples `target` pairs without replacement (all of them if fewer).
inline ExemplarPool sample_exemplar_pool(std::span<const StatementPair> pairs, std::uint64_t seed,
                                         std::size_t target = default_pool_size)
{
    if (pairs.empty()) throw ValidationError("cannot sample an exemplar pool from an empty list");
    std::vector<std::size_t> idx(pairs.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const auto take = std::min(target, pairs.size());
    Rng rng(seed);
    for (std::size_t i = 0; i < take; ++i) {
        auto j = i + uniform_index(rng, idx.size() - i);
        std::swap(idx[i], idx[j]);
    }
    ExemplarPool pool;
    pool.seed = seed;
    pool.items.reserve(take);
    for (std::size_t i = 0; i < take; ++i) pool.items.push_back(pairs[idx[i]]);
    return pool;
}

}  // namespace neon
