#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "neon/corpus.hpp"
#include "neon/gateway.hpp"
#include "neon/io.hpp"
#include "neon/random.hpp"
#include "neon/text.hpp"
#include "neon/vec.hpp"

namespace neon::retrieve {

enum class Method { bm25, embed };

inline std::string_view to_string(Method m) noexcept { return m == Method::bm25 ? "bm25" : "embed"; }

struct Bm25Params {
    double k1 = 1.2;
    double b = 0.75;
};

struct Hit {
    std::size_t doc_id = 0;
    std::string text;
    double score = 0.0;
};

struct RetrievalResult {
    std::string query_id;
    Method method = Method::bm25;
    std::vector<Hit> hits;
};

inline double idf(std::size_t df, std::size_t n_docs)
{
    const double N = static_cast<double>(n_docs);
    const double d = static_cast<double>(df);
    return std::log((N - d + 0.5) / (d + 0.5) + 1.0);
}

/// Okapi BM25 of one document. Every query token contributes, so repeated
/// query terms count repeatedly; terms absent from the document contribute 0.
inline double bm25_score(std::span<const std::string> query_terms, const DocTerms& doc, const CorpusStats& stats,
                         const Bm25Params& params = {})
{
    double score = 0.0;
    const double norm = stats.avg_doc_len > 0.0 ? static_cast<double>(doc.length) / stats.avg_doc_len : 0.0;
    for (const auto& term : query_terms) {
        auto tf_it = doc.tf.find(term);
        if (tf_it == doc.tf.end()) continue;
        auto df_it = stats.df.find(term);
        const std::size_t df = df_it == stats.df.end() ? 0 : df_it->second;
        const double tf = static_cast<double>(tf_it->second);
        score += idf(df, stats.num_docs()) * tf * (params.k1 + 1.0) /
                 (tf + params.k1 * (1.0 - params.b + params.b * norm));
    }
    return score;
}

namespace detail {

/// Orders by score descending then doc_id ascending, drops repeated texts,
/// keeps the first k.
inline std::vector<Hit> rank(const KnowledgeCorpus& corpus, std::vector<double> scores, std::size_t k)
{
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    });
    std::vector<Hit> hits;
    std::unordered_set<std::string> seen;
    for (auto i : order) {
        if (hits.size() >= k) break;
        const auto& doc = corpus.docs()[i];
        if (!seen.insert(text::dedup_key(doc.text)).second) continue;
        hits.push_back(Hit{doc.doc_id, doc.text, scores[i]});
    }
    return hits;
}

}  // namespace detail

/// Sentence vectors for every corpus document, computed once per corpus.
struct EmbeddingIndex {
    std::string corpus_hash;
    std::string backend;
    std::vector<std::vector<double>> vectors;

    static EmbeddingIndex build(const KnowledgeCorpus& corpus, Gateway& gateway, std::size_t batch = 256)
    {
        EmbeddingIndex idx;
        idx.corpus_hash = corpus.content_hash();
        idx.backend = gateway.identity();
        std::vector<std::string> texts;
        for (std::size_t start = 0; start < corpus.size(); start += batch) {
            texts.clear();
            for (std::size_t i = start; i < std::min(corpus.size(), start + batch); ++i) {
                texts.push_back(corpus.docs()[i].text);
            }
            auto r = gateway.embed(texts, Granularity::sentence);
            for (auto& v : r.vectors) idx.vectors.push_back(std::move(v));
        }
        return idx;
    }
};

inline RetrievalResult retrieve_bm25(std::string_view query, const KnowledgeCorpus& corpus, std::size_t k = 5,
                                     const Bm25Params& params = {}, std::string query_id = {})
{
    if (corpus.empty()) throw ValidationError("cannot retrieve from an empty corpus");
    if (k < 1) throw ValidationError("k must be >= 1");
    const auto terms = text::bm25_tokenize(query);
    std::vector<double> scores(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) scores[i] = bm25_score(terms, corpus.terms(i), corpus.stats(), params);
    return RetrievalResult{std::move(query_id), Method::bm25, detail::rank(corpus, std::move(scores), k)};
}

inline RetrievalResult retrieve_embed(std::string_view query, const KnowledgeCorpus& corpus,
                                      const EmbeddingIndex& index, Gateway& gateway, std::size_t k = 5,
                                      std::string query_id = {})
{
    if (corpus.empty()) throw ValidationError("cannot retrieve from an empty corpus");
    if (k < 1) throw ValidationError("k must be >= 1");
    if (index.vectors.size() != corpus.size() || index.corpus_hash != corpus.content_hash()) {
        throw ValidationError("embedding index does not belong to this corpus");
    }
    const std::string q(query);
    auto qv = gateway.embed(std::span<const std::string>(&q, 1), Granularity::sentence);
    std::vector<double> scores(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) scores[i] = cosine(qv.vectors.front(), index.vectors[i]);
    return RetrievalResult{std::move(query_id), Method::embed, detail::rank(corpus, std::move(scores), k)};
}

inline RetrievalResult retrieve_topk(std::string_view query, const KnowledgeCorpus& corpus, std::size_t k,
                                     Method method, Gateway* gateway = nullptr, const EmbeddingIndex* index = nullptr,
                                     const Bm25Params& params = {})
{
    if (method == Method::bm25) return retrieve_bm25(query, corpus, k, params);
    if (!gateway) throw ValidationError("embedding retrieval needs a gateway");
    if (index) return retrieve_embed(query, corpus, *index, *gateway, k);
    auto built = EmbeddingIndex::build(corpus, *gateway);
    return retrieve_embed(query, corpus, built, *gateway, k);
}

/// A human-annotated correct statement drawn uniformly from `pairs`.
inline std::string random_correct(std::span<const StatementPair> pairs, std::uint64_t seed)
{
    if (pairs.empty()) throw ValidationError("random baseline needs at least one pair");
    Rng rng(seed);
    return pairs[uniform_index(rng, pairs.size())].correct;
}

// Index cache file: a versioned JSON document.
//   {format: "neon-retrieval-index", version: 1, corpus_hash, n_docs,
//    avg_doc_len, doc_len[], df{term: count}, embedding?: {backend, vectors[][]}}
inline constexpr int index_format_version = 1;

inline json index_to_json(const KnowledgeCorpus& corpus, const EmbeddingIndex* embedding = nullptr)
{
    const auto& stats = corpus.stats();
    std::vector<std::pair<std::string, std::size_t>> df(stats.df.begin(), stats.df.end());
    std::sort(df.begin(), df.end());
    json dfj = json::object();
    for (const auto& [term, count] : df) dfj[term] = count;
    json j{{"format", "neon-retrieval-index"},
           {"version", index_format_version},
           {"corpus_hash", corpus.content_hash()},
           {"n_docs", corpus.size()},
           {"avg_doc_len", stats.avg_doc_len},
           {"doc_len", stats.doc_len},
           {"df", dfj}};
    if (embedding) j["embedding"] = json{{"backend", embedding->backend}, {"vectors", embedding->vectors}};
    return j;
}

inline void save_index(const std::filesystem::path& path, const KnowledgeCorpus& corpus,
                       const EmbeddingIndex* embedding = nullptr)
{
    io::write_file_atomic(path, index_to_json(corpus, embedding).dump());
}

/// Reads the cached embedding vectors if the file matches `corpus` and
/// `backend`; returns nullopt for a stale or foreign cache.
inline std::optional<EmbeddingIndex> load_embedding_index(const std::filesystem::path& path,
                                                          const KnowledgeCorpus& corpus, std::string_view backend)
{
    if (!std::filesystem::exists(path)) return std::nullopt;
    auto j = json::parse(io::read_file(path));
    if (j.value("format", "") != "neon-retrieval-index" || j.value("version", 0) != index_format_version) {
        return std::nullopt;
    }
    const auto hash = corpus.content_hash();
    if (j.value("corpus_hash", "") != hash || !j.contains("embedding")) return std::nullopt;
    if (j["embedding"].value("backend", "") != backend) return std::nullopt;
    EmbeddingIndex idx;
    idx.corpus_hash = hash;
    idx.backend = std::string(backend);
    idx.vectors = j["embedding"].at("vectors").get<std::vector<std::vector<double>>>();
    if (idx.vectors.size() != corpus.size()) return std::nullopt;
    return idx;
}

}  // namespace neon::retrieve
