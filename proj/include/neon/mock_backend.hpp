#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "neon/gateway.hpp"
#include "neon/random.hpp"
#include "neon/text.hpp"

namespace neon {

struct MockOptions {
    std::uint64_t seed = 0;
    bool classifier = true;
};

/// Deterministic stand-in for a real model, used by tests and dry runs.
///
/// * Tokenizer: text::lm_tokenize (whitespace plus single-character punctuation).
/// * Vocabulary: 1,000 entries; entry 0 is "." and the rest are synthetic
///   two-syllable words. Tokens outside the vocabulary map onto entry
///   1 + fnv1a(token) % 999 when scored.
/// * Next-token distribution for a context hash h: p(w) ∝ exp(4 · u(h, w)) where
///   u is a splitmix64 hash of (h, w) scaled to [0, 1). The context hash folds
///   the seed and every context token through hash_combine.
/// * Completion: greedy argmax at temperature 0, otherwise nucleus sampling of
///   p^(1/T); generation stops after "." or max_tokens.
/// * fill_mask: the same family of distributions, keyed on the whole sentence
///   with the masked slot replaced by [MASK] and the slot index.
/// * Embeddings: signed feature hashing into 64 dimensions, L2-normalised.
///   Token features are the lowercased token (weight 1) and its boundary-marked
///   character trigrams (weight 0.5); a sentence is the normalised sum of its
///   token vectors.
/// * Classifier: 1.0 when the token count is even, else 0.0.
class MockBackend : public Backend {
  public:
    static constexpr std::size_t vocab_size = 1000;
    static constexpr std::size_t embed_dim = 64;

    explicit MockBackend(MockOptions options = {}) : options_(options) {}

    static const std::vector<std::string>& vocabulary()
    {
        static const std::vector<std::string> vocab = [] {
            static constexpr std::string_view consonants = "bdfgklmnprstvz";
            static constexpr std::string_view vowels = "aeiou";
            std::vector<std::string> syllables;
            for (char c : consonants) {
                for (char v : vowels) syllables.push_back(std::string{c, v});
            }
            std::vector<std::string> v{"."};
            for (std::size_t i = 1; i < vocab_size; ++i) {
                v.push_back(syllables[i % syllables.size()] + syllables[(i / syllables.size()) % syllables.size()]);
            }
            return v;
        }();
        return vocab;
    }

    static std::size_t vocab_id(std::string_view token)
    {
        static const std::unordered_map<std::string, std::size_t> index = [] {
            std::unordered_map<std::string, std::size_t> m;
            const auto& v = vocabulary();
            for (std::size_t i = 0; i < v.size(); ++i) m.emplace(v[i], i);
            return m;
        }();
        if (auto it = index.find(std::string(token)); it != index.end()) return it->second;
        return 1 + fnv1a(token) % (vocab_size - 1);
    }

    std::uint64_t initial_context() const noexcept { return splitmix64(options_.seed ^ 0x6E656F6E6D6F636BULL); }

    static std::uint64_t fold(std::uint64_t h, std::string_view token) noexcept
    {
        return hash_combine(h, fnv1a(token));
    }

    /// Normalised next-token distribution for context hash `h`.
    static std::array<double, vocab_size> distribution(std::uint64_t h, double temperature = 1.0)
    {
        std::array<double, vocab_size> p{};
        double z = 0.0;
        for (std::size_t w = 0; w < vocab_size; ++w) {
            const double u = static_cast<double>(splitmix64(h ^ (w * 0x9E3779B97F4A7C15ULL)) >> 11) * 0x1.0p-53;
            p[w] = std::exp(4.0 * u / temperature);
            z += p[w];
        }
        for (auto& x : p) x /= z;
        return p;
    }

    std::string identity() const override { return "mock:v1:seed=" + std::to_string(options_.seed); }

    std::vector<std::string> complete(const CompletionRequest& request) override
    {
        const auto& vocab = vocabulary();
        std::uint64_t base = initial_context();
        for (const auto& t : text::lm_tokenize(request.prompt)) base = fold(base, t);

        std::vector<std::string> out;
        for (int s = 0; s < request.n_samples; ++s) {
            Rng rng(derive_seed(request.seed, static_cast<std::uint64_t>(s)));
            std::uint64_t h = base;
            std::vector<std::string> generated;
            for (int i = 0; i < request.max_tokens; ++i) {
                std::size_t pick;
                if (request.temperature <= 0.0) {
                    auto p = distribution(h);
                    pick = static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin());
                } else {
                    pick = sample_nucleus(distribution(h, request.temperature), request.top_p, rng);
                }
                generated.push_back(vocab[pick]);
                h = fold(h, vocab[pick]);
                if (pick == 0) break;
            }
            out.push_back(text::detokenize(generated));
        }
        return out;
    }

    TokenLogProbs score(std::string_view s) override
    {
        TokenLogProbs r;
        std::uint64_t h = initial_context();
        for (auto& t : text::lm_tokenize(s)) {
            auto p = distribution(h);
            r.logprobs.push_back(std::log(p[vocab_id(t)]));
            h = fold(h, t);
            r.tokens.push_back(std::move(t));
        }
        return r;
    }

    MaskCandidateSet fill_mask(std::span<const std::string> tokens, std::size_t position, std::size_t top_k) override
    {
        std::uint64_t h = fold(initial_context(), "[FILL]");
        for (std::size_t i = 0; i < tokens.size(); ++i) h = fold(h, i == position ? mask_token : tokens[i]);
        h = hash_combine(h, position);
        auto p = distribution(h);
        std::vector<std::size_t> idx(vocab_size);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        const auto k = std::min(top_k, vocab_size);
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                          [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
        MaskCandidateSet m;
        m.position = position;
        for (std::size_t i = 0; i < k; ++i) m.candidates.push_back(MaskCandidate{vocabulary()[idx[i]], p[idx[i]]});
        return m;
    }

    EmbeddingResult embed(std::span<const std::string> texts, Granularity granularity) override
    {
        EmbeddingResult r;
        r.granularity = granularity;
        for (const auto& t : texts) {
            auto tokens = text::lm_tokenize(t);
            if (granularity == Granularity::token) {
                for (const auto& tok : tokens) r.vectors.push_back(token_vector(tok));
                r.lengths.push_back(tokens.size());
            } else {
                std::vector<double> v(embed_dim, 0.0);
                for (const auto& tok : tokens) {
                    auto tv = token_vector(tok);
                    for (std::size_t d = 0; d < embed_dim; ++d) v[d] += tv[d];
                }
                normalize(v);
                r.vectors.push_back(std::move(v));
                r.lengths.push_back(1);
            }
        }
        return r;
    }

    double classify(std::string_view s, Task) override
    {
        if (!options_.classifier) throw CapabilityError("classifier not configured on mock backend");
        return text::count_lm_tokens(s) % 2 == 0 ? 1.0 : 0.0;
    }

    static std::vector<double> token_vector(std::string_view token)
    {
        std::vector<double> v(embed_dim, 0.0);
        auto add = [&](std::string_view feature, double weight) {
            const auto h = splitmix64(fnv1a(feature));
            v[h % embed_dim] += (h >> 63) ? -weight : weight;
        };
        const auto lower = text::to_lower(token);
        add("w:" + lower, 1.0);
        const std::string marked = "<" + lower + ">";
        for (std::size_t i = 0; i + 3 <= marked.size(); ++i) add("c:" + marked.substr(i, 3), 0.5);
        normalize(v);
        return v;
    }

  private:
    static void normalize(std::vector<double>& v)
    {
        double n = 0.0;
        for (double x : v) n += x * x;
        if (n <= 0.0) return;
        n = std::sqrt(n);
        for (double& x : v) x /= n;
    }

    static std::size_t sample_nucleus(const std::array<double, vocab_size>& p, double top_p, Rng& rng)
    {
        std::vector<std::size_t> idx(vocab_size);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
        std::vector<double> kept;
        double acc = 0.0;
        for (auto i : idx) {
            kept.push_back(p[i]);
            acc += p[i];
            if (acc >= top_p) break;
        }
        return idx[sample_weighted(rng, kept)];
    }

    MockOptions options_;
};

}  // namespace neon
