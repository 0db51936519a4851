#pragma once

// Rigged backends for tests. Each overrides only what it needs; everything
// else reports the capability as missing.

#include <atomic>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "neon/gateway.hpp"
#include "neon/text.hpp"

namespace neon::fakes {

class StubBackend : public Backend {
  public:
    std::string identity() const override { return "stub"; }
    std::vector<std::string> complete(const CompletionRequest&) override { throw CapabilityError("complete"); }
    TokenLogProbs score(std::string_view) override { throw CapabilityError("score"); }
    MaskCandidateSet fill_mask(std::span<const std::string>, std::size_t, std::size_t) override
    {
        throw CapabilityError("fill_mask");
    }
    EmbeddingResult embed(std::span<const std::string>, Granularity) override { throw CapabilityError("embed"); }
    double classify(std::string_view, Task) override { throw CapabilityError("classify"); }
};

/// Autoregressive scorer with a fixed per-token probability, overridable per token.
class TableLm : public StubBackend {
  public:
    explicit TableLm(double default_prob = 0.5, std::map<std::string, double> probs = {})
        : default_prob_(default_prob), probs_(std::move(probs))
    {}

    TokenLogProbs score(std::string_view s) override
    {
        TokenLogProbs out;
        for (auto& t : text::lm_tokenize(s)) {
            auto it = probs_.find(t);
            out.logprobs.push_back(std::log(it == probs_.end() ? default_prob_ : it->second));
            out.tokens.push_back(std::move(t));
        }
        return out;
    }

  protected:
    double default_prob_;
    std::map<std::string, double> probs_;
};

/// Context-free masked LM returning one fixed candidate list at every
/// position, plus a TableLm scorer.
class FixedMlm : public TableLm {
  public:
    FixedMlm(std::vector<MaskCandidate> candidates, double default_prob, std::map<std::string, double> probs)
        : TableLm(default_prob, std::move(probs)), candidates_(std::move(candidates))
    {}

    MaskCandidateSet fill_mask(std::span<const std::string>, std::size_t position, std::size_t top_k) override
    {
        ++calls;
        MaskCandidateSet out{position, candidates_};
        if (out.candidates.size() > top_k) out.candidates.resize(top_k);
        return out;
    }

    std::atomic<int> calls{0};

  private:
    std::vector<MaskCandidate> candidates_;
};

/// "t" is likely (0.5), "bad" unlikely (0.01), under both the masked and the
/// autoregressive model.
inline std::shared_ptr<FixedMlm> t_bad_model()
{
    return std::make_shared<FixedMlm>(std::vector<MaskCandidate>{{"t", 0.5}, {"bad", 0.01}}, 0.5,
                                      std::map<std::string, double>{{"t", 0.5}, {"bad", 0.01}});
}

/// Every token equally likely everywhere.
inline std::shared_ptr<FixedMlm> uniform_model()
{
    return std::make_shared<FixedMlm>(std::vector<MaskCandidate>{{"a", 0.25}, {"b", 0.25}, {"c", 0.25}, {"d", 0.25}},
                                      0.25, std::map<std::string, double>{});
}

/// Completions served from a script, one entry per requested sample, cycling.
class ScriptedCompletion : public StubBackend {
  public:
    explicit ScriptedCompletion(std::vector<std::string> script) : script_(std::move(script)) {}

    std::vector<std::string> complete(const CompletionRequest& r) override
    {
        std::lock_guard lock(mu_);
        requests.push_back(r);
        std::vector<std::string> out;
        for (int i = 0; i < r.n_samples; ++i) out.push_back(script_[next_++ % script_.size()]);
        return out;
    }

    std::vector<CompletionRequest> requests;

  private:
    std::mutex mu_;
    std::vector<std::string> script_;
    std::size_t next_ = 0;
};

/// Fails the first `failures` calls with a transport error, then delegates.
class Flaky : public StubBackend {
  public:
    Flaky(int failures, std::shared_ptr<Backend> inner) : failures_(failures), inner_(std::move(inner)) {}

    std::vector<std::string> complete(const CompletionRequest& r) override
    {
        ++attempts;
        if (attempts <= failures_) throw TransportError("connection reset");
        return inner_->complete(r);
    }

    std::atomic<int> attempts{0};

  private:
    int failures_;
    std::shared_ptr<Backend> inner_;
};

/// Classifier driven by a predicate.
class PredicateClassifier : public StubBackend {
  public:
    explicit PredicateClassifier(std::function<bool(std::string_view)> pred) : pred_(std::move(pred)) {}
    double classify(std::string_view s, Task) override { return pred_(s) ? 1.0 : 0.0; }

  private:
    std::function<bool(std::string_view)> pred_;
};

/// Embedder returning caller-chosen vectors per exact text (sentence) or
/// per token (token granularity, whitespace split).
class TableEmbedder : public StubBackend {
  public:
    explicit TableEmbedder(std::map<std::string, std::vector<double>> table) : table_(std::move(table)) {}

    EmbeddingResult embed(std::span<const std::string> texts, Granularity g) override
    {
        EmbeddingResult r;
        r.granularity = g;
        for (const auto& t : texts) {
            if (g == Granularity::sentence) {
                r.vectors.push_back(table_.at(t));
                r.lengths.push_back(1);
            } else {
                auto toks = text::split(t, ' ');
                std::size_t n = 0;
                for (const auto& tok : toks) {
                    if (tok.empty()) continue;
                    r.vectors.push_back(table_.at(tok));
                    ++n;
                }
                r.lengths.push_back(n);
            }
        }
        return r;
    }

  private:
    std::map<std::string, std::vector<double>> table_;
};

}  // namespace neon::fakes
