#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <semaphore>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "neon/error.hpp"
#include "neon/io.hpp"
#include "neon/task.hpp"
#include "neon/text.hpp"

namespace neon {

inline constexpr std::string_view mask_token = "[MASK]";

struct CompletionRequest {
    std::string prompt;
    int max_tokens = 1;
    double top_p = 1.0;
    /// 0 means greedy decoding; top_p is then forwarded but inert.
    double temperature = 0.0;
    std::vector<std::string> stop;
    int n_samples = 1;
    std::uint64_t seed = 0;

    friend bool operator==(const CompletionRequest&, const CompletionRequest&) = default;
};

struct TokenLogProbs {
    std::vector<std::string> tokens;
    std::vector<double> logprobs;

    double total() const noexcept
    {
        double s = 0.0;
        for (double lp : logprobs) s += lp;
        return s;
    }
};

struct MaskCandidate {
    std::string token;
    double prob = 0.0;
};

struct MaskCandidateSet {
    std::size_t position = 0;
    /// Sorted by descending probability.
    std::vector<MaskCandidate> candidates;

    std::optional<double> probability_of(std::string_view token) const
    {
        for (const auto& c : candidates) {
            if (c.token == token) return c.prob;
        }
        return std::nullopt;
    }
};

enum class Granularity { token, sentence };

inline std::string_view to_string(Granularity g) noexcept
{
    return g == Granularity::token ? "token" : "sentence";
}

inline Granularity parse_granularity(std::string_view s)
{
    if (s == "token") return Granularity::token;
    if (s == "sentence") return Granularity::sentence;
    throw ValidationError("unknown granularity '" + std::string(s) + "'");
}

/// Sentence granularity: one vector per text. Token granularity: the token
/// vectors of all texts concatenated in order, with `lengths[i]` vectors
/// belonging to text i.
struct EmbeddingResult {
    Granularity granularity = Granularity::sentence;
    std::vector<std::vector<double>> vectors;
    std::vector<std::size_t> lengths;

    std::size_t dimension() const noexcept { return vectors.empty() ? 0 : vectors.front().size(); }

    /// Token vectors of text `i` (token granularity only).
    std::span<const std::vector<double>> token_vectors(std::size_t i) const
    {
        std::size_t off = 0;
        for (std::size_t k = 0; k < i; ++k) off += lengths.at(k);
        return std::span<const std::vector<double>>(vectors).subspan(off, lengths.at(i));
    }
};

/// A language-model provider. Implementations must be safe to call from
/// several threads at once.
class Backend {
  public:
    virtual ~Backend() = default;

    /// Stable description written into run manifests.
    virtual std::string identity() const = 0;
    virtual std::vector<std::string> complete(const CompletionRequest& request) = 0;
    virtual TokenLogProbs score(std::string_view text) = 0;
    /// Distribution over the token at `position`; whatever `tokens[position]`
    /// holds is treated as masked.
    virtual MaskCandidateSet fill_mask(std::span<const std::string> tokens, std::size_t position,
                                       std::size_t top_k) = 0;
    virtual EmbeddingResult embed(std::span<const std::string> texts, Granularity granularity) = 0;
    /// Probability that `text` is a correct (entailed) statement. Throws
    /// CapabilityError when no classifier is configured.
    virtual double classify(std::string_view text, Task task) = 0;
};

// Wire format shared by the HTTP client and server. Field names are fixed.
namespace wire {

inline json to_json(const CompletionRequest& r)
{
    return json{{"prompt", r.prompt},      {"max_tokens", r.max_tokens}, {"top_p", r.top_p},
                {"temperature", r.temperature}, {"stop", r.stop},        {"n", r.n_samples},
                {"seed", r.seed}};
}

inline CompletionRequest completion_request(const json& j)
{
    CompletionRequest r;
    r.prompt = j.at("prompt").get<std::string>();
    r.max_tokens = j.at("max_tokens").get<int>();
    r.top_p = j.value("top_p", 1.0);
    r.temperature = j.value("temperature", 0.0);
    r.stop = j.value("stop", std::vector<std::string>{});
    r.n_samples = j.value("n", 1);
    r.seed = j.value("seed", std::uint64_t{0});
    return r;
}

inline json completion_response(const std::vector<std::string>& texts)
{
    json choices = json::array();
    for (const auto& t : texts) choices.push_back(json{{"text", t}});
    return json{{"choices", choices}};
}

inline std::vector<std::string> completions(const json& j)
{
    std::vector<std::string> out;
    for (const auto& c : j.at("choices")) out.push_back(c.at("text").get<std::string>());
    return out;
}

inline json to_json(const TokenLogProbs& s)
{
    return json{{"tokens", s.tokens}, {"logprobs", s.logprobs}};
}

inline TokenLogProbs token_logprobs(const json& j)
{
    return TokenLogProbs{j.at("tokens").get<std::vector<std::string>>(),
                         j.at("logprobs").get<std::vector<double>>()};
}

inline json fill_mask_request(std::span<const std::string> tokens, std::size_t position, std::size_t top_k)
{
    return json{{"tokens", std::vector<std::string>(tokens.begin(), tokens.end())},
                {"position", position},
                {"top_k", top_k}};
}

inline json to_json(const MaskCandidateSet& m)
{
    json c = json::array();
    for (const auto& x : m.candidates) c.push_back(json{{"token", x.token}, {"prob", x.prob}});
    return json{{"candidates", c}};
}

inline MaskCandidateSet mask_candidates(const json& j, std::size_t position)
{
    MaskCandidateSet m;
    m.position = position;
    for (const auto& c : j.at("candidates")) {
        m.candidates.push_back(MaskCandidate{c.at("token").get<std::string>(), c.at("prob").get<double>()});
    }
    return m;
}

inline json embed_request(std::span<const std::string> texts, Granularity g)
{
    return json{{"texts", std::vector<std::string>(texts.begin(), texts.end())},
                {"granularity", to_string(g)}};
}

inline json to_json(const EmbeddingResult& e)
{
    json j{{"vectors", e.vectors}};
    if (e.granularity == Granularity::token) j["lengths"] = e.lengths;
    return j;
}

inline EmbeddingResult embedding_result(const json& j, Granularity g, std::size_t n_texts)
{
    EmbeddingResult e;
    e.granularity = g;
    e.vectors = j.at("vectors").get<std::vector<std::vector<double>>>();
    if (g == Granularity::token) {
        e.lengths = j.at("lengths").get<std::vector<std::size_t>>();
    } else {
        e.lengths.assign(n_texts, 1);
    }
    return e;
}

inline json error_body(std::string_view code, std::string_view message)
{
    return json{{"error", {{"code", code}, {"message", message}}}};
}

}  // namespace wire

struct GatewayOptions {
    std::size_t context_budget = default_context_budget;
    /// Retries after the first attempt, on transport errors only.
    int max_retries = 3;
    std::chrono::milliseconds backoff{100};
    std::size_t max_in_flight = 8;
};

/// The single entry point through which pipeline code reaches a language
/// model. Adds validation, context budgeting, stop handling, bounded retries
/// and a cap on concurrent in-flight requests on top of a Backend.
class Gateway {
  public:
    explicit Gateway(std::shared_ptr<Backend> backend, GatewayOptions options = {})
        : backend_(std::move(backend)), options_(options),
          slots_(std::make_unique<std::counting_semaphore<1024>>(
              static_cast<std::ptrdiff_t>(std::clamp<std::size_t>(options.max_in_flight, 1, 1024))))
    {
        if (!backend_) throw ValidationError("gateway needs a backend");
    }

    const GatewayOptions& options() const noexcept { return options_; }
    std::string identity() const { return backend_->identity(); }
    Backend& backend() noexcept { return *backend_; }

    std::size_t count_tokens(std::string_view s) const { return text::count_lm_tokens(s); }

    std::vector<std::string> complete(const CompletionRequest& request)
    {
        if (request.max_tokens < 1) throw ValidationError("max_tokens must be >= 1");
        if (!(request.top_p > 0.0 && request.top_p <= 1.0)) throw ValidationError("top_p must be in (0, 1]");
        if (!(request.temperature >= 0.0)) throw ValidationError("temperature must be >= 0");
        if (request.n_samples < 1) throw ValidationError("n must be >= 1");
        const auto needed = count_tokens(request.prompt) + static_cast<std::size_t>(request.max_tokens);
        if (needed > options_.context_budget) throw ContextOverflow(needed, options_.context_budget);

        auto out = call([&] { return backend_->complete(request); });
        if (out.size() != static_cast<std::size_t>(request.n_samples)) {
            throw BackendError("bad_response", "expected " + std::to_string(request.n_samples) + " completions, got " +
                                                   std::to_string(out.size()));
        }
        for (auto& text : out) truncate_at_stop(text, request.stop);
        return out;
    }

    TokenLogProbs score_sequence(std::string_view text)
    {
        if (text::trim(text).empty()) throw ValidationError("cannot score empty text");
        auto r = call([&] { return backend_->score(text); });
        if (r.tokens.size() != r.logprobs.size()) throw BackendError("bad_response", "token/logprob length mismatch");
        for (double lp : r.logprobs) {
            if (!(lp <= 0.0) || std::isnan(lp)) throw BackendError("bad_response", "log-probability above 0");
        }
        return r;
    }

    MaskCandidateSet fill_mask(std::span<const std::string> tokens, std::size_t position, std::size_t top_k)
    {
        if (position >= tokens.size()) {
            throw ValidationError("mask position " + std::to_string(position) + " out of range for " +
                                  std::to_string(tokens.size()) + " tokens");
        }
        if (top_k < 1) throw ValidationError("top_k must be >= 1");
        auto r = call([&] { return backend_->fill_mask(tokens, position, top_k); });
        r.position = position;
        if (r.candidates.size() > top_k) r.candidates.resize(top_k);
        double sum = 0.0;
        for (std::size_t i = 0; i < r.candidates.size(); ++i) {
            const double p = r.candidates[i].prob;
            if (!(p > 0.0 && p <= 1.0)) throw BackendError("bad_response", "candidate probability outside (0, 1]");
            if (i > 0 && p > r.candidates[i - 1].prob) throw BackendError("bad_response", "candidates not sorted");
            sum += p;
        }
        if (sum > 1.0 + 1e-6) throw BackendError("bad_response", "candidate probabilities sum above 1");
        return r;
    }

    EmbeddingResult embed(std::span<const std::string> texts, Granularity granularity)
    {
        if (texts.empty()) throw ValidationError("cannot embed an empty batch");
        auto r = call([&] { return backend_->embed(texts, granularity); });
        r.granularity = granularity;
        if (granularity == Granularity::sentence) {
            if (r.vectors.size() != texts.size()) throw BackendError("bad_response", "one vector per text expected");
            r.lengths.assign(texts.size(), 1);
        } else {
            std::size_t total = 0;
            for (auto n : r.lengths) total += n;
            if (r.lengths.size() != texts.size() || total != r.vectors.size()) {
                throw BackendError("bad_response", "token vector lengths do not cover the batch");
            }
        }
        const auto dim = r.dimension();
        for (const auto& v : r.vectors) {
            if (v.size() != dim) throw BackendError("dimension_mismatch", "vectors differ in dimension");
            for (double x : v) {
                if (!std::isfinite(x)) throw BackendError("bad_response", "non-finite embedding entry");
            }
        }
        return r;
    }

    double classify(std::string_view text, Task task)
    {
        double p = call([&] { return backend_->classify(text, task); });
        if (!(p >= 0.0 && p <= 1.0)) throw BackendError("bad_response", "classifier probability outside [0, 1]");
        return p;
    }

    static void truncate_at_stop(std::string& text, std::span<const std::string> stop)
    {
        std::size_t cut = text.size();
        for (const auto& s : stop) {
            if (s.empty()) continue;
            auto pos = text.find(s);
            if (pos != std::string::npos) cut = std::min(cut, pos);
        }
        text.resize(cut);
    }

  private:
    template <typename F>
    auto call(F&& f) -> decltype(f())
    {
        slots_->acquire();
        struct Release {
            std::counting_semaphore<1024>* s;
            ~Release() { s->release(); }
        } release{slots_.get()};

        auto delay = options_.backoff;
        for (int attempt = 0;; ++attempt) {
            try {
                return f();
            } catch (const TransportError&) {
                if (attempt >= options_.max_retries) throw;
            }
            std::this_thread::sleep_for(delay);
            delay *= 2;
        }
    }

    std::shared_ptr<Backend> backend_;
    GatewayOptions options_;
    std::unique_ptr<std::counting_semaphore<1024>> slots_;
};

}  // namespace neon
