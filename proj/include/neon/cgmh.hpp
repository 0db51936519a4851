#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neon/corpus.hpp"
#include "neon/gateway.hpp"
#include "neon/instantiation.hpp"
#include "neon/random.hpp"
#include "neon/text.hpp"

namespace neon::cgmh {

enum class EditAction { replace, insert, erase };

inline std::string_view to_string(EditAction a) noexcept
{
    switch (a) {
    case EditAction::replace: return "replace";
    case EditAction::insert: return "insert";
    case EditAction::erase: return "delete";
    }
    return "replace";
}

struct ActionDistribution {
    double replace = 0.7;
    double insert = 0.2;
    double erase = 0.1;

    void validate() const
    {
        if (replace < 0 || insert < 0 || erase < 0 || std::abs(replace + insert + erase - 1.0) > 1e-9) {
            throw ValidationError("action probabilities must be non-negative and sum to 1");
        }
    }
};

struct Edit {
    EditAction action = EditAction::replace;
    std::size_t position = 0;
    std::string token;  // empty for deletions

    friend bool operator==(const Edit&, const Edit&) = default;
};

struct EditState {
    std::vector<std::string> tokens;
    double fluency = 0.0;
    double log_fluency = -std::numeric_limits<double>::infinity();
    int step = 0;
    std::vector<Edit> history;
};

struct Config {
    int steps = 50;
    /// Candidates considered when filling a masked slot during an edit.
    std::size_t top_k = 50;
    /// Candidates requested when reading a token's probability for pseudo-perplexity.
    std::size_t scoring_top_k = 1000;
    std::size_t max_length = 25;
    int chains = 5;
    ActionDistribution actions;
    /// Stand-in probability for a token missing from the returned candidates.
    double probability_floor = 1e-10;

    static Config for_task(Task task)
    {
        Config c;
        c.max_length = static_cast<std::size_t>(instantiation_max_tokens(task));
        return c;
    }
};

/// Masked-LM probability of `tokens[position]` given the rest of `tokens`
/// (which may already contain mask tokens).
inline double masked_probability(std::span<const std::string> tokens, std::size_t position, Gateway& gateway,
                                 const Config& config)
{
    std::vector<std::string> masked(tokens.begin(), tokens.end());
    masked[position] = std::string(mask_token);
    auto candidates = gateway.fill_mask(masked, position, config.scoring_top_k);
    return std::max(candidates.probability_of(tokens[position]).value_or(config.probability_floor),
                    config.probability_floor);
}

namespace detail {

/// exp(-mean log p) over the listed positions, masking `extra_mask` as well when set.
inline double pseudo_perplexity_over(std::span<const std::string> tokens, std::optional<std::size_t> extra_mask,
                                     Gateway& gateway, const Config& config)
{
    std::vector<std::string> base(tokens.begin(), tokens.end());
    if (extra_mask) base[*extra_mask] = std::string(mask_token);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (extra_mask && i == *extra_mask) continue;
        std::vector<std::string> masked = base;
        masked[i] = std::string(mask_token);
        auto candidates = gateway.fill_mask(masked, i, config.scoring_top_k);
        const double p = std::max(candidates.probability_of(tokens[i]).value_or(config.probability_floor),
                                  config.probability_floor);
        sum += std::log(p);
        ++n;
    }
    return std::exp(-sum / static_cast<double>(n));
}

}  // namespace detail

/// Pseudo-perplexity: every position is masked in turn and the original
/// token's probability read from the masked LM.
inline double pseudo_perplexity(std::span<const std::string> tokens, Gateway& gateway, const Config& config = {})
{
    if (tokens.empty()) throw ValidationError("pseudo-perplexity needs at least one token");
    return detail::pseudo_perplexity_over(tokens, std::nullopt, gateway, config);
}

/// Anomaly score per position: PPL(x) / PPL(x with position i masked), the
/// latter averaged over the other n-1 positions. Larger means more likely to
/// need editing.
inline std::vector<double> position_scores(std::span<const std::string> tokens, Gateway& gateway,
                                           const Config& config = {})
{
    if (tokens.size() < 2) throw ValidationError("position scores need at least two tokens");
    const double whole = pseudo_perplexity(tokens, gateway, config);
    std::vector<double> scores;
    scores.reserve(tokens.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        try {
            scores.push_back(whole / detail::pseudo_perplexity_over(tokens, i, gateway, config));
        } catch (const GatewayError& e) {
            throw GatewayError("position " + std::to_string(i) + ": " + e.what());
        }
    }
    return scores;
}

/// Scores normalised to a sampling distribution.
inline std::vector<double> position_distribution(std::span<const double> scores)
{
    double total = 0.0;
    for (double s : scores) total += s;
    std::vector<double> p(scores.begin(), scores.end());
    for (double& x : p) x /= total;
    return p;
}

inline EditAction sample_action(const ActionDistribution& dist, Rng& rng)
{
    const double weights[] = {dist.replace, dist.insert, dist.erase};
    switch (sample_weighted(rng, weights)) {
    case 0: return EditAction::replace;
    case 1: return EditAction::insert;
    default: return EditAction::erase;
    }
}

/// Sentence fluency as the product of autoregressive token probabilities.
/// Returns {fluency, log fluency}.
inline std::pair<double, double> fluency_with_log(std::span<const std::string> tokens, Gateway& gateway)
{
    if (tokens.empty()) throw ValidationError("fluency needs at least one token");
    const double lp = gateway.score_sequence(text::detokenize(tokens)).total();
    return {std::exp(lp), lp};
}

inline double fluency(std::span<const std::string> tokens, Gateway& gateway)
{
    return fluency_with_log(tokens, gateway).first;
}

inline EditState make_state(std::vector<std::string> tokens, Gateway& gateway)
{
    EditState s;
    auto [f, lf] = fluency_with_log(tokens, gateway);
    s.tokens = std::move(tokens);
    s.fluency = f;
    s.log_fluency = lf;
    return s;
}

/// Applies one edit. Returns nullopt when the proposal is discarded: no usable
/// candidate, a deletion that would empty the sentence, an invalid position,
/// or a result longer than max_length that is not shorter than the input.
inline std::optional<EditState> propose(const EditState& state, std::size_t position, EditAction action,
                                        Gateway& gateway, Rng& rng, const Config& config = {})
{
    const auto n = state.tokens.size();
    std::vector<std::string> tokens = state.tokens;
    Edit edit{action, position, {}};

    if (action == EditAction::erase) {
        if (n < 2 || position >= n) return std::nullopt;
        tokens.erase(tokens.begin() + static_cast<std::ptrdiff_t>(position));
    } else {
        std::string current;
        if (action == EditAction::insert) {
            if (position > n) return std::nullopt;
            tokens.insert(tokens.begin() + static_cast<std::ptrdiff_t>(position), std::string(mask_token));
        } else {
            if (position >= n) return std::nullopt;
            current = tokens[position];
            tokens[position] = std::string(mask_token);
        }
        auto candidates = gateway.fill_mask(tokens, position, config.top_k);
        std::vector<double> weights;
        std::vector<const MaskCandidate*> usable;
        for (const auto& c : candidates.candidates) {
            if (c.token == current || c.token == mask_token || text::trim(c.token).empty()) continue;
            usable.push_back(&c);
            weights.push_back(c.prob);
        }
        if (usable.empty()) return std::nullopt;
        edit.token = usable[sample_weighted(rng, weights)]->token;
        tokens[position] = edit.token;
    }

    if (tokens.size() > config.max_length && tokens.size() >= n) return std::nullopt;
    if (tokens == state.tokens) return std::nullopt;

    EditState next = make_state(std::move(tokens), gateway);
    next.step = state.step + 1;
    next.history = state.history;
    next.history.push_back(std::move(edit));
    return next;
}

/// Metropolis-Hastings acceptance on the fluency ratio.
inline bool accept(const EditState& current, const EditState& proposal, Rng& rng)
{
    const double log_ratio = proposal.log_fluency - current.log_fluency;
    if (log_ratio >= 0.0) return true;
    return uniform01(rng) < std::exp(log_ratio);
}

struct ChainTrace {
    EditState final_state;
    /// Highest-fluency accepted state that differs from the input and fits max_length.
    std::optional<EditState> best;
    int accepted = 0;
    int rejected = 0;
};

inline ChainTrace run_single_chain(std::vector<std::string> initial, const Config& config, Gateway& gateway,
                                   std::uint64_t seed)
{
    config.actions.validate();
    if (initial.empty()) throw ValidationError("cannot edit an empty statement");
    Rng rng(seed);
    ChainTrace trace;
    EditState state = make_state(initial, gateway);
    std::vector<double> weights;
    bool weights_stale = true;

    for (int step = 0; step < config.steps; ++step) {
        if (weights_stale) {
            weights = state.tokens.size() >= 2 ? position_distribution(position_scores(state.tokens, gateway, config))
                                               : std::vector<double>{1.0};
            weights_stale = false;
        }
        const auto position = sample_weighted(rng, weights);
        const auto action = sample_action(config.actions, rng);
        auto proposal = propose(state, position, action, gateway, rng, config);
        if (!proposal || !accept(state, *proposal, rng)) {
            ++trace.rejected;
            state.step = step + 1;
            continue;
        }
        ++trace.accepted;
        state = std::move(*proposal);
        state.step = step + 1;
        weights_stale = true;
        if (state.tokens != initial && state.tokens.size() <= config.max_length &&
            (!trace.best || state.log_fluency > trace.best->log_fluency)) {
            trace.best = state;
        }
    }
    trace.final_state = std::move(state);
    return trace;
}

/// Runs config.chains independent chains from the incorrect statement; chain
/// i uses seed + i. Each chain contributes its best distinct state, if any.
inline std::vector<Instantiation> run_chain(const StatementPair& pair, const Config& config, Gateway& gateway,
                                            std::uint64_t seed)
{
    auto initial = text::lm_tokenize(pair.incorrect);
    std::vector<Instantiation> out;
    for (int c = 0; c < config.chains; ++c) {
        auto trace = run_single_chain(initial, config, gateway, seed + static_cast<std::uint64_t>(c));
        if (!trace.best) continue;
        Instantiation h;
        h.text = text::detokenize(trace.best->tokens);
        h.source_id = pair.id;
        h.method = InstantiationMethod::cgmh;
        h.sample_index = c;
        h.fluency = trace.best->fluency;
        out.push_back(std::move(h));
    }
    return out;
}

}  // namespace neon::cgmh
