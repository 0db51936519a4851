#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "neon/corpus.hpp"
#include "neon/gateway.hpp"
#include "neon/instantiation.hpp"
#include "neon/random.hpp"
#include "neon/text.hpp"

namespace neon::icl {

inline constexpr std::size_t default_k = 16;
inline constexpr int default_samples = 10;
/// Tokens reserved on top of max_tokens when fitting a prompt into the budget.
inline constexpr std::size_t generation_slack = 8;

inline constexpr std::string_view comve_header = "Task: Based on the incorrect statement, generate the correct statement.";
inline constexpr std::string_view esnli_header =
    "Task: Given the premise and the incorrect statement, generate the correct statement.";

struct FewShotPrompt {
    Task task = Task::comve;
    std::vector<StatementPair> exemplars;
    StatementPair target;
    std::string rendered;
    std::size_t k = 0;
};

struct PromptBudget {
    std::size_t context = default_context_budget;
    std::size_t max_tokens = 25;
    std::size_t slack = generation_slack;

    std::size_t prompt_allowance() const noexcept
    {
        const auto reserved = max_tokens + slack;
        return context > reserved ? context - reserved : 0;
    }
};

using TokenCounter = std::function<std::size_t(std::string_view)>;

namespace detail {

inline void append_block(std::string& out, Task task, const StatementPair& p, bool answered)
{
    if (task == Task::esnli) out += "Premise: " + p.premise.value_or("") + "\n";
    out += "Incorrect statement: " + p.incorrect + "\n";
    out += "Correct statement:";
    if (answered) out += " " + p.correct;
}

}  // namespace detail

/// Renders the few-shot correction prompt: header, a blank line, then one
/// block per exemplar and the unanswered target block, blocks separated by a
/// blank line.
inline std::string render_fewshot(Task task, std::span<const StatementPair> exemplars, const StatementPair& target)
{
    std::string out(task == Task::comve ? comve_header : esnli_header);
    out += "\n\n";
    for (const auto& e : exemplars) {
        detail::append_block(out, task, e, true);
        out += "\n\n";
    }
    detail::append_block(out, task, target, false);
    return out;
}

/// Picks `k` exemplars from the pool (never the target itself) in sampled
/// order and renders the prompt. If the prompt does not fit the budget, the
/// last exemplar is dropped until it does.
inline FewShotPrompt build_fewshot_prompt(const ExemplarPool& pool, const StatementPair& target, std::size_t k,
                                          std::uint64_t seed, const PromptBudget& budget = {},
                                          const TokenCounter& count = text::count_lm_tokens)
{
    if (pool.items.empty()) throw ValidationError("empty exemplar pool");
    if (text::trim(target.incorrect).empty()) throw ValidationError("target has no incorrect statement");
    if (target.task == Task::esnli && (!target.premise || text::trim(*target.premise).empty())) {
        throw ValidationError("esnli target has no premise");
    }

    std::vector<const StatementPair*> eligible;
    for (const auto& p : pool.items) {
        const bool same = p.id == target.id || p.incorrect == target.incorrect || p.correct == target.incorrect ||
                          p.incorrect == target.correct || p.correct == target.correct;
        if (!same) eligible.push_back(&p);
    }
    if (k > eligible.size()) {
        throw ValidationError("K=" + std::to_string(k) + " exceeds the " + std::to_string(eligible.size()) +
                              " usable exemplars");
    }

    Rng rng(seed);
    for (std::size_t i = 0; i < k; ++i) {
        auto j = i + uniform_index(rng, eligible.size() - i);
        std::swap(eligible[i], eligible[j]);
    }

    FewShotPrompt prompt;
    prompt.task = target.task;
    prompt.target = target;
    for (std::size_t i = 0; i < k; ++i) prompt.exemplars.push_back(*eligible[i]);

    const auto allowance = budget.prompt_allowance();
    while (true) {
        prompt.rendered = render_fewshot(prompt.task, prompt.exemplars, target);
        if (count(prompt.rendered) <= allowance || prompt.exemplars.empty()) break;
        prompt.exemplars.pop_back();
    }
    prompt.k = prompt.exemplars.size();
    return prompt;
}

/// Extracts the corrected statement from a raw completion: text before the
/// first newline or "Incorrect statement:" marker, trimmed, with a terminal
/// period added when no sentence punctuation ends it.
inline std::optional<std::string> parse_completion(std::string_view raw)
{
    auto cut = raw.find('\n');
    if (auto m = raw.find("Incorrect statement:"); m < cut) cut = m;
    auto t = text::trim(raw.substr(0, cut));
    if (t.empty()) return std::nullopt;
    std::string out(t);
    const char last = out.back();
    if (last != '.' && last != '!' && last != '?') out.push_back('.');
    return out;
}

struct GenerationSettings {
    int max_tokens = 25;
    double top_p = 0.9;
    double temperature = 0.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline bool same_statement(std::string_view a, std::string_view b)
{
    return text::lm_tokenize(a) == text::lm_tokenize(b);
}

/// Appends parsed completions, skipping empties, copies of the source
/// statement and duplicates (case- and whitespace-insensitive).
inline void collect(std::vector<Instantiation>& out, std::unordered_set<std::string>& seen, const StatementPair& target,
                    std::string_view raw, int sample_index)
{
    auto parsed = parse_completion(raw);
    if (!parsed || same_statement(*parsed, target.incorrect)) return;
    if (!seen.insert(text::dedup_key(*parsed)).second) return;
    Instantiation h;
    h.text = std::move(*parsed);
    h.source_id = target.id;
    h.method = InstantiationMethod::icl;
    h.sample_index = sample_index;
    out.push_back(std::move(h));
}

inline std::string gateway_failure(const FewShotPrompt& prompt, const std::exception& e)
{
    return "icl generation failed for '" + prompt.target.id + "' (prompt sha256 " + text::sha256_hex(prompt.rendered) +
           "): " + e.what();
}

}  // namespace detail

/// Requests `n` completions of one prompt and parses them.
inline std::vector<Instantiation> generate_instantiations(const FewShotPrompt& prompt, int n, Gateway& gateway,
                                                          const GenerationSettings& settings = {})
{
    if (n < 1) throw ValidationError("n must be >= 1");
    CompletionRequest req;
    req.prompt = prompt.rendered;
    req.max_tokens = settings.max_tokens;
    req.top_p = settings.top_p;
    req.temperature = settings.temperature;
    req.stop = {"\n"};
    req.n_samples = n;
    req.seed = settings.seed;

    std::vector<std::string> raw;
    try {
        raw = gateway.complete(req);
    } catch (const GatewayError& e) {
        throw GatewayError(detail::gateway_failure(prompt, e));
    }
    std::vector<Instantiation> out;
    std::unordered_set<std::string> seen;
    for (int i = 0; i < static_cast<int>(raw.size()); ++i) detail::collect(out, seen, prompt.target, raw[i], i);
    return out;
}

struct IclConfig {
    std::size_t k = default_k;
    int n_samples = default_samples;
    double top_p = 0.9;
    double temperature = 0.0;
    std::size_t context_budget = default_context_budget;
};

/// Phase I for one pair. Under greedy decoding every sample gets its own
/// exemplar draw, since repeated greedy calls on one prompt return the same
/// text; with temperature > 0 a single prompt is sampled n times.
inline std::vector<Instantiation> instantiate(const ExemplarPool& pool, const StatementPair& pair,
                                              const IclConfig& config, Gateway& gateway, std::uint64_t seed)
{
    const int max_tokens = instantiation_max_tokens(pair.task);
    PromptBudget budget{config.context_budget, static_cast<std::size_t>(max_tokens), generation_slack};
    auto counter = [&gateway](std::string_view s) { return gateway.count_tokens(s); };
    const auto k = std::min(config.k, pool.items.size());
    auto usable_k = [&](std::uint64_t s) {
        try {
            return build_fewshot_prompt(pool, pair, k, s, budget, counter);
        } catch (const ValidationError&) {
            // The pool may hold the target itself; retry with one exemplar fewer.
            if (k == 0) throw;
            return build_fewshot_prompt(pool, pair, k - 1, s, budget, counter);
        }
    };

    GenerationSettings settings{max_tokens, config.top_p, config.temperature, seed};
    if (config.temperature > 0.0) return generate_instantiations(usable_k(seed), config.n_samples, gateway, settings);

    std::vector<Instantiation> out;
    std::unordered_set<std::string> seen;
    for (int s = 0; s < config.n_samples; ++s) {
        const auto sample_seed = derive_seed(seed, static_cast<std::uint64_t>(s));
        auto prompt = usable_k(sample_seed);
        settings.seed = sample_seed;
        auto one = generate_instantiations(prompt, 1, gateway, settings);
        if (!one.empty() && seen.insert(text::dedup_key(one.front().text)).second) {
            one.front().sample_index = s;
            out.push_back(std::move(one.front()));
        }
    }
    return out;
}

}  // namespace neon::icl
