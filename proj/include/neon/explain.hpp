#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "neon/corpus.hpp"
#include "neon/gateway.hpp"
#include "neon/io.hpp"
#include "neon/text.hpp"

namespace neon::explain {

enum class TemplateName { original, default_A, annotator_B, annotator_C, instruction };
enum class Mode { explain_false, explain_correct };

inline constexpr std::array all_template_names{TemplateName::original, TemplateName::default_A,
                                               TemplateName::annotator_B, TemplateName::annotator_C,
                                               TemplateName::instruction};
inline constexpr std::array all_modes{Mode::explain_false, Mode::explain_correct};
inline constexpr std::array all_tasks{Task::comve, Task::esnli};

inline std::string_view to_string(TemplateName n) noexcept
{
    switch (n) {
    case TemplateName::original: return "original";
    case TemplateName::default_A: return "default_A";
    case TemplateName::annotator_B: return "annotator_B";
    case TemplateName::annotator_C: return "annotator_C";
    case TemplateName::instruction: return "instruction";
    }
    return "default_A";
}

inline std::string_view to_string(Mode m) noexcept
{
    return m == Mode::explain_false ? "explain_false" : "explain_correct";
}

inline TemplateName parse_template_name(std::string_view s)
{
    for (auto n : all_template_names) {
        if (to_string(n) == s) return n;
    }
    throw ValidationError("unknown template '" + std::string(s) + "'");
}

inline Mode parse_mode(std::string_view s)
{
    if (s == "explain_false") return Mode::explain_false;
    if (s == "explain_correct") return Mode::explain_correct;
    throw ValidationError("unknown mode '" + std::string(s) + "'");
}

struct TemplateId {
    TemplateName name = TemplateName::default_A;
    Task task = Task::comve;
    Mode mode = Mode::explain_false;

    /// "<task>.<mode>.<name>", also the resource file stem.
    std::string str() const
    {
        return std::string(neon::to_string(task)) + "." + std::string(explain::to_string(mode)) + "." +
               std::string(explain::to_string(name));
    }

    static TemplateId parse(std::string_view s)
    {
        auto parts = text::split(s, '.');
        if (parts.size() != 3) throw ValidationError("malformed template id '" + std::string(s) + "'");
        return TemplateId{parse_template_name(parts[2]), parse_task(parts[0]), parse_mode(parts[1])};
    }

    bool uses_hints() const noexcept { return name != TemplateName::original; }

    friend auto operator<=>(const TemplateId&, const TemplateId&) = default;
};

namespace detail {

struct BuiltinTemplate {
    Task task;
    Mode mode;
    TemplateName name;
    std::string_view text;
};

// Placeholders: {statement} (trailing period removed), {premise} (first letter
// lowercased, trailing period removed), {hints} (numbered list).
inline constexpr BuiltinTemplate builtin_templates[] = {
    {Task::comve, Mode::explain_false, TemplateName::original, "{statement}. This statement is wrong because:"},
    {Task::comve, Mode::explain_false, TemplateName::default_A,
     "Given the facts: {hints},\nExplain the following statement based on its difference with the facts: "
     "{statement}.\nThe explanation is:"},
    {Task::comve, Mode::explain_false, TemplateName::annotator_B,
     "Given the facts: {hints}, and the hypothesis: {statement}. The hypothesis is wrong because:"},
    {Task::comve, Mode::explain_false, TemplateName::annotator_C,
     "Given correct facts: {hints}, and false statement: {statement}. Based on the difference between facts and "
     "the statement, the statement is wrong because:"},
    {Task::comve, Mode::explain_false, TemplateName::instruction,
     "Facts: {hints}. False statement: {statement}. Explanation:"},

    {Task::esnli, Mode::explain_false, TemplateName::original,
     "Based on the context that {premise}, explain why the following sentence is wrong: {statement}. The "
     "explanation is:"},
    {Task::esnli, Mode::explain_false, TemplateName::default_A,
     "Based on the fact that {premise}, it is correct that {hints}. Based on the fact that {premise}. However, it is "
     "wrong that {statement}. The explanation is that:"},
    {Task::esnli, Mode::explain_false, TemplateName::annotator_B,
     "The context is {premise}. Based on the facts that {hints}, explain why the following sentence is wrong: "
     "{statement}. The explanation is:"},
    {Task::esnli, Mode::explain_false, TemplateName::annotator_C,
     "Based on the facts that {premise}, it is correct that {hints}. However, it is wrong that {statement}. The "
     "explanation is that:"},
    {Task::esnli, Mode::explain_false, TemplateName::instruction,
     "Context: {premise}. Correct facts: {hints}. False statement: {statement}. Explanation:"},

    {Task::comve, Mode::explain_correct, TemplateName::original, "{statement}. This statement is correct because:"},
    {Task::comve, Mode::explain_correct, TemplateName::default_A,
     "Given the facts: {hints},\nExplain the following statement based on its commonality with the facts: "
     "{statement}.\nThe explanation is:"},
    {Task::comve, Mode::explain_correct, TemplateName::annotator_B,
     "Given the facts: {hints}, and the hypothesis: {statement}. The hypothesis is correct because:"},
    {Task::comve, Mode::explain_correct, TemplateName::annotator_C,
     "Given correct facts: {hints}, and correct statement: {statement}. Based on the commonality between facts and "
     "the statement, the statement is correct because:"},
    {Task::comve, Mode::explain_correct, TemplateName::instruction,
     "Facts: {hints}. Correct statement: {statement}. Explanation:"},

    {Task::esnli, Mode::explain_correct, TemplateName::original,
     "Based on the context that {premise}, explain why the following sentence is correct: {statement}. The "
     "explanation is:"},
    {Task::esnli, Mode::explain_correct, TemplateName::default_A,
     "Based on the fact that {premise}, it is correct that {hints}. Based on the fact that {premise}. Therefore, it "
     "is correct that {statement}. The explanation is that:"},
    {Task::esnli, Mode::explain_correct, TemplateName::annotator_B,
     "The context is {premise}. Based on the facts that {hints}, explain why the following sentence is correct: "
     "{statement}. The explanation is:"},
    {Task::esnli, Mode::explain_correct, TemplateName::annotator_C,
     "Based on the facts that {premise}, it is correct that {hints}. Also, it is correct that {statement}. The "
     "explanation is that:"},
    {Task::esnli, Mode::explain_correct, TemplateName::instruction,
     "Context: {premise}. Correct facts: {hints}. Correct statement: {statement}. Explanation:"},
};

inline constexpr std::array<std::string_view, 3> placeholders{"{statement}", "{premise}", "{hints}"};

/// Ensures every brace in `t` opens a known placeholder.
inline void check_placeholders(std::string_view id, std::string_view t)
{
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] == '}') throw ValidationError("template " + std::string(id) + ": stray '}'");
        if (t[i] != '{') continue;
        bool known = false;
        for (auto p : placeholders) {
            if (t.substr(i, p.size()) == p) {
                i += p.size() - 1;
                known = true;
                break;
            }
        }
        if (!known) throw ValidationError("template " + std::string(id) + ": unknown placeholder");
    }
}

}  // namespace detail

/// A closed set of prompt templates keyed by TemplateId.
class TemplateRegistry {
  public:
    static const TemplateRegistry& builtin()
    {
        static const TemplateRegistry reg = [] {
            TemplateRegistry r;
            for (const auto& t : detail::builtin_templates) r.add(TemplateId{t.name, t.task, t.mode}, std::string(t.text));
            r.check_complete();
            return r;
        }();
        return reg;
    }

    /// Loads one UTF-8 file per id, named "<id>.txt". The directory must hold
    /// exactly the full id set.
    static TemplateRegistry load_directory(const std::filesystem::path& dir)
    {
        TemplateRegistry r;
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.path().extension() != ".txt") continue;
            r.add(TemplateId::parse(entry.path().stem().string()), io::read_file(entry.path()));
        }
        r.check_complete();
        return r;
    }

    void write_directory(const std::filesystem::path& dir) const
    {
        for (const auto& [id, t] : templates_) io::write_file_atomic(dir / (id.str() + ".txt"), t);
    }

    const std::string& get(const TemplateId& id) const
    {
        auto it = templates_.find(id);
        if (it == templates_.end()) throw ValidationError("unregistered template " + id.str());
        return it->second;
    }

    const std::map<TemplateId, std::string>& all() const noexcept { return templates_; }

    friend bool operator==(const TemplateRegistry&, const TemplateRegistry&) = default;

  private:
    void add(const TemplateId& id, std::string t)
    {
        detail::check_placeholders(id.str(), t);
        const bool has_hints = t.find("{hints}") != std::string::npos;
        if (has_hints != id.uses_hints()) throw ValidationError("template " + id.str() + ": hint placeholder mismatch");
        if (id.task == Task::comve && t.find("{premise}") != std::string::npos) {
            throw ValidationError("template " + id.str() + ": comve templates take no premise");
        }
        if (!templates_.emplace(id, std::move(t)).second) throw ValidationError("duplicate template " + id.str());
    }

    void check_complete() const
    {
        for (auto task : all_tasks) {
            for (auto mode : all_modes) {
                for (auto name : all_template_names) {
                    TemplateId id{name, task, mode};
                    if (!templates_.contains(id)) throw ValidationError("missing template " + id.str());
                }
            }
        }
    }

    std::map<TemplateId, std::string> templates_;
};

/// "1. h1, 2. h2, ..., l. hl" with each hint's trailing period removed.
inline std::string format_hints(std::span<const std::string> hints)
{
    if (hints.empty()) throw ValidationError("cannot format an empty hint list");
    std::string out;
    for (std::size_t i = 0; i < hints.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(i + 1) + ". " + text::strip_trailing_period(hints[i]);
    }
    return out;
}

inline std::string premise_clause(std::string_view premise)
{
    auto p = text::strip_trailing_period(premise);
    if (!p.empty() && static_cast<unsigned char>(p[0]) < 0x80) {
        p[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(p[0])));
    }
    return p;
}

struct PromptSpec {
    TemplateId template_id;
    std::string prompt;
    int max_tokens = explanation_max_tokens;
    double top_p = 0.9;
    double temperature = 0.0;
};

/// Single-pass substitution; placeholder-like text inside values is left alone.
inline std::string render(std::string_view tmpl, std::string_view statement, std::string_view premise,
                          std::string_view hints)
{
    std::string out;
    for (std::size_t i = 0; i < tmpl.size();) {
        bool replaced = false;
        for (auto [ph, value] : {std::pair{detail::placeholders[0], statement}, std::pair{detail::placeholders[1], premise},
                                 std::pair{detail::placeholders[2], hints}}) {
            if (tmpl.substr(i, ph.size()) == ph) {
                out += value;
                i += ph.size();
                replaced = true;
                break;
            }
        }
        if (!replaced) out.push_back(tmpl[i++]);
    }
    return out;
}

/// The statement a template explains: the false one, or the correct one in
/// explain_correct mode.
inline const std::string& explained_statement(const StatementPair& pair, Mode mode)
{
    return mode == Mode::explain_false ? pair.incorrect : pair.correct;
}

inline PromptSpec build_explain_prompt(const StatementPair& pair, std::span<const std::string> hints,
                                       const TemplateId& id, const TemplateRegistry& registry = TemplateRegistry::builtin())
{
    const auto& tmpl = registry.get(id);
    if (id.task != pair.task) {
        throw ValidationError("template " + id.str() + " does not match task " + std::string(to_string(pair.task)));
    }
    if (id.uses_hints() == hints.empty()) {
        throw ValidationError(id.uses_hints() ? "template " + id.str() + " needs hints"
                                              : "template " + id.str() + " takes no hints");
    }
    if (id.task == Task::esnli && (!pair.premise || text::trim(*pair.premise).empty())) {
        throw ValidationError("pair '" + pair.id + "' has no premise");
    }
    PromptSpec spec;
    spec.template_id = id;
    spec.prompt = render(tmpl, text::strip_trailing_period(explained_statement(pair, id.mode)),
                         pair.premise ? premise_clause(*pair.premise) : std::string{},
                         hints.empty() ? std::string{} : format_hints(hints));
    return spec;
}

enum class Method { original, random, retrieval_bm25, retrieval_embed, ground_truth, top1, neon_icl, neon_cgmh };

inline constexpr std::array all_methods{Method::original,     Method::random, Method::retrieval_bm25,
                                        Method::retrieval_embed, Method::ground_truth, Method::top1,
                                        Method::neon_icl,     Method::neon_cgmh};

inline std::string_view to_string(Method m) noexcept
{
    switch (m) {
    case Method::original: return "original";
    case Method::random: return "random";
    case Method::retrieval_bm25: return "retrieval_bm25";
    case Method::retrieval_embed: return "retrieval_embed";
    case Method::ground_truth: return "ground_truth";
    case Method::top1: return "top1";
    case Method::neon_icl: return "neon_icl";
    case Method::neon_cgmh: return "neon_cgmh";
    }
    return "original";
}

inline Method parse_method(std::string_view s)
{
    for (auto m : all_methods) {
        if (to_string(m) == s) return m;
    }
    throw ValidationError("unknown method '" + std::string(s) + "'");
}

inline constexpr std::size_t default_ensemble_size = 5;

struct ExplanationRecord {
    std::string source_id;
    Method method = Method::original;
    std::vector<std::string> hints;
    TemplateId template_id;
    std::string prompt;
    std::string explanation;
    std::vector<std::string> references;
    bool empty_explanation = false;
};

/// Method/hint-count consistency, checked before a record is written.
inline void check_record(const ExplanationRecord& r, std::size_t ensemble_size = default_ensemble_size)
{
    auto fail = [&](const std::string& why) {
        throw ValidationError("record " + r.source_id + " (" + std::string(to_string(r.method)) + "): " + why);
    };
    switch (r.method) {
    case Method::original:
        if (!r.hints.empty()) fail("original takes no hints");
        break;
    case Method::top1:
    case Method::ground_truth:
    case Method::random:
        if (r.hints.size() != 1) fail("expected exactly one hint");
        break;
    case Method::neon_icl:
    case Method::neon_cgmh:
        if (r.hints.size() != ensemble_size) fail("expected " + std::to_string(ensemble_size) + " hints");
        break;
    case Method::retrieval_bm25:
    case Method::retrieval_embed:
        if (r.hints.empty()) fail("retrieval needs hints");
        break;
    }
    if ((r.method == Method::original) != !r.template_id.uses_hints()) fail("template does not match method");
}

inline json to_json(const ExplanationRecord& r)
{
    json j{{"source_id", r.source_id},
           {"method", to_string(r.method)},
           {"template", r.template_id.str()},
           {"hints", r.hints},
           {"prompt_sha256", text::sha256_hex(r.prompt)},
           {"explanation", r.explanation},
           {"references", r.references}};
    if (r.empty_explanation) j["empty_explanation"] = true;
    return j;
}

inline ExplanationRecord record_from_json(const json& j)
{
    ExplanationRecord r;
    r.source_id = j.at("source_id").get<std::string>();
    r.method = parse_method(j.at("method").get<std::string>());
    r.template_id = TemplateId::parse(j.at("template").get<std::string>());
    r.hints = j.at("hints").get<std::vector<std::string>>();
    r.explanation = j.at("explanation").get<std::string>();
    r.references = j.at("references").get<std::vector<std::string>>();
    r.empty_explanation = j.value("empty_explanation", false);
    return r;
}

/// Text before the first blank line, trimmed.
inline std::string clean_explanation(std::string_view raw)
{
    auto cut = raw.find("\n\n");
    return std::string(text::trim(raw.substr(0, cut)));
}

/// One greedy completion for a rendered prompt. An empty completion yields a
/// record flagged with empty_explanation rather than an error.
inline ExplanationRecord generate_explanation(const PromptSpec& spec, Gateway& gateway)
{
    CompletionRequest req;
    req.prompt = spec.prompt;
    req.max_tokens = spec.max_tokens;
    req.top_p = spec.top_p;
    req.temperature = spec.temperature;
    req.stop = {"\n\n"};
    req.n_samples = 1;
    std::vector<std::string> out;
    try {
        out = gateway.complete(req);
    } catch (const GatewayError& e) {
        throw GatewayError("explanation failed (prompt sha256 " + text::sha256_hex(spec.prompt) + "): " + e.what());
    }
    ExplanationRecord r;
    r.template_id = spec.template_id;
    r.prompt = spec.prompt;
    r.explanation = clean_explanation(out.front());
    r.empty_explanation = r.explanation.empty();
    return r;
}

/// Builds, runs and labels one explanation for `pair`.
inline ExplanationRecord explain_pair(const StatementPair& pair, Method method, std::vector<std::string> hints,
                                      TemplateName name, Mode mode, Gateway& gateway,
                                      const TemplateRegistry& registry = TemplateRegistry::builtin())
{
    const TemplateId id{method == Method::original ? TemplateName::original : name, pair.task, mode};
    auto record = generate_explanation(build_explain_prompt(pair, hints, id, registry), gateway);
    record.source_id = pair.id;
    record.method = method;
    record.hints = std::move(hints);
    record.references = mode == Mode::explain_false ? pair.refs_incorrect : pair.refs_correct;
    return record;
}

}  // namespace neon::explain
