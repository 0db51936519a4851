#include <gtest/gtest.h>

#include <unistd.h>

#include "fakes.hpp"
#include "neon/explain.hpp"
#include "neon/mock_backend.hpp"

using namespace neon;
using namespace neon::explain;
using namespace neon::fakes;

namespace {

StatementPair elephant()
{
    StatementPair p;
    p.id = "t01";
    p.incorrect = "John put an elephant into the fridge.";
    p.correct = "John put a turkey into the fridge.";
    p.refs_incorrect = {"An elephant is much bigger than a fridge.", "Elephants do not fit in fridges.",
                        "A fridge is too small."};
    p.refs_correct = {"A turkey fits in a fridge."};
    return p;
}

StatementPair grin()
{
    StatementPair p;
    p.id = "e01";
    p.task = Task::esnli;
    p.premise = "A woman with a green headscarf, blue shirt and a very big grin.";
    p.incorrect = "The woman has been shot.";
    p.correct = "The woman is very happy.";
    return p;
}

const std::vector<std::string> turkey_hints{"John put a turkey into the fridge.", "John put a peach into the fridge.",
                                            "John put a bowl into the fridge."};
const std::vector<std::string> happy_hints{"The woman is very happy.", "The woman smiling.", "The woman is happy."};

}  // namespace

TEST(Golden, ComveDefaultThreeHints)
{
    auto spec = build_explain_prompt(elephant(), turkey_hints, {TemplateName::default_A, Task::comve, Mode::explain_false});
    EXPECT_EQ(spec.prompt,
              "Given the facts: 1. John put a turkey into the fridge, 2. John put a peach into the fridge, 3. John put a "
              "bowl into the fridge,\n"
              "Explain the following statement based on its difference with the facts: John put an elephant into the "
              "fridge.\n"
              "The explanation is:");
    EXPECT_EQ(spec.max_tokens, 30);
    EXPECT_EQ(spec.top_p, 0.9);
}

TEST(Golden, ComveOriginal)
{
    auto spec = build_explain_prompt(elephant(), {}, {TemplateName::original, Task::comve, Mode::explain_false});
    EXPECT_EQ(spec.prompt, "John put an elephant into the fridge. This statement is wrong because:");
}

TEST(Golden, ComveVariants)
{
    const auto p = elephant();
    EXPECT_EQ(build_explain_prompt(p, turkey_hints, {TemplateName::annotator_B, Task::comve, Mode::explain_false}).prompt,
              "Given the facts: 1. John put a turkey into the fridge, 2. John put a peach into the fridge, 3. John put a "
              "bowl into the fridge, and the hypothesis: John put an elephant into the fridge. The hypothesis is wrong "
              "because:");
    EXPECT_EQ(build_explain_prompt(p, turkey_hints, {TemplateName::instruction, Task::comve, Mode::explain_false}).prompt,
              "Facts: 1. John put a turkey into the fridge, 2. John put a peach into the fridge, 3. John put a bowl into "
              "the fridge. False statement: John put an elephant into the fridge. Explanation:");
}

TEST(Golden, EsnliOriginalAndAnnotatorB)
{
    const auto p = grin();
    EXPECT_EQ(build_explain_prompt(p, {}, {TemplateName::original, Task::esnli, Mode::explain_false}).prompt,
              "Based on the context that a woman with a green headscarf, blue shirt and a very big grin, explain why the "
              "following sentence is wrong: The woman has been shot. The explanation is:");
    EXPECT_EQ(build_explain_prompt(p, happy_hints, {TemplateName::annotator_B, Task::esnli, Mode::explain_false}).prompt,
              "The context is a woman with a green headscarf, blue shirt and a very big grin. Based on the facts that "
              "1. The woman is very happy, 2. The woman smiling, 3. The woman is happy, explain why the following "
              "sentence is wrong: The woman has been shot. The explanation is:");
}

TEST(Prompt, NoUnreplacedPlaceholdersInAnyTemplate)
{
    for (const auto& [id, tmpl] : TemplateRegistry::builtin().all()) {
        const auto pair = id.task == Task::comve ? elephant() : grin();
        std::vector<std::string> hints;
        if (id.uses_hints()) hints = {"h1.", "h2."};
        auto prompt = build_explain_prompt(pair, hints, id).prompt;
        EXPECT_EQ(prompt.find('{'), std::string::npos) << id.str();
        EXPECT_EQ(prompt.find('}'), std::string::npos) << id.str();
        EXPECT_NE(prompt.find(text::strip_trailing_period(explained_statement(pair, id.mode))), std::string::npos);
    }
}

TEST(Prompt, ValuesAreNotReexpanded)
{
    auto p = elephant();
    p.incorrect = "A {hints} statement.";
    auto spec = build_explain_prompt(p, {}, {TemplateName::original, Task::comve, Mode::explain_false});
    EXPECT_EQ(spec.prompt, "A {hints} statement. This statement is wrong because:");
}

TEST(Prompt, ExplainCorrectUsesCorrectStatement)
{
    auto spec = build_explain_prompt(elephant(), turkey_hints, {TemplateName::default_A, Task::comve, Mode::explain_correct});
    EXPECT_NE(spec.prompt.find("John put a turkey into the fridge.\n"), std::string::npos);
    EXPECT_EQ(spec.prompt.find("elephant"), std::string::npos);
}

TEST(Prompt, ContractViolations)
{
    const auto p = elephant();
    EXPECT_THROW(build_explain_prompt(p, {}, {TemplateName::default_A, Task::comve, Mode::explain_false}),
                 ValidationError);
    EXPECT_THROW(build_explain_prompt(p, turkey_hints, {TemplateName::original, Task::comve, Mode::explain_false}),
                 ValidationError);
    EXPECT_THROW(build_explain_prompt(p, turkey_hints, {TemplateName::default_A, Task::esnli, Mode::explain_false}),
                 ValidationError);
    auto q = grin();
    q.premise.reset();
    EXPECT_THROW(build_explain_prompt(q, happy_hints, {TemplateName::default_A, Task::esnli, Mode::explain_false}),
                 ValidationError);
}

TEST(Hints, Formatting)
{
    EXPECT_EQ(format_hints(std::vector<std::string>{"A."}), "1. A");
    EXPECT_EQ(format_hints(std::vector<std::string>{"A.", "B", "C. "}), "1. A, 2. B, 3. C");
    EXPECT_THROW(format_hints(std::vector<std::string>{}), ValidationError);
    EXPECT_EQ(premise_clause("A woman smiles."), "a woman smiles");
}

TEST(Registry, BuiltinEqualsShippedDirectory)
{
    auto dir = TemplateRegistry::load_directory(NEON_TEMPLATE_DIR);
    EXPECT_EQ(dir, TemplateRegistry::builtin());
    EXPECT_EQ(dir.all().size(), 20u);
}

TEST(Registry, IncompleteDirectoryRejected)
{
    auto d = std::filesystem::temp_directory_path() / ("neon_templates_" + std::to_string(::getpid()));
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    TemplateRegistry::builtin().write_directory(d);
    EXPECT_NO_THROW(TemplateRegistry::load_directory(d));
    std::filesystem::remove(d / "comve.explain_false.instruction.txt");
    EXPECT_THROW(TemplateRegistry::load_directory(d), ValidationError);
    io::write_file_atomic(d / "comve.explain_false.instruction.txt", "Facts: {facts}. {statement}");
    EXPECT_THROW(TemplateRegistry::load_directory(d), ValidationError);
    io::write_file_atomic(d / "comve.explain_false.instruction.txt", "No hints here: {statement}");
    EXPECT_THROW(TemplateRegistry::load_directory(d), ValidationError);
    io::write_file_atomic(d / "comve.explain_false.instruction.txt", "{premise} {hints} {statement}");
    EXPECT_THROW(TemplateRegistry::load_directory(d), ValidationError);
    std::filesystem::remove_all(d);
}

TEST(Registry, UnknownIdFailsBeforeNetwork)
{
    EXPECT_THROW(TemplateId::parse("comve.explain_false.annotator_Z"), ValidationError);
    EXPECT_THROW(TemplateId::parse("comve.default_A"), ValidationError);
    EXPECT_EQ(TemplateId::parse("esnli.explain_correct.instruction").str(), "esnli.explain_correct.instruction");
}

TEST(Record, HintCardinalityInvariants)
{
    ExplanationRecord r;
    r.source_id = "x";
    r.template_id = {TemplateName::default_A, Task::comve, Mode::explain_false};
    r.method = Method::top1;
    r.hints = {"a"};
    EXPECT_NO_THROW(check_record(r));
    r.hints = {"a", "b"};
    EXPECT_THROW(check_record(r), ValidationError);
    r.method = Method::neon_icl;
    r.hints.assign(5, "h");
    EXPECT_NO_THROW(check_record(r));
    EXPECT_THROW(check_record(r, 3), ValidationError);
    r.method = Method::retrieval_bm25;
    EXPECT_NO_THROW(check_record(r));
    r.hints.clear();
    EXPECT_THROW(check_record(r), ValidationError);
    r.method = Method::original;
    EXPECT_THROW(check_record(r), ValidationError);
    r.template_id.name = TemplateName::original;
    EXPECT_NO_THROW(check_record(r));
}

TEST(Record, JsonRoundTrip)
{
    Gateway gw(std::make_shared<MockBackend>());
    auto r = explain_pair(elephant(), Method::neon_icl, std::vector<std::string>(5, "John put a turkey into the fridge."),
                          TemplateName::annotator_C, Mode::explain_false, gw);
    auto back = record_from_json(to_json(r));
    EXPECT_EQ(back.source_id, r.source_id);
    EXPECT_EQ(back.method, r.method);
    EXPECT_EQ(back.hints, r.hints);
    EXPECT_EQ(back.template_id, r.template_id);
    EXPECT_EQ(back.explanation, r.explanation);
    EXPECT_EQ(back.references, elephant().refs_incorrect);
    EXPECT_EQ(to_json(r)["prompt_sha256"], text::sha256_hex(r.prompt));
}

TEST(Explain, OriginalMethodForcesOriginalTemplate)
{
    auto backend = std::make_shared<ScriptedCompletion>(std::vector<std::string>{" An elephant is much bigger than a fridge."});
    Gateway gw(backend);
    auto r = explain_pair(elephant(), Method::original, {}, TemplateName::default_A, Mode::explain_false, gw);
    EXPECT_EQ(r.template_id.name, TemplateName::original);
    EXPECT_EQ(r.explanation, "An elephant is much bigger than a fridge.");
    EXPECT_EQ(backend->requests.at(0).prompt, "John put an elephant into the fridge. This statement is wrong because:");
    EXPECT_EQ(backend->requests.at(0).max_tokens, 30);
    EXPECT_EQ(backend->requests.at(0).temperature, 0.0);
}

TEST(Explain, EmptyCompletionIsFlaggedNotFatal)
{
    Gateway gw(std::make_shared<ScriptedCompletion>(std::vector<std::string>{"   \n\nlater text"}));
    auto r = explain_pair(elephant(), Method::top1, {"John put a turkey into the fridge."}, TemplateName::default_A,
                          Mode::explain_false, gw);
    EXPECT_TRUE(r.empty_explanation);
    EXPECT_EQ(r.explanation, "");
    EXPECT_EQ(to_json(r)["empty_explanation"], true);
}

TEST(Explain, CompletionCutAtBlankLine)
{
    Gateway gw(std::make_shared<ScriptedCompletion>(
        std::vector<std::string>{" A home is a place for peace, then it is not a place for violence.\n\nNext"}));
    auto r = explain_pair(elephant(), Method::top1, {"x"}, TemplateName::default_A, Mode::explain_false, gw);
    EXPECT_EQ(r.explanation, "A home is a place for peace, then it is not a place for violence.");
}

TEST(Explain, DeterministicOnMock)
{
    Gateway gw(std::make_shared<MockBackend>());
    auto a = explain_pair(elephant(), Method::top1, {"x."}, TemplateName::default_A, Mode::explain_false, gw);
    auto b = explain_pair(elephant(), Method::top1, {"x."}, TemplateName::default_A, Mode::explain_false, gw);
    EXPECT_EQ(a.explanation, b.explanation);
    EXPECT_EQ(a.prompt, b.prompt);
}
