#include <gtest/gtest.h>

#include "fakes.hpp"
#include "neon/metrics.hpp"
#include "neon/mock_backend.hpp"
#include "oracles.hpp"

using namespace neon;
using namespace neon::metrics;

namespace {

std::shared_ptr<fakes::TableEmbedder> embedder()
{
    return std::make_shared<fakes::TableEmbedder>(std::map<std::string, std::vector<double>>{
        {"x", {1, 0, 0}}, {"y", {0, 1, 0}}, {"z", {0.6, 0.8, 0}}, {"w", {0, 0, 1}}, {"v", {-1, 0, 0}},
        {"x y", {1, 1, 0}}, {"z w", {0, 1, 1}}, {"v", {-1, 0, 0}}, {"x w", {1, 0, 1}}});
}

double cos(const std::vector<double>& a, const std::vector<double>& b)
{
    double d = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return d / std::sqrt(na * nb);
}

// Explicit similarity matrix, row and column maxima.
double matrix_f1(const std::vector<std::vector<double>>& c, const std::vector<std::vector<double>>& r)
{
    std::vector<std::vector<double>> m(c.size(), std::vector<double>(r.size()));
    for (std::size_t i = 0; i < c.size(); ++i) {
        for (std::size_t j = 0; j < r.size(); ++j) m[i][j] = cos(c[i], r[j]);
    }
    double p = 0, rr = 0;
    for (std::size_t i = 0; i < c.size(); ++i) p += *std::max_element(m[i].begin(), m[i].end());
    for (std::size_t j = 0; j < r.size(); ++j) {
        double best = -2;
        for (std::size_t i = 0; i < c.size(); ++i) best = std::max(best, m[i][j]);
        rr += best;
    }
    p /= static_cast<double>(c.size());
    rr /= static_cast<double>(r.size());
    return std::max(0.0, 100 * 2 * p * rr / (p + rr));
}

}  // namespace

TEST(Bleu, MatchesBruteForceOracle)
{
    int nonzero = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        auto f = oracle::bleu_fixture(s);
        const double got = bleu(f.candidates, f.references);
        ASSERT_NEAR(got, oracle::bleu(f.candidates, f.references), 1e-9) << "fixture " << s;
        nonzero += got > 0;
    }
    EXPECT_GE(nonzero, 10);
}

TEST(Bleu, IdentityAndDisjoint)
{
    std::vector<std::string> c{"an elephant is much bigger than a fridge ."};
    std::vector<std::vector<std::string>> r{{"An elephant is much bigger than a fridge."}};
    EXPECT_NEAR(bleu(c, r), 100.0, 1e-9);
    std::vector<std::vector<std::string>> d{{"cats purr softly at night"}};
    EXPECT_EQ(bleu(c, d), 0.0);
}

TEST(Bleu, ClippingAndBrevity)
{
    // "the the the the" vs "the cat": unigram matches clip at 1, no bigram match.
    auto s = bleu_stats(text::metric_tokenize("the the the the"), std::vector<Tokens>{text::metric_tokenize("the cat")});
    EXPECT_EQ(s.matches[0], 1u);
    EXPECT_EQ(s.totals[0], 4u);
    EXPECT_EQ(s.matches[1], 0u);
    // Ties in closest reference length go to the shorter one.
    std::vector<Tokens> refs{{"a", "b"}, {"a", "b", "c", "d"}};
    EXPECT_EQ(closest_reference_length(3, refs), 2u);
}

TEST(Bleu, Errors)
{
    std::vector<std::string> c{"a"};
    std::vector<std::vector<std::string>> none;
    EXPECT_THROW(bleu(c, none), ValidationError);
    std::vector<std::vector<std::string>> empty_refs{{}};
    EXPECT_THROW(bleu(c, empty_refs), ValidationError);
}

TEST(Rouge, LcsExample)
{
    std::vector<std::string> ref{"a c"};
    auto r = rouge("a b c", ref);
    EXPECT_NEAR(r.rougeL, 80.0, 1e-12);
    EXPECT_NEAR(r.rouge1, 80.0, 1e-12);
    EXPECT_EQ(r.rouge2, 0.0);
}

TEST(Rouge, IdentityAndDisjoint)
{
    std::vector<std::string> ref{"He drinks milk."};
    auto same = rouge("he drinks milk .", ref);
    EXPECT_NEAR(same.rouge1, 100, 1e-12);
    EXPECT_NEAR(same.rouge2, 100, 1e-12);
    EXPECT_NEAR(same.rougeL, 100, 1e-12);
    auto none = rouge("cats purr", ref);
    EXPECT_EQ(none.rouge1 + none.rouge2 + none.rougeL, 0.0);
}

TEST(Rouge, MaxOverReferences)
{
    std::vector<std::string> refs{"x y z", "a b c"};
    EXPECT_NEAR(rouge("a b c", refs).rougeL, 100, 1e-12);
}

TEST(Rouge, LcsMatchesExhaustiveSubsequenceSearch)
{
    Rng rng(3);
    const std::vector<std::string> vocab{"a", "b", "c"};
    for (int t = 0; t < 200; ++t) {
        auto a = text::metric_tokenize(oracle::random_text(rng, 1, 8, vocab));
        auto b = text::metric_tokenize(oracle::random_text(rng, 1, 8, vocab));
        std::size_t best = 0;
        for (unsigned mask = 1; mask < (1u << a.size()); ++mask) {
            Tokens sub;
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (mask & (1u << i)) sub.push_back(a[i]);
            }
            std::size_t j = 0;
            for (std::size_t i = 0; i < b.size() && j < sub.size(); ++i) j += b[i] == sub[j];
            if (j == sub.size()) best = std::max(best, sub.size());
        }
        ASSERT_EQ(lcs_length(a, b), best);
    }
}

TEST(BertScore, MatchesPairwiseMatrixOracle)
{
    auto table = embedder();
    Gateway gw(table);
    const std::vector<std::pair<std::string, std::vector<std::string>>> cases{
        {"x y", {"z w"}}, {"x", {"y", "z"}}, {"x z w", {"y x"}}, {"z", {"z"}}};
    for (const auto& [cand, refs] : cases) {
        auto ce = table->embed(std::vector<std::string>{cand}, Granularity::token).vectors;
        double best = 0;
        for (const auto& r : refs) best = std::max(best, matrix_f1(ce, table->embed(std::vector<std::string>{r}, Granularity::token).vectors));
        EXPECT_NEAR(bertscore_f1(cand, refs, gw), best, 1e-9) << cand;
    }
    EXPECT_NEAR(bertscore_f1("z", std::vector<std::string>{"z"}, gw), 100.0, 1e-9);
    // Opposite vectors floor at zero.
    EXPECT_EQ(bertscore_f1("v", std::vector<std::string>{"x"}, gw), 0.0);
}

TEST(Sbert, MaxCosineOverReferences)
{
    Gateway gw(embedder());
    std::vector<std::string> refs{"z w", "x w", "v"};
    const double expected = 100 * std::max({cos({1, 1, 0}, {0, 1, 1}), cos({1, 1, 0}, {1, 0, 1}), cos({1, 1, 0}, {-1, 0, 0})});
    EXPECT_NEAR(sbert_cosine("x y", refs, gw), expected, 1e-9);
    EXPECT_EQ(sbert_cosine("v", std::vector<std::string>{"x y"}, gw), 0.0);
}

TEST(Embedding, DimensionMismatchIsBackendError)
{
    std::vector<std::vector<double>> a{{1, 0}}, b{{1, 0, 0}};
    EXPECT_THROW(greedy_match_f1(a, b), BackendError);
}

TEST(Properties, RangeSymmetryAndWhitespace)
{
    Gateway gw(std::make_shared<MockBackend>());
    Rng rng(11);
    for (int t = 0; t < 30; ++t) {
        const auto cand = oracle::random_text(rng, 1, 10);
        std::vector<std::string> refs{oracle::random_text(rng, 1, 10), oracle::random_text(rng, 1, 10),
                                      oracle::random_text(rng, 1, 10)};
        std::vector<std::string> rev(refs.rbegin(), refs.rend());
        const auto r = rouge(cand, refs);
        const double bs = bertscore_f1(cand, refs, gw);
        const double sb = sbert_cosine(cand, refs, gw);
        const double bl = bleu(std::vector<std::string>{cand}, std::vector<std::vector<std::string>>{refs});
        for (double v : {r.rouge1, r.rouge2, r.rougeL, bs, sb, bl}) {
            ASSERT_GE(v, 0.0);
            ASSERT_LE(v, 100.0);
        }
        ASSERT_EQ(rouge(cand, rev).rougeL, r.rougeL);
        ASSERT_EQ(bertscore_f1(cand, rev, gw), bs);
        ASSERT_EQ(sbert_cosine(cand, rev, gw), sb);
        ASSERT_EQ(bleu(std::vector<std::string>{cand}, std::vector<std::vector<std::string>>{rev}), bl);
        const auto padded = "  " + cand + " \t";
        ASSERT_EQ(rouge(padded, refs).rouge1, r.rouge1);
        ASSERT_EQ(bertscore_f1(padded, refs, gw), bs);
        ASSERT_EQ(sbert_cosine(padded, refs, gw), sb);
    }
}

TEST(Properties, IdentityScoresHundredOnAllFour)
{
    Gateway gw(std::make_shared<MockBackend>());
    const std::string s = "An elephant is much bigger than a fridge.";
    std::vector<std::string> refs{s};
    EXPECT_NEAR(bleu(refs, std::vector<std::vector<std::string>>{refs}), 100, 1e-9);
    EXPECT_NEAR(rouge(s, refs).rougeL, 100, 1e-9);
    EXPECT_NEAR(bertscore_f1(s, refs, gw), 100, 1e-9);
    EXPECT_NEAR(sbert_cosine(s, refs, gw), 100, 1e-9);
}

TEST(Report, EvaluateRunMatchesPerRecordComputation)
{
    Gateway gw(std::make_shared<MockBackend>());
    Rng rng(5);
    std::vector<explain::ExplanationRecord> recs;
    for (int i = 0; i < 13; ++i) {
        explain::ExplanationRecord r;
        r.source_id = "r" + std::to_string(i);
        r.method = explain::Method::neon_icl;
        r.explanation = i == 4 ? "" : oracle::random_text(rng, 3, 12);
        r.references = {oracle::random_text(rng, 3, 12), oracle::random_text(rng, 3, 12)};
        recs.push_back(r);
    }
    EvaluateOptions opts;
    opts.keep_rows = true;
    opts.embed_batch = 5;
    opts.threads = 3;
    auto rep = evaluate_run(recs, gw, opts);
    EXPECT_EQ(rep.method, "neon_icl");
    EXPECT_EQ(rep.n_records, 13u);
    ASSERT_TRUE(rep.per_record);

    std::vector<std::string> cands;
    std::vector<std::vector<std::string>> refs;
    double r1 = 0, bs = 0, sb = 0;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        cands.push_back(recs[i].explanation);
        refs.push_back(recs[i].references);
        r1 += rouge(recs[i].explanation, recs[i].references).rouge1;
        const double b = recs[i].explanation.empty() ? 0.0 : bertscore_f1(recs[i].explanation, recs[i].references, gw);
        EXPECT_NEAR((*rep.per_record)[i].bertscore_f1, b, 1e-9);
        bs += b;
        sb += recs[i].explanation.empty() ? 0.0 : sbert_cosine(recs[i].explanation, recs[i].references, gw);
    }
    EXPECT_NEAR(rep.bleu, oracle::bleu(cands, refs), 1e-9);
    EXPECT_NEAR(rep.rouge.rouge1, r1 / 13, 1e-9);
    EXPECT_NEAR(rep.bertscore_f1, bs / 13, 1e-9);
    EXPECT_NEAR(rep.sbert_cosine, sb / 13, 1e-9);

    auto again = metric_report_from_json(to_json(rep));
    EXPECT_EQ(again.bleu, rep.bleu);
    EXPECT_EQ(again.per_record->size(), 13u);
    EXPECT_EQ(aggregate("neon_icl", *again.per_record).bleu, rep.bleu);
}

TEST(Report, RejectsMixedOrEmptyInput)
{
    Gateway gw(std::make_shared<MockBackend>());
    EXPECT_THROW(evaluate_run(std::vector<explain::ExplanationRecord>{}, gw), ValidationError);
    explain::ExplanationRecord a;
    a.references = {"x"};
    auto b = a;
    b.method = explain::Method::top1;
    EXPECT_THROW(evaluate_run(std::vector{a, b}, gw), ValidationError);
    b = a;
    b.references.clear();
    EXPECT_THROW(evaluate_run(std::vector{a, b}, gw), ValidationError);
}

TEST(Report, CsvQuoting)
{
    EXPECT_EQ(csv_quote("plain"), "plain");
    EXPECT_EQ(csv_quote("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_quote("say \"hi\""), "\"say \"\"hi\"\"\"");
    EXPECT_EQ(fixed(12.345678), "12.35");
}
