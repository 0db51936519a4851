#include <gtest/gtest.h>

#include <csignal>
#include <set>

#include "fakes.hpp"
#include "neon/evalsvc.hpp"
#include "oracles.hpp"
#include "evalsvc_fixtures.hpp"
#include "test_helpers.hpp"

using namespace neon;
using namespace neon::evalsvc;
using neon::testing::blinding_violations;
using neon::testing::h2h_response;
using neon::testing::h2h_sources;
using neon::testing::scratch;

namespace {

SessionSpec spec(std::size_t n_items, std::uint64_t seed = 1)
{
    SessionSpec s;
    s.n_items = n_items;
    s.seed = seed;
    s.method_a = "neon_icl";
    s.method_b = "retrieval_bm25";
    return s;
}

}  // namespace

TEST(Kappa, PerfectAgreementIsExactlyOne)
{
    RatingMatrix m{{3, 0, 0}, {0, 3, 0}, {0, 0, 3}, {3, 0, 0}};
    EXPECT_EQ(fleiss_kappa(m), 1.0);
}

TEST(Kappa, TwoOneSplitIsMinusHalf)
{
    RatingMatrix m(10, {2, 1});
    EXPECT_NEAR(fleiss_kappa(m), -0.5, 1e-12);
}

TEST(Kappa, MatchesTextbookOracleAndIsPermutationInvariant)
{
    Rng rng(7);
    for (int t = 0; t < 100; ++t) {
        const auto items = 2 + uniform_index(rng, 30);
        const auto cats = 2 + uniform_index(rng, 4);
        RatingMatrix m(items, std::vector<std::size_t>(cats, 0));
        std::vector<std::vector<int>> mi(items, std::vector<int>(cats, 0));
        for (std::size_t i = 0; i < items; ++i) {
            for (int r = 0; r < 3; ++r) {
                const auto c = uniform_index(rng, cats);
                ++m[i][c];
                ++mi[i][c];
            }
        }
        const double k = fleiss_kappa(m);
        std::set<std::size_t> used;
        for (const auto& row : m) {
            for (std::size_t c = 0; c < cats; ++c) {
                if (row[c]) used.insert(c);
            }
        }
        if (used.size() == 1) {
            // The textbook ratio is 0/0 here; unanimity is defined as 1.
            ASSERT_EQ(k, 1.0);
            continue;
        }
        ASSERT_NEAR(k, oracle::fleiss_kappa(mi), 1e-9);
        auto items_perm = m;
        std::shuffle(items_perm.begin(), items_perm.end(), rng);
        ASSERT_EQ(fleiss_kappa(items_perm), k);
        std::vector<std::size_t> cp(cats);
        std::iota(cp.begin(), cp.end(), std::size_t{0});
        std::shuffle(cp.begin(), cp.end(), rng);
        auto cats_perm = m;
        for (std::size_t i = 0; i < items; ++i) {
            for (std::size_t c = 0; c < cats; ++c) cats_perm[i][c] = m[i][cp[c]];
        }
        ASSERT_EQ(fleiss_kappa(cats_perm), k);
    }
}

TEST(Kappa, Errors)
{
    EXPECT_THROW(fleiss_kappa({}), ValidationError);
    EXPECT_THROW(fleiss_kappa({{1, 0}}), ValidationError);
    EXPECT_THROW(fleiss_kappa({{2, 1}, {1, 1}}), ValidationError);
    EXPECT_EQ(fleiss_kappa({{3, 0}, {3, 0}}), 1.0);
}

TEST(Session, HundredItemsThreeAnnotatorsDeterministic)
{
    auto a = create_head_to_head(spec(100), h2h_sources(150));
    auto b = create_head_to_head(spec(100), h2h_sources(150));
    EXPECT_EQ(to_json(a), to_json(b));
    EXPECT_EQ(a.items.size(), 100u);
    EXPECT_EQ(a.annotators.size(), 3u);
    std::set<std::string> sources;
    std::size_t left = 0;
    for (const auto& it : a.items) {
        sources.insert(it.source_id);
        left += it.a_on_left;
    }
    EXPECT_EQ(sources.size(), 100u);
    EXPECT_GT(left, 25u);
    EXPECT_LT(left, 75u);
    for (const auto& [ann, order] : a.orders) {
        std::set<std::size_t> uniq(order.begin(), order.end());
        EXPECT_EQ(uniq.size(), 100u);
    }
    EXPECT_NE(a.orders.at("annotator-1"), a.orders.at("annotator-2"));
    EXPECT_NE(to_json(a), to_json(create_head_to_head(spec(100, 2), h2h_sources(150))));
    EXPECT_EQ(session_from_json(to_json(a)).items.size(), 100u);
}

TEST(Session, InputOrderDoesNotMatter)
{
    auto src = h2h_sources(20);
    auto rev = src;
    std::reverse(rev.begin(), rev.end());
    EXPECT_EQ(to_json(create_head_to_head(spec(10), src)), to_json(create_head_to_head(spec(10), rev)));
}

TEST(Session, SpecValidation)
{
    EXPECT_THROW(create_head_to_head(spec(10), h2h_sources(5)), ValidationError);
    auto s = spec(2);
    s.annotators = {"a", "b"};
    EXPECT_THROW(create_head_to_head(s, h2h_sources(5)), ValidationError);
    s.annotators = {"a", "a", "b"};
    EXPECT_THROW(create_head_to_head(s, h2h_sources(5)), ValidationError);
    s = spec(2);
    s.method_b.clear();
    EXPECT_THROW(create_head_to_head(s, h2h_sources(5)), ValidationError);
    s = spec(2);
    s.session_id = "../escape";
    EXPECT_THROW(create_head_to_head(s, h2h_sources(5)), ValidationError);
    auto dup = h2h_sources(3);
    dup[1].source_id = dup[0].source_id;
    EXPECT_THROW(create_head_to_head(spec(2), dup), ValidationError);
    EXPECT_THROW(create_quality(spec(1), {QualitySource{"x", "s.", std::nullopt, {}}}), ValidationError);
}

TEST(Responses, Validation)
{
    EXPECT_NO_THROW(validate_responses(Protocol::head_to_head, h2h_response("left", "tie")));
    EXPECT_THROW(validate_responses(Protocol::head_to_head, json{{"preferred", "left"}}), ValidationError);
    EXPECT_THROW(validate_responses(Protocol::head_to_head, h2h_response("up", "tie")), ValidationError);
    auto extra = h2h_response("left", "tie");
    extra["comment"] = "x";
    EXPECT_THROW(validate_responses(Protocol::head_to_head, extra), ValidationError);
    json q{{"acceptability", "accept"}, {"grammaticality", 3}, {"factuality", 1}, {"diversity", 2}, {"commonality", 2}};
    EXPECT_NO_THROW(validate_responses(Protocol::instantiation_quality, q));
    q["diversity"] = 4;
    EXPECT_THROW(validate_responses(Protocol::instantiation_quality, q), ValidationError);
    q["diversity"] = "2";
    EXPECT_THROW(validate_responses(Protocol::instantiation_quality, q), ValidationError);
}

TEST(Store, BlindedServingAndSubmissionErrors)
{
    auto dir = scratch("store_blind");
    Store store(dir);
    auto s = store.create(create_head_to_head(spec(6), h2h_sources(10)));
    EXPECT_NO_THROW(store.create(s));
    auto other = s;
    other.seed = 99;
    EXPECT_THROW(store.create(other), ValidationError);

    std::size_t served = 0;
    for (const auto& a : s.annotators) {
        for (;;) {
            auto p = store.next(s.session_id, a);
            EXPECT_TRUE(blinding_violations(p, s).empty()) << p.dump();
            if (p["done"]) {
                EXPECT_EQ(p["progress"]["done"], 6);
                break;
            }
            ++served;
            const auto& item = s.item(p["item_id"].get<std::string>());
            EXPECT_EQ(p["explanation_left"], item.a_on_left ? item.explanation_a : item.explanation_b);
            store.submit(s.session_id, a, p["item_id"].get<std::string>(), h2h_response("left", "right"));
        }
    }
    EXPECT_EQ(served, 18u);
    EXPECT_THROW(store.submit(s.session_id, "annotator-1", "item-1", h2h_response("left", "tie")), DuplicateSubmission);
    EXPECT_THROW(store.submit(s.session_id, "nobody", "item-1", h2h_response("left", "tie")), NotFound);
    EXPECT_THROW(store.submit(s.session_id, "annotator-1", "item-99", h2h_response("left", "tie")), NotFound);
    EXPECT_THROW(store.next("missing", "annotator-1"), NotFound);
}

// Recount oracle: tally each vote from the raw submissions independently of
// build_report, mapping sides through the hidden assignment.
TEST(Report, MatchesRecountOracle)
{
    auto dir = scratch("store_report");
    Store store(dir);
    auto s = store.create(create_head_to_head(spec(12, 5), h2h_sources(20)));
    Rng rng(3);
    std::map<std::string, std::array<int, 3>> recount;
    for (const auto& a : s.annotators) {
        for (const auto& it : s.items) {
            auto r = h2h_response(std::string(sides[uniform_index(rng, 3)]), std::string(sides[uniform_index(rng, 3)]));
            store.submit(s.session_id, a, it.item_id, r);
            for (auto aspect : aspects) {
                const auto v = r[std::string(aspect)].get<std::string>();
                int col = v == "tie" ? 1 : ((v == "left") == it.a_on_left ? 0 : 2);
                ++recount[std::string(aspect)][col];
            }
        }
    }
    auto rep = store.report(s.session_id, false);
    EXPECT_FALSE(rep.partial);
    ASSERT_EQ(rep.summaries.size(), 2u);
    for (const auto& sum : rep.summaries) {
        double pct = 0;
        for (std::size_t c = 0; c < 3; ++c) {
            EXPECT_EQ(sum.counts[c], static_cast<std::size_t>(recount[sum.name][c]));
            EXPECT_NEAR(sum.percent[c], 100.0 * recount[sum.name][c] / 36.0, 1e-12);
            pct += sum.percent[c];
        }
        EXPECT_NEAR(pct, 100.0, 0.01);
        EXPECT_EQ(sum.kappa_items, 12u);
        ASSERT_TRUE(sum.kappa);
    }
    auto j = to_json(rep);
    EXPECT_EQ(j["method_a"], "neon_icl");
    EXPECT_EQ(j["aspects"][0]["votes"], 36);
}

TEST(Report, AllTieAndPartial)
{
    auto dir = scratch("store_tie");
    Store store(dir);
    auto s = store.create(create_head_to_head(spec(4), h2h_sources(4)));
    EXPECT_THROW(store.report(s.session_id, true), ValidationError);
    store.submit(s.session_id, "annotator-1", "item-1", h2h_response("tie", "tie"));
    EXPECT_THROW(store.report(s.session_id, false), ValidationError);
    auto partial = store.report(s.session_id, true);
    EXPECT_TRUE(partial.partial);
    EXPECT_EQ(partial.summaries[0].kappa_items, 0u);
    EXPECT_FALSE(partial.summaries[0].kappa);
    for (const auto& a : s.annotators) {
        for (const auto& it : s.items) {
            if (a == "annotator-1" && it.item_id == "item-1") continue;
            store.submit(s.session_id, a, it.item_id, h2h_response("tie", "tie"));
        }
    }
    auto rep = store.report(s.session_id, false);
    EXPECT_EQ(rep.summaries[0].percent, (std::vector<double>{0, 100, 0}));
    ASSERT_TRUE(rep.summaries[0].kappa);
    EXPECT_EQ(*rep.summaries[0].kappa, 1.0);
}

TEST(Report, QualityProtocolMeans)
{
    auto dir = scratch("store_quality");
    Store store(dir);
    std::vector<QualitySource> src;
    for (int i = 0; i < 5; ++i) src.push_back({"q" + std::to_string(i), "S.", std::nullopt, {"a.", "b."}});
    auto sp = spec(5);
    sp.method_a.clear();
    sp.method_b.clear();
    auto s = store.create(create_quality(sp, src));
    for (const auto& a : s.annotators) {
        for (const auto& it : s.items) {
            auto p = Store::served_payload(s, it, 0);
            EXPECT_TRUE(blinding_violations(p, s).empty());
            store.submit(s.session_id, a, it.item_id,
                         json{{"acceptability", a == "annotator-3" ? "reject" : "accept"},
                              {"grammaticality", 3},
                              {"factuality", 2},
                              {"diversity", 1},
                              {"commonality", a == "annotator-1" ? 1 : 3}});
        }
    }
    auto rep = store.report(s.session_id, false);
    ASSERT_EQ(rep.summaries.size(), 5u);
    EXPECT_NEAR(rep.summaries[0].percent[0], 200.0 / 3, 1e-9);
    EXPECT_EQ(*rep.summaries[1].mean, 3.0);
    EXPECT_NEAR(*rep.summaries[4].mean, 7.0 / 3, 1e-12);
}

TEST(Store, ReloadsAndTruncatesTornTail)
{
    auto dir = scratch("store_torn");
    std::string sid;
    {
        Store store(dir);
        sid = store.create(create_head_to_head(spec(3), h2h_sources(3))).session_id;
        store.submit(sid, "annotator-1", "item-1", h2h_response("left", "left"));
        store.submit(sid, "annotator-2", "item-1", h2h_response("right", "tie"));
    }
    {
        std::ofstream out(dir / "events.jsonl", std::ios::app);
        out << R"({"ts":"x","session":")" << sid << R"(","annotator":"annotator-3","item":"item-1","respo)";
    }
    Store store(dir);
    auto subs = store.submissions(sid);
    EXPECT_EQ(subs.size(), 2u);
    EXPECT_EQ(subs["annotator-2"]["item-1"]["preferred"], "right");
    EXPECT_NO_THROW(store.submit(sid, "annotator-3", "item-1", h2h_response("tie", "tie")));
    Store again(dir);
    EXPECT_EQ(again.submissions(sid).size(), 3u);
}

TEST(Filter, KeepsAboveThresholdAndSkipsWithoutClassifier)
{
    std::vector<InstantiationSet> sets;
    for (int i = 0; i < 4; ++i) {
        InstantiationSet s{"p" + std::to_string(i), {}};
        for (int j = 0; j < 6; ++j) {
            Instantiation h;
            h.source_id = s.source_id;
            h.sample_index = j;
            h.text = (j < i * 2 ? "good " : "bad ") + std::to_string(j);
            s.instantiations.push_back(h);
        }
        sets.push_back(s);
    }
    Gateway gw(std::make_shared<fakes::PredicateClassifier>([](std::string_view s) { return s.starts_with("good"); }));
    auto r = filter_by_classifier(sets, Task::comve, gw, 0.5, 5);
    EXPECT_FALSE(r.skipped);
    EXPECT_EQ(r.top1_survivors, (std::vector<std::string>{"p1", "p2", "p3"}));
    EXPECT_EQ(r.ensemble_survivors, (std::vector<std::string>{"p3"}));
    EXPECT_EQ(r.sets[2].instantiations.size(), 4u);
    EXPECT_EQ(*r.sets[2].instantiations[0].classifier_prob, 1.0);

    Gateway none(std::make_shared<fakes::StubBackend>());
    auto skip = filter_by_classifier(sets, Task::comve, none);
    EXPECT_TRUE(skip.skipped);
    EXPECT_TRUE(skip.sets.empty());
    EXPECT_EQ(to_json(skip)["skipped"], true);
}

TEST(Http, InProcessServerStatusCodes)
{
    auto dir = scratch("http_codes");
    Store store(dir);
    Server server(store);
    const int port = server.start();
    httplib::Client c("127.0.0.1", port);

    json body{{"protocol", "head_to_head"}, {"n_items", 3}, {"seed", 4}, {"method_a", "neon_icl"},
              {"method_b", "top1"}, {"sources", json::array()}};
    for (const auto& s : h2h_sources(5)) body["sources"].push_back(to_json(s));
    auto created = c.Post("/sessions", body.dump(), "application/json");
    ASSERT_TRUE(created);
    ASSERT_EQ(created->status, 201);
    const auto sid = json::parse(created->body)["session_id"].get<std::string>();
    EXPECT_EQ(json::parse(created->body)["pending"], 9);

    auto next = c.Get("/sessions/" + sid + "/next?annotator=annotator-1");
    ASSERT_EQ(next->status, 200);
    const auto item = json::parse(next->body)["item_id"].get<std::string>();
    json sub{{"annotator", "annotator-1"}, {"item_id", item}, {"responses", h2h_response("left", "tie")}};
    EXPECT_EQ(c.Post("/sessions/" + sid + "/submit", sub.dump(), "application/json")->status, 200);
    EXPECT_EQ(c.Post("/sessions/" + sid + "/submit", sub.dump(), "application/json")->status, 409);
    sub["responses"] = json{{"preferred", "left"}};
    sub["item_id"] = item == "item-2" ? "item-3" : "item-2";
    EXPECT_EQ(c.Post("/sessions/" + sid + "/submit", sub.dump(), "application/json")->status, 400);
    EXPECT_EQ(c.Post("/sessions/" + sid + "/submit", "{not json", "application/json")->status, 400);
    EXPECT_EQ(c.Get("/sessions/nope/next?annotator=annotator-1")->status, 404);
    EXPECT_EQ(c.Get("/sessions/" + sid + "/next")->status, 400);
    EXPECT_EQ(c.Get("/sessions/" + sid + "/report")->status, 400);
    auto partial = c.Get("/sessions/" + sid + "/report?partial=1");
    ASSERT_EQ(partial->status, 200);
    EXPECT_EQ(json::parse(partial->body)["partial"], true);
    server.stop();
}

// Three simulated annotators against a real server process that is killed
// with SIGKILL after every few acknowledged submissions and restarted.
TEST(Http, CrashRestartLosesNoAcknowledgedEvents)
{
    auto work = scratch("crash");
    const auto store_dir = work / "store";
    std::string sid;
    std::map<std::string, json> acked;  // annotator/item -> responses
    Rng rng(12);
    {
        json body{{"protocol", "head_to_head"}, {"n_items", 6}, {"seed", 8}, {"method_a", "neon_icl"},
                  {"method_b", "retrieval_bm25"}, {"sources", json::array()}};
        for (const auto& s : h2h_sources(10)) body["sources"].push_back(to_json(s));
        neon::testing::EvalServer srv(store_dir, work);
        httplib::Client c("127.0.0.1", srv.port());
        auto r = c.Post("/sessions", body.dump(), "application/json");
        ASSERT_TRUE(r);
        ASSERT_EQ(r->status, 201);
        sid = json::parse(r->body)["session_id"].get<std::string>();
        srv.kill(SIGKILL);
    }
    const Session session = Store(store_dir).session(sid);
    bool done = false;
    while (!done) {
        neon::testing::EvalServer srv(store_dir, work);
        httplib::Client c("127.0.0.1", srv.port());
        done = true;
        int this_round = 0;
        for (const auto& a : session.annotators) {
            for (int k = 0; k < 2; ++k) {
                auto n = c.Get("/sessions/" + sid + "/next?annotator=" + a);
                ASSERT_TRUE(n);
                auto p = json::parse(n->body);
                ASSERT_TRUE(blinding_violations(p, session).empty()) << p.dump();
                if (p["done"]) break;
                done = false;
                auto resp = h2h_response(std::string(sides[uniform_index(rng, 3)]), "tie");
                json sub{{"annotator", a}, {"item_id", p["item_id"]}, {"responses", resp}};
                auto s = c.Post("/sessions/" + sid + "/submit", sub.dump(), "application/json");
                ASSERT_TRUE(s);
                ASSERT_EQ(s->status, 200);
                acked[a + "/" + p["item_id"].get<std::string>()] = resp;
                ++this_round;
            }
        }
        srv.kill(SIGKILL);
        if (this_round == 0) break;
    }
    EXPECT_EQ(acked.size(), 18u);
    Store reopened(store_dir);
    auto subs = reopened.submissions(sid);
    std::size_t n = 0;
    for (const auto& [a, items] : subs) {
        for (const auto& [item, resp] : items) {
            ++n;
            EXPECT_EQ(acked.at(a + "/" + item), resp);
        }
    }
    EXPECT_EQ(n, acked.size());
    auto rep = reopened.report(sid, false);
    for (const auto& s : rep.summaries) {
        double pct = 0;
        for (double p : s.percent) pct += p;
        EXPECT_NEAR(pct, 100.0, 0.01);
    }
}
