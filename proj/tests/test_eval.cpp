#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "statner/corpus.hpp"
#include "statner/eval.hpp"
#include "statner/stats.hpp"
#include "support/desk.hpp"
#include "support/synth.hpp"

namespace {

statner::AnnotatedSentence sent(
    std::string id, std::vector<std::string> tokens,
    const std::vector<std::tuple<std::size_t, std::size_t, std::string>>& spans) {
    statner::AnnotatedSentence s;
    s.id = std::move(id);
    s.tokens = std::move(tokens);
    for (const auto& [start, end, etype] : spans) {
        statner::Mention m;
        m.start = start;
        m.end = end;
        m.etype = etype;
        m.surface = statner::surface_of(s.tokens, start, end);
        s.mentions.push_back(std::move(m));
    }
    return s;
}

}  // namespace

TEST_CASE("strict micro F1 counts exact (start, end, type) matches only", "[eval]") {
    const std::vector<statner::AnnotatedSentence> gold = {
        sent("s1", {"a", "b", "c", "d"}, {{0, 1, "X"}, {3, 3, "Y"}}),
        sent("s2", {"e", "f"}, {{0, 0, "Z"}}),
    };
    const std::vector<statner::AnnotatedSentence> pred = {
        sent("s1", {"a", "b", "c", "d"}, {{0, 1, "X"}, {2, 3, "Y"}}),
        sent("s2", {"e", "f"}, {{0, 0, "W"}, {1, 1, "Z"}}),
    };

    const statner::EvalResult r = statner::strict_f1(gold, pred);
    CHECK(r.tp == 1);
    CHECK(r.fp == 3);
    CHECK(r.fn == 2);
    CHECK(r.precision() == Catch::Approx(1.0 / 4.0));
    CHECK(r.recall() == Catch::Approx(1.0 / 3.0));
    CHECK(r.f1() == Catch::Approx(2.0 / 7.0));
}

TEST_CASE("empty evaluation yields zero scores without dividing by zero", "[eval]") {
    const statner::EvalResult r;
    CHECK(r.precision() == 0.0);
    CHECK(r.recall() == 0.0);
    CHECK(r.f1() == 0.0);
}

TEST_CASE("perfect desk predictions score 1.0", "[eval]") {
    const auto gold = desk::test();
    const statner::EvalResult r = statner::strict_f1(gold, gold);
    CHECK(r.tp == 3);
    CHECK(r.fp == 0);
    CHECK(r.fn == 0);
    CHECK(r.f1() == 1.0);
}

TEST_CASE("sentence pairing validates corpus shape", "[eval]") {
    const std::vector<statner::AnnotatedSentence> gold = {
        sent("s1", {"a", "."}, {}),
        sent("s2", {"b", "."}, {}),
    };

    SECTION("size mismatch") {
        const std::vector<statner::AnnotatedSentence> pred = {sent("s1", {"a", "."}, {})};
        REQUIRE_THROWS_AS(statner::strict_f1(gold, pred), statner::DataError);
        REQUIRE_THROWS_WITH(
            statner::strict_f1(gold, pred),
            Catch::Matchers::ContainsSubstring("differ in size: gold 2, predicted 1"));
    }

    SECTION("missing id") {
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "."}, {}),
            sent("s3", {"b", "."}, {}),
        };
        REQUIRE_THROWS_WITH(statner::strict_f1(gold, pred),
                            Catch::Matchers::ContainsSubstring("missing for sentence 's2'"));
    }

    SECTION("prediction order does not matter") {
        std::vector<statner::AnnotatedSentence> pred = {
            sent("s2", {"b", "."}, {{0, 0, "X"}}),
            sent("s1", {"a", "."}, {}),
        };
        const statner::EvalResult r = statner::strict_f1(gold, pred);
        CHECK(r.fp == 1);
        CHECK(r.fn == 0);
    }
}

TEST_CASE("strict F1 matches the oracle on randomly perturbed corpora", "[eval]") {
    for (const std::uint64_t corpus_seed : {11ull, 22ull, 33ull}) {
        const auto gold = synth::corpus({.sentences = 60, .vocab = 30, .seed = corpus_seed});
        for (std::uint64_t perturb_seed = 1; perturb_seed <= 5; ++perturb_seed) {
            const auto pred = synth::perturb(gold, perturb_seed);
            const statner::EvalResult got = statner::strict_f1(gold, pred);
            const synth::OracleF1 want = synth::f1_oracle(gold, pred);
            INFO("corpus seed " << corpus_seed << ", perturb seed " << perturb_seed);
            REQUIRE(got.tp == want.tp);
            REQUIRE(got.fp == want.fp);
            REQUIRE(got.fn == want.fn);
            REQUIRE(got.f1() == want.f1());
        }
    }
}

TEST_CASE("error classification partitions strict errors", "[eval]") {
    SECTION("exact-span type mismatch is consumed first") {
        const std::vector<statner::AnnotatedSentence> gold = {
            sent("s1", {"a", "b", "c"}, {{0, 1, "PER"}})};
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "b", "c"}, {{0, 1, "LOC"}})};
        const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
        CHECK(b.type_errors == 1);
        CHECK(b.paired_fp_fn == 0);
        CHECK(b.unique_fp == 0);
        CHECK(b.unique_fn == 0);
        CHECK(b.multi_fp == 0);
        CHECK(b.multi_fn == 0);
        CHECK(b.total_fp == 1);
        CHECK(b.total_fn == 1);
        CHECK(b.reconciles());
    }

    SECTION("overlapping boundary error pairs one FP with one FN") {
        const std::vector<statner::AnnotatedSentence> gold = {
            sent("s1", {"a", "b", "c", "d"}, {{0, 1, "PER"}})};
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "b", "c", "d"}, {{0, 2, "PER"}})};
        const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
        CHECK(b.type_errors == 0);
        CHECK(b.paired_fp_fn == 1);
        CHECK(b.total_fp == 1);
        CHECK(b.total_fn == 1);
        CHECK(b.reconciles());
    }

    SECTION("isolated errors are unique") {
        const std::vector<statner::AnnotatedSentence> gold = {
            sent("s1", {"a", "b", "c", "d", "e", "f"}, {{0, 0, "PER"}, {5, 5, "LOC"}})};
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "b", "c", "d", "e", "f"}, {{0, 0, "PER"}, {3, 3, "ORG"}})};
        const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
        CHECK(b.type_errors == 0);
        CHECK(b.paired_fp_fn == 0);
        CHECK(b.unique_fp == 1);
        CHECK(b.unique_fn == 1);
        CHECK(b.total_fp == 1);
        CHECK(b.total_fn == 1);
        CHECK(b.reconciles());
    }

    SECTION("components with three or more members count as multi") {
        const std::vector<statner::AnnotatedSentence> gold = {
            sent("s1", {"a", "b", "c", "d", "e"}, {{0, 1, "PER"}, {2, 3, "LOC"}})};
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "b", "c", "d", "e"}, {{1, 2, "PER"}})};
        const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
        CHECK(b.multi_fp == 1);
        CHECK(b.multi_fn == 2);
        CHECK(b.paired_fp_fn == 0);
        CHECK(b.unique_fp == 0);
        CHECK(b.unique_fn == 0);
        CHECK(b.total_fp == 1);
        CHECK(b.total_fn == 2);
        CHECK(b.reconciles());
    }

    SECTION("consumed false negatives do not join the overlap graph") {
        const std::vector<statner::AnnotatedSentence> gold = {
            sent("s1", {"a", "b", "c", "d"}, {{0, 1, "PER"}})};
        const std::vector<statner::AnnotatedSentence> pred = {
            sent("s1", {"a", "b", "c", "d"}, {{0, 1, "LOC"}, {1, 2, "ORG"}})};
        const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
        CHECK(b.type_errors == 1);
        CHECK(b.unique_fp == 1);
        CHECK(b.paired_fp_fn == 0);
        CHECK(b.total_fp == 2);
        CHECK(b.total_fn == 1);
        CHECK(b.reconciles());
    }

    SECTION("random perturbations always reconcile with the strict counts") {
        const auto gold = synth::corpus({.sentences = 60, .vocab = 25, .seed = 5});
        for (std::uint64_t seed = 100; seed < 200; ++seed) {
            const auto pred = synth::perturb(gold, seed);
            const statner::ErrorBreakdown b = statner::classify_errors(gold, pred);
            const statner::EvalResult r = statner::strict_f1(gold, pred);
            INFO("perturb seed " << seed);
            REQUIRE(b.reconciles());
            REQUIRE(b.total_fp == r.fp);
            REQUIRE(b.total_fn == r.fn);
        }
    }
}

TEST_CASE("seen/unseen breakdown on the desk corpus", "[eval]") {
    const auto train = desk::train();
    const auto gold = desk::test();
    const auto stats = statner::TokenStats::build(train, statner::StatsConfig{2});

    const statner::SeenUnseenBreakdown b =
        statner::seen_unseen_breakdown(gold, gold, train, stats);
    // "Italian" and "Wenchang" repeat training mentions; "Bitar" is a novel token.
    CHECK(b.seen.tp == 2);
    CHECK(b.seen.fp == 0);
    CHECK(b.seen.fn == 0);
    CHECK(b.unseen_unseen_tokens.tp == 1);
    CHECK(b.unseen_unseen_tokens.fn == 0);
    CHECK(b.unseen_seen_tokens.tp == 0);
    CHECK(b.unseen_seen_tokens.fn == 0);
    CHECK(b.residual_fp == 0);
}

TEST_CASE("seen/unseen breakdown buckets mentions and attributes FPs", "[eval]") {
    const std::vector<statner::AnnotatedSentence> train = {
        sent("tr1", {"Alpha", "Beta", "Gamma", "Hub", "Port", "."},
             {{0, 0, "PER"}, {2, 2, "LOC"}, {4, 4, "ORG"}}),
    };
    const auto stats = statner::TokenStats::build(train, statner::StatsConfig{2});

    const std::vector<statner::AnnotatedSentence> gold = {
        sent("g1", {"Alpha", "likes", "Gamma", "Delta", "."},
             {{0, 0, "PER"}, {2, 2, "MISC"}, {3, 3, "ORG"}}),
        sent("g2", {"Hub", "Port", "boats", "dock", "."}, {{1, 1, "ORG"}}),
        sent("g3", {"Alpha", "x", "Gamma", "Gamma", "y", "."},
             {{0, 0, "PER"}, {2, 3, "LOC"}}),
    };
    const std::vector<statner::AnnotatedSentence> pred = {
        // Exact seen TP, a residual FP on "likes", and a boundary FP whose
        // overlap ties between two gold mentions (leftmost wins).
        sent("g1", {"Alpha", "likes", "Gamma", "Delta", "."},
             {{0, 0, "PER"}, {1, 1, "LOC"}, {2, 3, "MISC"}}),
        // Exact span, wrong type: attributed to the seen gold mention.
        sent("g2", {"Hub", "Port", "boats", "dock", "."}, {{1, 1, "LOC"}}),
        // Overlaps both gold mentions; the larger overlap wins.
        sent("g3", {"Alpha", "x", "Gamma", "Gamma", "y", "."}, {{0, 3, "MISC"}}),
    };

    const statner::SeenUnseenBreakdown b =
        statner::seen_unseen_breakdown(gold, pred, train, stats);

    CHECK(b.seen.tp == 1);   // g1 Alpha
    CHECK(b.seen.fp == 1);   // g2 exact-span type error
    CHECK(b.seen.fn == 2);   // g2 Port, g3 Alpha
    CHECK(b.unseen_seen_tokens.tp == 0);
    CHECK(b.unseen_seen_tokens.fp == 2);  // g1 tie -> leftmost Gamma; g3 larger overlap
    CHECK(b.unseen_seen_tokens.fn == 2);  // g1 Gamma, g3 Gamma Gamma
    CHECK(b.unseen_unseen_tokens.tp == 0);
    CHECK(b.unseen_unseen_tokens.fp == 0);
    CHECK(b.unseen_unseen_tokens.fn == 1);  // g1 Delta
    CHECK(b.residual_fp == 1);              // g1 "likes"
}

TEST_CASE("retriever sanity rate", "[eval]") {
    const std::vector<statner::AnnotatedSentence> train = {
        sent("d1", {"Rome", "."}, {{0, 0, "LOC"}}),
        sent("d2", {"Paris", "."}, {{0, 0, "LOC"}}),
    };
    const std::vector<statner::AnnotatedSentence> test = {
        sent("s1", {"Rome", "is", "old", "."}, {{0, 0, "LOC"}}),
        sent("s2", {"Paris", "rocks", "."}, {{0, 0, "LOC"}}),
        sent("s3", {"Zed", "."}, {{0, 0, "PER"}}),
    };

    SECTION("covered fraction counts only training-repeated mentions") {
        const std::map<std::string, std::vector<std::string>> demos = {
            {"s1", {"d1"}},
            {"s2", {"d1"}},
            {"s3", {"d2"}},
        };
        const auto rate = statner::retriever_sanity(test, train, demos);
        REQUIRE(rate.has_value());
        CHECK(*rate == Catch::Approx(0.5));
    }

    SECTION("a sentence without retrieved demos stays eligible but uncovered") {
        const std::map<std::string, std::vector<std::string>> demos = {{"s1", {"d1"}}};
        const auto rate = statner::retriever_sanity(test, train, demos);
        REQUIRE(rate.has_value());
        CHECK(*rate == Catch::Approx(0.5));
    }

    SECTION("any matching demo in the list covers the mention") {
        const std::map<std::string, std::vector<std::string>> demos = {
            {"s1", {"d2", "d1"}},
            {"s2", {"d1", "d2"}},
        };
        const auto rate = statner::retriever_sanity(test, train, demos);
        REQUIRE(rate.has_value());
        CHECK(*rate == Catch::Approx(1.0));
    }

    SECTION("empty denominator yields no value") {
        const std::vector<statner::AnnotatedSentence> only_novel = {
            sent("s3", {"Zed", "."}, {{0, 0, "PER"}}),
        };
        const std::map<std::string, std::vector<std::string>> demos = {{"s3", {"d1"}}};
        CHECK_FALSE(statner::retriever_sanity(only_novel, train, demos).has_value());
    }

    SECTION("unknown demonstration id is a data error") {
        const std::map<std::string, std::vector<std::string>> demos = {{"s1", {"nope"}}};
        REQUIRE_THROWS_AS(statner::retriever_sanity(test, train, demos), statner::DataError);
        REQUIRE_THROWS_WITH(statner::retriever_sanity(test, train, demos),
                            Catch::Matchers::ContainsSubstring("'nope'"));
    }
}

TEST_CASE("bootstrap confidence interval", "[eval]") {
    const auto gold = synth::corpus({.sentences = 30, .vocab = 20, .seed = 9});
    const auto pred = synth::perturb(gold, 42);

    SECTION("deterministic for a fixed seed") {
        const auto a = statner::bootstrap_ci(gold, pred, 300, 0.95, 17);
        const auto b = statner::bootstrap_ci(gold, pred, 300, 0.95, 17);
        CHECK(a.f1 == b.f1);
        CHECK(a.lower == b.lower);
        CHECK(a.upper == b.upper);
        CHECK(a.resamples == 300);
        CHECK(a.lower <= a.upper);
        CHECK(a.lower >= 0.0);
        CHECK(a.upper <= 1.0);
        CHECK(a.margin() == Catch::Approx((a.upper - a.lower) / 2.0));
    }

    SECTION("invariant under input order") {
        std::vector<statner::AnnotatedSentence> gold_shuffled = gold;
        std::vector<statner::AnnotatedSentence> pred_shuffled = pred;
        std::mt19937_64 rng(99);
        std::shuffle(gold_shuffled.begin(), gold_shuffled.end(), rng);
        std::shuffle(pred_shuffled.begin(), pred_shuffled.end(), rng);

        const auto a = statner::bootstrap_ci(gold, pred, 300, 0.95, 17);
        const auto b = statner::bootstrap_ci(gold_shuffled, pred_shuffled, 300, 0.95, 17);
        CHECK(a.f1 == b.f1);
        CHECK(a.lower == b.lower);
        CHECK(a.upper == b.upper);
    }

    SECTION("point estimate matches strict F1") {
        const auto r = statner::bootstrap_ci(gold, pred, 100, 0.95, 17);
        CHECK(r.f1 == statner::strict_f1(gold, pred).f1());
    }

    SECTION("perfect predictions collapse the interval at 1.0") {
        std::vector<statner::AnnotatedSentence> perfect;
        for (int i = 0; i < 5; ++i)
            perfect.push_back(sent("b" + std::to_string(i), {"Tok", "here", "."},
                                   {{0, 0, "PER"}}));
        const auto r = statner::bootstrap_ci(perfect, perfect, 200, 0.95, 3);
        CHECK(r.f1 == 1.0);
        CHECK(r.lower == 1.0);
        CHECK(r.upper == 1.0);
        CHECK(r.margin() == 0.0);
    }

    SECTION("fewer than two sentences is a data error") {
        const std::vector<statner::AnnotatedSentence> one = {
            sent("s1", {"a", "."}, {{0, 0, "PER"}}),
        };
        REQUIRE_THROWS_AS(statner::bootstrap_ci(one, one), statner::DataError);
    }
}
