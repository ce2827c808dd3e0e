#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "statner/retriever.hpp"
#include "support/desk.hpp"
#include "support/synth.hpp"

using namespace statner;

namespace {

AnnotatedSentence plain(std::string id, std::vector<std::string> tokens) {
    AnnotatedSentence s;
    s.id = std::move(id);
    s.tokens = std::move(tokens);
    return s;
}

TokenVectorMap hashed_token_vectors(const std::vector<const std::vector<AnnotatedSentence>*>& splits,
                                    std::size_t dim) {
    HashedEmbeddingBackend backend(dim);
    TokenVectorMap out;
    for (const auto* split : splits)
        for (const auto& s : *split)
            for (const auto& t : s.tokens)
                if (!out.count(t)) out[t] = backend.embed({t}).front();
    return out;
}

std::vector<std::string> ids_of(const std::vector<ScoredDemo>& demos) {
    std::vector<std::string> out;
    for (const auto& d : demos) out.push_back(d.sentence_id);
    return out;
}

}  // namespace

TEST_CASE("token weight is 1 for unseen tokens and stat-weighted otherwise") {
    const auto train = desk::train();
    const TokenStats stats = build_token_stats(train, StatsConfig{2});
    RetrievalConfig cfg;

    CHECK(token_weight("never-in-train", stats, cfg) == 1.0);
    // "Italian" is entity-only: weight collapses to w_entity.
    CHECK(token_weight("Italian", stats, cfg) == Catch::Approx(cfg.w_entity));
    // "city" is half context, half other.
    CHECK(token_weight("city", stats, cfg) ==
          Catch::Approx(cfg.w_context * 0.5 + cfg.w_other * 0.5));

    cfg.w_entity = 2.0;
    cfg.w_context = 0.5;
    cfg.w_other = 0.1;
    CHECK(token_weight("city", stats, cfg) == Catch::Approx(0.5 * 0.5 + 0.1 * 0.5));
}

TEST_CASE("token match sums distinct query types by default") {
    const TokenStats empty_stats;
    RetrievalConfig cfg;
    const auto query = plain("q", {"a", "a", "b"});
    const auto cand = plain("c", {"a", "x", "a"});

    CHECK(token_match_score(query, cand, empty_stats, cfg) == Catch::Approx(1.0));

    cfg.per_occurrence_token_match = true;
    CHECK(token_match_score(query, cand, empty_stats, cfg) == Catch::Approx(2.0));

    CHECK(token_match_score(plain("q", {"y"}), cand, empty_stats, cfg) == 0.0);
}

TEST_CASE("weighted sentence embedding is the stat-weighted sum of token vectors") {
    TokenVectorMap vectors;
    vectors["p"] = EmbeddingVector{{1.0, 0.0}};
    vectors["q"] = EmbeddingVector{{0.0, 2.0}};
    const TokenStats empty_stats;
    RetrievalConfig cfg;

    const auto v = weighted_sentence_embedding(plain("s", {"p", "q", "p"}), empty_stats, cfg,
                                               vectors);
    REQUIRE(v.dim() == 2);
    CHECK(v.values[0] == Catch::Approx(2.0));  // two occurrences of p, W = 1
    CHECK(v.values[1] == Catch::Approx(2.0));

    CHECK_THROWS_AS(
        weighted_sentence_embedding(plain("s", {"zz"}), empty_stats, cfg, vectors),
        DataError);

    vectors["bad"] = EmbeddingVector{{1.0, 2.0, 3.0}};
    CHECK_THROWS_AS(
        weighted_sentence_embedding(plain("s", {"p", "bad"}), empty_stats, cfg, vectors),
        DataError);
}

TEST_CASE("combined score decomposes into its two weighted components") {
    const auto train = desk::train();
    const auto test = desk::test();
    const TokenStats stats = build_token_stats(train, StatsConfig{2});
    const auto vectors = hashed_token_vectors({&train, &test}, 16);

    RetrievalConfig cfg;
    cfg.lambda1 = 0.7;
    cfg.lambda2 = 1.3;
    for (const auto& query : test)
        for (const auto& cand : train) {
            const ScoredDemo d = combined_score(query, cand, stats, cfg, vectors);
            CHECK(d.total ==
                  Catch::Approx(cfg.lambda1 * d.token_component + cfg.lambda2 * d.embed_component));
            CHECK(d.sentence_id == cand.id);
        }
}

TEST_CASE("top selection orders by score then id, most similar last") {
    std::vector<ScoredDemo> scored;
    for (const auto& [id, total] :
         std::vector<std::pair<std::string, double>>{
             {"s3", 1.0}, {"s1", 2.0}, {"s2", 1.0}, {"s4", 0.5}}) {
        ScoredDemo d;
        d.sentence_id = id;
        d.total = total;
        scored.push_back(d);
    }
    const auto top = detail::select_top_ascending(scored, 3);
    CHECK(ids_of(top) == std::vector<std::string>{"s3", "s2", "s1"});

    const auto all = detail::select_top_ascending(scored, 10);
    CHECK(all.size() == 4);
    CHECK(all.front().sentence_id == "s4");
    CHECK(all.back().sentence_id == "s1");
}

TEST_CASE("retriever requires vectors only when the embedding term is active") {
    const auto train = desk::train();
    const TokenStats stats = build_token_stats(train, StatsConfig{2});

    RetrievalConfig cfg;
    cfg.lambda2 = 0.0;
    Retriever token_only(train, stats, cfg, nullptr);
    const auto demos = token_only.retrieve(desk::test()[0]);
    CHECK(demos.size() == std::min<std::size_t>(cfg.demo_count, train.size()));
    for (const auto& d : demos) CHECK(d.embed_component == 0.0);

    cfg.lambda2 = 1.0;
    CHECK_THROWS_AS(Retriever(train, stats, cfg, nullptr), ConfigError);
}

TEST_CASE("a small train split is returned whole") {
    const auto train = std::vector<AnnotatedSentence>{plain("a", {"x"}), plain("b", {"y"})};
    const TokenStats stats = build_token_stats(train, StatsConfig{2});
    RetrievalConfig cfg;
    cfg.lambda2 = 0.0;
    cfg.demo_count = 8;
    CHECK(Retriever(train, stats, cfg, nullptr).retrieve(plain("q", {"x"})).size() == 2);
}

TEST_CASE("retriever agrees with the independent oracle on random corpora") {
    synth::CorpusSpec train_spec;
    train_spec.sentences = 60;
    train_spec.seed = 7;
    const auto train = synth::corpus(train_spec);

    synth::CorpusSpec query_spec;
    query_spec.sentences = 12;
    query_spec.seed = 8;
    query_spec.id_prefix = "q";
    const auto queries = synth::corpus(query_spec);

    const TokenStats stats = build_token_stats(train, StatsConfig{2});
    const auto oracle_counts = synth::stats_oracle(train, 2);
    const auto vectors = hashed_token_vectors({&train, &queries}, 24);

    std::vector<RetrievalConfig> configs(3);
    configs[1].lambda1 = 0.01;
    configs[2].w_entity = 2.0;
    configs[2].w_context = 0.4;
    configs[2].demo_count = 5;

    for (const auto& cfg : configs) {
        Retriever retriever(train, stats, cfg, &vectors);
        for (const auto& q : queries) {
            const auto got = ids_of(retriever.retrieve(q));
            const auto want = synth::label_guided_oracle(q, train, oracle_counts, cfg, vectors);
            CHECK(got == want);
        }
    }
}

TEST_CASE("bm25 matches a hand-computed example") {
    const std::vector<AnnotatedSentence> train = {
        plain("d1", {"x", "y"}), plain("d2", {"x", "x", "z"}), plain("d3", {"w"})};
    const auto query = plain("q", {"x", "z"});

    const auto ranked = bm25_rank(query, train, 1.5, 0.75, 2);
    REQUIRE(ids_of(ranked) == std::vector<std::string>{"d1", "d2"});

    const double idf_x = std::log(1.0 + 1.5 / 2.5);
    const double idf_z = std::log(1.0 + 2.5 / 1.5);
    const double d2_x = idf_x * 2.0 * 2.5 / (2.0 + 1.5 * (0.25 + 0.75 * 1.5));
    const double d2_z = idf_z * 1.0 * 2.5 / (1.0 + 1.5 * (0.25 + 0.75 * 1.5));
    CHECK(ranked[1].total == Catch::Approx(d2_x + d2_z));
    CHECK(ranked[0].total == Catch::Approx(idf_x * 2.5 / 2.5));
}

TEST_CASE("bm25 agrees with the oracle on random corpora") {
    synth::CorpusSpec spec;
    spec.sentences = 50;
    spec.seed = 17;
    const auto train = synth::corpus(spec);
    spec.seed = 18;
    spec.id_prefix = "q";
    spec.sentences = 10;
    const auto queries = synth::corpus(spec);

    for (const auto& q : queries) {
        const auto got = ids_of(bm25_rank(q, train, 1.5, 0.75, 8));
        CHECK(got == synth::bm25_oracle(q, train, 1.5, 0.75, 8));
    }
}

TEST_CASE("kate ranks by plain cosine over sentence vectors") {
    const std::vector<AnnotatedSentence> train = {
        plain("s1", {"a"}), plain("s2", {"b"}), plain("s3", {"c"})};
    SentenceVectorMap vecs;
    vecs["s1"] = EmbeddingVector{{1.0, 0.0}};
    vecs["s2"] = EmbeddingVector{{0.0, 1.0}};
    vecs["s3"] = EmbeddingVector{{1.0, 1.0}};

    const auto ranked = kate_rank(EmbeddingVector{{1.0, 0.0}}, train, vecs, 2);
    CHECK(ids_of(ranked) == std::vector<std::string>{"s3", "s1"});

    vecs.erase("s2");
    CHECK_THROWS_AS(kate_rank(EmbeddingVector{{1.0, 0.0}}, train, vecs, 2), DataError);
}

TEST_CASE("kate agrees with the oracle on random corpora") {
    synth::CorpusSpec spec;
    spec.sentences = 40;
    spec.seed = 23;
    const auto train = synth::corpus(spec);

    HashedEmbeddingBackend backend(24);
    SentenceVectorMap vecs;
    std::map<std::string, std::vector<double>> oracle_vecs;
    for (const auto& s : train) {
        const auto v = backend.embed({s.text()}).front();
        vecs[s.id] = v;
        oracle_vecs[s.id] = v.values;
    }

    spec.seed = 24;
    spec.sentences = 10;
    spec.id_prefix = "q";
    for (const auto& q : synth::corpus(spec)) {
        const auto qv = backend.embed({q.text()}).front();
        CHECK(ids_of(kate_rank(qv, train, vecs, 8)) ==
              synth::kate_oracle(qv.values, train, oracle_vecs, 8));
    }
}

TEST_CASE("span demo retrieval by token containment") {
    const SpanIndex index = build_span_index(desk::train(), StatsConfig{2});

    SpanDemoQuery q;
    q.mode = SpanDemoMode::TokenContainment;
    q.anchor = "Italian";
    q.demo_count = 2;
    const auto result = retrieve_span_demos(q, index);
    REQUIRE(result.entity.size() == 2);
    CHECK(result.entity[0].sentence_id == "t2");  // tied freq, id breaks the tie
    CHECK(result.entity[1].sentence_id == "t3");
    CHECK(result.context.empty());
    CHECK(result.other.empty());
    CHECK(result.flat().size() == 2);

    q.demo_count = 1;
    CHECK(retrieve_span_demos(q, index).entity.size() == 1);
}

TEST_CASE("span demo retrieval by category sample respects the filter") {
    const SpanIndex index = build_span_index(desk::train(), StatsConfig{2});

    SpanDemoQuery q;
    q.mode = SpanDemoMode::CategorySample;
    q.anchor = "city";
    q.demo_count = 1;
    q.categories = {SpanKind::ContextSpan, SpanKind::OtherSpan};
    const auto result = retrieve_span_demos(q, index);
    CHECK(result.entity.empty());
    REQUIRE(result.context.size() == 1);
    CHECK(result.context[0].rendered == "in the English city of");
    REQUIRE(result.other.size() == 1);
    CHECK(result.other[0].rendered == "said the city council would");
}

TEST_CASE("context-matched retrieval prefers two-sided pairs") {
    std::vector<AnnotatedSentence> train;
    auto with_mention = [&](std::string id, std::vector<std::string> tokens, std::size_t pos) {
        AnnotatedSentence s = plain(std::move(id), std::move(tokens));
        Mention m{pos, pos, "PER", s.tokens[pos]};
        s.mentions.push_back(m);
        train.push_back(std::move(s));
    };
    with_mention("u1", {"l", "X", "r"}, 1);
    with_mention("u2", {"a", "X", "b"}, 1);
    with_mention("u3", {"l", "Y", "q"}, 1);
    const SpanIndex index = build_span_index(train, StatsConfig{2});

    // Pair hit exists: the single-sided matches must not be consulted.
    const auto paired = retrieve_context_matched_spans(index, {"l"}, {"r"}, 5);
    REQUIRE(paired.size() == 1);
    CHECK(paired[0].sentence_id == "u1");

    // No pair hit: fall back to either side.
    const auto fallback = retrieve_context_matched_spans(index, {"l"}, {"zz"}, 5);
    REQUIRE(fallback.size() == 2);
    CHECK(fallback[0].sentence_id == "u1");
    CHECK(fallback[1].sentence_id == "u3");

    // Duplicate context tokens do not duplicate hits.
    CHECK(retrieve_context_matched_spans(index, {"l", "l"}, {"r", "r"}, 5).size() == 1);

    CHECK(retrieve_context_matched_spans(index, {"zz"}, {"yy"}, 5).empty());
}

TEST_CASE("span records sort by frequency, sentence, window, text") {
    auto rec = [](std::uint64_t freq, std::string sid, std::size_t start, std::string rendered) {
        SpanRecord r;
        r.freq = freq;
        r.sentence_id = std::move(sid);
        r.window_start = start;
        r.rendered = std::move(rendered);
        return r;
    };
    std::vector<SpanRecord> records = {
        rec(1, "s2", 0, "bb"), rec(2, "s9", 5, "zz"), rec(1, "s2", 0, "aa"),
        rec(1, "s1", 3, "cc"), rec(1, "s2", 4, "dd"),
    };
    detail::sort_and_truncate(records, 4);
    REQUIRE(records.size() == 4);
    CHECK(records[0].rendered == "zz");  // highest frequency first
    CHECK(records[1].rendered == "cc");  // then sentence id
    CHECK(records[2].rendered == "aa");  // then window start, then text
    CHECK(records[3].rendered == "bb");
}
