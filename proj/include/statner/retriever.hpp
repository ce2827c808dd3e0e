#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "statner/llm.hpp"
#include "statner/stats.hpp"

namespace statner {

struct RetrievalConfig {
    double lambda1 = 1.0;  // token-match component weight
    double lambda2 = 1.0;  // embedding component weight
    double w_entity = 1.0;
    double w_context = 1.0;
    double w_other = 0.01;
    std::size_t demo_count = 8;  // N
    bool per_occurrence_token_match = false;  // count repeated query tokens per occurrence
};

struct ScoredDemo {
    std::string sentence_id;
    double total = 0.0;
    double token_component = 0.0;
    double embed_component = 0.0;
};

using TokenVectorMap = std::unordered_map<std::string, EmbeddingVector>;

// W(t): statistics-weighted importance, 1 for tokens never seen in training.
inline double token_weight(std::string_view token, const TokenStats& stats,
                           const RetrievalConfig& cfg) {
    const TokenCategoryCounts* c = stats.find(token);
    if (!c) return 1.0;
    return cfg.w_entity * c->p_entity() + cfg.w_context * c->p_context() +
           cfg.w_other * c->p_other();
}

// Sum of W(t) over query tokens present in the candidate. Distinct token
// types by default; per-occurrence mode behind the config flag.
inline double token_match_score(const AnnotatedSentence& query,
                                const AnnotatedSentence& candidate, const TokenStats& stats,
                                const RetrievalConfig& cfg) {
    std::unordered_set<std::string_view> candidate_tokens;
    for (const auto& t : candidate.tokens) candidate_tokens.insert(t);
    double score = 0.0;
    if (cfg.per_occurrence_token_match) {
        for (const auto& t : query.tokens)
            if (candidate_tokens.count(t)) score += token_weight(t, stats, cfg);
    } else {
        std::set<std::string_view> distinct(query.tokens.begin(), query.tokens.end());
        for (const auto& t : distinct)
            if (candidate_tokens.count(t)) score += token_weight(t, stats, cfg);
    }
    return score;
}

// v_s = sum over token occurrences of W(t) * v_t.
inline EmbeddingVector weighted_sentence_embedding(const AnnotatedSentence& s,
                                                   const TokenStats& stats,
                                                   const RetrievalConfig& cfg,
                                                   const TokenVectorMap& vectors) {
    EmbeddingVector out;
    for (const auto& t : s.tokens) {
        const auto it = vectors.find(t);
        if (it == vectors.end())
            throw DataError("missing token vector for '" + t + "': embedding cache not populated");
        const double w = token_weight(t, stats, cfg);
        if (out.values.empty()) out.values.assign(it->second.dim(), 0.0);
        if (out.dim() != it->second.dim()) throw DataError("token vector dimension mismatch");
        for (std::size_t i = 0; i < out.values.size(); ++i)
            out.values[i] += w * it->second.values[i];
    }
    return out;
}

inline ScoredDemo combined_score(const AnnotatedSentence& query,
                                 const AnnotatedSentence& candidate, const TokenStats& stats,
                                 const RetrievalConfig& cfg, const TokenVectorMap& vectors) {
    ScoredDemo d;
    d.sentence_id = candidate.id;
    d.token_component = token_match_score(query, candidate, stats, cfg);
    d.embed_component = cosine(weighted_sentence_embedding(query, stats, cfg, vectors),
                               weighted_sentence_embedding(candidate, stats, cfg, vectors));
    d.total = cfg.lambda1 * d.token_component + cfg.lambda2 * d.embed_component;
    return d;
}

namespace detail {

// Select the top n by (total desc, id asc), then emit ascending so the most
// similar demo lands adjacent to the query in the prompt.
inline std::vector<ScoredDemo> select_top_ascending(std::vector<ScoredDemo> scored,
                                                    std::size_t n) {
    std::sort(scored.begin(), scored.end(), [](const ScoredDemo& a, const ScoredDemo& b) {
        if (a.total != b.total) return a.total > b.total;
        return a.sentence_id < b.sentence_id;
    });
    if (scored.size() > n) scored.resize(n);
    std::reverse(scored.begin(), scored.end());
    return scored;
}

}  // namespace detail

// Precomputes candidate embeddings once; preferred for repeated queries.
class Retriever {
public:
    Retriever(const std::vector<AnnotatedSentence>& train, const TokenStats& stats,
              const RetrievalConfig& cfg, const TokenVectorMap* vectors)
        : train_(train), stats_(stats), cfg_(cfg), vectors_(vectors) {
        if (!vectors_ && cfg_.lambda2 != 0.0)
            throw ConfigError("token vectors required when lambda2 != 0");
        if (vectors_) {
            candidate_vecs_.reserve(train.size());
            for (const auto& s : train)
                candidate_vecs_.push_back(weighted_sentence_embedding(s, stats_, cfg_, *vectors_));
        }
    }

    std::vector<ScoredDemo> retrieve(const AnnotatedSentence& query) const {
        if (train_.size() < cfg_.demo_count)
            std::cerr << "warning: train split smaller than demo count, returning all "
                      << train_.size() << " sentences\n";
        EmbeddingVector qv;
        if (vectors_) qv = weighted_sentence_embedding(query, stats_, cfg_, *vectors_);
        std::vector<ScoredDemo> scored;
        scored.reserve(train_.size());
        for (std::size_t i = 0; i < train_.size(); ++i) {
            ScoredDemo d;
            d.sentence_id = train_[i].id;
            d.token_component = token_match_score(query, train_[i], stats_, cfg_);
            d.embed_component = vectors_ ? cosine(qv, candidate_vecs_[i]) : 0.0;
            d.total = cfg_.lambda1 * d.token_component + cfg_.lambda2 * d.embed_component;
            scored.push_back(std::move(d));
        }
        return detail::select_top_ascending(std::move(scored), cfg_.demo_count);
    }

private:
    const std::vector<AnnotatedSentence>& train_;
    const TokenStats& stats_;
    RetrievalConfig cfg_;
    const TokenVectorMap* vectors_;
    std::vector<EmbeddingVector> candidate_vecs_;
};

inline std::vector<ScoredDemo> retrieve_demonstrations(const AnnotatedSentence& query,
                                                       const std::vector<AnnotatedSentence>& train,
                                                       const TokenStats& stats,
                                                       const RetrievalConfig& cfg,
                                                       const TokenVectorMap* vectors) {
    return Retriever(train, stats, cfg, vectors).retrieve(query);
}

// Okapi BM25 with the non-negative idf variant ln(1 + (N-df+0.5)/(df+0.5)).
class Bm25Index {
public:
    explicit Bm25Index(const std::vector<AnnotatedSentence>& train, double k1 = 1.5,
                       double b = 0.75)
        : k1_(k1), b_(b) {
        docs_.reserve(train.size());
        double total_len = 0;
        for (const auto& s : train) {
            Doc d;
            d.id = s.id;
            d.length = double(s.tokens.size());
            total_len += d.length;
            for (const auto& t : s.tokens) ++d.tf[t];
            for (const auto& [t, _] : d.tf) ++df_[t];
            docs_.push_back(std::move(d));
        }
        avgdl_ = docs_.empty() ? 0.0 : total_len / double(docs_.size());
    }

    std::vector<ScoredDemo> rank(const AnnotatedSentence& query, std::size_t n) const {
        std::vector<ScoredDemo> scored;
        scored.reserve(docs_.size());
        for (const auto& d : docs_) {
            double score = 0.0;
            for (const auto& t : query.tokens) {
                const auto tf_it = d.tf.find(t);
                if (tf_it == d.tf.end()) continue;
                const double tf = double(tf_it->second);
                const double df = double(df_.at(t));
                const double idf =
                    std::log(1.0 + (double(docs_.size()) - df + 0.5) / (df + 0.5));
                const double denom =
                    tf + k1_ * (1.0 - b_ + b_ * (avgdl_ > 0 ? d.length / avgdl_ : 0.0));
                score += idf * tf * (k1_ + 1.0) / denom;
            }
            ScoredDemo sd;
            sd.sentence_id = d.id;
            sd.total = score;
            sd.token_component = score;
            scored.push_back(std::move(sd));
        }
        return detail::select_top_ascending(std::move(scored), n);
    }

private:
    struct Doc {
        std::string id;
        double length = 0;
        std::unordered_map<std::string, std::uint64_t> tf;
    };
    std::vector<Doc> docs_;
    std::unordered_map<std::string, std::uint64_t> df_;
    double k1_, b_, avgdl_ = 0;
};

inline std::vector<ScoredDemo> bm25_rank(const AnnotatedSentence& query,
                                         const std::vector<AnnotatedSentence>& train,
                                         double k1 = 1.5, double b = 0.75, std::size_t n = 8) {
    return Bm25Index(train, k1, b).rank(query, n);
}

using SentenceVectorMap = std::unordered_map<std::string, EmbeddingVector>;

// KATE baseline: cosine nearest neighbors over whole-sentence vectors.
inline std::vector<ScoredDemo> kate_rank(const EmbeddingVector& query_vector,
                                         const std::vector<AnnotatedSentence>& train,
                                         const SentenceVectorMap& sentence_vectors,
                                         std::size_t n) {
    std::vector<ScoredDemo> scored;
    scored.reserve(train.size());
    for (const auto& s : train) {
        const auto it = sentence_vectors.find(s.id);
        if (it == sentence_vectors.end())
            throw DataError("missing sentence vector for '" + s.id + "'");
        ScoredDemo d;
        d.sentence_id = s.id;
        d.embed_component = cosine(query_vector, it->second);
        d.total = d.embed_component;
        scored.push_back(std::move(d));
    }
    return detail::select_top_ascending(std::move(scored), n);
}

enum class SpanDemoMode { ContextMatch, TokenContainment, CategorySample };

struct SpanDemoQuery {
    SpanDemoMode mode = SpanDemoMode::TokenContainment;
    std::string anchor;                       // containment / category-sample modes
    std::vector<std::string> left_context;    // context-match: neighbors left of anchor
    std::vector<std::string> right_context;   // context-match: neighbors right of anchor
    std::size_t demo_count = 1;               // M per category
    std::vector<SpanKind> categories = {SpanKind::EntitySpan, SpanKind::ContextSpan,
                                        SpanKind::OtherSpan};
};

struct SpanDemoResult {
    std::vector<SpanRecord> entity;   // positives
    std::vector<SpanRecord> context;  // hard negatives
    std::vector<SpanRecord> other;    // negatives

    std::vector<SpanRecord> flat() const {
        std::vector<SpanRecord> out = entity;
        out.insert(out.end(), context.begin(), context.end());
        out.insert(out.end(), other.begin(), other.end());
        return out;
    }
};

namespace detail {

inline void sort_and_truncate(std::vector<SpanRecord>& records, std::size_t m) {
    std::sort(records.begin(), records.end(), [](const SpanRecord& a, const SpanRecord& b) {
        if (a.freq != b.freq) return a.freq > b.freq;
        if (a.sentence_id != b.sentence_id) return a.sentence_id < b.sentence_id;
        if (a.window_start != b.window_start) return a.window_start < b.window_start;
        return a.rendered < b.rendered;
    });
    if (records.size() > m) records.resize(m);
}

inline void append_unique(std::vector<SpanRecord>& dst, std::vector<SpanRecord> src) {
    for (auto& r : src) {
        const bool dup = std::any_of(dst.begin(), dst.end(), [&](const SpanRecord& d) {
            return d.sentence_id == r.sentence_id && d.window_start == r.window_start &&
                   d.kind == r.kind && d.label == r.label;
        });
        if (!dup) dst.push_back(std::move(r));
    }
}

}  // namespace detail

// Entity spans whose mention was flanked by the given neighbor tokens;
// two-sided (left,right) pair matches preferred, single-sided as fallback.
inline std::vector<SpanRecord> retrieve_context_matched_spans(
    const SpanIndex& index, const std::vector<std::string>& left_context,
    const std::vector<std::string>& right_context, std::size_t m) {
    std::vector<SpanRecord> hits;
    for (const auto& l : left_context)
        for (const auto& r : right_context)
            detail::append_unique(hits, index.by_context_pair(l, r));
    if (hits.empty()) {
        for (const auto& l : left_context) detail::append_unique(hits, index.by_left_context(l));
        for (const auto& r : right_context)
            detail::append_unique(hits, index.by_right_context(r));
    }
    detail::sort_and_truncate(hits, m);
    return hits;
}

inline SpanDemoResult retrieve_span_demos(const SpanDemoQuery& q, const SpanIndex& index) {
    SpanDemoResult out;
    if (q.mode == SpanDemoMode::ContextMatch) {
        out.entity = retrieve_context_matched_spans(index, q.left_context, q.right_context,
                                                    q.demo_count);
        return out;
    }
    const auto& cats = q.categories;
    const bool all = q.mode == SpanDemoMode::TokenContainment;
    auto wanted = [&](SpanKind k) {
        return all || std::find(cats.begin(), cats.end(), k) != cats.end();
    };
    if (wanted(SpanKind::EntitySpan)) {
        out.entity = index.entity_spans(q.anchor);
        detail::sort_and_truncate(out.entity, q.demo_count);
    }
    if (wanted(SpanKind::ContextSpan)) {
        out.context = index.context_spans(q.anchor);
        detail::sort_and_truncate(out.context, q.demo_count);
    }
    if (wanted(SpanKind::OtherSpan)) {
        out.other = index.other_spans(q.anchor);
        detail::sort_and_truncate(out.other, q.demo_count);
    }
    return out;
}

}  // namespace statner
