#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "statner/corpus.hpp"
#include "statner/rng.hpp"
#include "statner/stats.hpp"

namespace statner {

struct EvalResult {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;

    double precision() const { return tp + fp == 0 ? 0.0 : double(tp) / double(tp + fp); }
    double recall() const { return tp + fn == 0 ? 0.0 : double(tp) / double(tp + fn); }
    double f1() const {
        const double p = precision();
        const double r = recall();
        return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
    }
};

namespace detail {

inline void pair_by_id(const std::vector<AnnotatedSentence>& gold,
                       const std::vector<AnnotatedSentence>& pred,
                       std::vector<std::pair<const AnnotatedSentence*, const AnnotatedSentence*>>& out) {
    if (gold.size() != pred.size())
        throw DataError("evaluation corpora differ in size: gold " +
                        std::to_string(gold.size()) + ", predicted " +
                        std::to_string(pred.size()));
    std::map<std::string, const AnnotatedSentence*> by_id;
    for (const auto& s : pred) by_id[s.id] = &s;
    out.clear();
    out.reserve(gold.size());
    for (const auto& g : gold) {
        const auto it = by_id.find(g.id);
        if (it == by_id.end())
            throw DataError("prediction missing for sentence '" + g.id + "'");
        out.emplace_back(&g, it->second);
    }
}

inline EvalResult score_pair(const AnnotatedSentence& gold, const AnnotatedSentence& pred) {
    EvalResult r;
    for (const auto& pm : pred.mentions) {
        const bool hit = std::any_of(gold.mentions.begin(), gold.mentions.end(),
                                     [&](const Mention& gm) {
                                         return gm.start == pm.start && gm.end == pm.end &&
                                                gm.etype == pm.etype;
                                     });
        hit ? ++r.tp : ++r.fp;
    }
    for (const auto& gm : gold.mentions) {
        const bool hit = std::any_of(pred.mentions.begin(), pred.mentions.end(),
                                     [&](const Mention& pm) {
                                         return gm.start == pm.start && gm.end == pm.end &&
                                                gm.etype == pm.etype;
                                     });
        if (!hit) ++r.fn;
    }
    return r;
}

}  // namespace detail

// Strict mention-level micro F1: a predicted mention counts only on exact
// (start, end, type) match. Sentences are paired by id.
inline EvalResult strict_f1(const std::vector<AnnotatedSentence>& gold,
                            const std::vector<AnnotatedSentence>& pred) {
    std::vector<std::pair<const AnnotatedSentence*, const AnnotatedSentence*>> pairs;
    detail::pair_by_id(gold, pred, pairs);
    EvalResult total;
    for (const auto& [g, p] : pairs) {
        const EvalResult r = detail::score_pair(*g, *p);
        total.tp += r.tp;
        total.fp += r.fp;
        total.fn += r.fn;
    }
    return total;
}

struct ErrorBreakdown {
    std::uint64_t type_errors = 0;   // exact span, wrong type (consumes FP+FN)
    std::uint64_t paired_fp_fn = 0;  // overlapping 1 FP vs 1 FN component
    std::uint64_t unique_fp = 0;     // FP overlapping no gold error
    std::uint64_t unique_fn = 0;     // FN overlapping no predicted error
    std::uint64_t multi_fp = 0;      // FPs in components with 3+ members
    std::uint64_t multi_fn = 0;
    std::uint64_t total_fp = 0;
    std::uint64_t total_fn = 0;

    bool reconciles() const {
        return type_errors + paired_fp_fn + unique_fp + multi_fp == total_fp &&
               type_errors + paired_fp_fn + unique_fn + multi_fn == total_fn;
    }
};

// Partitions every strict error into an exclusive category. Exact-span pairs
// with mismatched types are consumed first; the rest form an overlap graph
// between residual FPs and FNs whose connected components decide the class.
inline ErrorBreakdown classify_errors(const std::vector<AnnotatedSentence>& gold,
                                      const std::vector<AnnotatedSentence>& pred) {
    std::vector<std::pair<const AnnotatedSentence*, const AnnotatedSentence*>> pairs;
    detail::pair_by_id(gold, pred, pairs);
    ErrorBreakdown out;
    for (const auto& [g, p] : pairs) {
        std::vector<Mention> fps;
        std::vector<Mention> fns;
        for (const auto& pm : p->mentions) {
            const bool hit = std::any_of(
                g->mentions.begin(), g->mentions.end(), [&](const Mention& gm) {
                    return gm.start == pm.start && gm.end == pm.end && gm.etype == pm.etype;
                });
            if (!hit) fps.push_back(pm);
        }
        for (const auto& gm : g->mentions) {
            const bool hit = std::any_of(
                p->mentions.begin(), p->mentions.end(), [&](const Mention& pm) {
                    return gm.start == pm.start && gm.end == pm.end && gm.etype == pm.etype;
                });
            if (!hit) fns.push_back(gm);
        }
        out.total_fp += fps.size();
        out.total_fn += fns.size();

        std::vector<bool> fp_used(fps.size(), false);
        std::vector<bool> fn_used(fns.size(), false);
        for (std::size_t i = 0; i < fps.size(); ++i) {
            for (std::size_t j = 0; j < fns.size(); ++j) {
                if (fn_used[j]) continue;
                if (fps[i].start == fns[j].start && fps[i].end == fns[j].end) {
                    fp_used[i] = fn_used[j] = true;
                    ++out.type_errors;
                    break;
                }
            }
        }

        // Overlap graph over the remaining errors; union-find over FP/FN slots.
        const std::size_t n = fps.size() + fns.size();
        std::vector<std::size_t> parent(n);
        for (std::size_t i = 0; i < n; ++i) parent[i] = i;
        std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
            while (parent[x] != x) x = parent[x] = parent[parent[x]];
            return x;
        };
        auto unite = [&](std::size_t a, std::size_t b) { parent[find(a)] = find(b); };
        for (std::size_t i = 0; i < fps.size(); ++i) {
            if (fp_used[i]) continue;
            for (std::size_t j = 0; j < fns.size(); ++j) {
                if (fn_used[j]) continue;
                if (mentions_overlap(fps[i], fns[j])) unite(i, fps.size() + j);
            }
        }
        std::map<std::size_t, std::pair<std::uint64_t, std::uint64_t>> components;  // root -> (fp, fn)
        for (std::size_t i = 0; i < fps.size(); ++i)
            if (!fp_used[i]) ++components[find(i)].first;
        for (std::size_t j = 0; j < fns.size(); ++j)
            if (!fn_used[j]) ++components[find(fps.size() + j)].second;
        for (const auto& [root, counts] : components) {
            const auto [cfp, cfn] = counts;
            if (cfp == 1 && cfn == 1) {
                ++out.paired_fp_fn;
            } else if (cfp + cfn == 1) {
                cfp == 1 ? ++out.unique_fp : ++out.unique_fn;
            } else {
                out.multi_fp += cfp;
                out.multi_fn += cfn;
            }
        }
    }
    return out;
}

struct SeenUnseenBreakdown {
    EvalResult seen;                  // gold (surface, type) present in train
    EvalResult unseen_seen_tokens;    // unseen mention, all tokens in train vocab
    EvalResult unseen_unseen_tokens;  // unseen mention with novel tokens
    std::uint64_t residual_fp = 0;    // predictions overlapping no gold mention
};

// Buckets recall by gold-mention novelty relative to the training set and
// attributes each FP to the bucket of its best-overlapping gold mention.
inline SeenUnseenBreakdown seen_unseen_breakdown(const std::vector<AnnotatedSentence>& gold,
                                                 const std::vector<AnnotatedSentence>& pred,
                                                 const std::vector<AnnotatedSentence>& train,
                                                 const TokenStats& stats) {
    std::set<std::pair<std::string, std::string>> train_mentions;
    for (const auto& s : train)
        for (const auto& m : s.mentions) train_mentions.emplace(m.surface, m.etype);

    std::vector<std::pair<const AnnotatedSentence*, const AnnotatedSentence*>> pairs;
    detail::pair_by_id(gold, pred, pairs);

    SeenUnseenBreakdown out;
    auto bucket_of = [&](const AnnotatedSentence& s, const Mention& gm) -> EvalResult& {
        if (train_mentions.count({gm.surface, gm.etype})) return out.seen;
        for (std::size_t i = gm.start; i <= gm.end; ++i)
            if (!stats.contains(s.tokens[i])) return out.unseen_unseen_tokens;
        return out.unseen_seen_tokens;
    };

    for (const auto& [g, p] : pairs) {
        for (const auto& gm : g->mentions) {
            EvalResult& bucket = bucket_of(*g, gm);
            const bool hit = std::any_of(
                p->mentions.begin(), p->mentions.end(), [&](const Mention& pm) {
                    return gm.start == pm.start && gm.end == pm.end && gm.etype == pm.etype;
                });
            hit ? ++bucket.tp : ++bucket.fn;
        }
        for (const auto& pm : p->mentions) {
            const bool exact = std::any_of(
                g->mentions.begin(), g->mentions.end(), [&](const Mention& gm) {
                    return gm.start == pm.start && gm.end == pm.end && gm.etype == pm.etype;
                });
            if (exact) continue;
            // Exact (start, end, type) match attributes naturally; otherwise the
            // best-overlapping gold mention (largest overlap, then leftmost) owns it.
            const Mention* exact_span = nullptr;
            for (const auto& gm : g->mentions)
                if (gm.start == pm.start && gm.end == pm.end) exact_span = &gm;
            const Mention* best = exact_span;
            if (!best) {
                std::size_t best_overlap = 0;
                for (const auto& gm : g->mentions) {
                    if (!mentions_overlap(gm, pm)) continue;
                    const std::size_t lo = std::max(gm.start, pm.start);
                    const std::size_t hi = std::min(gm.end, pm.end);
                    const std::size_t ov = hi - lo + 1;
                    if (ov > best_overlap) {
                        best_overlap = ov;
                        best = &gm;
                    }
                }
            }
            if (best)
                ++bucket_of(*g, *best).fp;
            else
                ++out.residual_fp;
        }
    }
    return out;
}

// Fraction of test gold mentions whose (surface, type) occurs in train and
// whose retrieved demonstrations repeat that (surface, type). Empty
// denominator yields no value.
inline std::optional<double> retriever_sanity(
    const std::vector<AnnotatedSentence>& test, const std::vector<AnnotatedSentence>& train,
    const std::map<std::string, std::vector<std::string>>& demo_ids_by_sentence) {
    std::set<std::pair<std::string, std::string>> train_mentions;
    std::map<std::string, const AnnotatedSentence*> train_by_id;
    for (const auto& s : train) {
        train_by_id[s.id] = &s;
        for (const auto& m : s.mentions) train_mentions.emplace(m.surface, m.etype);
    }
    std::uint64_t eligible = 0;
    std::uint64_t covered = 0;
    for (const auto& s : test) {
        const auto demo_it = demo_ids_by_sentence.find(s.id);
        for (const auto& m : s.mentions) {
            if (!train_mentions.count({m.surface, m.etype})) continue;
            ++eligible;
            if (demo_it == demo_ids_by_sentence.end()) continue;
            bool hit = false;
            for (const auto& demo_id : demo_it->second) {
                const auto t = train_by_id.find(demo_id);
                if (t == train_by_id.end())
                    throw DataError("retrieved demonstration '" + demo_id +
                                    "' is not a training sentence");
                hit = std::any_of(t->second->mentions.begin(), t->second->mentions.end(),
                                  [&](const Mention& dm) {
                                      return dm.surface == m.surface && dm.etype == m.etype;
                                  });
                if (hit) break;
            }
            if (hit) ++covered;
        }
    }
    if (eligible == 0) return std::nullopt;
    return double(covered) / double(eligible);
}

struct BootstrapResult {
    double f1 = 0.0;
    double lower = 0.0;
    double upper = 0.0;
    std::uint64_t resamples = 0;

    double margin() const { return (upper - lower) / 2.0; }
};

namespace detail {

inline double percentile(std::vector<double>& values, double q) {
    std::sort(values.begin(), values.end());
    const double pos = q * double(values.size() - 1);
    const std::size_t lo = std::size_t(std::floor(pos));
    const std::size_t hi = std::size_t(std::ceil(pos));
    const double frac = pos - double(lo);
    return values[lo] + (values[hi] - values[lo]) * frac;
}

}  // namespace detail

// Sentence-level percentile bootstrap for micro F1. Sentences are sorted by
// id before resampling so the interval does not depend on input order.
inline BootstrapResult bootstrap_ci(const std::vector<AnnotatedSentence>& gold,
                                    const std::vector<AnnotatedSentence>& pred,
                                    std::uint64_t resamples = 1000, double level = 0.95,
                                    std::uint64_t seed = 17) {
    if (gold.size() < 2)
        throw DataError("bootstrap needs at least two sentences, got " +
                        std::to_string(gold.size()));
    std::vector<std::pair<const AnnotatedSentence*, const AnnotatedSentence*>> pairs;
    detail::pair_by_id(gold, pred, pairs);
    std::sort(pairs.begin(), pairs.end(),
              [](const auto& a, const auto& b) { return a.first->id < b.first->id; });

    std::vector<EvalResult> per_sentence;
    per_sentence.reserve(pairs.size());
    EvalResult total;
    for (const auto& [g, p] : pairs) {
        const EvalResult r = detail::score_pair(*g, *p);
        per_sentence.push_back(r);
        total.tp += r.tp;
        total.fp += r.fp;
        total.fn += r.fn;
    }

    std::mt19937_64 rng(seed);
    std::vector<double> f1s;
    f1s.reserve(resamples);
    for (std::uint64_t b = 0; b < resamples; ++b) {
        EvalResult sample;
        for (std::size_t i = 0; i < per_sentence.size(); ++i) {
            const auto& r = per_sentence[bounded_rand(rng, per_sentence.size())];
            sample.tp += r.tp;
            sample.fp += r.fp;
            sample.fn += r.fn;
        }
        f1s.push_back(sample.f1());
    }
    const double alpha = (1.0 - level) / 2.0;
    BootstrapResult out;
    out.f1 = total.f1();
    out.resamples = resamples;
    std::vector<double> sorted = f1s;
    out.lower = detail::percentile(sorted, alpha);
    out.upper = detail::percentile(sorted, 1.0 - alpha);
    return out;
}

}  // namespace statner
