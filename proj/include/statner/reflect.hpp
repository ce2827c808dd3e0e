#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "statner/prompt.hpp"

namespace statner {

struct ReflectionConfig {
    double theta_fn = 0.95;   // false-negative candidate threshold on P(t_e)
    std::size_t span_demos = 1;       // M demos per span-example slot
    std::size_t boundary_window = 2;  // K tokens per side around mention edges
    double tau_ctx = 0.5;     // neighbor evidence threshold for unseen tokens
    double boundary_margin = 0.0;  // extra evidence required before flagging
    bool stage_unseen = true;
    bool stage_fn = true;
    bool stage_boundary = true;
};

enum class Provenance { Icl, Unseen, Fn, Boundary };

inline std::string_view provenance_name(Provenance p) {
    switch (p) {
        case Provenance::Icl: return "icl";
        case Provenance::Unseen: return "unseen";
        case Provenance::Fn: return "fn";
        case Provenance::Boundary: return "boundary";
    }
    return "unknown";
}

inline std::optional<Provenance> provenance_from(std::string_view name) {
    if (name == "icl") return Provenance::Icl;
    if (name == "unseen") return Provenance::Unseen;
    if (name == "fn") return Provenance::Fn;
    if (name == "boundary") return Provenance::Boundary;
    return std::nullopt;
}

struct TrackedMention {
    Mention mention;
    Provenance provenance = Provenance::Icl;

    friend bool operator==(const TrackedMention&, const TrackedMention&) = default;
};

enum class ReflectionOutcome { Added, Removed, Replaced, NoChange };

inline std::string_view outcome_name(ReflectionOutcome o) {
    switch (o) {
        case ReflectionOutcome::Added: return "added";
        case ReflectionOutcome::Removed: return "removed";
        case ReflectionOutcome::Replaced: return "replaced";
        case ReflectionOutcome::NoChange: return "no-change";
    }
    return "unknown";
}

struct ReflectionLogEntry {
    std::string sentence_id;
    ReflectionKind stage = ReflectionKind::Unseen;
    std::string candidate;  // token or mention surface inspected
    std::string prompt_hash;
    ReflectionOutcome outcome = ReflectionOutcome::NoChange;
    std::string detail;
};

struct PredictionState {
    AnnotatedSentence query;
    std::vector<TrackedMention> mentions;  // sorted by start, non-overlapping
    std::vector<ReflectionLogEntry> log;
    std::array<std::uint64_t, 3> prompts_issued{};  // unseen, fn, boundary
    std::size_t parse_failures = 0;

    std::vector<Mention> plain_mentions() const {
        std::vector<Mention> out;
        out.reserve(mentions.size());
        for (const auto& tm : mentions) out.push_back(tm.mention);
        return out;
    }

    bool covered(std::size_t token_index) const {
        return std::any_of(mentions.begin(), mentions.end(), [&](const TrackedMention& tm) {
            return tm.mention.start <= token_index && token_index <= tm.mention.end;
        });
    }

    bool overlaps_any(const Mention& m) const {
        return std::any_of(mentions.begin(), mentions.end(), [&](const TrackedMention& tm) {
            return mentions_overlap(tm.mention, m);
        });
    }

    // Inserts keeping the sort order; refuses overlaps (existing mentions win).
    bool insert_if_free(const Mention& m, Provenance prov) {
        if (overlaps_any(m)) return false;
        const auto at = std::find_if(
            mentions.begin(), mentions.end(),
            [&](const TrackedMention& tm) { return tm.mention.start > m.start; });
        mentions.insert(at, TrackedMention{m, prov});
        check_invariants();
        return true;
    }

    bool erase(const Mention& m) {
        const auto it = std::find_if(mentions.begin(), mentions.end(),
                                     [&](const TrackedMention& tm) { return tm.mention == m; });
        if (it == mentions.end()) return false;
        mentions.erase(it);
        return true;
    }

    void check_invariants() const {
        AnnotatedSentence probe = query;
        probe.mentions = plain_mentions();
        validate_sentence(probe);
    }
};

inline PredictionState make_prediction_state(const AnnotatedSentence& query,
                                             const std::vector<Mention>& icl_mentions) {
    PredictionState state;
    state.query = query;
    state.query.mentions.clear();
    for (const auto& m : icl_mentions) state.insert_if_free(m, Provenance::Icl);
    return state;
}

struct UnseenCandidateSite {
    std::string token;
    std::size_t position = 0;  // first qualifying occurrence

    friend bool operator==(const UnseenCandidateSite&, const UnseenCandidateSite&) = default;
};

// Unseen tokens outside predictions with at least one seen neighbor within C
// whose P(t_e)+P(t_c) clears tau_ctx; sentence order, one site per token.
inline std::vector<UnseenCandidateSite> select_unseen_candidates(const PredictionState& state,
                                                                 const TokenStats& stats,
                                                                 const StatsConfig& stats_cfg,
                                                                 const ReflectionConfig& cfg) {
    std::vector<UnseenCandidateSite> out;
    const auto& tokens = state.query.tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (stats.contains(tokens[i])) continue;
        if (state.covered(i)) continue;
        if (std::any_of(out.begin(), out.end(),
                        [&](const UnseenCandidateSite& s) { return s.token == tokens[i]; }))
            continue;
        const std::size_t c = stats_cfg.context_window;
        const std::size_t lo = i >= c ? i - c : 0;
        const std::size_t hi = std::min(tokens.size() - 1, i + c);
        bool qualified = false;
        for (std::size_t j = lo; j <= hi && !qualified; ++j) {
            if (j == i) continue;
            const auto* counts = stats.find(tokens[j]);
            if (counts && counts->p_entity() + counts->p_context() >= cfg.tau_ctx)
                qualified = true;
        }
        if (qualified) out.push_back({tokens[i], i});
    }
    return out;
}

// Seen tokens outside predictions whose P(t_e) exceeds theta_fn; deduplicated,
// sentence order.
inline std::vector<std::string> select_fn_candidates(const PredictionState& state,
                                                     const TokenStats& stats,
                                                     const ReflectionConfig& cfg) {
    std::vector<std::string> out;
    const auto& tokens = state.query.tokens;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (state.covered(i)) continue;
        const auto* counts = stats.find(tokens[i]);
        if (!counts || counts->p_entity() <= cfg.theta_fn) continue;
        if (std::find(out.begin(), out.end(), tokens[i]) == out.end()) out.push_back(tokens[i]);
    }
    return out;
}

struct BoundaryTokenInfo {
    std::size_t index = 0;
    std::string token;
    bool inside = false;  // true: mention edge token; false: adjacent context
    bool flagged = false;

    friend bool operator==(const BoundaryTokenInfo&, const BoundaryTokenInfo&) = default;
};

// 2K tokens around each boundary: K edge tokens inward, K outward per side,
// clipped at the sentence and at other predicted mentions. Flagged when the
// training statistics contradict the current placement.
inline std::vector<BoundaryTokenInfo> select_boundary_tokens(const Mention& mention,
                                                             const PredictionState& state,
                                                             const TokenStats& stats,
                                                             const ReflectionConfig& cfg) {
    const auto& tokens = state.query.tokens;
    const std::size_t k = cfg.boundary_window;
    std::vector<std::size_t> inside_idx;
    for (std::size_t d = 0; d < k; ++d) {
        const std::size_t left = mention.start + d;
        if (left <= mention.end) inside_idx.push_back(left);
        const std::size_t right = mention.end - d;
        if (right >= mention.start && mention.end >= d) inside_idx.push_back(right);
    }
    std::sort(inside_idx.begin(), inside_idx.end());
    inside_idx.erase(std::unique(inside_idx.begin(), inside_idx.end()), inside_idx.end());

    auto in_other_mention = [&](std::size_t i) {
        return std::any_of(state.mentions.begin(), state.mentions.end(),
                           [&](const TrackedMention& tm) {
                               return !(tm.mention == mention) && tm.mention.start <= i &&
                                      i <= tm.mention.end;
                           });
    };
    std::vector<std::size_t> outside_idx;
    for (std::size_t d = 1; d <= k; ++d) {
        if (mention.start >= d && !in_other_mention(mention.start - d))
            outside_idx.push_back(mention.start - d);
        const std::size_t right = mention.end + d;
        if (right < tokens.size() && !in_other_mention(right)) outside_idx.push_back(right);
    }

    std::vector<BoundaryTokenInfo> out;
    auto add = [&](std::size_t i, bool inside) {
        BoundaryTokenInfo info;
        info.index = i;
        info.token = tokens[i];
        info.inside = inside;
        const auto* counts = stats.find(tokens[i]);
        if (!counts) {
            // No training evidence: inclusion is unsupported, exclusion is fine.
            info.flagged = inside;
        } else {
            const double e = double(counts->entity_count);
            const double non = double(counts->context_count + counts->other_count);
            info.flagged = inside ? non > e + cfg.boundary_margin
                                  : e > non + cfg.boundary_margin;
        }
        out.push_back(std::move(info));
    };
    for (auto i : inside_idx) add(i, true);
    for (auto i : outside_idx) add(i, false);
    std::sort(out.begin(), out.end(),
              [](const BoundaryTokenInfo& a, const BoundaryTokenInfo& b) {
                  return a.index < b.index;
              });
    return out;
}

struct ReflectionRuntime {
    ChatBackend& chat;
    UsageLedger* ledger = nullptr;
    std::string model_id = "gpt-4o";
    double temperature = 0.0;
    int max_output_tokens = 2048;
};

namespace detail {

inline ChatResponse reflect_call(const ReflectionRuntime& rt, Phase phase,
                                 const std::string& prompt) {
    ChatRequest req;
    req.messages = {{"user", prompt}};
    req.temperature = rt.temperature;
    req.max_output_tokens = rt.max_output_tokens;
    req.model_id = rt.model_id;
    ChatResponse resp = rt.chat.complete(req);
    if (rt.ledger) rt.ledger->add(phase, resp.usage);
    return resp;
}

// Demos for one qualifying context token: entity spans flanked by (token,
// opposite-side token) pairs first, then the token's own single-side key.
inline std::vector<SpanRecord> unseen_block_demos(const SpanIndex& index,
                                                  const std::string& token, bool token_is_left,
                                                  const std::vector<std::string>& opposite,
                                                  std::size_t m) {
    std::vector<SpanRecord> hits;
    for (const auto& other : opposite) {
        auto pair_hits = token_is_left ? index.by_context_pair(token, other)
                                       : index.by_context_pair(other, token);
        append_unique(hits, std::move(pair_hits));
    }
    if (hits.empty())
        hits = token_is_left ? index.by_left_context(token) : index.by_right_context(token);
    sort_and_truncate(hits, m);
    return hits;
}

inline bool mention_contains_token(const AnnotatedSentence& s, const Mention& m,
                                   const std::string& token) {
    for (std::size_t i = m.start; i <= m.end; ++i)
        if (s.tokens[i] == token) return true;
    return false;
}

struct StageApplication {
    std::vector<Mention> inserted;
    std::size_t overlap_rejected = 0;
};

// Aligns stage additions and inserts the non-overlapping ones.
inline StageApplication apply_additions(PredictionState& state,
                                        const std::vector<ParsedEntity>& additions,
                                        Provenance prov) {
    StageApplication app;
    const AlignOutcome aligned = align_mentions(additions, state.query);
    for (const auto& m : aligned.mentions) {
        if (state.insert_if_free(m, prov))
            app.inserted.push_back(m);
        else
            ++app.overlap_rejected;
    }
    return app;
}

inline void log_candidates(PredictionState& state, ReflectionKind stage,
                           const std::vector<std::string>& candidates,
                           const std::string& prompt_hash, const StageApplication& app,
                           bool parse_ok) {
    for (const auto& cand : candidates) {
        ReflectionLogEntry entry;
        entry.sentence_id = state.query.id;
        entry.stage = stage;
        entry.candidate = cand;
        entry.prompt_hash = prompt_hash;
        if (!parse_ok) {
            entry.outcome = ReflectionOutcome::NoChange;
            entry.detail = "parse-failure";
        } else {
            const bool added = std::any_of(
                app.inserted.begin(), app.inserted.end(),
                [&](const Mention& m) { return mention_contains_token(state.query, m, cand); });
            entry.outcome = added ? ReflectionOutcome::Added : ReflectionOutcome::NoChange;
        }
        state.log.push_back(std::move(entry));
    }
    // Insertions not attributable to any candidate still count as actions.
    for (const auto& m : app.inserted) {
        const bool attributed = std::any_of(
            candidates.begin(), candidates.end(),
            [&](const std::string& cand) { return mention_contains_token(state.query, m, cand); });
        if (!attributed)
            state.log.push_back({state.query.id, stage, m.surface, prompt_hash,
                                 ReflectionOutcome::Added, "unsolicited-addition"});
    }
}

}  // namespace detail

inline PredictionState run_reflection(PredictionState state, const TokenStats& stats,
                                      const SpanIndex& index, const TaskDescription& task,
                                      const StatsConfig& stats_cfg, const ReflectionConfig& cfg,
                                      const ReflectionRuntime& rt) {
    const std::size_t c = stats_cfg.context_window;

    if (cfg.stage_unseen) {
        const auto sites = select_unseen_candidates(state, stats, stats_cfg, cfg);
        if (!sites.empty()) {
            UnseenPayload payload;
            std::vector<std::string> candidate_tokens;
            for (const auto& site : sites) {
                candidate_tokens.push_back(site.token);
                UnseenCandidate cand;
                cand.token = site.token;
                const auto& tokens = state.query.tokens;
                const std::size_t lo = site.position >= c ? site.position - c : 0;
                const std::size_t hi = std::min(tokens.size() - 1, site.position + c);
                std::vector<std::pair<std::string, bool>> neighbors;  // (token, is_left)
                for (std::size_t j = lo; j <= hi; ++j) {
                    if (j == site.position) continue;
                    const auto* counts = stats.find(tokens[j]);
                    if (!counts || counts->p_entity() + counts->p_context() < cfg.tau_ctx)
                        continue;
                    const bool dup = std::any_of(
                        neighbors.begin(), neighbors.end(),
                        [&](const auto& n) { return n.first == tokens[j]; });
                    if (!dup) neighbors.emplace_back(tokens[j], j < site.position);
                }
                for (const auto& [ctx_token, is_left] : neighbors) {
                    std::vector<std::string> opposite;
                    for (const auto& [other, other_left] : neighbors)
                        if (other_left != is_left) opposite.push_back(other);
                    UnseenContextBlock block;
                    block.context_token = ctx_token;
                    block.demos = detail::unseen_block_demos(index, ctx_token, is_left, opposite,
                                                             cfg.span_demos);
                    cand.blocks.push_back(std::move(block));
                }
                payload.candidates.push_back(std::move(cand));
            }
            const std::string prompt = build_unseen_prompt(task, state.query, payload);
            const ChatRequest probe{{{"user", prompt}}, rt.temperature, rt.max_output_tokens,
                                    rt.model_id};
            const std::string hash = request_hash(probe);
            ++state.prompts_issued[0];
            const ChatResponse resp = detail::reflect_call(rt, Phase::ReflectUnseen, prompt);
            const ReflectionUpdate update =
                parse_reflection_output(ReflectionKind::Unseen, resp.text, task.types);
            detail::StageApplication app;
            if (update.parsed)
                app = detail::apply_additions(state, update.additions, Provenance::Unseen);
            else
                ++state.parse_failures;
            detail::log_candidates(state, ReflectionKind::Unseen, candidate_tokens, hash, app,
                                   update.parsed);
        }
    }

    if (cfg.stage_fn) {
        const auto candidates = select_fn_candidates(state, stats, cfg);
        if (!candidates.empty()) {
            FnPayload payload;
            for (const auto& token : candidates) {
                FnCandidate cand;
                cand.token = token;
                if (const auto* counts = stats.find(token)) cand.stat = *counts;
                SpanDemoQuery q;
                q.mode = SpanDemoMode::TokenContainment;
                q.anchor = token;
                q.demo_count = cfg.span_demos;
                cand.examples = retrieve_span_demos(q, index);
                payload.candidates.push_back(std::move(cand));
            }
            const std::string prompt = build_fn_prompt(task, state.query, payload);
            const ChatRequest probe{{{"user", prompt}}, rt.temperature, rt.max_output_tokens,
                                    rt.model_id};
            const std::string hash = request_hash(probe);
            ++state.prompts_issued[1];
            const ChatResponse resp = detail::reflect_call(rt, Phase::ReflectFn, prompt);
            const ReflectionUpdate update =
                parse_reflection_output(ReflectionKind::FalseNegative, resp.text, task.types);
            detail::StageApplication app;
            if (update.parsed)
                app = detail::apply_additions(state, update.additions, Provenance::Fn);
            else
                ++state.parse_failures;
            detail::log_candidates(state, ReflectionKind::FalseNegative, candidates, hash, app,
                                   update.parsed);
        }
    }

    if (cfg.stage_boundary) {
        // Snapshot: boundary inspects every mention present after stages 1-2,
        // left to right; its own updates never touch other mentions.
        const std::vector<TrackedMention> snapshot = state.mentions;
        for (const auto& tracked : snapshot) {
            const Mention mention = tracked.mention;
            const auto infos = select_boundary_tokens(mention, state, stats, cfg);
            BoundaryPayload payload;
            payload.predicted = mention;
            for (const auto& info : infos) {
                if (!info.flagged) continue;
                BoundaryTokenBlock block;
                block.token = info.token;
                block.status = info.inside ? BoundaryStatus::PartOfEntity
                                           : BoundaryStatus::AdjacentContext;
                if (const auto* counts = stats.find(info.token)) block.stat = *counts;
                SpanDemoQuery q;
                q.mode = SpanDemoMode::CategorySample;
                q.anchor = info.token;
                q.demo_count = cfg.span_demos;
                block.examples = retrieve_span_demos(q, index);
                payload.tokens.push_back(std::move(block));
            }
            if (payload.tokens.empty()) continue;  // nothing contradicts this mention

            const std::string prompt = build_boundary_prompt(task, state.query, payload);
            const ChatRequest probe{{{"user", prompt}}, rt.temperature, rt.max_output_tokens,
                                    rt.model_id};
            const std::string hash = request_hash(probe);
            ++state.prompts_issued[2];
            const ChatResponse resp = detail::reflect_call(rt, Phase::ReflectBoundary, prompt);
            const ReflectionUpdate update =
                parse_reflection_output(ReflectionKind::Boundary, resp.text, task.types);

            ReflectionLogEntry entry;
            entry.sentence_id = state.query.id;
            entry.stage = ReflectionKind::Boundary;
            entry.candidate = mention.surface;
            entry.prompt_hash = hash;
            entry.outcome = ReflectionOutcome::NoChange;
            if (!update.parsed) {
                ++state.parse_failures;
                entry.detail = "parse-failure";
            } else if (update.remove) {
                state.erase(mention);
                entry.outcome = ReflectionOutcome::Removed;
            } else if (update.replacement) {
                const AlignOutcome aligned =
                    align_mentions({*update.replacement}, state.query);
                const Mention* chosen = nullptr;
                for (const auto& m : aligned.mentions)
                    if (mentions_overlap(m, mention)) {
                        chosen = &m;
                        break;
                    }
                if (!chosen) {
                    entry.detail = "replacement-does-not-overlap";
                } else if (*chosen == mention) {
                    entry.detail = "replacement-identical";
                } else {
                    state.erase(mention);
                    if (state.insert_if_free(*chosen, Provenance::Boundary)) {
                        entry.outcome = ReflectionOutcome::Replaced;
                        entry.detail = chosen->surface;
                    } else {
                        // Replacement collides with another mention: restore.
                        state.insert_if_free(mention, tracked.provenance);
                        entry.detail = "replacement-overlaps-existing";
                    }
                }
            }
            state.log.push_back(std::move(entry));
        }
    }

    state.check_invariants();
    return state;
}

struct StageCounts {
    std::uint64_t prompts = 0;
    std::uint64_t added = 0;
    std::uint64_t removed = 0;
    std::uint64_t replaced = 0;
    std::uint64_t no_change = 0;

    std::uint64_t outcomes() const { return added + removed + replaced + no_change; }
};

struct ReflectionReport {
    StageCounts unseen;
    StageCounts fn;
    StageCounts boundary;

    StageCounts& by_kind(ReflectionKind k) {
        switch (k) {
            case ReflectionKind::Unseen: return unseen;
            case ReflectionKind::FalseNegative: return fn;
            case ReflectionKind::Boundary: return boundary;
        }
        throw std::logic_error("unreachable reflection kind");
    }
};

inline ReflectionReport reflection_report(const std::vector<PredictionState>& states) {
    ReflectionReport report;
    for (const auto& state : states) {
        report.unseen.prompts += state.prompts_issued[0];
        report.fn.prompts += state.prompts_issued[1];
        report.boundary.prompts += state.prompts_issued[2];
        for (const auto& entry : state.log) {
            StageCounts& counts = report.by_kind(entry.stage);
            switch (entry.outcome) {
                case ReflectionOutcome::Added: ++counts.added; break;
                case ReflectionOutcome::Removed: ++counts.removed; break;
                case ReflectionOutcome::Replaced: ++counts.replaced; break;
                case ReflectionOutcome::NoChange: ++counts.no_change; break;
            }
        }
    }
    return report;
}

}  // namespace statner
