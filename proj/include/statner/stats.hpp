#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "statner/corpus.hpp"

namespace statner {

struct StatsConfig {
    std::size_t context_window = 2;  // C tokens per side; 0 disables context tokens
};

enum class TokenCategory { Entity, Context, Other };

struct TokenCategoryCounts {
    std::uint64_t entity_count = 0;
    std::uint64_t context_count = 0;
    std::uint64_t other_count = 0;

    std::uint64_t total() const { return entity_count + context_count + other_count; }
    double p_entity() const { return total() ? double(entity_count) / double(total()) : 0.0; }
    double p_context() const { return total() ? double(context_count) / double(total()) : 0.0; }
    double p_other() const { return total() ? double(other_count) / double(total()) : 0.0; }

    friend bool operator==(const TokenCategoryCounts&, const TokenCategoryCounts&) = default;
};

// Category per token occurrence, priority entity > context > other.
inline std::vector<TokenCategory> categorize_tokens(const AnnotatedSentence& s,
                                                    const StatsConfig& cfg) {
    const std::size_t n = s.tokens.size();
    std::vector<TokenCategory> out(n, TokenCategory::Other);
    std::vector<char> inside(n, 0);
    for (const auto& m : s.mentions)
        for (std::size_t i = m.start; i <= m.end; ++i) {
            out[i] = TokenCategory::Entity;
            inside[i] = 1;
        }
    if (cfg.context_window > 0) {
        const std::size_t c = cfg.context_window;
        for (const auto& m : s.mentions) {
            const std::size_t lo = m.start >= c ? m.start - c : 0;
            const std::size_t hi = std::min(n - 1, m.end + c);
            for (std::size_t i = lo; i <= hi; ++i)
                if (!inside[i]) out[i] = TokenCategory::Context;
        }
    }
    return out;
}

class TokenStats {
public:
    using Map = std::map<std::string, TokenCategoryCounts, std::less<>>;

    const TokenCategoryCounts* find(std::string_view token) const {
        const auto it = counts_.find(token);
        return it == counts_.end() ? nullptr : &it->second;
    }
    bool contains(std::string_view token) const { return counts_.find(token) != counts_.end(); }
    std::size_t size() const { return counts_.size(); }
    const Map& entries() const { return counts_; }

    static TokenStats build(const std::vector<AnnotatedSentence>& train, const StatsConfig& cfg) {
        TokenStats stats;
        for (const auto& s : train) {
            const auto cats = categorize_tokens(s, cfg);
            for (std::size_t i = 0; i < s.tokens.size(); ++i) {
                auto& c = stats.counts_[s.tokens[i]];
                switch (cats[i]) {
                    case TokenCategory::Entity: ++c.entity_count; break;
                    case TokenCategory::Context: ++c.context_count; break;
                    case TokenCategory::Other: ++c.other_count; break;
                }
            }
        }
        return stats;
    }

private:
    Map counts_;
    friend TokenStats read_stats_snapshot(std::istream&);
};

inline TokenStats build_token_stats(const std::vector<AnnotatedSentence>& train,
                                    const StatsConfig& cfg) {
    return TokenStats::build(train, cfg);
}

enum class SpanKind { EntitySpan, ContextSpan, OtherSpan };

struct SpanRecord {
    SpanKind kind = SpanKind::EntitySpan;
    std::string anchor_token;
    std::string sentence_id;
    std::vector<std::size_t> token_indices;  // ordered; neighbor-entity tokens removed
    std::size_t window_start = 0;
    std::size_t window_end = 0;
    std::string rendered;
    std::optional<Mention> label;  // absent for other-spans
    std::uint64_t freq = 0;        // retrieval sort key, see SpanIndex

    friend bool operator==(const SpanRecord&, const SpanRecord&) = default;
};

namespace detail {

inline std::vector<char> inside_mask(const AnnotatedSentence& s) {
    std::vector<char> inside(s.tokens.size(), 0);
    for (const auto& m : s.mentions)
        for (std::size_t i = m.start; i <= m.end; ++i) inside[i] = 1;
    return inside;
}

inline SpanRecord make_span(SpanKind kind, std::string anchor, const AnnotatedSentence& s,
                            std::vector<std::size_t> indices, std::optional<Mention> label) {
    SpanRecord r;
    r.kind = kind;
    r.anchor_token = std::move(anchor);
    r.sentence_id = s.id;
    r.window_start = indices.front();
    r.window_end = indices.back();
    std::vector<std::string> toks;
    toks.reserve(indices.size());
    for (auto i : indices) toks.push_back(s.tokens[i]);
    r.rendered = join(toks, " ");
    r.token_indices = std::move(indices);
    r.label = std::move(label);
    return r;
}

// Mention window of up to C tokens per side, minus tokens of other mentions.
inline std::vector<std::size_t> entity_window(const AnnotatedSentence& s, const Mention& m,
                                              const std::vector<char>& inside,
                                              std::size_t c) {
    const std::size_t n = s.tokens.size();
    const std::size_t lo = m.start >= c ? m.start - c : 0;
    const std::size_t hi = std::min(n - 1, m.end + c);
    std::vector<std::size_t> indices;
    for (std::size_t i = lo; i <= hi; ++i) {
        const bool in_this = i >= m.start && i <= m.end;
        if (in_this || !inside[i]) indices.push_back(i);
    }
    return indices;
}

}  // namespace detail

inline std::vector<SpanRecord> extract_entity_spans(const AnnotatedSentence& s,
                                                    const StatsConfig& cfg) {
    const auto inside = detail::inside_mask(s);
    std::vector<SpanRecord> out;
    for (const auto& m : s.mentions) {
        auto indices = detail::entity_window(s, m, inside, cfg.context_window);
        out.push_back(
            detail::make_span(SpanKind::EntitySpan, m.surface, s, std::move(indices), m));
    }
    return out;
}

inline std::vector<SpanRecord> extract_context_and_other_spans(const AnnotatedSentence& s,
                                                               const StatsConfig& cfg) {
    const auto cats = categorize_tokens(s, cfg);
    const auto inside = detail::inside_mask(s);
    const std::size_t n = s.tokens.size();
    const std::size_t c = cfg.context_window;
    std::vector<SpanRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        if (cats[i] == TokenCategory::Context) {
            // One record per adjacent mention, re-using that mention's window.
            for (const auto& m : s.mentions) {
                const std::size_t lo = m.start >= c ? m.start - c : 0;
                const std::size_t hi = std::min(n - 1, m.end + c);
                if (i < lo || i > hi) continue;
                auto indices = detail::entity_window(s, m, inside, c);
                out.push_back(detail::make_span(SpanKind::ContextSpan, s.tokens[i], s,
                                                std::move(indices), m));
            }
        } else if (cats[i] == TokenCategory::Other) {
            const std::size_t half = c > 0 ? std::min<std::size_t>(2, c) : 2;
            const std::size_t lo = i >= half ? i - half : 0;
            const std::size_t hi = std::min(n - 1, i + half);
            std::vector<std::size_t> indices;
            for (std::size_t j = lo; j <= hi; ++j) indices.push_back(j);
            out.push_back(detail::make_span(SpanKind::OtherSpan, s.tokens[i], s,
                                            std::move(indices), std::nullopt));
        }
    }
    return out;
}

// Frozen lookup structure over all SpanRecords of a training split.
class SpanIndex {
public:
    static SpanIndex build(const std::vector<AnnotatedSentence>& train, const StatsConfig& cfg) {
        SpanIndex index;
        // Frequencies first: mention (surface, type) occurrence counts for
        // entity/context spans, other-category counts for other spans.
        std::unordered_map<std::string, std::uint64_t> mention_freq;
        const TokenStats stats = TokenStats::build(train, cfg);
        for (const auto& s : train)
            for (const auto& m : s.mentions) ++mention_freq[pair_key(m.surface, m.etype)];

        for (const auto& s : train) {
            const auto inside = detail::inside_mask(s);
            for (auto& rec : extract_entity_spans(s, cfg)) {
                rec.freq = mention_freq[pair_key(rec.label->surface, rec.label->etype)];
                const std::size_t idx = index.records_.size();
                index.records_.push_back(std::move(rec));
                const auto& stored = index.records_[idx];
                // Reachable from each distinct token of the mention itself.
                std::vector<std::string> seen;
                for (std::size_t i = stored.label->start; i <= stored.label->end; ++i) {
                    const auto& tok = s.tokens[i];
                    if (std::find(seen.begin(), seen.end(), tok) == seen.end()) {
                        seen.push_back(tok);
                        index.entity_by_token_[tok].push_back(idx);
                    }
                }
                // Context-pair keys from the mention's flanking context tokens.
                const auto& m = *stored.label;
                const std::size_t c = cfg.context_window;
                std::vector<std::string> left, right;
                const std::size_t lo = m.start >= c ? m.start - c : 0;
                for (std::size_t i = lo; i < m.start; ++i)
                    if (!inside[i]) left.push_back(s.tokens[i]);
                for (std::size_t i = m.end + 1; i <= std::min(s.tokens.size() - 1, m.end + c);
                     ++i)
                    if (!inside[i]) right.push_back(s.tokens[i]);
                for (const auto& l : left) index.left_context_[l].push_back(idx);
                for (const auto& r : right) index.right_context_[r].push_back(idx);
                for (const auto& l : left)
                    for (const auto& r : right)
                        index.context_pair_[pair_key(l, r)].push_back(idx);
            }
            for (auto& rec : extract_context_and_other_spans(s, cfg)) {
                if (rec.kind == SpanKind::ContextSpan) {
                    rec.freq = mention_freq[pair_key(rec.label->surface, rec.label->etype)];
                } else if (const auto* counts = stats.find(rec.anchor_token)) {
                    rec.freq = counts->other_count;
                }
                const std::size_t idx = index.records_.size();
                const std::string anchor = rec.anchor_token;
                auto& bucket = rec.kind == SpanKind::ContextSpan ? index.context_by_token_
                                                                 : index.other_by_token_;
                index.records_.push_back(std::move(rec));
                bucket[anchor].push_back(idx);
            }
        }
        return index;
    }

    std::vector<SpanRecord> entity_spans(std::string_view token) const {
        return gather(entity_by_token_, std::string(token));
    }
    std::vector<SpanRecord> context_spans(std::string_view token) const {
        return gather(context_by_token_, std::string(token));
    }
    std::vector<SpanRecord> other_spans(std::string_view token) const {
        return gather(other_by_token_, std::string(token));
    }
    // Entity spans whose mention is flanked by this (left, right) token pair.
    std::vector<SpanRecord> by_context_pair(std::string_view left, std::string_view right) const {
        return gather(context_pair_, pair_key(left, right));
    }
    std::vector<SpanRecord> by_left_context(std::string_view token) const {
        return gather(left_context_, std::string(token));
    }
    std::vector<SpanRecord> by_right_context(std::string_view token) const {
        return gather(right_context_, std::string(token));
    }
    std::size_t size() const { return records_.size(); }
    const std::vector<SpanRecord>& all_spans() const { return records_; }

private:
    static std::string pair_key(std::string_view a, std::string_view b) {
        std::string k(a);
        k += '\x1f';
        k += b;
        return k;
    }
    std::vector<SpanRecord> gather(const std::unordered_map<std::string, std::vector<std::size_t>>& map,
                                   const std::string& key) const {
        std::vector<SpanRecord> out;
        const auto it = map.find(key);
        if (it == map.end()) return out;
        out.reserve(it->second.size());
        for (auto idx : it->second) out.push_back(records_[idx]);
        return out;
    }

    std::vector<SpanRecord> records_;
    std::unordered_map<std::string, std::vector<std::size_t>> entity_by_token_;
    std::unordered_map<std::string, std::vector<std::size_t>> context_by_token_;
    std::unordered_map<std::string, std::vector<std::size_t>> other_by_token_;
    std::unordered_map<std::string, std::vector<std::size_t>> context_pair_;
    std::unordered_map<std::string, std::vector<std::size_t>> left_context_;
    std::unordered_map<std::string, std::vector<std::size_t>> right_context_;
};

inline SpanIndex build_span_index(const std::vector<AnnotatedSentence>& train,
                                  const StatsConfig& cfg) {
    return SpanIndex::build(train, cfg);
}

// The five stat fields in the exact order and spelling the prompts use.
inline std::string token_stat_fields(const TokenCategoryCounts& c) {
    const std::string e = std::to_string(c.entity_count);
    const std::string ctx = std::to_string(c.context_count);
    const std::string oth = std::to_string(c.other_count);
    const std::string non = std::to_string(c.context_count + c.other_count);
    return "\"num_occurrences_as_entity\": " + e + ", \"num_occurrences_as_context_tokens\": " +
           ctx + ", \"num_occurrences_as_other_tokens\": " + oth +
           ", \"entity_vs_context_count\": \"" + e + " vs " + ctx +
           "\", \"entity_vs_non_entity_count\": \"" + e + " vs " + non + "\"";
}

inline std::string token_stat_json(const TokenCategoryCounts& c) {
    return "{" + token_stat_fields(c) + "}";
}

// Snapshot: one token per line, loadable without the training corpus.
inline void write_stats_snapshot(const TokenStats& stats, std::ostream& out) {
    for (const auto& [token, counts] : stats.entries()) {
        out << "{\"token\": " << nlohmann::json(token).dump() << ", "
            << token_stat_fields(counts) << "}\n";
    }
}

inline TokenStats read_stats_snapshot(std::istream& in) {
    TokenStats stats;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object() || !rec.contains("token"))
            throw DataError("stats snapshot line " + std::to_string(line_no) + ": invalid record");
        TokenCategoryCounts c;
        c.entity_count = rec.value("num_occurrences_as_entity", 0ull);
        c.context_count = rec.value("num_occurrences_as_context_tokens", 0ull);
        c.other_count = rec.value("num_occurrences_as_other_tokens", 0ull);
        stats.counts_[rec["token"].get<std::string>()] = c;
    }
    return stats;
}

}  // namespace statner
