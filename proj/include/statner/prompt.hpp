#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>
#include <statner/prompt_templates.hpp>

#include "statner/retriever.hpp"

namespace statner {

struct TaskDescription {
    std::string dataset_gloss;  // e.g. "a Reuters news article"
    EntityTypeSet types;
};

// '"PER", "LOC", "ORG", and "MISC" ("Miscellaneous")': quoted labels, gloss
// shown only for types flagged gloss_in_icl, Oxford comma, "and".
inline std::string icl_type_list(const EntityTypeSet& types) {
    std::vector<std::string> items;
    for (const auto& t : types.types()) {
        std::string item = "\"" + t.label + "\"";
        if (t.gloss_in_icl && !t.gloss.empty()) item += " (\"" + t.gloss + "\")";
        items.push_back(std::move(item));
    }
    return join_with_conjunction(items, "and");
}

// '"PER" (Person), ..., or "MISC" (Miscellaneous)': every gloss, "or".
inline std::string glossed_type_choices(const EntityTypeSet& types) {
    std::vector<std::string> items;
    for (const auto& t : types.types()) {
        std::string item = "\"" + t.label + "\"";
        if (!t.gloss.empty()) item += " (" + t.gloss + ")";
        items.push_back(std::move(item));
    }
    return join_with_conjunction(items, "or");
}

inline std::string render_entity_json(const std::string& name, const std::string& etype) {
    return "{\"name\": " + nlohmann::json(name).dump() + ", \"type\": " +
           nlohmann::json(etype).dump() + "}";
}

inline std::string render_entity_list_json(const std::vector<Mention>& mentions) {
    std::vector<std::string> items;
    items.reserve(mentions.size());
    for (const auto& m : mentions) items.push_back(render_entity_json(m.surface, m.etype));
    return "{\"named entities\": [" + join(items, ", ") + "]}";
}

inline std::string build_icl_prompt(const TaskDescription& task,
                                    const std::vector<const AnnotatedSentence*>& demos,
                                    const AnnotatedSentence& query) {
    std::string demo_blocks;
    for (const auto* d : demos) {
        demo_blocks += "Input: " + d->text() + "\nOutput: " +
                       render_entity_list_json(d->mentions) + "\n\n";
    }
    return render_slots(tmpl::k_icl,
                        {{"num_types", number_word(task.types.size())},
                         {"type_list", icl_type_list(task.types)},
                         {"demo_blocks", demo_blocks},
                         {"query", query.text()}});
}

struct ParsedEntity {
    std::string name;
    std::string etype;

    friend bool operator==(const ParsedEntity&, const ParsedEntity&) = default;
};

struct ParseOutcome {
    bool ok = false;
    std::vector<ParsedEntity> entities;
    std::size_t dropped_unknown_type = 0;
    std::string raw;  // original text, kept on failure for the record
};

namespace detail {

// Balanced-brace scan honoring JSON strings; returns the object at `open`.
inline std::optional<nlohmann::json> parse_object_at(const std::string& text, std::size_t open,
                                                     std::size_t* end_out = nullptr) {
    int depth = 0;
    bool in_string = false;
    bool escaped = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (escaped)
                escaped = false;
            else if (c == '\\')
                escaped = true;
            else if (c == '"')
                in_string = false;
            continue;
        }
        if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}') {
            if (--depth == 0) {
                nlohmann::json j =
                    nlohmann::json::parse(text.substr(open, i - open + 1), nullptr, false);
                if (j.is_discarded()) return std::nullopt;
                if (end_out) *end_out = i;
                return j;
            }
        }
    }
    return std::nullopt;
}

inline const nlohmann::json* entity_array_of(const nlohmann::json& obj) {
    if (!obj.is_object()) return nullptr;
    for (const char* key : {"named entities", "named_entities"}) {
        const auto it = obj.find(key);
        if (it != obj.end() && it->is_array()) return &*it;
    }
    return nullptr;
}

inline std::vector<ParsedEntity> collect_entities(const nlohmann::json& arr,
                                                  const EntityTypeSet& schema, bool strict,
                                                  std::size_t* dropped_unknown) {
    std::vector<ParsedEntity> out;
    for (const auto& e : arr) {
        if (!e.is_object() || !e.contains("name") || !e.contains("type")) continue;
        if (!e["name"].is_string() || !e["type"].is_string()) continue;
        ParsedEntity pe{e["name"].get<std::string>(), e["type"].get<std::string>()};
        if (pe.name.empty()) continue;
        if (!schema.contains(pe.etype)) {
            if (strict) throw DataError("unknown entity type in model output: '" + pe.etype + "'");
            if (dropped_unknown) ++*dropped_unknown;
            continue;
        }
        out.push_back(std::move(pe));
    }
    return out;
}

}  // namespace detail

// Extracts the last well-formed object carrying a "named entities" (or
// "named_entities") array, tolerating surrounding reasoning text.
inline ParseOutcome parse_entity_output(const std::string& text, const EntityTypeSet& schema,
                                        bool strict_types = false) {
    ParseOutcome out;
    out.raw = text;
    for (std::size_t i = text.size(); i-- > 0;) {
        if (text[i] != '{') continue;
        const auto obj = detail::parse_object_at(text, i);
        if (!obj) continue;
        const nlohmann::json* arr = detail::entity_array_of(*obj);
        if (!arr) continue;
        out.entities = detail::collect_entities(*arr, schema, strict_types,
                                                &out.dropped_unknown_type);
        out.ok = true;
        return out;
    }
    return out;
}

enum class AlignPolicy { AllOccurrences, FirstOnly };

struct AlignOutcome {
    std::vector<Mention> mentions;  // sorted by start, non-overlapping
    std::size_t dropped = 0;        // parsed names with no token-aligned match
};

// Surface-to-span alignment: whitespace-tokenize each name, find contiguous
// token matches, emit non-overlapping mentions leftmost-first with
// leftmost-longest conflict resolution.
inline AlignOutcome align_mentions(const std::vector<ParsedEntity>& parsed,
                                   const AnnotatedSentence& query,
                                   AlignPolicy policy = AlignPolicy::AllOccurrences) {
    struct Candidate {
        std::size_t start;
        std::size_t len;
        std::size_t order;  // position in the parsed list
        const ParsedEntity* src;
    };
    AlignOutcome out;
    std::vector<Candidate> candidates;
    for (std::size_t order = 0; order < parsed.size(); ++order) {
        const auto& pe = parsed[order];
        const auto name_tokens = split_ws(pe.name);
        bool matched = false;
        if (!name_tokens.empty() && name_tokens.size() <= query.tokens.size()) {
            for (std::size_t i = 0; i + name_tokens.size() <= query.tokens.size(); ++i) {
                bool eq = true;
                for (std::size_t k = 0; k < name_tokens.size(); ++k)
                    if (query.tokens[i + k] != name_tokens[k]) {
                        eq = false;
                        break;
                    }
                if (!eq) continue;
                candidates.push_back({i, name_tokens.size(), order, &pe});
                matched = true;
                if (policy == AlignPolicy::FirstOnly) break;
            }
        }
        if (!matched) ++out.dropped;
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
        if (a.start != b.start) return a.start < b.start;
        if (a.len != b.len) return a.len > b.len;
        return a.order < b.order;
    });
    for (const auto& c : candidates) {
        const Mention m{c.start, c.start + c.len - 1, c.src->etype,
                        surface_of(query.tokens, c.start, c.start + c.len - 1)};
        const bool clash = std::any_of(out.mentions.begin(), out.mentions.end(),
                                       [&](const Mention& o) { return mentions_overlap(o, m); });
        if (!clash) out.mentions.push_back(m);
    }
    return out;
}

enum class ReflectionKind { Unseen, FalseNegative, Boundary };

inline constexpr std::string_view kFinalEntitiesMarker =
    "Final predicted entities for the input text (JSON format):";
inline constexpr std::string_view kUpdatedEntityMarker =
    "Updated Predicted Entity (JSON format):";

// ---- reflection prompt payloads ----

struct UnseenContextBlock {
    std::string context_token;
    std::vector<SpanRecord> demos;  // context-matched entity spans
};

struct UnseenCandidate {
    std::string token;
    std::vector<UnseenContextBlock> blocks;  // qualifying neighbors, sentence order
};

struct UnseenPayload {
    std::vector<UnseenCandidate> candidates;
};

struct FnCandidate {
    std::string token;
    TokenCategoryCounts stat;
    SpanDemoResult examples;
};

struct FnPayload {
    std::vector<FnCandidate> candidates;
};

enum class BoundaryStatus { PartOfEntity, AdjacentContext };

struct BoundaryTokenBlock {
    std::string token;
    BoundaryStatus status = BoundaryStatus::PartOfEntity;
    TokenCategoryCounts stat;
    SpanDemoResult examples;
};

struct BoundaryPayload {
    Mention predicted;
    std::vector<BoundaryTokenBlock> tokens;  // flagged tokens, sentence order
};

namespace detail {

inline std::string span_demo_line(const SpanRecord& r) {
    std::string output = r.label ? render_entity_json(r.label->surface, r.label->etype) : "{}";
    return "Input: " + r.rendered + "\nOutput: " + output;
}

inline std::string join_demo_lines(const std::vector<SpanRecord>& records) {
    std::vector<std::string> lines;
    lines.reserve(records.size());
    for (const auto& r : records) lines.push_back(span_demo_line(r));
    return join(lines, "\n\n");
}

// Three headed sections; empty ones still render their header.
inline std::string category_sections(const SpanDemoResult& ex, bool boundary_wording) {
    const std::string neg_header =
        boundary_wording ? "Negative Examples (regular tokens, neither entity nor context):"
                         : "Negative Examples (other tokens, not entity nor context):";
    std::vector<std::string> sections;
    sections.push_back("Positive Examples (part of entity):\n" + join_demo_lines(ex.entity));
    sections.push_back("Hard Negative Examples (context tokens):\n" + join_demo_lines(ex.context));
    sections.push_back(neg_header + "\n" + join_demo_lines(ex.other));
    return join(sections, "\n\n");
}

inline std::string wrap_examples(const std::string& body) {
    return "<examples>\n" + body + "\n</examples>";
}

}  // namespace detail

inline std::string build_unseen_prompt(const TaskDescription& task,
                                       const AnnotatedSentence& query,
                                       const UnseenPayload& payload) {
    std::vector<std::string> candidate_tokens;
    std::vector<std::string> blocks;
    for (const auto& cand : payload.candidates) {
        candidate_tokens.push_back(cand.token);
        std::string block = "<candidate_token>\n" + cand.token + "\n</candidate_token>\n";
        std::vector<std::string> context_tokens;
        for (const auto& b : cand.blocks) context_tokens.push_back(b.context_token);
        block += "<potential_context_tokens_around>\n" + python_list(context_tokens) +
                 "\n</potential_context_tokens_around>";
        for (const auto& b : cand.blocks) {
            block += "\n<context_token>\n" + b.context_token + "\n</context_token>\n" +
                     detail::wrap_examples(detail::join_demo_lines(b.demos));
        }
        blocks.push_back(std::move(block));
    }
    return render_slots(tmpl::k_reflect_unseen,
                        {{"input_text", query.text()},
                         {"candidate_tokens", python_list(candidate_tokens)},
                         {"candidate_blocks", join(blocks, "\n\n")},
                         {"dataset_gloss", task.dataset_gloss},
                         {"num_types", number_word(task.types.size())},
                         {"type_choices", glossed_type_choices(task.types)}});
}

inline std::string build_fn_prompt(const TaskDescription& task, const AnnotatedSentence& query,
                                   const FnPayload& payload) {
    std::vector<std::string> candidate_tokens;
    std::vector<std::string> blocks;
    for (const auto& cand : payload.candidates) {
        candidate_tokens.push_back(cand.token);
        std::string block = "<candidate_token>\n" + cand.token + "\n</candidate_token>\n";
        block += "<token_stat>\n" + token_stat_json(cand.stat) + "\n</token_stat>\n";
        block += detail::wrap_examples(detail::category_sections(cand.examples, false));
        blocks.push_back(std::move(block));
    }
    return render_slots(tmpl::k_reflect_fn,
                        {{"input_text", query.text()},
                         {"candidate_tokens", python_list(candidate_tokens)},
                         {"candidate_blocks", join(blocks, "\n\n")},
                         {"num_types", number_word(task.types.size())},
                         {"type_choices", glossed_type_choices(task.types)}});
}

inline std::string boundary_status_text(BoundaryStatus s) {
    return s == BoundaryStatus::PartOfEntity ? "part of the entity" : "adjacent context";
}

inline std::string build_boundary_prompt(const TaskDescription&, const AnnotatedSentence& query,
                                         const BoundaryPayload& payload) {
    std::vector<std::string> boundary_tokens;
    std::vector<std::string> blocks;
    for (const auto& tok : payload.tokens) {
        boundary_tokens.push_back(tok.token);
        std::string block = "<boundary_token>\n" + tok.token + "\n</boundary_token>\n";
        block += "<status>\n" + boundary_status_text(tok.status) + "\n</status>\n";
        block += "<token_stat>\n" + token_stat_json(tok.stat) + "\n</token_stat>\n";
        block += detail::wrap_examples(detail::category_sections(tok.examples, true));
        blocks.push_back(std::move(block));
    }
    return render_slots(
        tmpl::k_reflect_boundary,
        {{"input_text", query.text()},
         {"predicted_entity", render_entity_json(payload.predicted.surface,
                                                 payload.predicted.etype)},
         {"boundary_tokens", python_list(boundary_tokens)},
         {"token_blocks", join(blocks, "\n\n")}});
}

using ReflectionPayload = std::variant<UnseenPayload, FnPayload, BoundaryPayload>;

inline std::string build_reflection_prompt(ReflectionKind kind, const TaskDescription& task,
                                           const AnnotatedSentence& query,
                                           const ReflectionPayload& payload) {
    switch (kind) {
        case ReflectionKind::Unseen:
            return build_unseen_prompt(task, query, std::get<UnseenPayload>(payload));
        case ReflectionKind::FalseNegative:
            return build_fn_prompt(task, query, std::get<FnPayload>(payload));
        case ReflectionKind::Boundary:
            return build_boundary_prompt(task, query, std::get<BoundaryPayload>(payload));
    }
    throw std::logic_error("unreachable reflection kind");
}

struct ReflectionUpdate {
    bool parsed = false;                     // false → treat as no change
    std::vector<ParsedEntity> additions;     // unseen / false-negative kinds
    bool remove = false;                     // boundary: {} means remove
    std::optional<ParsedEntity> replacement; // boundary: updated entity
    std::size_t dropped_unknown_type = 0;
};

// Reads the update after the kind's output marker; anything malformed yields
// parsed=false so reflection can never corrupt existing predictions.
inline ReflectionUpdate parse_reflection_output(ReflectionKind kind, const std::string& text,
                                                const EntityTypeSet& schema) {
    ReflectionUpdate out;
    const std::string_view marker =
        kind == ReflectionKind::Boundary ? kUpdatedEntityMarker : kFinalEntitiesMarker;
    const std::size_t at = text.rfind(marker);
    if (at == std::string::npos) return out;
    const std::size_t open = text.find('{', at + marker.size());
    if (open == std::string::npos) return out;
    const auto obj = detail::parse_object_at(text, open);
    if (!obj) return out;
    if (kind == ReflectionKind::Boundary) {
        if (obj->empty()) {
            out.remove = true;
            out.parsed = true;
            return out;
        }
        if (!obj->contains("name") || !obj->contains("type") || !(*obj)["name"].is_string() ||
            !(*obj)["type"].is_string())
            return out;
        ParsedEntity pe{(*obj)["name"].get<std::string>(), (*obj)["type"].get<std::string>()};
        if (pe.name.empty() || !schema.contains(pe.etype)) {
            ++out.dropped_unknown_type;
            return out;
        }
        out.replacement = std::move(pe);
        out.parsed = true;
        return out;
    }
    const nlohmann::json* arr = detail::entity_array_of(*obj);
    if (!arr) return out;
    out.additions = detail::collect_entities(*arr, schema, false, &out.dropped_unknown_type);
    out.parsed = true;
    return out;
}

}  // namespace statner
