#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "statner/text.hpp"

namespace statner {

// Inclusive token-index span labeled with an entity type.
struct Mention {
    std::size_t start = 0;
    std::size_t end = 0;  // inclusive
    std::string etype;
    std::string surface;

    friend bool operator==(const Mention&, const Mention&) = default;
};

inline bool mentions_overlap(const Mention& a, const Mention& b) {
    return a.start <= b.end && b.start <= a.end;
}

inline std::string surface_of(const std::vector<std::string>& tokens, std::size_t start,
                              std::size_t end) {
    std::string out;
    for (std::size_t i = start; i <= end && i < tokens.size(); ++i) {
        if (i > start) out += ' ';
        out += tokens[i];
    }
    return out;
}

struct AnnotatedSentence {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<Mention> mentions;  // sorted by start, non-overlapping

    std::string text() const { return join(tokens, " "); }

    friend bool operator==(const AnnotatedSentence&, const AnnotatedSentence&) = default;
};

struct EntityType {
    std::string label;
    std::string gloss;          // e.g. "Person"; empty means no gloss available
    bool gloss_in_icl = false;  // whether the ICL task line shows the gloss
};

class EntityTypeSet {
public:
    EntityTypeSet() = default;
    explicit EntityTypeSet(std::vector<EntityType> types) : types_(std::move(types)) {}

    bool contains(std::string_view label) const {
        return std::any_of(types_.begin(), types_.end(),
                           [&](const EntityType& t) { return t.label == label; });
    }
    const std::vector<EntityType>& types() const { return types_; }
    std::size_t size() const { return types_.size(); }

private:
    std::vector<EntityType> types_;
};

struct Dataset {
    std::string name;
    std::string gloss;  // "a Reuters news article": how prompts describe the source
    EntityTypeSet entity_types;
    std::vector<AnnotatedSentence> train;
    std::vector<AnnotatedSentence> dev;
    std::vector<AnnotatedSentence> test;
};

inline void validate_sentence(const AnnotatedSentence& s, const EntityTypeSet* schema = nullptr) {
    for (const auto& tok : s.tokens) {
        if (tok.empty()) throw DataError("sentence " + s.id + ": empty token");
    }
    if (s.tokens.empty() && !s.mentions.empty())
        throw DataError("sentence " + s.id + ": mentions without tokens");
    const Mention* prev = nullptr;
    for (const auto& m : s.mentions) {
        if (m.start > m.end)
            throw DataError("sentence " + s.id + ": inverted span [" + std::to_string(m.start) +
                            "," + std::to_string(m.end) + "]");
        if (m.end >= s.tokens.size())
            throw DataError("sentence " + s.id + ": span out of bounds [" +
                            std::to_string(m.start) + "," + std::to_string(m.end) + "]");
        if (prev) {
            if (prev->start > m.start)
                throw DataError("sentence " + s.id + ": mentions not sorted by start");
            if (mentions_overlap(*prev, m))
                throw DataError("sentence " + s.id + ": overlapping mentions");
        }
        if (schema && !schema->contains(m.etype))
            throw DataError("sentence " + s.id + ": unknown entity type '" + m.etype + "'");
        if (m.surface != surface_of(s.tokens, m.start, m.end))
            throw DataError("sentence " + s.id + ": mention surface mismatch for '" + m.surface +
                            "'");
        prev = &m;
    }
}

inline void validate_corpus(const std::vector<AnnotatedSentence>& sentences,
                            const EntityTypeSet* schema = nullptr) {
    std::set<std::string> ids;
    for (const auto& s : sentences) {
        validate_sentence(s, schema);
        if (!ids.insert(s.id).second) throw DataError("duplicate sentence id '" + s.id + "'");
    }
}

inline void sort_and_check_mentions(AnnotatedSentence& s) {
    std::sort(s.mentions.begin(), s.mentions.end(),
              [](const Mention& a, const Mention& b) { return a.start < b.start; });
    validate_sentence(s);
}

enum class BioRepair { RepairAsBegin, Strict };

namespace detail {

inline void decode_bio(AnnotatedSentence& s, const std::vector<std::string>& tags,
                       const EntityTypeSet& schema, BioRepair repair) {
    std::optional<Mention> open;
    auto close = [&] {
        if (open) {
            open->surface = surface_of(s.tokens, open->start, open->end);
            s.mentions.push_back(*open);
            open.reset();
        }
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& tag = tags[i];
        if (tag == "O") {
            close();
            continue;
        }
        if (tag.size() < 3 || (tag[0] != 'B' && tag[0] != 'I') || tag[1] != '-')
            throw DataError("sentence " + s.id + ": malformed tag '" + tag + "'");
        const std::string label = tag.substr(2);
        if (!schema.contains(label))
            throw DataError("sentence " + s.id + ": unknown entity type '" + label + "'");
        const bool begins = tag[0] == 'B';
        if (!begins && open && open->etype == label) {
            open->end = i;
            continue;
        }
        if (!begins && repair == BioRepair::Strict)
            throw DataError("sentence " + s.id + ": I-" + label + " without matching B- tag");
        close();
        open = Mention{i, i, label, ""};
    }
    close();
}

}  // namespace detail

// CoNLL format: one token per line, last whitespace column is the BIO tag,
// blank line between sentences, -DOCSTART- lines ignored.
inline std::vector<AnnotatedSentence> load_conll(const std::filesystem::path& path,
                                                 const EntityTypeSet& schema,
                                                 BioRepair repair = BioRepair::RepairAsBegin) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open CoNLL file: " + path.string());
    std::vector<AnnotatedSentence> out;
    std::vector<std::string> tokens;
    std::vector<std::string> tags;
    std::size_t line_no = 0;
    auto flush = [&] {
        if (tokens.empty()) return;
        AnnotatedSentence s;
        s.id = "s" + std::to_string(out.size() + 1);
        s.tokens = std::move(tokens);
        detail::decode_bio(s, tags, schema, repair);
        validate_sentence(s, &schema);
        out.push_back(std::move(s));
        tokens = {};
        tags = {};
    };
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto fields = split_ws(line);
        if (fields.empty()) {
            flush();
            continue;
        }
        if (fields.front() == "-DOCSTART-") continue;
        if (fields.size() < 2)
            throw DataError(path.string() + ":" + std::to_string(line_no) +
                            ": token line without a tag column");
        tokens.push_back(fields.front());
        tags.push_back(fields.back());
    }
    flush();
    return out;
}

// Re-encodes mentions as BIO tags (inverse of the CoNLL decoder).
inline std::vector<std::string> to_bio(const AnnotatedSentence& s) {
    std::vector<std::string> tags(s.tokens.size(), "O");
    for (const auto& m : s.mentions) {
        tags[m.start] = "B-" + m.etype;
        for (std::size_t i = m.start + 1; i <= m.end; ++i) tags[i] = "I-" + m.etype;
    }
    return tags;
}

// JSONL: {"id": ..., "tokens": [...], "entities": [{"start", "end", "type"}]}.
// Missing ids default to "s<1-based line index>".
inline std::vector<AnnotatedSentence> load_jsonl(const std::filesystem::path& path,
                                                 const EntityTypeSet& schema) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open JSONL file: " + path.string());
    std::vector<AnnotatedSentence> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.is_object())
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": invalid JSON record");
        AnnotatedSentence s;
        s.id = rec.value("id", "s" + std::to_string(out.size() + 1));
        if (!rec.contains("tokens") || !rec["tokens"].is_array())
            throw DataError("sentence " + s.id + ": missing tokens array");
        for (const auto& t : rec["tokens"]) {
            if (!t.is_string()) throw DataError("sentence " + s.id + ": non-string token");
            s.tokens.push_back(t.get<std::string>());
        }
        for (const auto& e : rec.value("entities", nlohmann::json::array())) {
            Mention m;
            if (!e.contains("start") || !e.contains("end") || !e.contains("type"))
                throw DataError("sentence " + s.id + ": entity missing start/end/type");
            if (!e["start"].is_number_unsigned() || !e["end"].is_number_unsigned())
                throw DataError("sentence " + s.id + ": entity span must use unsigned indices");
            m.start = e["start"].get<std::size_t>();
            m.end = e["end"].get<std::size_t>();
            m.etype = e["type"].get<std::string>();
            if (m.start > m.end)
                throw DataError("sentence " + s.id + ": inverted span [" + std::to_string(m.start) +
                                "," + std::to_string(m.end) + "]");
            if (m.end >= s.tokens.size())
                throw DataError("sentence " + s.id + ": span out of bounds [" +
                                std::to_string(m.start) + "," + std::to_string(m.end) + "]");
            m.surface = surface_of(s.tokens, m.start, m.end);
            s.mentions.push_back(std::move(m));
        }
        std::sort(s.mentions.begin(), s.mentions.end(),
                  [](const Mention& a, const Mention& b) { return a.start < b.start; });
        validate_sentence(s, &schema);
        out.push_back(std::move(s));
    }
    validate_corpus(out);
    return out;
}

inline nlohmann::json sentence_to_json(const AnnotatedSentence& s) {
    nlohmann::json entities = nlohmann::json::array();
    for (const auto& m : s.mentions)
        entities.push_back({{"start", m.start}, {"end", m.end}, {"type", m.etype}});
    return {{"id", s.id}, {"tokens", s.tokens}, {"entities", entities}};
}

inline void write_jsonl(const std::vector<AnnotatedSentence>& sentences, std::ostream& out) {
    for (const auto& s : sentences) out << sentence_to_json(s).dump() << '\n';
}

// Small fixed corpus used throughout the tests: three sentences over a
// two-type schema, chosen so every token-category case appears.
inline Dataset fixture_t1() {
    Dataset d;
    d.name = "T1";
    d.gloss = "a biomedical abstract";
    d.entity_types = EntityTypeSet({{"Disease", "Disease", false}, {"PER", "Person", false}});

    AnnotatedSentence s1;
    s1.id = "s1";
    s1.tokens = {"The", "risk", "of", "cancer", "increased", "."};
    s1.mentions = {{3, 3, "Disease", "cancer"}};

    AnnotatedSentence s2;
    s2.id = "s2";
    s2.tokens = {"Lionel", "Messi", "and", "Cristiano", "Ronaldo",
                 "are",    "exceptional", "football", "players"};
    s2.mentions = {{0, 1, "PER", "Lionel Messi"}, {3, 4, "PER", "Cristiano Ronaldo"}};

    AnnotatedSentence s3;
    s3.id = "s3";
    s3.tokens = {"The", "weather", "is", "nice", "."};

    d.train = {s1, s2, s3};
    validate_corpus(d.train, &d.entity_types);
    return d;
}

}  // namespace statner
