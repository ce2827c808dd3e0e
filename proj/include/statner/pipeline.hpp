#pragma once

#include <array>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "statner/config.hpp"
#include "statner/eval.hpp"
#include "statner/llm_http.hpp"
#include "statner/reflect.hpp"

namespace statner {

enum class Variant { Icl, IclReflect };
enum class Baseline { LabelGuided, Kate, Bm25 };

inline std::string_view variant_name(Variant v) {
    return v == Variant::Icl ? "icl" : "icl+reflect";
}

inline Variant variant_from(std::string_view s) {
    if (s == "icl") return Variant::Icl;
    if (s == "icl+reflect") return Variant::IclReflect;
    throw ConfigError("unknown variant '" + std::string(s) + "' (expected icl or icl+reflect)");
}

inline std::string_view baseline_name(Baseline b) {
    switch (b) {
        case Baseline::LabelGuided: return "label-guided";
        case Baseline::Kate: return "kate";
        case Baseline::Bm25: return "bm25";
    }
    return "unknown";
}

inline Baseline baseline_from(std::string_view s) {
    if (s == "label-guided") return Baseline::LabelGuided;
    if (s == "kate") return Baseline::Kate;
    if (s == "bm25") return Baseline::Bm25;
    throw ConfigError("unknown baseline '" + std::string(s) +
                      "' (expected label-guided, kate, or bm25)");
}

inline std::string_view reflection_kind_name(ReflectionKind k) {
    switch (k) {
        case ReflectionKind::Unseen: return "unseen";
        case ReflectionKind::FalseNegative: return "fn";
        case ReflectionKind::Boundary: return "boundary";
    }
    return "unknown";
}

inline ReflectionKind reflection_kind_from(std::string_view s) {
    if (s == "unseen") return ReflectionKind::Unseen;
    if (s == "fn") return ReflectionKind::FalseNegative;
    if (s == "boundary") return ReflectionKind::Boundary;
    throw DataError("unknown reflection stage '" + std::string(s) + "'");
}

inline ReflectionOutcome outcome_from(std::string_view s) {
    if (s == "added") return ReflectionOutcome::Added;
    if (s == "removed") return ReflectionOutcome::Removed;
    if (s == "replaced") return ReflectionOutcome::Replaced;
    if (s == "no-change") return ReflectionOutcome::NoChange;
    throw DataError("unknown reflection outcome '" + std::string(s) + "'");
}

namespace detail {

template <typename R>
struct ParallelOutcome {
    std::vector<std::optional<R>> slots;
    std::exception_ptr error;
};

// Fans indices out to up to `limit` workers; results land at their index so
// output order never depends on scheduling. The first failure wins and stops
// the remaining work.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t limit, Fn&& fn)
    -> ParallelOutcome<decltype(fn(std::size_t{}))> {
    using R = decltype(fn(std::size_t{}));
    ParallelOutcome<R> outcome;
    outcome.slots.resize(n);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mu;
    const std::size_t workers = std::max<std::size_t>(1, std::min(limit, std::max<std::size_t>(n, 1)));
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        threads.emplace_back([&] {
            while (!failed.load()) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                try {
                    outcome.slots[i] = fn(i);
                } catch (...) {
                    std::lock_guard lock(error_mu);
                    if (!outcome.error) outcome.error = std::current_exception();
                    failed.store(true);
                    return;
                }
            }
        });
    }
    for (auto& t : threads) t.join();
    return outcome;
}

}  // namespace detail

struct PredictionRecord {
    std::string id;
    std::vector<std::string> tokens;
    std::vector<TrackedMention> mentions;
    std::vector<std::string> demo_ids;  // prompt order, most similar last
    bool parse_failure = false;         // no entity list recovered from the reply
    std::uint64_t dropped_unknown_type = 0;
    std::uint64_t align_dropped = 0;
    std::uint64_t reflection_parse_failures = 0;
    std::array<std::uint64_t, 3> prompts_issued{};  // unseen, fn, boundary
    std::vector<ReflectionLogEntry> log;
};

struct UsageSnapshot {
    std::array<Usage, kPhaseCount> phases{};

    static UsageSnapshot from(const UsageLedger& ledger) {
        UsageSnapshot s;
        for (std::size_t i = 0; i < kPhaseCount; ++i)
            s.phases[i] = ledger.phase_total(static_cast<Phase>(i));
        return s;
    }
};

struct RunManifest {
    nlohmann::json config_snapshot;
    std::string config_hash;
    std::string train_hash;
    std::string test_hash;
    Variant variant = Variant::IclReflect;
    Baseline baseline = Baseline::LabelGuided;
    bool complete = false;
    std::string error;
    std::vector<PredictionRecord> records;
    UsageSnapshot usage;
    std::string manifest_hash;
};

namespace detail {

inline std::string corpus_hash(const std::vector<AnnotatedSentence>& sentences) {
    std::string buf;
    for (const auto& s : sentences) {
        buf += sentence_to_json(s).dump();
        buf += '\n';
    }
    return hex64(fnv1a64(buf));
}

inline nlohmann::json record_to_json(const PredictionRecord& r) {
    nlohmann::json mentions = nlohmann::json::array();
    for (const auto& tm : r.mentions)
        mentions.push_back({{"start", tm.mention.start},
                            {"end", tm.mention.end},
                            {"type", tm.mention.etype},
                            {"surface", tm.mention.surface},
                            {"provenance", std::string(provenance_name(tm.provenance))}});
    return {{"id", r.id},
            {"tokens", r.tokens},
            {"mentions", mentions},
            {"demo_ids", r.demo_ids},
            {"parse_failure", r.parse_failure},
            {"dropped_unknown_type", r.dropped_unknown_type},
            {"align_dropped", r.align_dropped},
            {"reflection_parse_failures", r.reflection_parse_failures},
            {"prompts_issued", r.prompts_issued}};
}

inline nlohmann::json log_entry_to_json(const ReflectionLogEntry& e) {
    return {{"sentence_id", e.sentence_id},
            {"stage", std::string(reflection_kind_name(e.stage))},
            {"candidate", e.candidate},
            {"prompt_hash", e.prompt_hash},
            {"outcome", std::string(outcome_name(e.outcome))},
            {"detail", e.detail}};
}

inline nlohmann::json usage_to_json(const UsageSnapshot& u) {
    nlohmann::json phases = nlohmann::json::array();
    for (std::size_t i = 0; i < kPhaseCount; ++i)
        phases.push_back({{"phase", std::string(phase_name(static_cast<Phase>(i)))},
                          {"input_tokens", u.phases[i].input_tokens},
                          {"output_tokens", u.phases[i].output_tokens},
                          {"estimated", u.phases[i].estimated}});
    return {{"phases", phases}};
}

inline nlohmann::json manifest_core_json(const RunManifest& m) {
    return {{"config", m.config_snapshot},
            {"config_hash", m.config_hash},
            {"train_hash", m.train_hash},
            {"test_hash", m.test_hash},
            {"variant", std::string(variant_name(m.variant))},
            {"baseline", std::string(baseline_name(m.baseline))},
            {"complete", m.complete},
            {"error", m.error},
            {"record_count", m.records.size()},
            {"usage", usage_to_json(m.usage)}};
}

inline std::string compute_manifest_hash(const RunManifest& m) {
    std::string buf = manifest_core_json(m).dump();
    buf += '\n';
    for (const auto& r : m.records) {
        buf += record_to_json(r).dump();
        buf += '\n';
        for (const auto& e : r.log) {
            buf += log_entry_to_json(e).dump();
            buf += '\n';
        }
    }
    return hex64(fnv1a64(buf));
}

}  // namespace detail

inline void finalize_manifest(RunManifest& m) {
    m.manifest_hash = detail::compute_manifest_hash(m);
}

inline void write_manifest(const RunManifest& m, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        nlohmann::json core = detail::manifest_core_json(m);
        core["manifest_hash"] = m.manifest_hash;
        std::ofstream out(dir / "manifest.json");
        if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
        out << core.dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "predictions.jsonl");
        if (!out) throw DataError("cannot write " + (dir / "predictions.jsonl").string());
        for (const auto& r : m.records) out << detail::record_to_json(r).dump() << '\n';
    }
    {
        std::ofstream out(dir / "reflection_log.jsonl");
        if (!out) throw DataError("cannot write " + (dir / "reflection_log.jsonl").string());
        for (const auto& r : m.records)
            for (const auto& e : r.log) out << detail::log_entry_to_json(e).dump() << '\n';
    }
}

inline RunManifest load_manifest(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream in(manifest_path);
    if (!in) throw DataError("cannot open " + manifest_path.string());
    nlohmann::json core;
    try {
        in >> core;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(manifest_path.string() + " is not valid JSON: " + e.what());
    }
    RunManifest m;
    m.config_snapshot = core.at("config");
    m.config_hash = core.at("config_hash").get<std::string>();
    m.train_hash = core.at("train_hash").get<std::string>();
    m.test_hash = core.at("test_hash").get<std::string>();
    m.variant = variant_from(core.at("variant").get<std::string>());
    m.baseline = baseline_from(core.at("baseline").get<std::string>());
    m.complete = core.at("complete").get<bool>();
    m.error = core.value("error", "");
    m.manifest_hash = core.value("manifest_hash", "");
    const auto& phases = core.at("usage").at("phases");
    for (const auto& p : phases) {
        const std::string name = p.at("phase").get<std::string>();
        for (std::size_t i = 0; i < kPhaseCount; ++i) {
            if (name == phase_name(static_cast<Phase>(i))) {
                m.usage.phases[i].input_tokens = p.at("input_tokens").get<std::uint64_t>();
                m.usage.phases[i].output_tokens = p.at("output_tokens").get<std::uint64_t>();
                m.usage.phases[i].estimated = p.at("estimated").get<bool>();
            }
        }
    }

    std::ifstream preds(dir / "predictions.jsonl");
    if (!preds) throw DataError("cannot open " + (dir / "predictions.jsonl").string());
    std::string line;
    while (std::getline(preds, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        PredictionRecord r;
        r.id = j.at("id").get<std::string>();
        r.tokens = j.at("tokens").get<std::vector<std::string>>();
        for (const auto& mj : j.at("mentions")) {
            TrackedMention tm;
            tm.mention.start = mj.at("start").get<std::size_t>();
            tm.mention.end = mj.at("end").get<std::size_t>();
            tm.mention.etype = mj.at("type").get<std::string>();
            tm.mention.surface = mj.at("surface").get<std::string>();
            const auto prov = provenance_from(mj.at("provenance").get<std::string>());
            if (!prov) throw DataError("unknown provenance in predictions.jsonl");
            tm.provenance = *prov;
            r.mentions.push_back(std::move(tm));
        }
        r.demo_ids = j.at("demo_ids").get<std::vector<std::string>>();
        r.parse_failure = j.at("parse_failure").get<bool>();
        r.dropped_unknown_type = j.at("dropped_unknown_type").get<std::uint64_t>();
        r.align_dropped = j.at("align_dropped").get<std::uint64_t>();
        r.reflection_parse_failures = j.at("reflection_parse_failures").get<std::uint64_t>();
        const auto prompts = j.at("prompts_issued").get<std::vector<std::uint64_t>>();
        if (prompts.size() != 3) throw DataError("prompts_issued must have three entries");
        std::copy(prompts.begin(), prompts.end(), r.prompts_issued.begin());
        m.records.push_back(std::move(r));
    }

    std::ifstream logf(dir / "reflection_log.jsonl");
    if (logf) {
        std::map<std::string, PredictionRecord*> by_id;
        for (auto& r : m.records) by_id[r.id] = &r;
        while (std::getline(logf, line)) {
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            ReflectionLogEntry e;
            e.sentence_id = j.at("sentence_id").get<std::string>();
            e.stage = reflection_kind_from(j.at("stage").get<std::string>());
            e.candidate = j.at("candidate").get<std::string>();
            e.prompt_hash = j.at("prompt_hash").get<std::string>();
            e.outcome = outcome_from(j.at("outcome").get<std::string>());
            e.detail = j.value("detail", "");
            const auto it = by_id.find(e.sentence_id);
            if (it == by_id.end())
                throw DataError("reflection log references unknown sentence '" + e.sentence_id +
                                "'");
            it->second->log.push_back(std::move(e));
        }
    }
    return m;
}

inline void validate_paths(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    if (!fs::exists(cfg.dataset.train_path))
        throw ConfigError("dataset.train path does not exist: " + cfg.dataset.train_path);
    if (!fs::exists(cfg.dataset.test_path))
        throw ConfigError("dataset.test path does not exist: " + cfg.dataset.test_path);
    if (cfg.backend.chat_mode == ChatMode::Replay && !fs::exists(cfg.backend.fixture))
        throw ConfigError("replay fixture does not exist: " + cfg.backend.fixture);
    if (cfg.backend.embed_provider == EmbedProvider::CacheOnly &&
        !fs::exists(cfg.backend.embedding_cache))
        throw ConfigError("embedding cache does not exist: " + cfg.backend.embedding_cache);
}

inline std::vector<AnnotatedSentence> load_split(const DatasetConfig& d, const std::string& path) {
    auto sentences = d.format == CorpusFormat::Conll ? load_conll(path, d.entity_types)
                                                     : load_jsonl(path, d.entity_types);
    validate_corpus(sentences, &d.entity_types);
    return sentences;
}

struct EmbeddingSetup {
    std::unique_ptr<EmbeddingBackend> backend;  // null for cache-only
    std::unique_ptr<EmbeddingCache> cache;      // null when no cache path given

    std::vector<EmbeddingVector> fetch(const std::vector<std::string>& texts) {
        if (cache) return cache->get(texts);
        if (!backend) throw ConfigError("no embedding provider available");
        return backend->embed(texts);
    }
};

inline EmbeddingSetup make_embedding_setup(const BackendConfig& cfg, UsageLedger* ledger) {
    EmbeddingSetup setup;
    switch (cfg.embed_provider) {
        case EmbedProvider::Hashed:
            setup.backend = std::make_unique<HashedEmbeddingBackend>(cfg.embed_dim);
            break;
        case EmbedProvider::OpenAi: {
            const auto key = api_key_from_env();
            if (!key)
                throw ConfigError(
                    "openai embedding provider requires STATNER_API_KEY or OPENAI_API_KEY");
            setup.backend = std::make_unique<HttpEmbeddingBackend>(
                cfg.base_url, *key, cfg.embed_model, RetryPolicy{}, 256, ledger);
            break;
        }
        case EmbedProvider::CacheOnly:
            break;
    }
    if (!cfg.embedding_cache.empty()) {
        if (setup.backend)
            setup.cache =
                std::make_unique<EmbeddingCache>(cfg.embedding_cache, setup.backend.get());
        else
            setup.cache = std::make_unique<EmbeddingCache>(cfg.embedding_cache, "", "", nullptr);
    }
    return setup;
}

struct ChatStack {
    std::unique_ptr<ChatBackend> inner;
    std::unique_ptr<RecordingChatBackend> recorder;

    ChatBackend& use() { return recorder ? *recorder : *inner; }
};

inline ChatStack make_chat_stack(const BackendConfig& cfg) {
    ChatStack stack;
    switch (cfg.chat_mode) {
        case ChatMode::Scripted: {
            auto scripted = std::make_unique<ScriptedChatBackend>();
            if (!cfg.fixture.empty()) {
                std::ifstream in(cfg.fixture);
                if (!in) throw ConfigError("cannot open script file '" + cfg.fixture + "'");
                std::string line;
                std::size_t line_no = 0;
                while (std::getline(in, line)) {
                    ++line_no;
                    if (line.empty()) continue;
                    nlohmann::json j = nlohmann::json::value_t::discarded;
                    try {
                        j = nlohmann::json::parse(line);
                    } catch (const nlohmann::json::exception&) {
                    }
                    if (!j.is_string())
                        throw DataError("script line " + std::to_string(line_no) + " in '" +
                                        cfg.fixture + "' must be a JSON string");
                    scripted->push(j.get<std::string>());
                }
            }
            stack.inner = std::move(scripted);
            break;
        }
        case ChatMode::Replay:
            stack.inner = std::make_unique<ReplayChatBackend>(cfg.fixture);
            break;
        case ChatMode::Http: {
            const auto key = api_key_from_env();
            if (!key)
                throw ConfigError("http chat mode requires STATNER_API_KEY or OPENAI_API_KEY");
            stack.inner = std::make_unique<HttpChatBackend>(cfg.base_url, *key);
            break;
        }
    }
    if (!cfg.record_path.empty())
        stack.recorder = std::make_unique<RecordingChatBackend>(*stack.inner, cfg.record_path);
    return stack;
}

// Executes the pipeline over the configured test split. On a worker failure
// the partial manifest (completed records only, marked incomplete) is left in
// *partial before the original error is rethrown.
inline RunManifest run_pipeline(const RunConfig& cfg, Variant variant, Baseline baseline,
                                RunManifest* partial = nullptr) {
    validate_paths(cfg);
    const auto train = load_split(cfg.dataset, cfg.dataset.train_path);
    auto test = load_split(cfg.dataset, cfg.dataset.test_path);
    if (cfg.run.subsample > 0 && cfg.run.subsample < test.size()) {
        const auto keep = sample_indices(test.size(), cfg.run.subsample, cfg.run.seed);
        std::vector<AnnotatedSentence> sub;
        sub.reserve(keep.size());
        for (auto i : keep) sub.push_back(test[i]);
        test = std::move(sub);
    }

    const TokenStats stats = build_token_stats(train, cfg.stats);
    const SpanIndex index = build_span_index(train, cfg.stats);
    const TaskDescription task{cfg.dataset.gloss, cfg.dataset.entity_types};

    UsageLedger ledger;
    EmbeddingSetup embeddings = make_embedding_setup(cfg.backend, &ledger);

    // All vector fetching happens up front; workers only read.
    TokenVectorMap token_vectors;
    SentenceVectorMap sentence_vectors;
    if (baseline == Baseline::LabelGuided && cfg.retrieval.lambda2 != 0.0) {
        std::set<std::string> vocab;
        for (const auto& s : train)
            for (const auto& t : s.tokens) vocab.insert(t);
        for (const auto& s : test)
            for (const auto& t : s.tokens) vocab.insert(t);
        const std::vector<std::string> tokens(vocab.begin(), vocab.end());
        const auto vecs = embeddings.fetch(tokens);
        for (std::size_t i = 0; i < tokens.size(); ++i) token_vectors[tokens[i]] = vecs[i];
    } else if (baseline == Baseline::Kate) {
        std::vector<std::string> ids;
        std::vector<std::string> texts;
        for (const auto* split : {&std::as_const(train), &std::as_const(test)})
            for (const auto& s : *split) {
                ids.push_back(s.id);
                texts.push_back(s.text());
            }
        const auto vecs = embeddings.fetch(texts);
        for (std::size_t i = 0; i < ids.size(); ++i) sentence_vectors[ids[i]] = vecs[i];
    }

    std::optional<Retriever> retriever;
    std::optional<Bm25Index> bm25;
    if (baseline == Baseline::LabelGuided)
        retriever.emplace(train, stats, cfg.retrieval,
                          cfg.retrieval.lambda2 != 0.0 ? &token_vectors : nullptr);
    else if (baseline == Baseline::Bm25)
        bm25.emplace(train);

    std::map<std::string, const AnnotatedSentence*> train_by_id;
    for (const auto& s : train) train_by_id[s.id] = &s;

    ChatStack chat = make_chat_stack(cfg.backend);
    ChatBackend& backend = chat.use();

    auto worker = [&](std::size_t i) -> PredictionRecord {
        const AnnotatedSentence& query = test[i];
        PredictionRecord record;
        record.id = query.id;
        record.tokens = query.tokens;

        std::vector<ScoredDemo> scored;
        if (baseline == Baseline::LabelGuided) {
            scored = retriever->retrieve(query);
        } else if (baseline == Baseline::Kate) {
            const auto it = sentence_vectors.find(query.id);
            if (it == sentence_vectors.end())
                throw DataError("missing sentence vector for '" + query.id + "'");
            scored = kate_rank(it->second, train, sentence_vectors, cfg.retrieval.demo_count);
        } else {
            scored = bm25_rank(query, train, 1.5, 0.75, cfg.retrieval.demo_count);
        }
        std::vector<const AnnotatedSentence*> demos;
        for (const auto& d : scored) {
            record.demo_ids.push_back(d.sentence_id);
            demos.push_back(train_by_id.at(d.sentence_id));
        }

        const std::string prompt = build_icl_prompt(task, demos, query);
        ChatRequest req;
        req.messages = {{"user", prompt}};
        req.temperature = 0.0;
        req.max_output_tokens = cfg.backend.icl_max_tokens;
        req.model_id = cfg.backend.chat_model;
        const ChatResponse resp = backend.complete(req);
        ledger.add(Phase::Icl, resp.usage);

        const ParseOutcome parsed = parse_entity_output(resp.text, cfg.dataset.entity_types);
        record.dropped_unknown_type = parsed.dropped_unknown_type;
        PredictionState state;
        if (parsed.ok) {
            const AlignOutcome aligned = align_mentions(parsed.entities, query);
            record.align_dropped = aligned.dropped;
            state = make_prediction_state(query, aligned.mentions);
        } else {
            record.parse_failure = true;
            state = make_prediction_state(query, {});
        }

        if (variant == Variant::IclReflect) {
            ReflectionRuntime rt{backend, &ledger, cfg.backend.chat_model, 0.0,
                                 cfg.backend.reflect_max_tokens};
            state = run_reflection(std::move(state), stats, index, task, cfg.stats,
                                   cfg.reflection, rt);
        }
        record.mentions = state.mentions;
        record.log = state.log;
        record.prompts_issued = state.prompts_issued;
        record.reflection_parse_failures = state.parse_failures;
        return record;
    };

    auto outcome = detail::parallel_map(test.size(), cfg.backend.concurrency, worker);

    RunManifest manifest;
    manifest.config_snapshot = run_config_to_json(cfg);
    manifest.config_hash = hex64(fnv1a64(manifest.config_snapshot.dump()));
    manifest.train_hash = detail::corpus_hash(train);
    manifest.test_hash = detail::corpus_hash(test);
    manifest.variant = variant;
    manifest.baseline = baseline;
    for (auto& slot : outcome.slots)
        if (slot) manifest.records.push_back(std::move(*slot));
    manifest.usage = UsageSnapshot::from(ledger);
    if (outcome.error) {
        manifest.complete = false;
        try {
            std::rethrow_exception(outcome.error);
        } catch (const std::exception& e) {
            manifest.error = e.what();
        } catch (...) {
            manifest.error = "unknown error";
        }
        finalize_manifest(manifest);
        if (partial) *partial = std::move(manifest);
        std::rethrow_exception(outcome.error);
    }
    manifest.complete = true;
    finalize_manifest(manifest);
    return manifest;
}

// --- commands ------------------------------------------------------------

inline std::string_view span_kind_name(SpanKind k) {
    switch (k) {
        case SpanKind::EntitySpan: return "entity";
        case SpanKind::ContextSpan: return "context";
        case SpanKind::OtherSpan: return "other";
    }
    return "unknown";
}

inline nlohmann::json span_record_to_json(const SpanRecord& r) {
    nlohmann::json label;
    if (r.label)
        label = {{"surface", r.label->surface}, {"type", r.label->etype}};
    return {{"kind", std::string(span_kind_name(r.kind))},
            {"anchor", r.anchor_token},
            {"sentence_id", r.sentence_id},
            {"window_start", r.window_start},
            {"window_end", r.window_end},
            {"rendered", r.rendered},
            {"label", label},
            {"freq", r.freq}};
}

struct StatsCommandResult {
    std::filesystem::path stats_path;
    std::filesystem::path spans_path;
    std::size_t vocabulary = 0;
    std::string top_tokens;  // human-readable inspection table
};

inline StatsCommandResult cmd_stats(const RunConfig& cfg, std::size_t top_k = 20) {
    namespace fs = std::filesystem;
    if (!fs::exists(cfg.dataset.train_path))
        throw ConfigError("dataset.train path does not exist: " + cfg.dataset.train_path);
    const auto train = load_split(cfg.dataset, cfg.dataset.train_path);
    const TokenStats stats = build_token_stats(train, cfg.stats);
    const SpanIndex index = build_span_index(train, cfg.stats);

    fs::create_directories(cfg.run.output_dir);
    StatsCommandResult result;
    result.stats_path = fs::path(cfg.run.output_dir) / "stats.jsonl";
    result.spans_path = fs::path(cfg.run.output_dir) / "spans.jsonl";
    result.vocabulary = stats.size();
    {
        std::ofstream out(result.stats_path);
        if (!out) throw DataError("cannot write " + result.stats_path.string());
        write_stats_snapshot(stats, out);
    }
    {
        std::ofstream out(result.spans_path);
        if (!out) throw DataError("cannot write " + result.spans_path.string());
        for (const auto& r : index.all_spans()) out << span_record_to_json(r).dump() << '\n';
    }

    std::vector<std::pair<std::string, TokenCategoryCounts>> ranked(stats.entries().begin(),
                                                                    stats.entries().end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second.p_entity() != b.second.p_entity())
            return a.second.p_entity() > b.second.p_entity();
        return a.first < b.first;
    });
    std::ostringstream table;
    table << "token\tentity\tcontext\tother\tP(t_e)\n";
    for (std::size_t i = 0; i < std::min(top_k, ranked.size()); ++i) {
        const auto& [token, c] = ranked[i];
        table << token << '\t' << c.entity_count << '\t' << c.context_count << '\t'
              << c.other_count << '\t' << c.p_entity() << '\n';
    }
    result.top_tokens = table.str();
    return result;
}

struct EmbedCacheResult {
    std::size_t texts = 0;
    std::size_t cached = 0;
};

// Warms the embedding cache with every text any retriever could ask for.
inline EmbedCacheResult cmd_embed_cache(const RunConfig& cfg) {
    if (cfg.backend.embedding_cache.empty())
        throw ConfigError("embed-cache requires backend.embedding_cache to be set");
    if (cfg.backend.embed_provider == EmbedProvider::CacheOnly)
        throw ConfigError("embed-cache cannot run with the cache-only provider");
    namespace fs = std::filesystem;
    if (!fs::exists(cfg.dataset.train_path))
        throw ConfigError("dataset.train path does not exist: " + cfg.dataset.train_path);
    if (!fs::exists(cfg.dataset.test_path))
        throw ConfigError("dataset.test path does not exist: " + cfg.dataset.test_path);
    const auto train = load_split(cfg.dataset, cfg.dataset.train_path);
    const auto test = load_split(cfg.dataset, cfg.dataset.test_path);
    UsageLedger ledger;
    EmbeddingSetup setup = make_embedding_setup(cfg.backend, &ledger);
    std::set<std::string> texts;
    for (const auto* split : {&train, &test})
        for (const auto& s : *split) {
            texts.insert(s.text());
            for (const auto& t : s.tokens) texts.insert(t);
        }
    const std::vector<std::string> ordered(texts.begin(), texts.end());
    setup.fetch(ordered);
    EmbedCacheResult result;
    result.texts = ordered.size();
    result.cached = setup.cache ? setup.cache->size() : 0;
    return result;
}

inline ReflectionReport manifest_reflection_report(const RunManifest& m) {
    ReflectionReport report;
    for (const auto& r : m.records) {
        report.unseen.prompts += r.prompts_issued[0];
        report.fn.prompts += r.prompts_issued[1];
        report.boundary.prompts += r.prompts_issued[2];
        for (const auto& e : r.log) {
            StageCounts& counts = report.by_kind(e.stage);
            switch (e.outcome) {
                case ReflectionOutcome::Added: ++counts.added; break;
                case ReflectionOutcome::Removed: ++counts.removed; break;
                case ReflectionOutcome::Replaced: ++counts.replaced; break;
                case ReflectionOutcome::NoChange: ++counts.no_change; break;
            }
        }
    }
    return report;
}

struct EvalReports {
    EvalResult overall;
    ErrorBreakdown errors;
    SeenUnseenBreakdown seen_unseen;
    std::optional<double> retriever_sanity;
    ReflectionReport reflection;
    CostSummary cost;
    std::optional<BootstrapResult> bootstrap;
};

// Read-only evaluation of a finished manifest against the configured gold
// test split.
inline EvalReports cmd_eval(const RunManifest& manifest, std::uint64_t bootstrap_resamples = 1000) {
    if (!manifest.complete)
        throw DataError("manifest is marked incomplete; refusing to evaluate");
    const RunConfig cfg = parse_run_config(manifest.config_snapshot);
    const auto train = load_split(cfg.dataset, cfg.dataset.train_path);
    const auto test_all = load_split(cfg.dataset, cfg.dataset.test_path);
    std::map<std::string, const AnnotatedSentence*> gold_by_id;
    for (const auto& s : test_all) gold_by_id[s.id] = &s;

    std::vector<AnnotatedSentence> gold;
    std::vector<AnnotatedSentence> pred;
    std::map<std::string, std::vector<std::string>> demo_ids;
    for (const auto& r : manifest.records) {
        const auto it = gold_by_id.find(r.id);
        if (it == gold_by_id.end())
            throw DataError("manifest record '" + r.id + "' has no gold sentence");
        gold.push_back(*it->second);
        AnnotatedSentence p;
        p.id = r.id;
        p.tokens = r.tokens;
        for (const auto& tm : r.mentions) p.mentions.push_back(tm.mention);
        sort_and_check_mentions(p);
        pred.push_back(std::move(p));
        demo_ids[r.id] = r.demo_ids;
    }

    const TokenStats stats = build_token_stats(train, cfg.stats);

    EvalReports reports;
    reports.overall = strict_f1(gold, pred);
    reports.errors = classify_errors(gold, pred);
    if (!reports.errors.reconciles())
        throw DataError("error breakdown does not reconcile with FP/FN totals");
    reports.seen_unseen = seen_unseen_breakdown(gold, pred, train, stats);
    reports.retriever_sanity = retriever_sanity(gold, train, demo_ids);
    reports.reflection = manifest_reflection_report(manifest);
    UsageLedger ledger;
    for (std::size_t i = 0; i < kPhaseCount; ++i)
        ledger.add(static_cast<Phase>(i), manifest.usage.phases[i]);
    reports.cost = usage_report(ledger, Pricing{cfg.backend.input_price_per_mtok,
                                                cfg.backend.output_price_per_mtok});
    if (gold.size() >= 2)
        reports.bootstrap = bootstrap_ci(gold, pred, bootstrap_resamples, 0.95, cfg.run.seed);
    return reports;
}

inline nlohmann::json eval_reports_to_json(const EvalReports& r) {
    auto eval_json = [](const EvalResult& e) {
        return nlohmann::json{{"tp", e.tp},     {"fp", e.fp},         {"fn", e.fn},
                              {"precision", e.precision()}, {"recall", e.recall()},
                              {"f1", e.f1()}};
    };
    nlohmann::json j;
    j["overall"] = eval_json(r.overall);
    j["errors"] = {{"type_errors", r.errors.type_errors},
                   {"paired_fp_fn", r.errors.paired_fp_fn},
                   {"unique_fp", r.errors.unique_fp},
                   {"unique_fn", r.errors.unique_fn},
                   {"multi_fp", r.errors.multi_fp},
                   {"multi_fn", r.errors.multi_fn},
                   {"total_fp", r.errors.total_fp},
                   {"total_fn", r.errors.total_fn}};
    j["seen_unseen"] = {{"seen", eval_json(r.seen_unseen.seen)},
                        {"unseen_seen_tokens", eval_json(r.seen_unseen.unseen_seen_tokens)},
                        {"unseen_unseen_tokens", eval_json(r.seen_unseen.unseen_unseen_tokens)},
                        {"residual_fp", r.seen_unseen.residual_fp}};
    if (r.retriever_sanity)
        j["retriever_sanity"] = *r.retriever_sanity;
    else
        j["retriever_sanity"] = nullptr;
    auto stage_json = [](const StageCounts& c) {
        return nlohmann::json{{"prompts", c.prompts},   {"added", c.added},
                              {"removed", c.removed},   {"replaced", c.replaced},
                              {"no_change", c.no_change}};
    };
    j["reflection"] = {{"unseen", stage_json(r.reflection.unseen)},
                       {"fn", stage_json(r.reflection.fn)},
                       {"boundary", stage_json(r.reflection.boundary)}};
    nlohmann::json cost_lines = nlohmann::json::array();
    for (const auto& line : r.cost.lines)
        cost_lines.push_back({{"phase", std::string(phase_name(line.phase))},
                              {"input_tokens", line.usage.input_tokens},
                              {"output_tokens", line.usage.output_tokens},
                              {"estimated", line.usage.estimated},
                              {"cost_usd", line.cost}});
    j["cost"] = {{"lines", cost_lines},
                 {"total_input_tokens", r.cost.total_usage.input_tokens},
                 {"total_output_tokens", r.cost.total_usage.output_tokens},
                 {"total_cost_usd", r.cost.total_cost}};
    if (r.bootstrap)
        j["bootstrap"] = {{"f1", r.bootstrap->f1},
                          {"lower", r.bootstrap->lower},
                          {"upper", r.bootstrap->upper},
                          {"margin", r.bootstrap->margin()},
                          {"resamples", r.bootstrap->resamples}};
    return j;
}

inline EvalReports eval_reports_from_json(const nlohmann::json& j) {
    auto eval_from = [](const nlohmann::json& e) {
        EvalResult r;
        r.tp = e.at("tp").get<std::uint64_t>();
        r.fp = e.at("fp").get<std::uint64_t>();
        r.fn = e.at("fn").get<std::uint64_t>();
        return r;
    };
    EvalReports r;
    r.overall = eval_from(j.at("overall"));
    const auto& e = j.at("errors");
    r.errors.type_errors = e.at("type_errors").get<std::uint64_t>();
    r.errors.paired_fp_fn = e.at("paired_fp_fn").get<std::uint64_t>();
    r.errors.unique_fp = e.at("unique_fp").get<std::uint64_t>();
    r.errors.unique_fn = e.at("unique_fn").get<std::uint64_t>();
    r.errors.multi_fp = e.at("multi_fp").get<std::uint64_t>();
    r.errors.multi_fn = e.at("multi_fn").get<std::uint64_t>();
    r.errors.total_fp = e.at("total_fp").get<std::uint64_t>();
    r.errors.total_fn = e.at("total_fn").get<std::uint64_t>();
    const auto& su = j.at("seen_unseen");
    r.seen_unseen.seen = eval_from(su.at("seen"));
    r.seen_unseen.unseen_seen_tokens = eval_from(su.at("unseen_seen_tokens"));
    r.seen_unseen.unseen_unseen_tokens = eval_from(su.at("unseen_unseen_tokens"));
    r.seen_unseen.residual_fp = su.at("residual_fp").get<std::uint64_t>();
    if (j.contains("retriever_sanity") && !j.at("retriever_sanity").is_null())
        r.retriever_sanity = j.at("retriever_sanity").get<double>();
    auto stage_from = [](const nlohmann::json& s) {
        StageCounts c;
        c.prompts = s.at("prompts").get<std::uint64_t>();
        c.added = s.at("added").get<std::uint64_t>();
        c.removed = s.at("removed").get<std::uint64_t>();
        c.replaced = s.at("replaced").get<std::uint64_t>();
        c.no_change = s.at("no_change").get<std::uint64_t>();
        return c;
    };
    r.reflection.unseen = stage_from(j.at("reflection").at("unseen"));
    r.reflection.fn = stage_from(j.at("reflection").at("fn"));
    r.reflection.boundary = stage_from(j.at("reflection").at("boundary"));
    for (const auto& line_json : j.at("cost").at("lines")) {
        CostLine line;
        const std::string name = line_json.at("phase").get<std::string>();
        for (std::size_t i = 0; i < kPhaseCount; ++i)
            if (name == phase_name(static_cast<Phase>(i))) line.phase = static_cast<Phase>(i);
        line.usage.input_tokens = line_json.at("input_tokens").get<std::uint64_t>();
        line.usage.output_tokens = line_json.at("output_tokens").get<std::uint64_t>();
        line.usage.estimated = line_json.at("estimated").get<bool>();
        line.cost = line_json.at("cost_usd").get<double>();
        r.cost.lines.push_back(line);
        r.cost.total_usage += line.usage;
        r.cost.total_cost += line.cost;
    }
    if (j.contains("bootstrap")) {
        BootstrapResult b;
        b.f1 = j.at("bootstrap").at("f1").get<double>();
        b.lower = j.at("bootstrap").at("lower").get<double>();
        b.upper = j.at("bootstrap").at("upper").get<double>();
        b.resamples = j.at("bootstrap").at("resamples").get<std::uint64_t>();
        r.bootstrap = b;
    }
    return r;
}

inline std::string render_eval_text(const EvalReports& r) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "== overall ==\n"
        << "tp " << r.overall.tp << "  fp " << r.overall.fp << "  fn " << r.overall.fn
        << "  precision " << r.overall.precision() << "  recall " << r.overall.recall()
        << "  f1 " << r.overall.f1() << "\n";
    if (r.bootstrap)
        out << "bootstrap 95% CI [" << r.bootstrap->lower << ", " << r.bootstrap->upper
            << "]  margin " << r.bootstrap->margin() << "  (" << r.bootstrap->resamples
            << " resamples)\n";
    out << "\n== error breakdown ==\n"
        << "type " << r.errors.type_errors << "  paired " << r.errors.paired_fp_fn
        << "  unique_fp " << r.errors.unique_fp << "  unique_fn " << r.errors.unique_fn
        << "  multi_fp " << r.errors.multi_fp << "  multi_fn " << r.errors.multi_fn
        << "  (totals fp " << r.errors.total_fp << " fn " << r.errors.total_fn << ")\n";
    auto eval_line = [&](const char* name, const EvalResult& e) {
        out << name << ": tp " << e.tp << "  fp " << e.fp << "  fn " << e.fn << "  f1 " << e.f1()
            << "\n";
    };
    out << "\n== seen/unseen ==\n";
    eval_line("seen", r.seen_unseen.seen);
    eval_line("unseen (seen tokens)", r.seen_unseen.unseen_seen_tokens);
    eval_line("unseen (unseen tokens)", r.seen_unseen.unseen_unseen_tokens);
    out << "residual fp " << r.seen_unseen.residual_fp << "\n";
    out << "\n== retriever sanity ==\n";
    if (r.retriever_sanity)
        out << "entity coverage " << *r.retriever_sanity << "\n";
    else
        out << "not applicable (no test mention recurs in train)\n";
    auto stage_line = [&](const char* name, const StageCounts& c) {
        out << name << ": prompts " << c.prompts << "  added " << c.added << "  removed "
            << c.removed << "  replaced " << c.replaced << "  no-change " << c.no_change << "\n";
    };
    out << "\n== reflection ==\n";
    stage_line("unseen", r.reflection.unseen);
    stage_line("fn", r.reflection.fn);
    stage_line("boundary", r.reflection.boundary);
    out << "\n== cost ==\n";
    for (const auto& line : r.cost.lines)
        out << phase_name(line.phase) << ": in " << line.usage.input_tokens << "  out "
            << line.usage.output_tokens << (line.usage.estimated ? "  (estimated)" : "")
            << "  $" << line.cost << "\n";
    out << "total: in " << r.cost.total_usage.input_tokens << "  out "
        << r.cost.total_usage.output_tokens << "  $" << r.cost.total_cost << "\n";
    return out.str();
}

}  // namespace statner
