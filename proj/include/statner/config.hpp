#pragma once

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "statner/corpus.hpp"
#include "statner/reflect.hpp"
#include "statner/retriever.hpp"
#include "statner/stats.hpp"

namespace statner {

enum class CorpusFormat { Conll, Jsonl };

struct DatasetConfig {
    std::string name;
    std::string gloss;  // "a Reuters news article" etc., used in prompts
    CorpusFormat format = CorpusFormat::Conll;
    std::string train_path;
    std::string test_path;
    EntityTypeSet entity_types;
};

enum class ChatMode { Http, Replay, Scripted };
enum class EmbedProvider { Hashed, OpenAi, CacheOnly };

struct BackendConfig {
    ChatMode chat_mode = ChatMode::Replay;
    std::string chat_model = "gpt-4o";
    std::string base_url = "https://api.openai.com/v1";
    std::string fixture;      // replay transcript, or scripted responses (jsonl)
    std::string record_path;  // when set, every live response is appended here
    EmbedProvider embed_provider = EmbedProvider::Hashed;
    std::string embed_model = "text-embedding-3-large";
    std::size_t embed_dim = 64;  // hashed provider only
    std::string embedding_cache;
    std::size_t concurrency = 4;
    double input_price_per_mtok = 2.5;
    double output_price_per_mtok = 10.0;
    int icl_max_tokens = 1024;
    int reflect_max_tokens = 2048;
};

struct RunSection {
    std::string output_dir = "out";
    std::uint64_t seed = 17;
    std::size_t subsample = 0;  // 0 means the whole test set
};

struct RunConfig {
    DatasetConfig dataset;
    StatsConfig stats;
    RetrievalConfig retrieval;
    ReflectionConfig reflection;
    BackendConfig backend;
    RunSection run;

    void validate() const;
};

// Secrets stay out of config files.
inline std::optional<std::string> api_key_from_env() {
    for (const char* name : {"STATNER_API_KEY", "OPENAI_API_KEY"}) {
        if (const char* v = std::getenv(name); v && *v) return std::string(v);
    }
    return std::nullopt;
}

// Published per-dataset defaults; explicit config keys still win.
inline void apply_preset(RunConfig& cfg, const std::string& name) {
    auto set = [&](double l1, double l2, std::size_t c, double we, double wc, double wo,
                   double theta, std::size_t m, std::size_t k) {
        cfg.retrieval.lambda1 = l1;
        cfg.retrieval.lambda2 = l2;
        cfg.stats.context_window = c;
        cfg.retrieval.w_entity = we;
        cfg.retrieval.w_context = wc;
        cfg.retrieval.w_other = wo;
        cfg.reflection.theta_fn = theta;
        cfg.reflection.span_demos = m;
        cfg.reflection.boundary_window = k;
    };
    std::string lower;
    for (char ch : name) lower.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
    if (lower == "ncbi")
        set(1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2);
    else if (lower == "bc2gm")
        set(1, 0.01, 2, 1.0, 0.5, 0.01, 0.9, 1, 2);
    else if (lower == "conll03")
        set(0.01, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2);
    else if (lower == "ontonotes")
        set(1, 1, 2, 1.0, 1.0, 0.01, 0.95, 4, 2);
    else if (lower == "tweetner7")
        set(1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2);
    else if (lower == "default")
        set(1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2);
    else
        throw ConfigError("unknown preset '" + name +
                          "' (expected ncbi, bc2gm, conll03, ontonotes, tweetner7, or default)");
}

namespace detail {

inline void expect_keys(const nlohmann::json& obj, const std::string& where,
                        std::initializer_list<const char*> allowed) {
    for (const auto& [key, value] : obj.items()) {
        (void)value;
        const bool ok = std::any_of(allowed.begin(), allowed.end(),
                                    [&](const char* a) { return key == a; });
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get_or(const nlohmann::json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("bad value for '") + key + "'");
    }
}

inline std::string require_string(const nlohmann::json& obj, const char* key,
                                  const std::string& where) {
    if (!obj.contains(key) || !obj.at(key).is_string())
        throw ConfigError("missing string '" + std::string(key) + "' in " + where);
    return obj.at(key).get<std::string>();
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be an object");
    detail::expect_keys(j, "config root",
                        {"dataset", "preset", "stats", "retrieval", "reflection", "backend",
                         "run"});
    RunConfig cfg;
    if (j.contains("preset")) apply_preset(cfg, j.at("preset").get<std::string>());

    if (!j.contains("dataset")) throw ConfigError("config is missing the dataset section");
    {
        const auto& d = j.at("dataset");
        detail::expect_keys(d, "dataset",
                            {"name", "gloss", "format", "train", "test", "entity_types"});
        cfg.dataset.name = detail::require_string(d, "name", "dataset");
        cfg.dataset.gloss = detail::get_or<std::string>(d, "gloss", "");
        const std::string fmt = detail::get_or<std::string>(d, "format", "conll");
        if (fmt == "conll")
            cfg.dataset.format = CorpusFormat::Conll;
        else if (fmt == "jsonl")
            cfg.dataset.format = CorpusFormat::Jsonl;
        else
            throw ConfigError("dataset.format must be conll or jsonl, got '" + fmt + "'");
        cfg.dataset.train_path = detail::require_string(d, "train", "dataset");
        cfg.dataset.test_path = detail::require_string(d, "test", "dataset");
        if (!d.contains("entity_types") || !d.at("entity_types").is_array() ||
            d.at("entity_types").empty())
            throw ConfigError("dataset.entity_types must be a non-empty array");
        std::vector<EntityType> types;
        for (const auto& t : d.at("entity_types")) {
            EntityType et;
            et.label = detail::require_string(t, "label", "dataset.entity_types");
            et.gloss = detail::get_or<std::string>(t, "gloss", et.label);
            et.gloss_in_icl = detail::get_or<bool>(t, "gloss_in_icl", false);
            detail::expect_keys(t, "dataset.entity_types[]", {"label", "gloss", "gloss_in_icl"});
            types.push_back(std::move(et));
        }
        cfg.dataset.entity_types = EntityTypeSet(std::move(types));
    }

    if (j.contains("stats")) {
        const auto& s = j.at("stats");
        detail::expect_keys(s, "stats", {"context_window"});
        cfg.stats.context_window =
            detail::get_or<std::size_t>(s, "context_window", cfg.stats.context_window);
    }

    if (j.contains("retrieval")) {
        const auto& r = j.at("retrieval");
        detail::expect_keys(r, "retrieval",
                            {"lambda1", "lambda2", "w_entity", "w_context", "w_other",
                             "demo_count", "per_occurrence_token_match"});
        cfg.retrieval.lambda1 = detail::get_or<double>(r, "lambda1", cfg.retrieval.lambda1);
        cfg.retrieval.lambda2 = detail::get_or<double>(r, "lambda2", cfg.retrieval.lambda2);
        cfg.retrieval.w_entity = detail::get_or<double>(r, "w_entity", cfg.retrieval.w_entity);
        cfg.retrieval.w_context = detail::get_or<double>(r, "w_context", cfg.retrieval.w_context);
        cfg.retrieval.w_other = detail::get_or<double>(r, "w_other", cfg.retrieval.w_other);
        cfg.retrieval.demo_count =
            detail::get_or<std::size_t>(r, "demo_count", cfg.retrieval.demo_count);
        cfg.retrieval.per_occurrence_token_match = detail::get_or<bool>(
            r, "per_occurrence_token_match", cfg.retrieval.per_occurrence_token_match);
    }

    if (j.contains("reflection")) {
        const auto& f = j.at("reflection");
        detail::expect_keys(f, "reflection",
                            {"theta_fn", "span_demos", "boundary_window", "tau_ctx",
                             "boundary_margin", "stages"});
        cfg.reflection.theta_fn = detail::get_or<double>(f, "theta_fn", cfg.reflection.theta_fn);
        cfg.reflection.span_demos =
            detail::get_or<std::size_t>(f, "span_demos", cfg.reflection.span_demos);
        cfg.reflection.boundary_window =
            detail::get_or<std::size_t>(f, "boundary_window", cfg.reflection.boundary_window);
        cfg.reflection.tau_ctx = detail::get_or<double>(f, "tau_ctx", cfg.reflection.tau_ctx);
        cfg.reflection.boundary_margin =
            detail::get_or<double>(f, "boundary_margin", cfg.reflection.boundary_margin);
        if (f.contains("stages")) {
            if (!f.at("stages").is_array())
                throw ConfigError("reflection.stages must be an array");
            cfg.reflection.stage_unseen = false;
            cfg.reflection.stage_fn = false;
            cfg.reflection.stage_boundary = false;
            for (const auto& stage : f.at("stages")) {
                const std::string s = stage.get<std::string>();
                if (s == "unseen")
                    cfg.reflection.stage_unseen = true;
                else if (s == "fn")
                    cfg.reflection.stage_fn = true;
                else if (s == "boundary")
                    cfg.reflection.stage_boundary = true;
                else
                    throw ConfigError("unknown reflection stage '" + s + "'");
            }
        }
    }

    if (j.contains("backend")) {
        const auto& b = j.at("backend");
        detail::expect_keys(b, "backend",
                            {"chat_mode", "chat_model", "base_url", "fixture", "record",
                             "embed_provider", "embed_model", "embed_dim", "embedding_cache",
                             "concurrency", "input_price_per_mtok", "output_price_per_mtok",
                             "icl_max_tokens", "reflect_max_tokens"});
        const std::string mode = detail::get_or<std::string>(b, "chat_mode", "replay");
        if (mode == "http")
            cfg.backend.chat_mode = ChatMode::Http;
        else if (mode == "replay")
            cfg.backend.chat_mode = ChatMode::Replay;
        else if (mode == "scripted")
            cfg.backend.chat_mode = ChatMode::Scripted;
        else
            throw ConfigError("backend.chat_mode must be http, replay, or scripted");
        cfg.backend.chat_model =
            detail::get_or<std::string>(b, "chat_model", cfg.backend.chat_model);
        cfg.backend.base_url = detail::get_or<std::string>(b, "base_url", cfg.backend.base_url);
        cfg.backend.fixture = detail::get_or<std::string>(b, "fixture", "");
        cfg.backend.record_path = detail::get_or<std::string>(b, "record", "");
        const std::string provider = detail::get_or<std::string>(b, "embed_provider", "hashed");
        if (provider == "hashed")
            cfg.backend.embed_provider = EmbedProvider::Hashed;
        else if (provider == "openai")
            cfg.backend.embed_provider = EmbedProvider::OpenAi;
        else if (provider == "cache-only")
            cfg.backend.embed_provider = EmbedProvider::CacheOnly;
        else
            throw ConfigError("backend.embed_provider must be hashed, openai, or cache-only");
        cfg.backend.embed_model =
            detail::get_or<std::string>(b, "embed_model", cfg.backend.embed_model);
        cfg.backend.embed_dim =
            detail::get_or<std::size_t>(b, "embed_dim", cfg.backend.embed_dim);
        cfg.backend.embedding_cache = detail::get_or<std::string>(b, "embedding_cache", "");
        cfg.backend.concurrency =
            detail::get_or<std::size_t>(b, "concurrency", cfg.backend.concurrency);
        cfg.backend.input_price_per_mtok = detail::get_or<double>(
            b, "input_price_per_mtok", cfg.backend.input_price_per_mtok);
        cfg.backend.output_price_per_mtok = detail::get_or<double>(
            b, "output_price_per_mtok", cfg.backend.output_price_per_mtok);
        cfg.backend.icl_max_tokens =
            detail::get_or<int>(b, "icl_max_tokens", cfg.backend.icl_max_tokens);
        cfg.backend.reflect_max_tokens =
            detail::get_or<int>(b, "reflect_max_tokens", cfg.backend.reflect_max_tokens);
    }

    if (j.contains("run")) {
        const auto& r = j.at("run");
        detail::expect_keys(r, "run", {"output_dir", "seed", "subsample"});
        cfg.run.output_dir = detail::get_or<std::string>(r, "output_dir", cfg.run.output_dir);
        cfg.run.seed = detail::get_or<std::uint64_t>(r, "seed", cfg.run.seed);
        cfg.run.subsample = detail::get_or<std::size_t>(r, "subsample", cfg.run.subsample);
    }

    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

inline void RunConfig::validate() const {
    if (dataset.name.empty()) throw ConfigError("dataset.name must not be empty");
    if (dataset.train_path.empty()) throw ConfigError("dataset.train must not be empty");
    if (dataset.test_path.empty()) throw ConfigError("dataset.test must not be empty");
    std::set<std::string> labels;
    for (const auto& t : dataset.entity_types.types()) {
        if (t.label.empty()) throw ConfigError("entity type labels must not be empty");
        if (!labels.insert(t.label).second)
            throw ConfigError("duplicate entity type label '" + t.label + "'");
    }
    if (retrieval.lambda1 < 0 || retrieval.lambda2 < 0)
        throw ConfigError("retrieval lambdas must be non-negative");
    if (retrieval.lambda1 == 0 && retrieval.lambda2 == 0)
        throw ConfigError("at least one of lambda1/lambda2 must be positive");
    if (retrieval.w_entity < 0 || retrieval.w_context < 0 || retrieval.w_other < 0)
        throw ConfigError("token weights must be non-negative");
    if (reflection.theta_fn < 0 || reflection.theta_fn > 1)
        throw ConfigError("reflection.theta_fn must lie in [0, 1]");
    if (reflection.tau_ctx < 0 || reflection.tau_ctx > 1)
        throw ConfigError("reflection.tau_ctx must lie in [0, 1]");
    if (reflection.span_demos == 0) throw ConfigError("reflection.span_demos must be positive");
    if (reflection.boundary_window == 0)
        throw ConfigError("reflection.boundary_window must be positive");
    if (backend.chat_mode == ChatMode::Http && backend.base_url.empty())
        throw ConfigError("backend.base_url is required for http chat mode");
    if (backend.chat_mode == ChatMode::Replay && backend.fixture.empty())
        throw ConfigError("backend.fixture is required for replay chat mode");
    if (backend.embed_provider == EmbedProvider::CacheOnly && backend.embedding_cache.empty())
        throw ConfigError("backend.embedding_cache is required for the cache-only provider");
    if (backend.embed_provider == EmbedProvider::Hashed && backend.embed_dim == 0)
        throw ConfigError("backend.embed_dim must be positive");
    if (backend.concurrency == 0) throw ConfigError("backend.concurrency must be positive");
    if (run.output_dir.empty()) throw ConfigError("run.output_dir must not be empty");
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["dataset"]["name"] = cfg.dataset.name;
    j["dataset"]["gloss"] = cfg.dataset.gloss;
    j["dataset"]["format"] = cfg.dataset.format == CorpusFormat::Conll ? "conll" : "jsonl";
    j["dataset"]["train"] = cfg.dataset.train_path;
    j["dataset"]["test"] = cfg.dataset.test_path;
    j["dataset"]["entity_types"] = nlohmann::json::array();
    for (const auto& t : cfg.dataset.entity_types.types())
        j["dataset"]["entity_types"].push_back(
            {{"label", t.label}, {"gloss", t.gloss}, {"gloss_in_icl", t.gloss_in_icl}});
    j["stats"]["context_window"] = cfg.stats.context_window;
    j["retrieval"] = {{"lambda1", cfg.retrieval.lambda1},
                      {"lambda2", cfg.retrieval.lambda2},
                      {"w_entity", cfg.retrieval.w_entity},
                      {"w_context", cfg.retrieval.w_context},
                      {"w_other", cfg.retrieval.w_other},
                      {"demo_count", cfg.retrieval.demo_count},
                      {"per_occurrence_token_match", cfg.retrieval.per_occurrence_token_match}};
    nlohmann::json stages = nlohmann::json::array();
    if (cfg.reflection.stage_unseen) stages.push_back("unseen");
    if (cfg.reflection.stage_fn) stages.push_back("fn");
    if (cfg.reflection.stage_boundary) stages.push_back("boundary");
    j["reflection"] = {{"theta_fn", cfg.reflection.theta_fn},
                       {"span_demos", cfg.reflection.span_demos},
                       {"boundary_window", cfg.reflection.boundary_window},
                       {"tau_ctx", cfg.reflection.tau_ctx},
                       {"boundary_margin", cfg.reflection.boundary_margin},
                       {"stages", stages}};
    const char* mode = cfg.backend.chat_mode == ChatMode::Http
                           ? "http"
                           : cfg.backend.chat_mode == ChatMode::Replay ? "replay" : "scripted";
    const char* provider =
        cfg.backend.embed_provider == EmbedProvider::Hashed
            ? "hashed"
            : cfg.backend.embed_provider == EmbedProvider::OpenAi ? "openai" : "cache-only";
    j["backend"] = {{"chat_mode", mode},
                    {"chat_model", cfg.backend.chat_model},
                    {"base_url", cfg.backend.base_url},
                    {"fixture", cfg.backend.fixture},
                    {"record", cfg.backend.record_path},
                    {"embed_provider", provider},
                    {"embed_model", cfg.backend.embed_model},
                    {"embed_dim", cfg.backend.embed_dim},
                    {"embedding_cache", cfg.backend.embedding_cache},
                    {"concurrency", cfg.backend.concurrency},
                    {"input_price_per_mtok", cfg.backend.input_price_per_mtok},
                    {"output_price_per_mtok", cfg.backend.output_price_per_mtok},
                    {"icl_max_tokens", cfg.backend.icl_max_tokens},
                    {"reflect_max_tokens", cfg.backend.reflect_max_tokens}};
    j["run"] = {{"output_dir", cfg.run.output_dir},
                {"seed", cfg.run.seed},
                {"subsample", cfg.run.subsample}};
    return j;
}

}  // namespace statner
