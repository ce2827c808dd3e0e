#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "statner/config.hpp"
#include "support/desk.hpp"

using statner::ChatMode;
using statner::ConfigError;
using statner::CorpusFormat;
using statner::EmbedProvider;
using statner::RunConfig;

namespace {

nlohmann::json minimal() {
    return nlohmann::json{
        {"dataset",
         {{"name", "toy"},
          {"train", "train.conll"},
          {"test", "test.conll"},
          {"entity_types", nlohmann::json::array({{{"label", "PER"}}})}}},
        {"backend", {{"chat_mode", "scripted"}}},
    };
}

RunConfig minimal_config() { return statner::parse_run_config(minimal()); }

void write_file(const std::filesystem::path& path, const std::string& body) {
    std::ofstream out(path);
    out << body;
}

struct EnvGuard {
    std::string name;
    std::optional<std::string> saved;

    explicit EnvGuard(std::string n) : name(std::move(n)) {
        if (const char* v = std::getenv(name.c_str())) saved = v;
    }
    ~EnvGuard() {
        if (saved)
            ::setenv(name.c_str(), saved->c_str(), 1);
        else
            ::unsetenv(name.c_str());
    }
};

}  // namespace

TEST_CASE("minimal config parses with documented defaults", "[config]") {
    const RunConfig cfg = minimal_config();

    CHECK(cfg.dataset.name == "toy");
    CHECK(cfg.dataset.gloss.empty());
    CHECK(cfg.dataset.format == CorpusFormat::Conll);
    CHECK(cfg.dataset.train_path == "train.conll");
    CHECK(cfg.dataset.test_path == "test.conll");
    REQUIRE(cfg.dataset.entity_types.types().size() == 1);
    CHECK(cfg.dataset.entity_types.types()[0].label == "PER");
    CHECK(cfg.dataset.entity_types.types()[0].gloss == "PER");  // defaults to the label
    CHECK_FALSE(cfg.dataset.entity_types.types()[0].gloss_in_icl);

    CHECK(cfg.stats.context_window == 2);

    CHECK(cfg.retrieval.lambda1 == 1.0);
    CHECK(cfg.retrieval.lambda2 == 1.0);
    CHECK(cfg.retrieval.w_entity == 1.0);
    CHECK(cfg.retrieval.w_context == 1.0);
    CHECK(cfg.retrieval.w_other == 0.01);
    CHECK(cfg.retrieval.demo_count == 8);
    CHECK_FALSE(cfg.retrieval.per_occurrence_token_match);

    CHECK(cfg.reflection.theta_fn == 0.95);
    CHECK(cfg.reflection.span_demos == 1);
    CHECK(cfg.reflection.boundary_window == 2);
    CHECK(cfg.reflection.tau_ctx == 0.5);
    CHECK(cfg.reflection.boundary_margin == 0.0);
    CHECK(cfg.reflection.stage_unseen);
    CHECK(cfg.reflection.stage_fn);
    CHECK(cfg.reflection.stage_boundary);

    CHECK(cfg.backend.chat_mode == ChatMode::Scripted);
    CHECK(cfg.backend.chat_model == "gpt-4o");
    CHECK(cfg.backend.base_url == "https://api.openai.com/v1");
    CHECK(cfg.backend.fixture.empty());
    CHECK(cfg.backend.record_path.empty());
    CHECK(cfg.backend.embed_provider == EmbedProvider::Hashed);
    CHECK(cfg.backend.embed_model == "text-embedding-3-large");
    CHECK(cfg.backend.embed_dim == 64);
    CHECK(cfg.backend.embedding_cache.empty());
    CHECK(cfg.backend.concurrency == 4);
    CHECK(cfg.backend.input_price_per_mtok == 2.5);
    CHECK(cfg.backend.output_price_per_mtok == 10.0);
    CHECK(cfg.backend.icl_max_tokens == 1024);
    CHECK(cfg.backend.reflect_max_tokens == 2048);

    CHECK(cfg.run.output_dir == "out");
    CHECK(cfg.run.seed == 17);
    CHECK(cfg.run.subsample == 0);
}

TEST_CASE("full config parses every section", "[config]") {
    const nlohmann::json j = {
        {"dataset",
         {{"name", "news"},
          {"gloss", "a news article"},
          {"format", "jsonl"},
          {"train", "data/train.jsonl"},
          {"test", "data/test.jsonl"},
          {"entity_types",
           nlohmann::json::array(
               {{{"label", "PER"}, {"gloss", "Person"}},
                {{"label", "MISC"}, {"gloss", "Miscellaneous"}, {"gloss_in_icl", true}}})}}},
        {"stats", {{"context_window", 3}}},
        {"retrieval",
         {{"lambda1", 0.25},
          {"lambda2", 0.75},
          {"w_entity", 2.0},
          {"w_context", 0.5},
          {"w_other", 0.1},
          {"demo_count", 12},
          {"per_occurrence_token_match", true}}},
        {"reflection",
         {{"theta_fn", 0.9},
          {"span_demos", 3},
          {"boundary_window", 1},
          {"tau_ctx", 0.4},
          {"boundary_margin", 0.2},
          {"stages", nlohmann::json::array({"fn"})}}},
        {"backend",
         {{"chat_mode", "http"},
          {"chat_model", "gpt-4o-mini"},
          {"base_url", "http://127.0.0.1:9999/v1"},
          {"record", "out/record.jsonl"},
          {"embed_provider", "openai"},
          {"embed_model", "text-embedding-3-small"},
          {"embedding_cache", "out/embeddings.jsonl"},
          {"concurrency", 2},
          {"input_price_per_mtok", 1.25},
          {"output_price_per_mtok", 5.0},
          {"icl_max_tokens", 256},
          {"reflect_max_tokens", 512}}},
        {"run", {{"output_dir", "runs/news"}, {"seed", 4}, {"subsample", 40}}},
    };

    const RunConfig cfg = statner::parse_run_config(j);
    CHECK(cfg.dataset.format == CorpusFormat::Jsonl);
    CHECK(cfg.dataset.entity_types.types()[1].gloss_in_icl);
    CHECK(cfg.stats.context_window == 3);
    CHECK(cfg.retrieval.lambda1 == 0.25);
    CHECK(cfg.retrieval.demo_count == 12);
    CHECK(cfg.retrieval.per_occurrence_token_match);
    CHECK(cfg.reflection.theta_fn == 0.9);
    CHECK_FALSE(cfg.reflection.stage_unseen);
    CHECK(cfg.reflection.stage_fn);
    CHECK_FALSE(cfg.reflection.stage_boundary);
    CHECK(cfg.backend.chat_mode == ChatMode::Http);
    CHECK(cfg.backend.embed_provider == EmbedProvider::OpenAi);
    CHECK(cfg.backend.record_path == "out/record.jsonl");
    CHECK(cfg.backend.icl_max_tokens == 256);
    CHECK(cfg.run.subsample == 40);

    SECTION("serialization round-trips") {
        const nlohmann::json out = statner::run_config_to_json(cfg);
        const RunConfig again = statner::parse_run_config(out);
        CHECK(statner::run_config_to_json(again) == out);
        CHECK(again.backend.chat_mode == ChatMode::Http);
        CHECK(again.reflection.stage_fn);
        CHECK_FALSE(again.reflection.stage_boundary);
        CHECK(again.dataset.entity_types.types()[0].gloss == "Person");
    }
}

TEST_CASE("presets install published defaults", "[config]") {
    struct Want {
        const char* name;
        double l1, l2;
        std::size_t window;
        double we, wc, wo;
        double theta;
        std::size_t demos, k;
    };
    const Want table[] = {
        {"ncbi", 1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2},
        {"bc2gm", 1, 0.01, 2, 1.0, 0.5, 0.01, 0.9, 1, 2},
        {"conll03", 0.01, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2},
        {"ontonotes", 1, 1, 2, 1.0, 1.0, 0.01, 0.95, 4, 2},
        {"tweetner7", 1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2},
        {"default", 1, 1, 2, 1.0, 1.0, 0.01, 0.95, 1, 2},
    };
    for (const Want& w : table) {
        INFO("preset " << w.name);
        RunConfig cfg;
        statner::apply_preset(cfg, w.name);
        CHECK(cfg.retrieval.lambda1 == w.l1);
        CHECK(cfg.retrieval.lambda2 == w.l2);
        CHECK(cfg.stats.context_window == w.window);
        CHECK(cfg.retrieval.w_entity == w.we);
        CHECK(cfg.retrieval.w_context == w.wc);
        CHECK(cfg.retrieval.w_other == w.wo);
        CHECK(cfg.reflection.theta_fn == w.theta);
        CHECK(cfg.reflection.span_demos == w.demos);
        CHECK(cfg.reflection.boundary_window == w.k);
    }

    SECTION("names are case-insensitive") {
        RunConfig cfg;
        statner::apply_preset(cfg, "CoNLL03");
        CHECK(cfg.retrieval.lambda1 == 0.01);
    }

    SECTION("unknown preset names the alternatives") {
        RunConfig cfg;
        REQUIRE_THROWS_AS(statner::apply_preset(cfg, "bogus"), ConfigError);
        REQUIRE_THROWS_WITH(
            statner::apply_preset(cfg, "bogus"),
            Catch::Matchers::ContainsSubstring(
                "expected ncbi, bc2gm, conll03, ontonotes, tweetner7, or default"));
    }

    SECTION("demo count is not preset-controlled") {
        RunConfig cfg;
        cfg.retrieval.demo_count = 11;
        statner::apply_preset(cfg, "ncbi");
        CHECK(cfg.retrieval.demo_count == 11);
    }
}

TEST_CASE("explicit keys override the preset", "[config]") {
    nlohmann::json j = minimal();
    j["preset"] = "conll03";
    j["retrieval"] = {{"lambda1", 0.7}};
    j["reflection"] = {{"theta_fn", 0.5}};

    const RunConfig cfg = statner::parse_run_config(j);
    CHECK(cfg.retrieval.lambda1 == 0.7);   // explicit wins
    CHECK(cfg.retrieval.lambda2 == 1.0);   // preset survives
    CHECK(cfg.reflection.theta_fn == 0.5);
    CHECK(cfg.reflection.span_demos == 1);

    SECTION("preset alone applies untouched") {
        nlohmann::json p = minimal();
        p["preset"] = "ontonotes";
        const RunConfig c = statner::parse_run_config(p);
        CHECK(c.reflection.span_demos == 4);
        CHECK(c.retrieval.lambda1 == 1.0);
    }
}

TEST_CASE("unknown keys are rejected per section", "[config]") {
    auto expect_unknown = [](nlohmann::json j, const std::string& key,
                             const std::string& where) {
        REQUIRE_THROWS_WITH(
            statner::parse_run_config(j),
            Catch::Matchers::ContainsSubstring("unknown key '" + key + "' in " + where));
    };

    {
        nlohmann::json j = minimal();
        j["extra"] = 1;
        expect_unknown(j, "extra", "config root");
    }
    {
        nlohmann::json j = minimal();
        j["dataset"]["split"] = "dev";
        expect_unknown(j, "split", "dataset");
    }
    {
        nlohmann::json j = minimal();
        j["dataset"]["entity_types"][0]["color"] = "red";
        expect_unknown(j, "color", "dataset.entity_types[]");
    }
    {
        nlohmann::json j = minimal();
        j["stats"] = {{"window", 2}};
        expect_unknown(j, "window", "stats");
    }
    {
        nlohmann::json j = minimal();
        j["retrieval"] = {{"lambda3", 1}};
        expect_unknown(j, "lambda3", "retrieval");
    }
    {
        nlohmann::json j = minimal();
        j["reflection"] = {{"theta", 0.5}};
        expect_unknown(j, "theta", "reflection");
    }
    {
        nlohmann::json j = minimal();
        j["backend"]["api_key"] = "sk-nope";  // secrets are env-only by design
        expect_unknown(j, "api_key", "backend");
    }
    {
        nlohmann::json j = minimal();
        j["run"] = {{"outdir", "x"}};
        expect_unknown(j, "outdir", "run");
    }
}

TEST_CASE("missing or malformed required fields", "[config]") {
    SECTION("root must be an object") {
        REQUIRE_THROWS_AS(statner::parse_run_config(nlohmann::json::array()), ConfigError);
    }

    SECTION("dataset section is required") {
        nlohmann::json j = minimal();
        j.erase("dataset");
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("missing the dataset section"));
    }

    SECTION("dataset.name/train/test are required strings") {
        for (const char* key : {"name", "train", "test"}) {
            nlohmann::json j = minimal();
            j["dataset"].erase(key);
            INFO("missing " << key);
            REQUIRE_THROWS_WITH(
                statner::parse_run_config(j),
                Catch::Matchers::ContainsSubstring("missing string '" + std::string(key) + "'"));
        }
    }

    SECTION("entity_types must be a non-empty array") {
        nlohmann::json j = minimal();
        j["dataset"]["entity_types"] = nlohmann::json::array();
        REQUIRE_THROWS_AS(statner::parse_run_config(j), ConfigError);

        j["dataset"]["entity_types"] = "PER";
        REQUIRE_THROWS_AS(statner::parse_run_config(j), ConfigError);

        j["dataset"].erase("entity_types");
        REQUIRE_THROWS_AS(statner::parse_run_config(j), ConfigError);
    }

    SECTION("entity type entries need a label") {
        nlohmann::json j = minimal();
        j["dataset"]["entity_types"] = nlohmann::json::array({{{"gloss", "Person"}}});
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("missing string 'label'"));
    }
}

TEST_CASE("bad enum and scalar values", "[config]") {
    SECTION("dataset.format") {
        nlohmann::json j = minimal();
        j["dataset"]["format"] = "xml";
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("conll or jsonl"));
    }

    SECTION("backend.chat_mode") {
        nlohmann::json j = minimal();
        j["backend"]["chat_mode"] = "imaginary";
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("http, replay, or scripted"));
    }

    SECTION("backend.embed_provider") {
        nlohmann::json j = minimal();
        j["backend"]["embed_provider"] = "word2vec";
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("hashed, openai, or cache-only"));
    }

    SECTION("reflection.stages must be an array of known stages") {
        nlohmann::json j = minimal();
        j["reflection"] = {{"stages", "unseen"}};
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("must be an array"));

        j["reflection"] = {{"stages", nlohmann::json::array({"unseen", "verify"})}};
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("unknown reflection stage"));
    }

    SECTION("wrong scalar types report the key") {
        nlohmann::json j = minimal();
        j["retrieval"] = {{"lambda1", "high"}};
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("bad value for 'lambda1'"));

        nlohmann::json k = minimal();
        k["run"] = {{"seed", "seventeen"}};
        REQUIRE_THROWS_WITH(statner::parse_run_config(k),
                            Catch::Matchers::ContainsSubstring("bad value for 'seed'"));
    }
}

TEST_CASE("validation rejects inconsistent settings", "[config]") {
    auto expect_invalid = [](void (*mutate)(RunConfig&), const std::string& needle) {
        RunConfig cfg = minimal_config();
        mutate(cfg);
        INFO("expected complaint about: " << needle);
        REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
        REQUIRE_THROWS_WITH(cfg.validate(), Catch::Matchers::ContainsSubstring(needle));
    };

    expect_invalid([](RunConfig& c) { c.dataset.name.clear(); }, "dataset.name");
    expect_invalid([](RunConfig& c) { c.dataset.train_path.clear(); }, "dataset.train");
    expect_invalid([](RunConfig& c) { c.dataset.test_path.clear(); }, "dataset.test");
    expect_invalid([](RunConfig& c) { c.retrieval.lambda1 = -1.0; }, "non-negative");
    expect_invalid(
        [](RunConfig& c) {
            c.retrieval.lambda1 = 0.0;
            c.retrieval.lambda2 = 0.0;
        },
        "at least one of lambda1/lambda2");
    expect_invalid([](RunConfig& c) { c.retrieval.w_context = -0.5; }, "token weights");
    expect_invalid([](RunConfig& c) { c.reflection.theta_fn = 1.5; }, "theta_fn");
    expect_invalid([](RunConfig& c) { c.reflection.tau_ctx = -0.1; }, "tau_ctx");
    expect_invalid([](RunConfig& c) { c.reflection.span_demos = 0; }, "span_demos");
    expect_invalid([](RunConfig& c) { c.reflection.boundary_window = 0; }, "boundary_window");
    expect_invalid([](RunConfig& c) { c.backend.chat_mode = ChatMode::Replay; }, "fixture");
    expect_invalid(
        [](RunConfig& c) {
            c.backend.chat_mode = ChatMode::Http;
            c.backend.base_url.clear();
        },
        "base_url");
    expect_invalid([](RunConfig& c) { c.backend.embed_provider = EmbedProvider::CacheOnly; },
                   "embedding_cache");
    expect_invalid([](RunConfig& c) { c.backend.embed_dim = 0; }, "embed_dim");
    expect_invalid([](RunConfig& c) { c.backend.concurrency = 0; }, "concurrency");
    expect_invalid([](RunConfig& c) { c.run.output_dir.clear(); }, "output_dir");

    SECTION("duplicate entity labels") {
        nlohmann::json j = minimal();
        j["dataset"]["entity_types"] =
            nlohmann::json::array({{{"label", "PER"}}, {{"label", "PER"}}});
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("duplicate entity type label"));
    }

    SECTION("empty entity label") {
        nlohmann::json j = minimal();
        j["dataset"]["entity_types"] = nlohmann::json::array({{{"label", ""}}});
        REQUIRE_THROWS_WITH(statner::parse_run_config(j),
                            Catch::Matchers::ContainsSubstring("labels must not be empty"));
    }

    SECTION("replay with a fixture passes") {
        nlohmann::json j = minimal();
        j["backend"] = {{"chat_mode", "replay"}, {"fixture", "transcript.jsonl"}};
        const RunConfig cfg = statner::parse_run_config(j);
        CHECK(cfg.backend.chat_mode == ChatMode::Replay);
        CHECK(cfg.backend.fixture == "transcript.jsonl");
    }
}

TEST_CASE("config files load from disk", "[config]") {
    const auto dir = desk::scratch_dir("config");

    SECTION("missing file") {
        REQUIRE_THROWS_WITH(
            statner::load_run_config((dir / "absent.json").string()),
            Catch::Matchers::ContainsSubstring("cannot open config file"));
    }

    SECTION("invalid JSON") {
        const auto bad = dir / "bad.json";
        write_file(bad, "{ nope\n");
        REQUIRE_THROWS_WITH(statner::load_run_config(bad.string()),
                            Catch::Matchers::ContainsSubstring("not valid JSON"));
    }

    SECTION("valid file") {
        const auto good = dir / "good.json";
        write_file(good, minimal().dump(2));
        const RunConfig cfg = statner::load_run_config(good.string());
        CHECK(cfg.dataset.name == "toy");
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("API keys come from the environment only", "[config]") {
    EnvGuard statner_key("STATNER_API_KEY");
    EnvGuard openai_key("OPENAI_API_KEY");

    ::unsetenv("STATNER_API_KEY");
    ::unsetenv("OPENAI_API_KEY");
    CHECK_FALSE(statner::api_key_from_env().has_value());

    ::setenv("OPENAI_API_KEY", "sk-openai", 1);
    REQUIRE(statner::api_key_from_env().has_value());
    CHECK(*statner::api_key_from_env() == "sk-openai");

    ::setenv("STATNER_API_KEY", "sk-statner", 1);
    CHECK(*statner::api_key_from_env() == "sk-statner");  // dedicated name wins

    ::setenv("STATNER_API_KEY", "", 1);
    CHECK(*statner::api_key_from_env() == "sk-openai");  // empty counts as unset
}
