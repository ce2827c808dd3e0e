#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "statner/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::string output_dir;  // overrides run.output_dir when set
};

statner::RunConfig load_config(const CommonArgs& common) {
    statner::RunConfig cfg = statner::load_run_config(common.config_path);
    if (!common.output_dir.empty()) cfg.run.output_dir = common.output_dir;
    return cfg;
}

int run_command(const std::function<void()>& body) {
    try {
        body();
        return 0;
    } catch (const statner::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const statner::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const statner::BackendError& e) {
        std::cerr << "backend error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training-free NER with label-statistic retrieval and error reflection"};
    app.require_subcommand(1);

    CommonArgs common;
    app.add_option("-c,--config", common.config_path, "Run configuration (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("-o,--out", common.output_dir, "Override run.output_dir");

    auto* stats_cmd = app.add_subcommand("stats", "Build token statistics and span snapshots");
    std::size_t top_k = 20;
    stats_cmd->add_option("--top-k", top_k, "Tokens to print, ranked by P(t_e)");

    auto* embed_cmd =
        app.add_subcommand("embed-cache", "Warm the embedding cache for the configured corpus");

    auto* run_cmd = app.add_subcommand("run", "Run the prediction pipeline over the test split");
    std::string variant_str = "icl+reflect";
    std::string baseline_str = "label-guided";
    std::size_t demos = 0;
    std::int64_t seed = -1;
    std::int64_t subsample = -1;
    std::string fixture;
    std::string record;
    run_cmd->add_option("--variant", variant_str, "icl or icl+reflect");
    run_cmd->add_option("--baseline", baseline_str, "label-guided, kate, or bm25");
    run_cmd->add_option("-n,--demos", demos, "Demonstrations per prompt (overrides config)");
    run_cmd->add_option("--seed", seed, "Seed override");
    run_cmd->add_option("--subsample", subsample, "Test-set subsample size override (0 = all)");
    run_cmd->add_option("--fixture", fixture, "Replay transcript or script path override");
    run_cmd->add_option("--record", record, "Record live responses to this file");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a finished manifest");
    std::string manifest_dir;
    std::uint64_t resamples = 1000;
    eval_cmd->add_option("--manifest", manifest_dir,
                         "Manifest directory (default: run.output_dir)");
    eval_cmd->add_option("--resamples", resamples, "Bootstrap resamples");

    auto* report_cmd = app.add_subcommand("report", "Render a saved eval.json as text");
    std::string report_manifest_dir;
    report_cmd->add_option("--manifest", report_manifest_dir,
                           "Manifest directory (default: run.output_dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (stats_cmd->parsed()) {
        return run_command([&] {
            const statner::RunConfig cfg = load_config(common);
            const auto result = statner::cmd_stats(cfg, top_k);
            std::cout << "vocabulary: " << result.vocabulary << " tokens\n"
                      << "wrote " << result.stats_path.string() << "\n"
                      << "wrote " << result.spans_path.string() << "\n\n"
                      << result.top_tokens;
        });
    }
    if (embed_cmd->parsed()) {
        return run_command([&] {
            const statner::RunConfig cfg = load_config(common);
            const auto result = statner::cmd_embed_cache(cfg);
            std::cout << "requested " << result.texts << " texts; cache now holds "
                      << result.cached << " vectors\n";
        });
    }
    if (run_cmd->parsed()) {
        return run_command([&] {
            statner::RunConfig cfg = load_config(common);
            if (demos > 0) cfg.retrieval.demo_count = demos;
            if (seed >= 0) cfg.run.seed = static_cast<std::uint64_t>(seed);
            if (subsample >= 0) cfg.run.subsample = static_cast<std::size_t>(subsample);
            if (!fixture.empty()) cfg.backend.fixture = fixture;
            if (!record.empty()) cfg.backend.record_path = record;
            cfg.validate();
            const auto variant = statner::variant_from(variant_str);
            const auto baseline = statner::baseline_from(baseline_str);
            statner::RunManifest partial;
            try {
                const statner::RunManifest manifest =
                    statner::run_pipeline(cfg, variant, baseline, &partial);
                statner::write_manifest(manifest, cfg.run.output_dir);
                std::cout << "wrote manifest " << manifest.manifest_hash << " ("
                          << manifest.records.size() << " sentences) to " << cfg.run.output_dir
                          << "\n";
            } catch (...) {
                if (!partial.manifest_hash.empty()) {
                    statner::write_manifest(partial, cfg.run.output_dir);
                    std::cerr << "run aborted; partial manifest (" << partial.records.size()
                              << " sentences, marked incomplete) written to "
                              << cfg.run.output_dir << "\n";
                }
                throw;
            }
        });
    }
    if (eval_cmd->parsed()) {
        return run_command([&] {
            const statner::RunConfig cfg = load_config(common);
            const std::filesystem::path dir =
                manifest_dir.empty() ? cfg.run.output_dir : manifest_dir;
            const statner::RunManifest manifest = statner::load_manifest(dir);
            const statner::EvalReports reports = statner::cmd_eval(manifest, resamples);
            const auto json = statner::eval_reports_to_json(reports);
            std::ofstream out(dir / "eval.json");
            if (!out) throw statner::DataError("cannot write " + (dir / "eval.json").string());
            out << json.dump(2) << '\n';
            std::cout << statner::render_eval_text(reports);
        });
    }
    if (report_cmd->parsed()) {
        return run_command([&] {
            const statner::RunConfig cfg = load_config(common);
            const std::filesystem::path dir =
                report_manifest_dir.empty() ? cfg.run.output_dir : report_manifest_dir;
            std::ifstream in(dir / "eval.json");
            if (!in)
                throw statner::DataError("cannot open " + (dir / "eval.json").string() +
                                         " (run eval first)");
            nlohmann::json j;
            in >> j;
            std::cout << statner::render_eval_text(statner::eval_reports_from_json(j));
        });
    }
    return 0;
}
