#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <httplib.h>

#include "unitscope/io.hpp"
#include "unitscope/nn.hpp"
#include "unitscope/pipeline.hpp"

using namespace unitscope;

namespace {

struct GlobalOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    int jobs = 1;
    std::string workspace = "workspace";
    bool force = false;
};

Workspace open_workspace(const GlobalOptions& g)
{
    RunConfig cfg;
    if (!g.config.empty()) cfg = RunConfig::from_json(nlohmann::json::parse(read_text(g.config)));
    if (g.seed) cfg.seed = *g.seed;
    Workspace ws(g.workspace, cfg, g.force);
    ws.set_log([](const std::string& m) { std::cerr << "unitscope: " << m << std::endl; });
    return ws;
}

void serve(const Workspace& ws)
{
    PaintEngine engine = make_paint_engine(ws);
    httplib::Server server;
    install_paint_routes(server, engine, ws.config().serve.cors_origin);
    const auto& s = ws.config().serve;
    ws.log("serving " + std::to_string(engine.palette().concepts.size()) + " concepts on http://" + s.host + ":" +
           std::to_string(s.port));
    if (!server.listen(s.host, s.port)) throw std::runtime_error("cannot listen on " + s.host + ":" + std::to_string(s.port));
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Unit-level dissection, intervention and attack toolkit for small convolutional models."};
    app.require_subcommand(1);
    app.fallthrough();
    GlobalOptions g;
    app.add_option("--config", g.config, "JSON run configuration; missing keys keep their defaults");
    app.add_option("--seed", g.seed, "Master seed");
    app.add_option("--jobs", g.jobs, "Worker threads for data-parallel loops")->check(CLI::PositiveNumber);
    app.add_option("--workspace", g.workspace, "Workspace directory")->capture_default_str();
    app.add_flag("--force", g.force, "Use prerequisite artifacts produced with a different configuration");

    std::function<void(const Workspace&)> action;
    auto stage_command = [&](const std::string& name, const std::string& help, auto fn) {
        app.add_subcommand(name, help)->callback([&action, fn] { action = fn; });
    };
    stage_command("gen-corpus", "Render the synthetic scene corpus", run_gen_corpus);

    std::string model;
    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("model", model, "classifier, segmenter or generator")
        ->required()
        ->check(CLI::IsMember({"classifier", "segmenter", "generator"}));
    train->callback([&] {
        if (model == "classifier") action = run_train_classifier;
        else if (model == "segmenter") action = run_train_segmenter;
        else action = run_train_generator;
    });

    std::string target = "all";
    auto* dissect = app.add_subcommand("dissect", "Label units of the classifier and/or generator with concepts");
    dissect->add_option("model", target, "classifier, generator or all")
        ->check(CLI::IsMember({"classifier", "generator", "all"}))
        ->capture_default_str();
    dissect->callback([&] {
        action = [&target](const Workspace& ws) {
            if (target != "generator") run_dissect_classifier(ws);
            if (target != "classifier") run_dissect_generator(ws);
        };
    });

    stage_command("ablate", "Rank unit importance and measure class ablation curves", run_ablate);
    stage_command("intervene-gen", "Remove and insert concepts in the generator", run_intervene_gen);
    stage_command("attack", "Targeted adversarial attacks and unit change analysis", run_attack);
    stage_command("report", "Render report/index.html from stage artifacts", run_report);
    stage_command("serve", "Serve the paint API for the trained generator", serve);
    stage_command("run-all", "Run every missing or stale stage, then the report", [](const Workspace& ws) {
        ensure_stage(ws, Stage::dissect_classifier);
        ensure_stage(ws, Stage::intervene_gen);
        ensure_stage(ws, Stage::attack);
        run_report(ws);
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        set_num_jobs(g.jobs);
        const Workspace ws = open_workspace(g);
        action(ws);
        return 0;
    } catch (const PreconditionError& e) {
        std::cerr << "unitscope: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unitscope: error: " << e.what() << std::endl;
        return 1;
    }
}
