// segedit: run, train, eval, synth and serve.

#include "segedit/evaluation.hpp"
#include "segedit/pipeline.hpp"
#include "segedit/server.hpp"
#include "segedit/session.hpp"
#include "segedit/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace segedit;

namespace {

enum Exit { ok = 0, failure = 1, usage = 2, numeric = 3, backend = 4 };

int exit_code(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::parameter:
    case ErrorKind::io: return usage;
    case ErrorKind::numeric: return numeric;
    case ErrorKind::backend: return backend;
    default: return failure;
    }
}

void write_json(fs::path const& path, nlohmann::json const& j) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
    out << j.dump(2) << "\n";
}

struct RunArgs {
    std::string image, text, background, seg, weights, out, backend;
};

int cmd_run(RunArgs const& a) {
    EngineConfig cfg = apply_env_overrides({});
    cfg.weights = a.weights;
    if (!a.backend.empty()) cfg.backend = a.backend;
    auto engine = Engine::load(cfg);
    auto image = with_stage("input", [&] { return read_png(a.image); });
    std::optional<SegMap> seg;
    if (!a.seg.empty()) {
        seg = with_stage("input", [&] { return read_segmap(a.seg); });
        // A hand-painted map without a palette sidecar borrows the backend's labels.
        if (seg->palette().empty()) seg->palette() = engine.segment(image).palette();
    }
    std::optional<ImageBuffer> bg;
    if (!a.background.empty()) bg = with_stage("input", [&] { return read_png(a.background); });
    auto r = engine.edit(image, a.text, seg ? &*seg : nullptr, bg ? &*bg : nullptr);
    fs::create_directories(a.out);
    write_png(fs::path(a.out) / "result.png", r.output);
    write_segmap(fs::path(a.out) / "seg_in.png", r.seg_used);
    write_segmap(fs::path(a.out) / "seg_out.png", r.seg_out);
    auto report = edit_report(r);
    report["text"] = a.text;
    report["seg_source"] = seg ? "user" : "backend";
    report["backend"] = cfg.backend;
    write_json(fs::path(a.out) / "report.json", report);
    std::cout << report.dump() << "\n";
    return ok;
}

int cmd_train(std::string const& config, std::string const& out) {
    auto cfg = load_train_config(config);
    auto data = synth::make_synthetic_dataset(cfg.dataset_size, cfg.seed, cfg.scene_size);
    auto gen = GeneratorWeights<float>::init(cfg.network(), cfg.seed);
    auto disc = DiscriminatorWeights<float>::init(cfg.network(), cfg.seed + 1);
    TrainOptions opts;
    opts.out_dir = out;
    opts.on_epoch = [](TrainPhaseInfo const& p, TrainingLosses const& l) {
        std::cerr << (p.trdcm ? "detail " : "main   ") << "epoch " << p.epoch << "  l_g " << l.l_g << "  l_d " << l.l_d << "\n";
    };
    auto res = train(cfg, data, std::move(gen), std::move(disc), opts);
    std::cout << (fs::path(out) / "weights.segw").string() << "\n";
    return ok;
}

int cmd_eval(std::string const& weights, int n, uint64_t seed, std::string const& out, std::string const& backend_spec) {
    EngineConfig cfg = apply_env_overrides({});
    cfg.weights = weights;
    if (!backend_spec.empty()) cfg.backend = backend_spec;
    auto engine = Engine::load(cfg);
    auto report = evaluate(engine, n, seed).to_json();
    write_json(out, report);
    std::cout << report.dump() << "\n";
    return ok;
}

int cmd_synth(int n, uint64_t seed, int size, std::string const& out) {
    if (n < 1) throw Error(ErrorKind::parameter, "--n must be at least 1");
    fs::create_directories(out);
    auto data = synth::make_synthetic_dataset(n, seed, size);
    std::ofstream captions(fs::path(out) / "captions.jsonl");
    for (size_t i = 0; i < data.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%05zu", i);
        write_png(fs::path(out) / (std::string("image_") + name + ".png"), data[i].image);
        write_segmap(fs::path(out) / (std::string("seg_") + name + ".png"), data[i].seg);
        captions << nlohmann::json{{"index", i}, {"caption", data[i].caption}, {"target", data[i].target_label}}.dump() << "\n";
    }
    return ok;
}

httplib::Server* g_server = nullptr;

int cmd_serve(std::string const& config, std::string const& listen, std::string const& weights, std::string const& sessions,
              std::string const& backend_spec) {
    EngineConfig cfg = config.empty() ? EngineConfig{} : load_engine_config(config);
    cfg = apply_env_overrides(cfg);
    if (!listen.empty()) cfg.listen = listen;
    if (!weights.empty()) cfg.weights = weights;
    if (!sessions.empty()) cfg.session_root = sessions;
    if (!backend_spec.empty()) cfg.backend = backend_spec;
    auto engine = Engine::load(cfg);
    SessionStore store(engine, cfg.session_root);
    httplib::Server server;
    register_routes(server, store);
    auto [host, port] = parse_listen(cfg.listen);
    g_server = &server;
    std::signal(SIGINT, [](int) {
        if (g_server) g_server->stop();
    });
    std::signal(SIGTERM, [](int) {
        if (g_server) g_server->stop();
    });
    if (port == 0) port = server.bind_to_any_port(host);
    else if (!server.bind_to_port(host, port)) throw Error(ErrorKind::io, "cannot listen on " + cfg.listen);
    std::cout << "listening on " << host << ":" << port << std::endl;
    server.listen_after_bind();
    return ok;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Text-guided image editing with segmentation-map control"};
    app.require_subcommand(1);

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "Edit one image");
    run_cmd->add_option("--image", run.image, "Input PNG")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--text", run.text, "Instruction")->required();
    run_cmd->add_option("--background", run.background, "Reference background PNG")->check(CLI::ExistingFile);
    run_cmd->add_option("--seg", run.seg, "Segmentation PNG used instead of the segmentation backend")->check(CLI::ExistingFile);
    run_cmd->add_option("--weights", run.weights, "Generator weights")->required()->check(CLI::ExistingFile);
    run_cmd->add_option("--out", run.out, "Output directory")->required();
    run_cmd->add_option("--backend", run.backend, "toy or external:<command>");

    std::string train_config, train_out;
    auto* train_cmd = app.add_subcommand("train", "Train on synthetic scenes");
    train_cmd->add_option("--config", train_config, "Training config JSON")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", train_out, "Checkpoint directory")->required();

    std::string eval_weights, eval_out, eval_backend;
    int eval_n = 100;
    uint64_t eval_seed = 0;
    auto* eval_cmd = app.add_subcommand("eval", "IS and FID over edited synthetic scenes");
    eval_cmd->add_option("--weights", eval_weights, "Generator weights")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--n", eval_n, "Number of edited images")->check(CLI::Range(1, 2000));
    eval_cmd->add_option("--seed", eval_seed, "Seed");
    eval_cmd->add_option("--out", eval_out, "Report JSON path")->required();
    eval_cmd->add_option("--backend", eval_backend, "toy or external:<command>");

    int synth_n = 10, synth_size = 64;
    uint64_t synth_seed = 0;
    std::string synth_out;
    auto* synth_cmd = app.add_subcommand("synth", "Write synthetic scenes with segmentation maps and captions");
    synth_cmd->add_option("--n", synth_n, "Number of scenes");
    synth_cmd->add_option("--seed", synth_seed, "Seed");
    synth_cmd->add_option("--size", synth_size, "Scene size in pixels")->check(CLI::Range(24, 1024));
    synth_cmd->add_option("--out", synth_out, "Output directory")->required();

    std::string serve_config, serve_listen, serve_weights, serve_sessions, serve_backend;
    auto* serve_cmd = app.add_subcommand("serve", "Start the session HTTP service");
    serve_cmd->add_option("--config", serve_config, "Service config JSON")->check(CLI::ExistingFile);
    serve_cmd->add_option("--listen", serve_listen, "host:port");
    serve_cmd->add_option("--weights", serve_weights, "Generator weights");
    serve_cmd->add_option("--sessions", serve_sessions, "Session directory");
    serve_cmd->add_option("--backend", serve_backend, "toy or external:<command>");

    try {
        app.parse(argc, argv);
    } catch (CLI::ParseError const& e) {
        int code = app.exit(e);
        return code == 0 ? ok : usage;
    }

    try {
        if (*run_cmd) return cmd_run(run);
        if (*train_cmd) return cmd_train(train_config, train_out);
        if (*eval_cmd) return cmd_eval(eval_weights, eval_n, eval_seed, eval_out, eval_backend);
        if (*synth_cmd) return cmd_synth(synth_n, synth_seed, synth_size, synth_out);
        if (*serve_cmd) return cmd_serve(serve_config, serve_listen, serve_weights, serve_sessions, serve_backend);
    } catch (Error const& e) {
        std::cerr << "segedit: " << (e.stage().empty() ? "" : "stage " + e.stage() + ": ") << to_string(e.kind()) << ": " << e.detail() << "\n";
        return exit_code(e.kind());
    } catch (std::exception const& e) {
        std::cerr << "segedit: " << e.what() << "\n";
        return failure;
    }
    return usage;
}
