// clickseg command line: train, eval, generate, serve, config.

#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "clickseg/checkpoint.hpp"
#include "clickseg/service.hpp"
#include "clickseg/trainer.hpp"

using namespace clickseg;

namespace {

// Samples whose size differs from the model input are resized to it.
std::vector<Sample> fit_to_model(std::vector<Sample> samples, std::size_t size) {
    for (auto& s : samples) {
        if (s.gt.height() == size && s.gt.width() == size) continue;
        s.image = resize_bilinear(s.image, size, size);
        s.gt = resize_nearest(s.gt, size, size);
        validate_sample(s);
    }
    return samples;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
    if (g_server) g_server->stop();
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Interactive segmentation with click-similarity guided attention"};
    app.require_subcommand(1);

    std::string config_path, out_path, log_path, data_path;
    auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
    train_cmd->add_option("--config", config_path, "key = value training config")->required()->check(CLI::ExistingFile);
    train_cmd->add_option("--out", out_path, "checkpoint to write")->required();
    train_cmd->add_option("--log", log_path, "per-epoch loss log to write")->required();
    train_cmd->add_option("--data", data_path, "dataset manifest (default: synthetic shapes)");

    std::string ckpt_path, report_path;
    std::size_t shapes = 100, max_clicks = 20;
    std::uint64_t shape_seed = 1000, mask_seed = 1;
    double target = 0.85;
    bool correction = false;
    auto* eval_cmd = app.add_subcommand("eval", "NoC/NoF evaluation with the simulated clicker");
    eval_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--data", data_path, "dataset manifest (default: synthetic shapes)");
    eval_cmd->add_option("--shapes", shapes, "number of synthetic shapes")->capture_default_str();
    eval_cmd->add_option("--seed", shape_seed, "synthetic shape seed")->capture_default_str();
    eval_cmd->add_option("--report", report_path, "report file (default: stdout)");
    eval_cmd->add_option("--target", target, "IoU target for NoC and NoF")->capture_default_str();
    eval_cmd->add_option("--max-clicks", max_clicks, "click budget")->capture_default_str();
    eval_cmd->add_flag("--correction", correction, "start from a synthesized initial mask");
    eval_cmd->add_option("--mask-seed", mask_seed, "seed for initial masks in correction mode")->capture_default_str();

    std::string gen_dir;
    std::size_t count = 100, size = 64, distractors = 2;
    std::uint64_t gen_seed = 1;
    auto* gen_cmd = app.add_subcommand("generate", "Write synthetic shapes as PNGs plus a manifest");
    gen_cmd->add_option("--out", gen_dir, "output directory")->required();
    gen_cmd->add_option("--count", count, "number of samples")->capture_default_str();
    gen_cmd->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen_cmd->add_option("--size", size, "image side")->capture_default_str();
    gen_cmd->add_option("--distractors", distractors, "max distractor shapes")->capture_default_str();

    int port = 8080;
    std::size_t max_sessions = 64;
    std::string host = "127.0.0.1";
    auto* serve_cmd = app.add_subcommand("serve", "Run the session HTTP service");
    serve_cmd->add_option("--checkpoint", ckpt_path, "model checkpoint")->required()->check(CLI::ExistingFile);
    serve_cmd->add_option("--port", port, "listen port")->capture_default_str();
    serve_cmd->add_option("--max-sessions", max_sessions, "LRU session cap")->capture_default_str();
    serve_cmd->add_option("--host", host, "listen address")->capture_default_str();

    app.add_subcommand("config", "Print the default training config");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            const TrainConfig cfg = load_train_config(config_path);
            const std::size_t n = cfg.model.input_size;
            const auto data = data_path.empty() ? generate_shapes(cfg.data_seed, cfg.train_pool, train_shape_options(cfg))
                                                : fit_to_model(load_manifest(data_path), n);
            std::ofstream log(log_path);
            if (!log) throw IoError("cannot create log " + log_path);
            const auto result = train(cfg, data, [&](const EpochLog& e) {
                log << format_epoch(e) << '\n' << std::flush;
                std::cout << format_epoch(e) << '\n' << std::flush;
            });
            save_checkpoint(result.model, out_path, cfg.click_attention);
            std::cout << "wrote " << out_path << " (" << result.model.parameter_count() << " parameters)\n";
        } else if (*eval_cmd) {
            const Checkpoint ckpt = read_checkpoint(ckpt_path);
            const std::size_t n = ckpt.model.config().input_size;
            ShapeOptions opt;
            opt.size = n;
            const auto samples = data_path.empty() ? generate_shapes(shape_seed, shapes, opt)
                                                   : fit_to_model(load_manifest(data_path), n);
            EvalOptions eopt;
            eopt.target_iou = target;
            eopt.max_clicks = max_clicks;
            std::vector<Tensor> initial;
            if (correction) {
                Rng rng(mask_seed);
                for (const auto& s : samples) initial.push_back(synthesize_initial_mask(s.gt, rng));
            }
            const auto report = evaluate_noc(ModelSegmenter{&ckpt.model, ckpt.click_attention}, samples, eopt,
                                             correction ? &initial : nullptr);
            if (report_path.empty()) {
                write_report(report, std::cout);
            } else {
                write_report(report, report_path);
                std::cout << "noc85=" << detail::fixed(report.noc(0.85), 3) << " noc90="
                          << detail::fixed(report.noc(0.90), 3) << " nof85=" << report.nof(0.85)
                          << " nof90=" << report.nof(0.90) << " mean_final_iou=" << detail::fixed(report.mean_final_iou(), 4)
                          << '\n';
            }
        } else if (*gen_cmd) {
            ShapeOptions opt;
            opt.size = size;
            opt.max_distractors = distractors;
            write_dataset(generate_shapes(gen_seed, count, opt), gen_dir);
            std::cout << "wrote " << count << " samples to " << gen_dir << '\n';
        } else if (*serve_cmd) {
            Checkpoint ckpt = read_checkpoint(ckpt_path);
            ServiceOptions opt;
            opt.max_sessions = max_sessions;
            opt.click_attention = ckpt.click_attention;
            SessionService service(std::move(ckpt.model), opt);
            httplib::Server server;
            mount_routes(server, service);
            g_server = &server;
            std::signal(SIGINT, stop_server);
            std::signal(SIGTERM, stop_server);
            std::cout << "listening on http://" << host << ":" << port << '\n' << std::flush;
            if (!server.listen(host, port)) throw IoError("cannot listen on " + host + ":" + std::to_string(port));
        } else {
            std::cout << train_config_text(TrainConfig{});
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
