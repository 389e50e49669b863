// Command-line front end for the occluded-recognition pipeline.
//
//   mode <command> [--config PATH] [--seed U64] [--out DIR] [--preset desk|paper] [--set key=value]...
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mode/pipeline.hpp"
#include "png_export.hpp"

namespace {

using namespace mode;
namespace fs = std::filesystem;

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::string preset = "desk";
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "key=value configuration file");
    cmd->add_option("--seed", c.seed, "root seed (overrides the config)");
    cmd->add_option("--out", c.out, "output directory")->capture_default_str();
    cmd->add_option("--preset", c.preset, "defaults to start from")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    cmd->add_option("--set", c.sets, "override one config key, key=value (repeatable)");
}

config::RunConfig resolve(const Common& c) {
    auto cfg = config::preset(config::parse_preset(c.preset));
    if (!c.config_path.empty()) config::apply_file(cfg, c.config_path);
    for (const auto& s : c.sets) config::assign(cfg, s);
    if (c.seed) cfg.seed = *c.seed;
    config::validate(cfg);
    return cfg;
}

void print_reports(const std::vector<recognition::EvalReport>& rows) {
    std::cout << recognition::kReportHeader << '\n';
    for (const auto& r : rows) std::cout << recognition::to_csv_row(r) << '\n';
}

void print_losses(const std::string& what, const std::vector<double>& loss) {
    std::printf("%s: %zu epochs, loss %.6g -> %.6g\n", what.c_str(), loss.size(), loss.front(), loss.back());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Occluded recognition with a mixture of diffusion experts"};
    app.require_subcommand(1);
    Common common;
    std::optional<std::size_t> n_opt;
    std::vector<std::string> methods{"baseline", "baseline_rf", "mode"};
    bool png = false;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic corpus and its gallery/probe split");
    auto* tden = app.add_subcommand("train-denoiser", "train the noise-prediction network");
    auto* temb = app.add_subcommand("train-embedder", "train the feature extractor");
    auto* tgate = app.add_subcommand("train-gate", "train the ID-Gate for experts.n repaint experts");
    auto* rep = app.add_subcommand("repaint", "repaint the occluded probes (experts.n per probe)");
    auto* ev = app.add_subcommand("eval", "evaluate baseline, baseline_rf and mode");
    auto* swe = app.add_subcommand("sweep-experts", "one gate per n in sweep.n_values, per seed in sweep.seeds");
    auto* swo = app.add_subcommand("sweep-occlusions", "all methods per kind in sweep.kinds at sweep.severity");
    for (auto* c : {gen, tden, temb, tgate, rep, ev, swe, swo}) add_common(c, common);
    for (auto* c : {tgate, rep, ev}) c->add_option("--n", n_opt, "expert count (overrides experts.n)");
    ev->add_option("--method", methods, "methods to report")
        ->check(CLI::IsMember({"baseline", "baseline_rf", "mode"}))
        ->capture_default_str();
    rep->add_flag("--png", png, "also export 8-bit PNGs of the occluded and repainted probes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        auto cfg = resolve(common);
        if (n_opt) {
            cfg.n_experts = *n_opt;
            config::validate(cfg);
        }
        const fs::path out = common.out;

        if (swe->parsed()) {
            config::validate_sweep(cfg);
            const auto rows = pipeline::sweep_experts(cfg, out);
            std::cout << "seed," << recognition::kReportHeader << '\n';
            for (const auto& r : rows) std::cout << r.seed << ',' << recognition::to_csv_row(r.report) << '\n';
            std::cout << "wrote " << (out / "sweep_experts.csv").string() << '\n';
            return 0;
        }
        if (swo->parsed()) {
            const auto rows = pipeline::sweep_occlusions(cfg, out);
            std::cout << "seed," << recognition::kReportHeader << '\n';
            for (const auto& r : rows) std::cout << r.seed << ',' << recognition::to_csv_row(r.report) << '\n';
            std::cout << "wrote " << (out / "sweep_occlusions.csv").string() << '\n';
            return 0;
        }

        pipeline::Session s(cfg, out);
        const auto occ = s.default_occlusion();
        if (gen->parsed()) {
            s.gen_data();
            std::cout << "wrote " << s.dataset_path().string() << ", " << s.gallery_path().string() << ", "
                      << s.probe_path().string() << '\n';
        } else if (tden->parsed()) {
            print_losses("denoiser", s.train_denoiser());
            std::cout << "wrote " << s.denoiser_path().string() << '\n';
        } else if (temb->parsed()) {
            print_losses("embedder", s.train_embedder());
            std::cout << "wrote " << s.embedder_path().string() << '\n';
        } else if (tgate->parsed()) {
            print_losses("gate", s.train_gate(occ, cfg.n_experts));
            std::cout << "wrote " << s.gate_path(occ, cfg.n_experts).string() << '\n';
        } else if (rep->parsed()) {
            if (cfg.n_experts == 0) throw ValueError("repaint: experts.n must be at least 1");
            const auto& rs = s.repaints(occ, cfg.n_experts);
            std::cout << "repainted " << rs.size() << " probes x " << cfg.n_experts << " experts into "
                      << s.repaint_dir(occ).string() << '\n';
            if (png) {
                const fs::path dir = s.repaint_dir(occ) / "png";
                fs::create_directories(dir);
                for (std::size_t p = 0; p < rs.size(); ++p) {
                    const std::string stem = (dir / ("probe" + std::to_string(p))).string();
                    tools::write_png(stem + "_e0.png", rs.occluded[p]);
                    for (std::size_t e = 1; e <= cfg.n_experts; ++e)
                        tools::write_png(stem + "_e" + std::to_string(e) + ".png", rs.experts[e - 1][p]);
                }
                std::cout << "exported PNGs to " << dir.string() << '\n';
            }
        } else if (ev->parsed()) {
            std::vector<pipeline::Method> ms;
            for (const auto& m : methods) ms.push_back(pipeline::parse_method(m));
            print_reports(s.eval(occ, cfg.n_experts, ms).reports);
            std::cout << "wrote " << s.report_path(occ, cfg.n_experts).string() << '\n';
        }
        return 0;
    } catch (const ValueError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
