#pragma once

// Stage orchestration over an output directory:
//
//   config.txt, manifest.json
//   data/{dataset,gallery,probe}.mode
//   checkpoints/{embedder,denoiser}.modw, checkpoints/gate_<occ>_n<n>.modw
//   logs/<component>_loss.csv
//   repaint/<occ>/{config.txt,occluded.mode,masks.mode,expert_<e>.mode}
//   eval/<occ>_n<n>/{probe_features,probe_rows,gallery_features}.mode, pairs.csv
//   reports/eval_<occ>_n<n>.csv
//
// <occ> is "<kind>_<severity>", e.g. rect_mask_0.5.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mode/checkpoint.hpp"
#include "mode/config.hpp"
#include "mode/data.hpp"
#include "mode/diffusion.hpp"
#include "mode/gate.hpp"
#include "mode/recognition.hpp"
#include "mode/repaint.hpp"

namespace mode::pipeline {

namespace fs = std::filesystem;

inline constexpr const char* kToolVersion = "0.1.0";

/// A required input file from an earlier stage is absent.
class MissingArtifact : public Error {
  public:
    using Error::Error;
};

struct Occlusion {
    data::OcclusionKind kind = data::OcclusionKind::rect_mask;
    double severity = 0.5;

    std::string tag() const { return std::string(data::to_string(kind)) + "_" + config::detail::format_double(severity); }
};

enum class Method { baseline, baseline_rf, mode };

inline std::string to_string(Method m) {
    switch (m) {
        case Method::baseline: return "baseline";
        case Method::baseline_rf: return "baseline_rf";
        case Method::mode: return "mode";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (auto m : {Method::baseline, Method::baseline_rf, Method::mode})
        if (s == to_string(m)) return m;
    throw ValueError("unknown method '" + s + "' (expected baseline, baseline_rf or mode)");
}

inline const std::vector<Method>& all_methods() {
    static const std::vector<Method> m{Method::baseline, Method::baseline_rf, Method::mode};
    return m;
}

inline void write_loss_log(const fs::path& path, const std::vector<double>& losses) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
    os << "epoch,mean_loss\n" << std::setprecision(10);
    for (std::size_t e = 0; e < losses.size(); ++e) os << e + 1 << ',' << losses[e] << '\n';
}

inline std::vector<double> read_loss_log(const fs::path& path) {
    std::ifstream is(path);
    std::string line;
    if (!is || !std::getline(is, line) || line != "epoch,mean_loss")
        throw FormatError(path.string() + ": missing header 'epoch,mean_loss'");
    std::vector<double> out;
    while (std::getline(is, line)) out.push_back(std::stod(line.substr(line.find(',') + 1)));
    return out;
}

inline void write_reports(const fs::path& path, const std::vector<recognition::EvalReport>& rows) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open '" + path.string() + "' for writing");
    os << recognition::kReportHeader << '\n';
    for (const auto& r : rows) os << recognition::to_csv_row(r) << '\n';
}

inline std::vector<recognition::EvalReport> read_reports(const fs::path& path) {
    std::ifstream is(path);
    std::string line;
    if (!is || !std::getline(is, line) || line != recognition::kReportHeader)
        throw FormatError(path.string() + ": missing report header");
    std::vector<recognition::EvalReport> out;
    while (std::getline(is, line))
        if (!line.empty()) out.push_back(recognition::parse_csv_row(line));
    return out;
}

/// Checks every artifact a manifest names: it must exist and parse.
inline nlohmann::json load_manifest(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw MissingArtifact("missing manifest '" + path.string() + "'");
    nlohmann::json m;
    try {
        m = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    const fs::path root = path.parent_path();
    const auto artifacts = m.value("artifacts", nlohmann::json::object());
    for (const auto& [name, rel] : artifacts.items()) {
        const fs::path p = root / rel.get<std::string>();
        if (!fs::exists(p)) throw MissingArtifact("manifest entry '" + name + "' points to missing " + p.string());
        const auto ext = p.extension().string();
        if (ext == ".mode") data::load_container(p.string());
        else if (ext == ".modw") load_checkpoint(p.string());
        else if (ext == ".csv") {
            std::ifstream f(p);
            std::string header;
            if (!std::getline(f, header) || header.empty()) throw FormatError(p.string() + ": empty CSV");
        }
    }
    return m;
}

/// Repainted probes for one occlusion: x_0 plus `experts` repaints each.
struct RepaintSet {
    std::vector<std::uint32_t> labels;
    std::vector<repaint::OcclusionMask> masks;
    std::vector<Tensor<float>> occluded;
    std::vector<std::vector<Tensor<float>>> experts;  // experts[e][p]

    std::size_t size() const noexcept { return labels.size(); }
};

struct EvalArtifacts {
    std::vector<recognition::EvalReport> reports;
    std::vector<double> mean_weights;  // mode gate weights averaged over eval probes
};

/// One output directory and one root seed. Stages read their inputs from disk
/// and write their outputs back, so every CLI command maps to one call.
class Session {
  public:
    Session(config::RunConfig cfg, fs::path root) : cfg_(std::move(cfg)), root_(std::move(root)) {
        config::validate(cfg_);
    }

    const config::RunConfig& config() const noexcept { return cfg_; }
    const fs::path& root() const noexcept { return root_; }

    fs::path dataset_path() const { return root_ / "data" / "dataset.mode"; }
    fs::path gallery_path() const { return root_ / "data" / "gallery.mode"; }
    fs::path probe_path() const { return root_ / "data" / "probe.mode"; }
    fs::path embedder_path() const { return root_ / "checkpoints" / "embedder.modw"; }
    fs::path denoiser_path() const { return root_ / "checkpoints" / "denoiser.modw"; }
    fs::path gate_path(const Occlusion& o, std::size_t n) const {
        return root_ / "checkpoints" / ("gate_" + o.tag() + "_n" + std::to_string(n) + ".modw");
    }
    fs::path loss_path(const std::string& component) const { return root_ / "logs" / (component + "_loss.csv"); }
    fs::path repaint_dir(const Occlusion& o) const { return root_ / "repaint" / o.tag(); }
    fs::path eval_dir(const Occlusion& o, std::size_t n) const {
        return root_ / "eval" / (o.tag() + "_n" + std::to_string(n));
    }
    fs::path report_path(const Occlusion& o, std::size_t n) const {
        return root_ / "reports" / ("eval_" + o.tag() + "_n" + std::to_string(n) + ".csv");
    }
    fs::path manifest_path() const { return root_ / "manifest.json"; }

    Occlusion default_occlusion() const { return {cfg_.occlusion, cfg_.severity}; }

    // ---- gen-data -------------------------------------------------------

    void gen_data() {
        const auto t0 = clock::now();
        data::GeneratorConfig g{cfg_.identities, cfg_.images_per_identity, cfg_.height,
                                cfg_.width,      cfg_.variation,           derive_seed(cfg_.seed, "data")};
        const auto ds = data::generate_dataset(g);
        const auto sp = data::split(ds, cfg_.gallery_fraction, derive_seed(cfg_.seed, "split"));
        prepare_dirs();
        data::save_container(dataset_path().string(), ds);
        data::save_container(gallery_path().string(), ds.subset(sp.gallery));
        data::save_container(probe_path().string(), ds.subset(sp.probe));
        record("gen-data", t0, {{"dataset", dataset_path()}, {"gallery", gallery_path()}, {"probe", probe_path()}});
    }

    // ---- training -------------------------------------------------------

    std::vector<double> train_embedder() {
        const auto t0 = clock::now();
        const auto& g = gallery();
        std::vector<std::size_t> classes;
        for (auto l : g.labels) classes.push_back(class_of(l));
        recognition::EmbedderTrainConfig ec{cfg_.embedder.epochs, cfg_.embedder.batch, cfg_.embedder.lr,
                                            derive_seed(cfg_.seed, "embedder")};
        auto trained = recognition::train_embedder<float>(g.images, classes, gallery_labels().size(), ec, embedder_arch());
        prepare_dirs();
        save_checkpoint(embedder_path().string(), trained.model.records());
        write_loss_log(loss_path("embedder"), trained.epoch_loss);
        embedder_.reset();
        record("train-embedder", t0, {{"embedder", embedder_path()}, {"embedder_loss", loss_path("embedder")}});
        return trained.epoch_loss;
    }

    std::vector<double> train_denoiser() {
        const auto t0 = clock::now();
        const auto& g = gallery();
        diffusion::TrainConfig dc{cfg_.denoiser.epochs, cfg_.denoiser.batch, cfg_.denoiser.lr,
                                  derive_seed(cfg_.seed, "denoiser")};
        auto trained = diffusion::train_denoiser<float>(g.images, schedule(), dc, denoiser_arch());
        prepare_dirs();
        save_checkpoint(denoiser_path().string(), trained.model.records());
        write_loss_log(loss_path("denoiser"), trained.epoch_loss);
        denoiser_.reset();
        record("train-denoiser", t0, {{"denoiser", denoiser_path()}, {"denoiser_loss", loss_path("denoiser")}});
        return trained.epoch_loss;
    }

    /// Trains the gate for n repaint experts on the gate-training probes.
    std::vector<double> train_gate(const Occlusion& o, std::size_t n) {
        const auto t0 = clock::now();
        check_gate_k(n);
        require(embedder_path(), "train-embedder");
        require(denoiser_path(), "train-denoiser");
        const auto bundles = build_bundles(o, n);
        std::vector<gate::ExpertBundle> train;
        std::vector<std::size_t> labels;
        for (std::size_t p = 0; p < bundles.size(); ++p)
            if (is_gate_train_[p]) {
                train.push_back(bundles[p]);
                labels.push_back(gallery_index(probe_labels_[p]));
            }
        gate::GateTrainConfig gc{cfg_.gate.epochs, cfg_.gate.batch, cfg_.gate.lr,
                                 derive_seed(cfg_.seed, "gate:" + o.tag() + ":" + std::to_string(n)),
                                 cfg_.logit_scale, cfg_.gate_kind, gate_k(n), cfg_.gate_shuffle_repaints};
        auto trained = gate::train_gate<float>(train, labels, gc);
        prepare_dirs();
        save_checkpoint(gate_path(o, n).string(), trained.params.records());
        const auto log = loss_path("gate_" + o.tag() + "_n" + std::to_string(n));
        write_loss_log(log, trained.epoch_loss);
        record("train-gate", t0, {{"gate_" + o.tag() + "_n" + std::to_string(n), gate_path(o, n)},
                                  {"gate_" + o.tag() + "_n" + std::to_string(n) + "_loss", log}});
        return trained.epoch_loss;
    }

    // ---- repaint --------------------------------------------------------

    /// Repaints of the selected probes with at least n experts, read from the
    /// cache when it was produced under the same configuration.
    const RepaintSet& repaints(const Occlusion& o, std::size_t n) {
        if (!(o.severity > 0 && o.severity <= 1)) throw ValueError("occlusion severity must lie in (0, 1]");
        auto& rs = repaint_cache_[o.tag()];
        if (rs.size() == 0) load_repaint_cache(o, rs);
        if (rs.size() == 0 || rs.experts.size() < n) extend_repaints(o, rs, n);
        return rs;
    }

    // ---- evaluation -----------------------------------------------------

    /// Reports for the requested methods; persists the intermediate rows so a
    /// report can be replayed with `replay`.
    EvalArtifacts eval(const Occlusion& o, std::size_t n, const std::vector<Method>& methods) {
        const auto t0 = clock::now();
        check_gate_k(n);
        require(embedder_path(), "train-embedder");
        const bool need_gate = std::find(methods.begin(), methods.end(), Method::mode) != methods.end();
        if (need_gate) require(gate_path(o, n), "train-gate");
        if (n > 0) require(denoiser_path(), "train-denoiser");

        const auto bundles = build_bundles(o, n);
        std::vector<gate::ExpertBundle> ev;
        std::vector<std::uint32_t> labels;
        for (std::size_t p = 0; p < bundles.size(); ++p)
            if (!is_gate_train_[p]) {
                ev.push_back(bundles[p]);
                labels.push_back(probe_labels_[p]);
            }
        const auto& g = gallery();
        const auto gfeat = recognition::embed_batch(embedder(), stack(g.images));
        Rng pair_rng = Rng(cfg_.seed).fork("pairs:" + o.tag());
        const auto pairs = recognition::build_verification_pairs(labels, g.labels, pair_rng, cfg_.verification_pairs);

        const fs::path dir = eval_dir(o, n);
        fs::create_directories(dir);
        persist_eval_inputs(dir, ev, labels, gfeat, g.labels, pairs);

        std::optional<gate::GateParams<float>> gp;
        if (need_gate) gp = load_gate(o, n);
        auto out = score(ev, labels, gfeat, g.labels, pairs, gp ? &*gp : nullptr, methods, o, n);
        fs::create_directories(root_ / "reports");
        write_reports(report_path(o, n), out.reports);
        record("eval", t0, {{"report_" + o.tag() + "_n" + std::to_string(n), report_path(o, n)}});
        return out;
    }

    /// Recomputes the reports from the persisted rows, features and pairs.
    EvalArtifacts replay(const Occlusion& o, std::size_t n, const std::vector<Method>& methods) {
        const fs::path dir = eval_dir(o, n);
        require(dir / "probe_rows.mode", "eval");
        const auto rows = data::load_container((dir / "probe_rows.mode").string());
        const auto feats = data::load_container((dir / "probe_features.mode").string());
        const auto gal = data::load_container((dir / "gallery_features.mode").string());
        std::vector<gate::ExpertBundle> ev;
        for (std::size_t p = 0; p < rows.size(); ++p) {
            gate::ExpertBundle b;
            for (std::size_t e = 0; e < rows.height; ++e) {
                auto r = rows.images[p].slice(0).subspan(e * rows.width, rows.width);
                auto f = feats.images[p].slice(0).subspan(e * feats.width, feats.width);
                b.rows.emplace_back(r.begin(), r.end());
                b.features.emplace_back(f.begin(), f.end());
            }
            ev.push_back(std::move(b));
        }
        std::vector<recognition::FeatureVector> gfeat;
        for (const auto& im : gal.images) gfeat.emplace_back(im.begin(), im.end());
        std::vector<recognition::VerificationPair> pairs;
        std::ifstream is(dir / "pairs.csv");
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            std::stringstream ss(line);
            std::string a, b, s;
            std::getline(ss, a, ',');
            std::getline(ss, b, ',');
            std::getline(ss, s, ',');
            pairs.push_back({std::stoul(a), std::stoul(b), s == "1"});
        }
        std::optional<gate::GateParams<float>> gp;
        if (std::find(methods.begin(), methods.end(), Method::mode) != methods.end()) gp = load_gate(o, n);
        return score(ev, rows.labels, gfeat, gal.labels, pairs, gp ? &*gp : nullptr, methods, o, n);
    }

    // ---- loaded artifacts -----------------------------------------------

    const data::Dataset& gallery() {
        if (!gallery_) {
            require(gallery_path(), "gen-data");
            gallery_ = data::load_container(gallery_path().string());
        }
        return *gallery_;
    }

    const data::Dataset& probes() {
        if (!probe_) {
            require(probe_path(), "gen-data");
            probe_ = data::load_container(probe_path().string());
        }
        return *probe_;
    }

    const recognition::Embedder<float>& embedder() {
        if (!embedder_) {
            require(embedder_path(), "train-embedder");
            embedder_.emplace(embedder_arch());
            embedder_->load(load_checkpoint(embedder_path().string()));
        }
        return *embedder_;
    }

    const diffusion::Denoiser<float>& denoiser() {
        if (!denoiser_) {
            require(denoiser_path(), "train-denoiser");
            denoiser_.emplace(denoiser_arch());
            denoiser_->load(load_checkpoint(denoiser_path().string()));
        }
        return *denoiser_;
    }

    gate::GateParams<float> load_gate(const Occlusion& o, std::size_t n) {
        require(gate_path(o, n), "train-gate");
        gate::GateParams<float> gp(n + 1, embedder_arch().dim, cfg_.gate_kind, gate_k(n));
        gp.load(load_checkpoint(gate_path(o, n).string()));
        return gp;
    }

    diffusion::NoiseSchedule schedule() const { return diffusion::make_schedule(cfg_.T, cfg_.beta_start, cfg_.beta_end); }

    diffusion::DenoiserArch denoiser_arch() const {
        diffusion::DenoiserArch a;
        a.height = cfg_.height;
        a.width = cfg_.width;
        a.T = cfg_.T;
        return a;
    }

    recognition::EmbedderArch embedder_arch() const {
        recognition::EmbedderArch a;
        a.height = cfg_.height;
        a.width = cfg_.width;
        return a;
    }

    /// Gallery with one entry per identity: the normalised mean embedding.
    const recognition::Gallery& gallery_entries() {
        if (!entries_) {
            const auto& g = gallery();
            entries_ = recognition::build_gallery(recognition::embed_batch(embedder(), stack(g.images)), g.labels);
        }
        return *entries_;
    }

    /// Indices into the probe container of the selected probes, and whether
    /// each one is used for gate training (otherwise for evaluation).
    void select_probes() {
        if (!probe_index_.empty()) return;
        const auto& pr = probes();
        std::map<std::uint32_t, std::size_t> seen;
        const auto train = static_cast<std::size_t>(
            std::lround(cfg_.gate_train_fraction * static_cast<double>(cfg_.probes_per_identity)));
        for (std::size_t i = 0; i < pr.size(); ++i) {
            auto& c = seen[pr.labels[i]];
            if (c >= cfg_.probes_per_identity) continue;
            probe_index_.push_back(i);
            probe_labels_.push_back(pr.labels[i]);
            is_gate_train_.push_back(c < train);
            ++c;
        }
    }

    const std::vector<bool>& gate_train_flags() {
        select_probes();
        return is_gate_train_;
    }

    /// Per selected probe: x_0 and the first n repaints, with features and rows.
    std::vector<gate::ExpertBundle> build_bundles(const Occlusion& o, std::size_t n) {
        select_probes();
        const auto& gal = gallery_entries();
        const auto& emb = embedder();
        std::vector<gate::ExpertBundle> out(probe_index_.size());
        std::vector<Tensor<float>> occluded;
        if (n > 0) {
            const auto& rs = repaints(o, n);
            occluded = rs.occluded;
            for (std::size_t e = 0; e <= n; ++e) {
                const auto& imgs = e == 0 ? rs.occluded : rs.experts[e - 1];
                const auto feats = embed_chunks(emb, imgs);
                for (std::size_t p = 0; p < out.size(); ++p) {
                    out[p].features.push_back(feats[p]);
                    out[p].rows.push_back(recognition::similarity(feats[p], gal));
                }
            }
        } else {
            // no repaints needed: only the occluded original
            for (std::size_t p = 0; p < probe_index_.size(); ++p)
                occluded.push_back(data::occlude(probes().images[probe_index_[p]], mask_for(o, p)));
            const auto feats = embed_chunks(emb, occluded);
            for (std::size_t p = 0; p < out.size(); ++p) {
                out[p].features.push_back(feats[p]);
                out[p].rows.push_back(recognition::similarity(feats[p], gal));
            }
        }
        return out;
    }

    repaint::OcclusionMask mask_for(const Occlusion& o, std::size_t p) const {
        data::OcclusionSpec spec{o.kind, o.severity, derive_seed(derive_seed(cfg_.seed, "occlusion:" + o.tag()), p)};
        return data::make_mask(spec, cfg_.height, cfg_.width);
    }

    /// Rng of expert e (1-based) for selected probe p; independent of n.
    Rng expert_rng(const Occlusion& o, std::size_t p, std::size_t e) const {
        return Rng(derive_seed(derive_seed(derive_seed(cfg_.seed, "repaint:" + o.tag()), p), e));
    }

  private:
    using clock = std::chrono::steady_clock;

    std::size_t gate_k(std::size_t n) const { return cfg_.gate_kind == gate::GateKind::noisy_topk ? cfg_.gate_k : n + 1; }

    void check_gate_k(std::size_t n) const {
        if (cfg_.gate_kind == gate::GateKind::noisy_topk && cfg_.gate_k > n + 1)
            throw ValueError("config: gate.k = " + std::to_string(cfg_.gate_k) + " exceeds n + 1 = " +
                             std::to_string(n + 1));
    }

    static void require(const fs::path& p, const std::string& stage) {
        if (!fs::exists(p)) throw MissingArtifact("missing " + p.string() + " (run " + stage + " first)");
    }

    void prepare_dirs() const {
        for (const char* d : {"data", "checkpoints", "logs"}) fs::create_directories(root_ / d);
        std::ofstream(root_ / "config.txt") << config::snapshot(cfg_);
    }

    const std::vector<std::uint32_t>& gallery_labels() {
        if (labels_.empty()) {
            labels_ = gallery().labels;
            std::sort(labels_.begin(), labels_.end());
            labels_.erase(std::unique(labels_.begin(), labels_.end()), labels_.end());
        }
        return labels_;
    }

    std::size_t class_of(std::uint32_t label) {
        const auto& l = gallery_labels();
        return static_cast<std::size_t>(std::lower_bound(l.begin(), l.end(), label) - l.begin());
    }

    std::size_t gallery_index(std::uint32_t label) { return gallery_entries().index_of(label); }

    static std::vector<recognition::FeatureVector> embed_chunks(const recognition::Embedder<float>& emb,
                                                                const std::vector<Tensor<float>>& imgs) {
        std::vector<recognition::FeatureVector> out;
        constexpr std::size_t chunk = 64;
        for (std::size_t s = 0; s < imgs.size(); s += chunk) {
            const std::vector<Tensor<float>> part(imgs.begin() + s, imgs.begin() + std::min(imgs.size(), s + chunk));
            for (auto& f : recognition::embed_batch(emb, stack(part))) out.push_back(std::move(f));
        }
        return out;
    }

    std::string repaint_fingerprint(const Occlusion& o) const {
        config::RunConfig c = cfg_;
        c.n_experts = 0;  // the cache holds any number of experts
        return config::snapshot(c) + "occlusion=" + o.tag() + "\n";
    }

    void load_repaint_cache(const Occlusion& o, RepaintSet& rs) {
        const fs::path dir = repaint_dir(o);
        std::ifstream is(dir / "config.txt");
        if (!is) return;
        std::stringstream buf;
        buf << is.rdbuf();
        if (buf.str() != repaint_fingerprint(o)) return;
        const auto occ = data::load_container((dir / "occluded.mode").string());
        const auto masks = data::masks_from_container(data::load_container((dir / "masks.mode").string()));
        RepaintSet loaded{occ.labels, masks, occ.images, {}};
        for (std::size_t e = 1; fs::exists(dir / expert_file(e)); ++e)
            loaded.experts.push_back(data::load_container((dir / expert_file(e)).string()).images);
        rs = std::move(loaded);
    }

    static std::string expert_file(std::size_t e) {
        std::ostringstream os;
        os << "expert_" << std::setw(2) << std::setfill('0') << e << ".mode";
        return os.str();
    }

    void extend_repaints(const Occlusion& o, RepaintSet& rs, std::size_t n) {
        const auto t0 = clock::now();
        select_probes();
        const auto& pr = probes();
        if (rs.size() == 0) {
            rs = {};
            for (std::size_t p = 0; p < probe_index_.size(); ++p) {
                rs.labels.push_back(probe_labels_[p]);
                rs.masks.push_back(mask_for(o, p));
                rs.occluded.push_back(data::occlude(pr.images[probe_index_[p]], rs.masks.back()));
            }
        }
        const auto& model = denoiser();
        const auto s = schedule();
        const auto plan = repaint::build_plan(cfg_.T, cfg_.r, cfg_.j);
        const fs::path dir = repaint_dir(o);
        fs::create_directories(dir);
        data::save_container((dir / "occluded.mode").string(), {cfg_.height, cfg_.width, 1, rs.labels, rs.occluded});
        data::save_container((dir / "masks.mode").string(), data::masks_to_container(rs.masks, rs.labels));
        std::ofstream(dir / "config.txt") << repaint_fingerprint(o);

        constexpr std::size_t chunk = 32;
        for (std::size_t e = rs.experts.size() + 1; e <= n; ++e) {
            std::vector<Tensor<float>> out;
            for (std::size_t s0 = 0; s0 < rs.size(); s0 += chunk) {
                const std::size_t s1 = std::min(rs.size(), s0 + chunk);
                std::vector<Tensor<float>> xs(rs.occluded.begin() + s0, rs.occluded.begin() + s1);
                std::vector<repaint::OcclusionMask> ms(rs.masks.begin() + s0, rs.masks.begin() + s1);
                std::vector<Rng> rngs;
                for (std::size_t p = s0; p < s1; ++p) rngs.push_back(expert_rng(o, p, e));
                auto batch = repaint::repaint_batch(stack(xs), std::span<const repaint::OcclusionMask>(ms), model, plan,
                                                    std::span<Rng>(rngs), s);
                for (std::size_t i = 0; i < s1 - s0; ++i) out.push_back(unstack(batch, i));
            }
            data::save_container((dir / expert_file(e)).string(), {cfg_.height, cfg_.width, 1, rs.labels, out});
            rs.experts.push_back(std::move(out));
        }
        record("repaint", t0, {{"repaint_" + o.tag(), dir / "occluded.mode"}});
    }

    void persist_eval_inputs(const fs::path& dir, const std::vector<gate::ExpertBundle>& ev,
                             const std::vector<std::uint32_t>& labels,
                             const std::vector<recognition::FeatureVector>& gfeat,
                             const std::vector<std::uint32_t>& glabels,
                             const std::vector<recognition::VerificationPair>& pairs) const {
        const std::size_t E = ev.front().experts(), M = ev.front().rows.front().size(),
                          d = ev.front().features.front().size();
        data::Dataset rows{E, M, 1, labels, {}}, feats{E, d, 1, labels, {}}, gal{1, d, 1, glabels, {}};
        for (const auto& b : ev) {
            std::vector<float> r, f;
            for (std::size_t e = 0; e < E; ++e) {
                r.insert(r.end(), b.rows[e].begin(), b.rows[e].end());
                f.insert(f.end(), b.features[e].begin(), b.features[e].end());
            }
            rows.images.emplace_back(Shape{1, E, M}, std::move(r));
            feats.images.emplace_back(Shape{1, E, d}, std::move(f));
        }
        for (const auto& f : gfeat) gal.images.emplace_back(Shape{1, 1, d}, f);
        data::save_container((dir / "probe_rows.mode").string(), rows);
        data::save_container((dir / "probe_features.mode").string(), feats);
        data::save_container((dir / "gallery_features.mode").string(), gal);
        std::ofstream os(dir / "pairs.csv");
        os << "probe,gallery_image,same\n";
        for (const auto& p : pairs) os << p.a << ',' << p.b << ',' << (p.same ? 1 : 0) << '\n';
    }

    EvalArtifacts score(const std::vector<gate::ExpertBundle>& ev, const std::vector<std::uint32_t>& labels,
                        const std::vector<recognition::FeatureVector>& gfeat,
                        const std::vector<std::uint32_t>& glabels,
                        const std::vector<recognition::VerificationPair>& pairs, const gate::GateParams<float>* gp,
                        const std::vector<Method>& methods, const Occlusion& o, std::size_t n) {
        // gallery order: ascending label, matching gallery_entries()
        std::vector<std::uint32_t> order(glabels);
        std::sort(order.begin(), order.end());
        order.erase(std::unique(order.begin(), order.end()), order.end());
        std::vector<std::size_t> truth;
        for (auto l : labels)
            truth.push_back(static_cast<std::size_t>(std::lower_bound(order.begin(), order.end(), l) - order.begin()));

        EvalArtifacts out;
        std::vector<std::vector<float>> weights(ev.size());
        for (std::size_t p = 0; p < ev.size(); ++p) {
            if (gp) {
                const auto x = gate::concat_features<float>(ev[p].features);
                weights[p] = gate::gate_weights(*gp, std::span<const float>(x));
            }
        }
        if (gp) {
            out.mean_weights.assign(n + 1, 0.0);
            for (const auto& w : weights)
                for (std::size_t e = 0; e <= n; ++e) out.mean_weights[e] += w[e] / static_cast<double>(ev.size());
        }
        for (auto m : methods) {
            auto weights_for = [&](std::size_t p) {
                const std::size_t E = ev[p].experts();
                if (m == Method::baseline) {
                    std::vector<float> w(E, 0.0f);
                    w[0] = 1.0f;
                    return w;
                }
                if (m == Method::baseline_rf) return std::vector<float>(E, 1.0f / static_cast<float>(E));
                return weights[p];
            };
            std::vector<std::vector<float>> rows;
            for (std::size_t p = 0; p < ev.size(); ++p) {
                if (m == Method::baseline) rows.push_back(ev[p].rows[0]);
                else if (m == Method::baseline_rf) rows.push_back(gate::baseline_rf_average<float>(ev[p].rows));
                else rows.push_back(gate::mixture<float>(ev[p].rows, std::span<const float>(weights[p])));
            }
            std::vector<double> genuine, impostor;
            for (const auto& pr : pairs) {
                const auto w = weights_for(pr.a);
                double sc = 0;
                for (std::size_t e = 0; e < w.size(); ++e)
                    if (w[e] != 0.0f) sc += static_cast<double>(w[e]) * recognition::cosine(ev[pr.a].features[e], gfeat[pr.b]);
                (pr.same ? genuine : impostor).push_back(sc);
            }
            const auto v = recognition::eer_and_acc(genuine, impostor);
            recognition::EvalReport r;
            r.method = to_string(m);
            r.n_experts = n;
            r.occlusion = std::string(data::to_string(o.kind));
            r.top1 = recognition::topk_accuracy(rows, truth, 1);
            r.top5 = recognition::topk_accuracy(rows, truth, std::min<std::size_t>(5, order.size()));
            r.eer = v.eer;
            r.acc = v.acc;
            r.probes = ev.size();
            r.gallery_size = order.size();
            out.reports.push_back(r);
        }
        return out;
    }

    void record(const std::string& stage, clock::time_point t0, const std::map<std::string, fs::path>& artifacts) {
        nlohmann::json m = nlohmann::json::object();
        if (std::ifstream is(manifest_path()); is) {
            try {
                m = nlohmann::json::parse(is);
            } catch (const nlohmann::json::exception&) {
                m = nlohmann::json::object();
            }
        }
        m["tool_version"] = kToolVersion;
        m["config"] = config::snapshot(cfg_);
        for (const auto& [k, p] : artifacts) m["artifacts"][k] = fs::relative(p, root_).generic_string();
        m["stage_seconds"][stage] = std::chrono::duration<double>(clock::now() - t0).count();
        fs::create_directories(root_);
        std::ofstream(manifest_path()) << m.dump(2) << '\n';
    }

    config::RunConfig cfg_;
    fs::path root_;
    std::optional<data::Dataset> gallery_, probe_;
    std::optional<recognition::Embedder<float>> embedder_;
    std::optional<diffusion::Denoiser<float>> denoiser_;
    std::optional<recognition::Gallery> entries_;
    std::vector<std::uint32_t> labels_;
    std::vector<std::size_t> probe_index_;
    std::vector<std::uint32_t> probe_labels_;
    std::vector<bool> is_gate_train_;
    std::map<std::string, RepaintSet> repaint_cache_;
};

struct SweepRow {
    std::uint64_t seed;
    recognition::EvalReport report;
};

inline void write_sweep(const fs::path& path, const std::vector<SweepRow>& rows) {
    std::vector<recognition::EvalReport> r;
    for (const auto& s : rows) r.push_back(s.report);
    write_reports(path, r);
}

/// Trains the shared models of one seed's workspace.
inline void prepare_models(Session& s) {
    s.gen_data();
    s.train_embedder();
    s.train_denoiser();
}

/// One gate per n on shared models; a "mode" row per (seed, n), seed-major.
inline std::vector<SweepRow> sweep_experts(const config::RunConfig& base, const fs::path& out,
                                           const std::vector<Method>& methods = {Method::mode}) {
    config::validate_sweep(base);
    std::vector<SweepRow> rows;
    for (auto seed : base.sweep_seeds) {
        config::RunConfig c = base;
        c.seed = seed;
        Session s(c, out / ("seed_" + std::to_string(seed)));
        prepare_models(s);
        const Occlusion o = s.default_occlusion();
        const auto n_max = *std::max_element(c.sweep_n_values.begin(), c.sweep_n_values.end());
        if (n_max > 0) s.repaints(o, n_max);
        for (auto n : c.sweep_n_values) {
            if (std::find(methods.begin(), methods.end(), Method::mode) != methods.end()) s.train_gate(o, n);
            for (auto& r : s.eval(o, n, methods).reports) rows.push_back({seed, r});
        }
    }
    fs::create_directories(out);
    write_sweep(out / "sweep_experts.csv", rows);
    return rows;
}

/// All methods at experts.n for each kind in sweep.kinds at sweep.severity.
inline std::vector<SweepRow> sweep_occlusions(const config::RunConfig& base, const fs::path& out) {
    config::validate(base);
    std::vector<SweepRow> rows;
    for (auto seed : base.sweep_seeds) {
        config::RunConfig c = base;
        c.seed = seed;
        Session s(c, out / ("seed_" + std::to_string(seed)));
        prepare_models(s);
        for (auto kind : c.sweep_kinds) {
            const Occlusion o{kind, c.sweep_severity};
            s.train_gate(o, c.n_experts);
            for (auto& r : s.eval(o, c.n_experts, all_methods()).reports) rows.push_back({seed, r});
        }
    }
    fs::create_directories(out);
    write_sweep(out / "sweep_occlusions.csv", rows);
    return rows;
}

}  // namespace mode::pipeline
