#include <gtest/gtest.h>

#include <fstream>

#include "mode/config.hpp"
#include "support.hpp"

using namespace mode;
using namespace mode::config;

TEST(Config, DefaultsValidate) {
    EXPECT_NO_THROW(validate(preset(Preset::desk)));
    EXPECT_NO_THROW(validate(preset(Preset::paper)));
}

TEST(Config, PaperPresetValues) {
    auto c = preset(Preset::paper);
    EXPECT_EQ(c.T, 200u);
    EXPECT_EQ(c.r, 10u);
    EXPECT_EQ(c.j, 10u);
    EXPECT_EQ(c.gate.epochs, 200u);
    EXPECT_EQ(c.gate.batch, 32u);
    EXPECT_EQ(c.gate.lr, 1e-6);
    auto d = preset(Preset::desk);
    EXPECT_EQ(d.T, 50u);
    EXPECT_EQ(d.r, 3u);
    EXPECT_EQ(d.j, 5u);
    EXPECT_EQ(d.gate.lr, 1e-3);
    EXPECT_THROW(parse_preset("huge"), ValueError);
}

TEST(Config, ParsesKeyValueText) {
    RunConfig c;
    apply_text(c, "# comment\nseed = 42\n\ndata.identities=12  # trailing\ngate.kind=noisy_topk\n"
                  "occlusion.kind=leaves\nsweep.n_values=0,2,4\ntrain.gate.lr=0.5\n");
    EXPECT_EQ(c.seed, 42u);
    EXPECT_EQ(c.identities, 12u);
    EXPECT_EQ(c.gate_kind, gate::GateKind::noisy_topk);
    EXPECT_EQ(c.occlusion, data::OcclusionKind::leaves);
    EXPECT_EQ(c.sweep_n_values, (std::vector<std::size_t>{0, 2, 4}));
    EXPECT_EQ(c.gate.lr, 0.5);
}

TEST(Config, ErrorsCarryTheLine) {
    RunConfig c;
    try {
        apply_text(c, "seed=1\nno.such.key=3\n", "x.cfg");
        FAIL();
    } catch (const ValueError& e) {
        EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos) << e.what();
        EXPECT_NE(std::string(e.what()).find("no.such.key"), std::string::npos) << e.what();
    }
    EXPECT_THROW(assign(c, "seed"), ValueError);
    EXPECT_THROW(assign(c, "seed=abc"), ValueError);
    EXPECT_THROW(assign(c, "gate.kind=dense"), ValueError);
    EXPECT_THROW(apply_file(c, "/nonexistent/mode.cfg"), ValueError);
}

TEST(Config, ValidationRejectsInconsistentValues) {
    const std::vector<std::string> bad{
        "repaint.j=7",              // does not divide 50
        "schedule.beta_start=0",    //
        "schedule.beta_end=1",      //
        "occlusion.severity=0",     //
        "occlusion.severity=1.5",   //
        "data.identities=1",        //
        "data.height=30",           //
        "eval.probes_per_identity=11",
        "eval.gate_train_fraction=0.1",
        "train.gate.epochs=0",
        "gate.logit_scale=0",
    };
    for (const auto& line : bad) {
        auto c = preset(Preset::desk);
        assign(c, line);
        EXPECT_THROW(validate(c), ValueError) << line;
    }
    auto c = preset(Preset::desk);
    assign(c, "gate.kind=noisy_topk");
    assign(c, "gate.k=5");
    EXPECT_THROW(validate(c), ValueError);  // k > n + 1 = 4
    assign(c, "gate.k=2");
    EXPECT_NO_THROW(validate(c));
    EXPECT_THROW(validate_sweep(c), ValueError);  // n = 0 admits only k = 1
    assign(c, "sweep.n_values=1,2,3");
    EXPECT_NO_THROW(validate_sweep(c));
}

TEST(Config, SnapshotRoundTrips) {
    auto c = preset(Preset::paper);
    apply_text(c, "seed=77\ndata.variation=0.3\nsweep.kinds=lines,leaves\nschedule.beta_start=0.000123\n");
    const auto snap = snapshot(c);
    RunConfig d;
    apply_text(d, snap);
    EXPECT_EQ(snapshot(d), snap);
    EXPECT_EQ(d.beta_start, 0.000123);
    for (const auto& k : keys()) EXPECT_EQ(get(c, k), get(d, k)) << k;
}

TEST(Config, FilePrecedence) {
    auto dir = mode::testing::scratch_dir("config");
    const auto path = (dir / "run.cfg").string();
    std::ofstream(path) << "seed=3\nrepaint.r=4\n";
    auto c = preset(Preset::desk);
    apply_file(c, path);
    assign(c, "repaint.r=2");
    EXPECT_EQ(c.seed, 3u);
    EXPECT_EQ(c.r, 2u);
}

TEST(Config, ShuffleRepaintsFlag) {
    auto c = preset(Preset::desk);
    EXPECT_TRUE(c.gate_shuffle_repaints);
    assign(c, "train.gate.shuffle_repaints=false");
    EXPECT_FALSE(c.gate_shuffle_repaints);
    assign(c, "train.gate.shuffle_repaints = 1");
    EXPECT_TRUE(c.gate_shuffle_repaints);
    EXPECT_THROW(assign(c, "train.gate.shuffle_repaints=maybe"), ValueError);
}
