#include "support.hpp"

#include "uvx/checkpoint.hpp"
#include "uvx/gradcheck.hpp"
#include "uvx/train.hpp"

#include <fstream>

using namespace uvx;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class TrainTest : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        data_dir_ = uvx::testing::scratch_dir("train_data");
        data::SynthConfig sc;
        sc.cases = 6;
        sc.extents = {16, 16};
        sc.seed = 3;
        data::synth_dataset(sc, data_dir_.string());
    }

    RunConfig config(const std::string& name, std::size_t iters) const {
        RunConfig c;
        c.model = tiny_model_config();
        c.model.conv_init = ConvInit::He;
        c.lr = 3e-3;
        c.iters = iters;
        c.batch_size = 2;
        c.checkpoint_every = 10;
        c.train_manifest = (data_dir_ / "manifest.csv").string();
        c.out_dir = uvx::testing::scratch_dir(name).string();
        return c;
    }

    static fs::path data_dir_;
};

fs::path TrainTest::data_dir_;

} // namespace

TEST(RunConfigParse, RoundTripAndErrors) {
    RunConfig c;
    c.model.levels = 3;
    c.model.input_extents = {32, 48};
    c.model.forget_gate = vil::ForgetGate::Exp;
    c.model.downsample = Downsample::MaxPool;
    c.lr = 2.5e-4;
    c.train_manifest = "a/train.csv";
    const RunConfig back = parse_run_config(c.to_text());
    EXPECT_EQ(back.to_text(), c.to_text());
    EXPECT_EQ(back.model.input_extents, (Shape{32, 48}));
    EXPECT_EQ(back.model.forget_gate, vil::ForgetGate::Exp);
    EXPECT_EQ(back.lr, 2.5e-4);

    const RunConfig d = parse_run_config("# comment\n  levels = 3  # trailing\n\nextents=32x32\n");
    EXPECT_EQ(d.model.levels, 3u);
    EXPECT_EQ(d.lr, 1e-4);
    EXPECT_EQ(d.weight_decay, 1e-5);
    EXPECT_THROW(parse_run_config("bogus=1\n"), ConfigError);
    EXPECT_THROW(parse_run_config("levels\n"), ConfigError);
    EXPECT_THROW(parse_run_config("levels=three\n"), ConfigError);
    EXPECT_THROW(parse_run_config("levels=9\n"), ConfigError);
    EXPECT_THROW(parse_run_config("extents=30x32\nlevels=4\n"), ShapeError);
}

TEST_F(TrainTest, LossDropsAndArtifactsAreWritten) {
    RunConfig c = config("train_smoke", 50);
    const TrainResult r = train(c);
    ASSERT_EQ(r.losses.size(), 50u);
    EXPECT_LT(r.losses.back(), r.losses.front());
    for (const char* f : {"run.cfg", "loss.csv", "ckpt_000000.uvxw", "ckpt_000010.uvxw", "ckpt_000050.uvxw",
                          "final.uvxw"}) {
        EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / f)) << f;
    }
    std::istringstream csv(slurp(fs::path(c.out_dir) / "loss.csv"));
    std::string line;
    std::getline(csv, line);
    EXPECT_EQ(line, "iter,loss");
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 50u);
    EXPECT_EQ(load_run_config((fs::path(c.out_dir) / "run.cfg").string()).to_text(), c.to_text());
}

TEST_F(TrainTest, ResumeReproducesUnbrokenRun) {
    const RunConfig full = config("train_full", 20);
    train(full);
    RunConfig part = config("train_part", 10);
    train(part);
    part.iters = 20;
    train(part, TrainOptions{checkpoint_path(part, 10), {}});
    const fs::path a(full.out_dir), b(part.out_dir);
    EXPECT_EQ(slurp(a / "loss.csv"), slurp(b / "loss.csv"));
    EXPECT_EQ(slurp(a / "ckpt_000020.uvxw"), slurp(b / "ckpt_000020.uvxw"));
    EXPECT_EQ(slurp(a / "final.uvxw"), slurp(b / "final.uvxw"));
}

TEST_F(TrainTest, SameSeedGivesIdenticalArtifacts) {
    const RunConfig a = config("train_det_a", 12), b = config("train_det_b", 12);
    train(a);
    train(b);
    for (const char* f : {"loss.csv", "ckpt_000010.uvxw", "final.uvxw"}) {
        EXPECT_EQ(slurp(fs::path(a.out_dir) / f), slurp(fs::path(b.out_dir) / f)) << f;
    }
    RunConfig c = config("train_det_c", 12);
    c.seed = 1;
    train(c);
    EXPECT_NE(slurp(fs::path(a.out_dir) / "loss.csv"), slurp(fs::path(c.out_dir) / "loss.csv"));
}

TEST_F(TrainTest, ZeroIterationsWritesInitialCheckpointOnly) {
    const RunConfig c = config("train_zero", 0);
    const TrainResult r = train(c);
    EXPECT_TRUE(r.losses.empty());
    const fs::path dir(c.out_dir);
    EXPECT_EQ(slurp(dir / "loss.csv"), "iter,loss\n");
    const Checkpoint init = load_checkpoint((dir / "ckpt_000000.uvxw").string());
    const Checkpoint fin = load_checkpoint((dir / "final.uvxw").string());
    ASSERT_EQ(init.params.size(), fin.params.size());
    for (std::size_t i = 0; i < init.params.size(); ++i) EXPECT_EQ(init.params[i].data, fin.params[i].data);
    std::size_t ckpts = 0;
    for (const auto& e : fs::directory_iterator(dir)) ckpts += e.path().filename().string().starts_with("ckpt_");
    EXPECT_EQ(ckpts, 1u);
}

TEST_F(TrainTest, NonFiniteLossAbortsWithIteration) {
    RunConfig c = config("train_nan", 30);
    c.lr = 1e30;
    try {
        train(c);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("iteration "), std::string::npos) << e.what();
    }
    const fs::path dir(c.out_dir);
    EXPECT_FALSE(fs::exists(dir / "final.uvxw"));
    UVixLSTM<float> model(c.model, 0);
    EXPECT_NO_THROW(restore(load_checkpoint((dir / "ckpt_000000.uvxw").string()), model.parameters()));
}

TEST_F(TrainTest, MissingInputsAreReported) {
    RunConfig c = config("train_missing", 1);
    c.train_manifest.clear();
    EXPECT_THROW(train(c), ConfigError);
    c.train_manifest = "/nonexistent/manifest.csv";
    EXPECT_THROW(train(c), FormatError);
    c = config("train_shape", 1);
    c.model.input_extents = {32, 32};
    EXPECT_THROW(train(c), ShapeError);
}

TEST_F(TrainTest, EvalOracleModeIsPerfect) {
    const RunConfig c = config("eval_oracle", 0);
    const TrainResult r = train(c);
    EvalOptions e;
    e.checkpoint = r.final_checkpoint;
    e.manifest = (data_dir_ / "manifest.csv").string();
    e.oracle = true;
    const MetricReport rep = run_eval(e);
    ASSERT_EQ(rep.cases.size(), 6u);
    for (const auto& cm : rep.cases) {
        ASSERT_EQ(cm.classes.size(), 3u);
        for (const auto& k : cm.classes) {
            EXPECT_EQ(k.dsc, 1.0);
            EXPECT_EQ(k.iou, 1.0);
            EXPECT_EQ(k.hd95, 0.0);
        }
    }
    std::istringstream csv(slurp(fs::path(c.out_dir) / "metrics.csv"));
    std::string line;
    std::size_t rows = 0;
    std::getline(csv, line);
    while (std::getline(csv, line)) ++rows;
    EXPECT_EQ(rows, 6u * 3u);
    EXPECT_TRUE(fs::exists(fs::path(c.out_dir) / "dotplot.csv"));
}

TEST_F(TrainTest, EvalMatchesDirectPrediction) {
    const RunConfig c = config("eval_direct", 5);
    const TrainResult r = train(c);
    EvalOptions e;
    e.checkpoint = r.final_checkpoint;
    e.manifest = (data_dir_ / "manifest.csv").string();
    e.out_dir = uvx::testing::scratch_dir("eval_direct_out").string();
    const MetricReport rep = run_eval(e);

    UVixLSTM<float> model(c.model, 0);
    restore(load_checkpoint(r.final_checkpoint), model.parameters());
    const auto samples = data::load_samples(data::read_manifest(e.manifest), 3);
    EXPECT_EQ(rep.to_csv(), evaluate(&model, samples, 3).to_csv());
    EXPECT_EQ(slurp(fs::path(e.out_dir) / "metrics.csv"), rep.to_csv());
}

TEST_F(TrainTest, EvalRejectsClassMismatch) {
    const RunConfig c = config("eval_mismatch", 0);
    const TrainResult r = train(c);
    RunConfig two = c;
    two.model.num_classes = 2;
    const fs::path cfg2 = fs::path(c.out_dir) / "two.cfg";
    std::ofstream(cfg2) << two.to_text();
    EvalOptions e;
    e.checkpoint = r.final_checkpoint;
    e.manifest = (data_dir_ / "manifest.csv").string();
    e.config = cfg2.string();
    EXPECT_THROW(run_eval(e), ConfigError);

    RunConfig four = c;
    four.model.num_classes = 4;
    const fs::path cfg4 = fs::path(c.out_dir) / "four.cfg";
    std::ofstream(cfg4) << four.to_text();
    e.config = cfg4.string();
    EXPECT_THROW(run_eval(e), ConfigError);
}
