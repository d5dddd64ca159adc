// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include "oracles.hpp"

#include "uvx/bench.hpp"
#include "uvx/gradcheck.hpp"
#include "uvx/metrics.hpp"
#include "uvx/train.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <iterator>
#include <sstream>

namespace fs = std::filesystem;
using namespace uvx;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

struct Line {
    bool pass;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const Line& l) {
    std::cout << (l.pass ? "PASS " : "FAIL ") << name << ": " << l.detail << std::endl;
    failures += !l.pass;
}

void run(const std::string& name, const std::function<Line()>& fn) {
    try {
        report(name, fn());
    } catch (const std::exception& e) {
        report(name, {false, std::string("threw: ") + e.what()});
    }
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

Line gradient_suite() {
    const auto t0 = Clock::now();
    const GradcheckReport r = run_gradcheck();
    const double secs = seconds_since(t0);
    double worst = 0.0, min_grad = std::numeric_limits<double>::infinity();
    std::size_t checked = 0, skipped = 0;
    for (const auto& p : r.params) {
        worst = std::max(worst, p.max_rel_err);
        min_grad = std::min(min_grad, p.max_abs_grad);
        checked += p.checked;
        skipped += p.skipped;
    }
    std::string detail = std::to_string(r.params.size()) + " tensors, " + std::to_string(checked) + " coords (" +
                         std::to_string(skipped) + " kink-skipped), max_rel_err=" + fmt("%.3g", worst) +
                         " (tol 1e-4), smallest per-tensor max|grad|=" + fmt("%.3g", min_grad) +
                         ", runtime=" + fmt("%.1f", secs) + "s (limit 120s)";
    for (const auto& id : r.offenders()) detail += " offender=" + id;
    return {r.pass() && secs < 120.0 && min_grad > 1e-6, detail};
}

Line recurrence_oracle() {
    CounterRng rng(101);
    double worst[2] = {0.0, 0.0};
    const vil::ForgetGate gates[] = {vil::ForgetGate::Sigmoid, vil::ForgetGate::Exp};
    for (int g = 0; g < 2; ++g) {
        for (int trial = 0; trial < 100; ++trial) {
            oracle::Instance in = oracle::random_instance(rng, 8, 8);
            in.opts.forget_gate = gates[g];
            ParameterStore<double> store;
            const auto p = oracle::random_block(store, in.opts, rng);
            const auto X = oracle::uniform_tensor({in.n, in.opts.inner_dim()}, rng);
            const Tensor<double> got = vil::mlstm_scan(Var<double>(X), p, in.opts, vil::Direction::Forward).value();
            worst[g] = std::max(worst[g], oracle::norm_rel_err(got, oracle::direct_scan(X, p, in.opts)));
        }
    }
    return {worst[0] <= 1e-8 && worst[1] <= 1e-8, "100 instances per forget gate (N<=8, Z<=8), max rel err sigmoid=" +
                                                      fmt("%.3g", worst[0]) + " exp=" + fmt("%.3g", worst[1]) +
                                                      " (tol 1e-8)"};
}

Line stability() {
    // Gate weights and biases are scaled so every pre-activation lies in [-30, 30].
    CounterRng rng(202);
    std::size_t bad = 0, overflow = 0;
    double lo = 0.0, hi = 0.0;
    const int kInstances = 10000;
    for (int trial = 0; trial < kInstances; ++trial) {
        oracle::Instance in = oracle::random_instance(rng, 16, 8);
        in.opts.forget_gate = trial % 2 ? vil::ForgetGate::Exp : vil::ForgetGate::Sigmoid;
        const std::size_t D = in.opts.inner_dim(), H = in.opts.heads;
        ParameterStore<double> store;
        const auto pd = oracle::random_block(store, in.opts, rng);
        const double wmax = 15.0 / double(D);
        for (const char* id : {"b.w_i", "b.w_f"}) {
            for (double& x : store.at(id).value().data()) x = wmax * (2 * rng.uniform() - 1);
        }
        for (const char* id : {"b.b_i", "b.b_f"}) {
            for (double& x : store.at(id).value().data()) x = 15.0 * (2 * rng.uniform() - 1);
        }
        const auto X = oracle::uniform_tensor({in.n, D}, rng);

        ParameterStore<float> fstore;
        CounterRng unused(0);
        const auto pf = vil::make_vil_block(fstore, "b", in.opts, unused);
        for (std::size_t i = 0; i < store.params().size(); ++i) {
            fstore.params()[i].value() = store.params()[i].value().cast<float>();
        }
        try {
            const Tensor<float> h =
                vil::mlstm_scan(Var<float>(X.cast<float>()), pf, in.opts, vil::Direction::Forward).value();
            for (float x : h.data()) {
                if (!std::isfinite(x)) {
                    ++bad;
                    break;
                }
            }
        } catch (const NumericError&) {
            ++bad;
        }

        Tensor<double> ig = oracle::matmul_loops(X, pd.w_i.value()), fg = oracle::matmul_loops(X, pd.w_f.value());
        for (std::size_t t = 0; t < in.n; ++t) {
            for (std::size_t h = 0; h < H; ++h) {
                ig[t * H + h] += pd.b_i.value()[h];
                fg[t * H + h] += pd.b_f.value()[h];
                lo = std::min({lo, ig[t * H + h], fg[t * H + h]});
                hi = std::max({hi, ig[t * H + h], fg[t * H + h]});
            }
        }
        Tensor<double> k = oracle::matmul_loops(X, pd.w_k.value());
        for (double& x : k.data()) x /= std::sqrt(double(in.opts.head_dim()));
        overflow += oracle::naive_overflows(k.cast<float>(), oracle::matmul_loops(X, pd.w_v.value()).cast<float>(),
                                            ig.cast<float>(), fg.cast<float>(), H, in.opts.forget_gate);
    }
    return {bad == 0 && lo >= -30.0 && hi <= 30.0,
            std::to_string(kInstances) + " float32 mlstm_scan instances, gate pre-activations in [" + fmt("%.1f", lo) +
                ", " + fmt("%.1f", hi) + "]: " + std::to_string(bad) + " with NaN/Inf; naive unstabilized update overflows on " +
                std::to_string(overflow)};
}

Line direction_symmetry() {
    CounterRng rng(303);
    int identical = 0;
    for (int trial = 0; trial < 100; ++trial) {
        oracle::Instance in = oracle::random_instance(rng, 12, 8);
        in.opts.residual = trial % 3 != 0;
        in.opts.gate_silu = trial % 2 == 0;
        ParameterStore<double> store;
        const auto p = oracle::random_block(store, in.opts, rng);
        const Var<double> x(oracle::uniform_tensor({in.n, in.opts.embed_dim}, rng));
        const Tensor<double> rev = vil::vil_block_forward(x, p, in.opts, 1).value();
        const Tensor<double> ref = flip(vil::vil_block_forward(flip(x, 0), p, in.opts, 0), 0).value();
        identical += rev.shape() == ref.shape() &&
                     std::memcmp(rev.data().data(), ref.data().data(), rev.size() * sizeof(double)) == 0;
    }
    return {identical == 100, std::to_string(identical) + "/100 reverse blocks bit-identical to flip-forward-flip"};
}

Line complexity(const fs::path& work) {
    const auto t0 = Clock::now();
    const BenchReport r = run_bench(BenchOptions{});
    const double secs = seconds_since(t0);
    std::ofstream(work / "bench.csv") << r.to_csv();
    std::ofstream(work / "bench_fit.csv") << r.fits_csv();
    const BenchFit m = r.fit("mlstm"), a = r.fit("attention");
    std::size_t bytes64 = 0, bytes1024 = 0;
    for (const auto& row : r.rows) {
        if (row.mixer != "mlstm") continue;
        if (row.n == 64) bytes64 = row.state_bytes;
        if (row.n == 1024) bytes1024 = row.state_bytes;
    }
    const bool pass = std::abs(m.flop_slope - 1.0) < 1e-9 && a.flop_slope >= 1.9 && m.time_slope >= 0.75 &&
                      m.time_slope <= 1.35 && a.time_slope >= 1.6 && a.time_slope <= 2.4 && bytes64 == bytes1024 &&
                      bytes64 > 0 && secs < 300.0;
    return {pass, "flop slopes mlstm=" + fmt("%.6f", m.flop_slope) + " attention=" + fmt("%.4f", a.flop_slope) +
                      "; time slopes mlstm=" + fmt("%.3f", m.time_slope) + " [0.75,1.35] attention=" +
                      fmt("%.3f", a.time_slope) + " [1.6,2.4]; state bytes N=64 " + std::to_string(bytes64) +
                      " N=1024 " + std::to_string(bytes1024) + "; runtime=" + fmt("%.2f", secs) + "s (limit 300s)"};
}

Line metric_oracles() {
    CounterRng rng(404);
    int hd_equal = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = oracle::random_mask(rng, 24 * 24, 0.05 + 0.5 * rng.uniform());
        const auto b = oracle::random_mask(rng, 24 * 24, 0.05 + 0.5 * rng.uniform());
        const auto h = hd95(a, b, {24, 24}, {1.0, 1.0});
        hd_equal += h.has_value() && *h == oracle::brute_hd95(a, b, 24, 24);
    }
    double worst_rel = 0.0, worst_count = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const double p = rng.uniform();
        const auto a = oracle::random_mask(rng, 64, p), b = oracle::random_mask(rng, 64, p);
        const auto s = dsc_iou(LabelMap({8, 8}, a), LabelMap({8, 8}, b), 2)[1];
        worst_rel = std::max(worst_rel, std::abs(s.dsc - 2 * s.iou / (1 + s.iou)));
        const auto [inter, uni] = oracle::overlap_counts(a, b);
        std::size_t na = 0, nb = 0;
        for (std::size_t i = 0; i < 64; ++i) {
            na += a[i];
            nb += b[i];
        }
        const double j = uni ? double(inter) / double(uni) : 1.0;
        const double d = na + nb ? 2.0 * double(inter) / double(na + nb) : 1.0;
        worst_count = std::max({worst_count, std::abs(s.iou - j), std::abs(s.dsc - d)});
    }
    const double shift = *hd95(oracle::square_mask(32, 32, 5, 5, 1), oracle::square_mask(32, 32, 5, 8, 1), {32, 32},
                               {1.0, 1.0});
    const double diag = *hd95(oracle::square_mask(32, 32, 5, 5, 1), oracle::square_mask(32, 32, 8, 9, 1), {32, 32},
                              {1.0, 1.0});
    return {hd_equal == 50 && worst_rel <= 1e-12 && worst_count <= 1e-12 && shift == 3.0 && diag == 5.0,
            std::to_string(hd_equal) + "/50 hd95 equal to brute force; 1000 pairs max |D - 2J/(1+J)|=" +
                fmt("%.2g", worst_rel) + ", max deviation from counted D/J=" + fmt("%.2g", worst_count) +
                "; translated square hd95 " + fmt("%g", shift) + " (shift 3) and " + fmt("%g", diag) + " (shift (3,4))"};
}

RunConfig learning_config(const fs::path& work) {
    const fs::path data_dir = work / "data";
    data::SynthConfig sc;
    sc.cases = 40;
    sc.extents = {64, 64};
    sc.num_classes = 3;
    sc.seed = 11;
    const data::Manifest all = data::synth_dataset(sc, data_dir.string());
    auto [train, test] = data::split_train_test(all, 0.8, sc.seed);
    data::write_manifest((data_dir / "train.csv").string(), train);
    data::write_manifest((data_dir / "test.csv").string(), test);
    RunConfig cfg;
    cfg.lr = 1e-3;
    cfg.iters = 300;
    cfg.seed = 5;
    cfg.train_manifest = (data_dir / "train.csv").string();
    cfg.test_manifest = (data_dir / "test.csv").string();
    return cfg;
}

Line learning(RunConfig cfg, const fs::path& work) {
    cfg.out_dir = (work / "run_a").string();
    fs::remove_all(cfg.out_dir);
    const auto t0 = Clock::now();
    const TrainResult res = train(cfg);
    EvalOptions eo;
    eo.checkpoint = res.final_checkpoint;
    eo.manifest = cfg.train_manifest;
    eo.out_dir = (work / "run_a" / "eval_train").string();
    const MetricReport tr = run_eval(eo);
    eo.manifest = cfg.test_manifest;
    eo.out_dir = (work / "run_a" / "eval_test").string();
    const MetricReport te = run_eval(eo);
    const double secs = seconds_since(t0);
    const std::size_t n_train = data::read_manifest(cfg.train_manifest).entries.size();
    const std::size_t n_test = data::read_manifest(cfg.test_manifest).entries.size();
    const double first = res.losses.front(), last = res.losses.back();
    return {tr.mean_dsc() >= 0.95 && te.mean_dsc() >= 0.85 && secs < 1800.0 && res.losses.size() == 300 && last < first,
            std::to_string(n_train) + "/" + std::to_string(n_test) + " cases 64x64 c=3, " +
                std::to_string(res.losses.size()) + " iterations lr 1e-3: train DSC=" + fmt("%.4f", tr.mean_dsc()) +
                " (>=0.95) test DSC=" + fmt("%.4f", te.mean_dsc()) + " (>=0.85); loss iter 1=" + fmt("%.4f", first) +
                " iter 300=" + fmt("%.4f", last) + "; runtime=" + fmt("%.0f", secs) + "s (limit 1800s)"};
}

Line ablation() {
    const std::size_t blocks[] = {3, 6, 12, 18, 24};
    const std::size_t levels[] = {3, 4, 5};
    std::size_t count[5][3];
    bool shapes_ok = true;
    for (std::size_t i = 0; i < 5; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            ModelConfig c;
            c.vil_blocks = blocks[i];
            c.levels = levels[j];
            UVixLSTM<float> model(c, 0);
            NoGradGuard ng;
            const Var<float> out = model.forward(Var<float>(Tensor<float>(Shape{1, 64, 64}, 0.5f)));
            shapes_ok = shapes_ok && out.shape() == Shape{3, 64, 64};
            count[i][j] = model.parameters().scalar_count();
        }
    }
    bool increasing = true;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (i + 1 < 5) increasing = increasing && count[i][j] < count[i + 1][j];
            if (j + 1 < 3) increasing = increasing && count[i][j] < count[i][j + 1];
        }
    return {shapes_ok && increasing, "15 configs forward on 64x64, params from " + std::to_string(count[0][0]) +
                                         " (L=3, 3 levels) to " + std::to_string(count[4][2]) +
                                         " (L=24, 5 levels), strictly increasing along both axes: " +
                                         (increasing ? "yes" : "no")};
}

Line determinism(RunConfig cfg, const fs::path& work) {
    // run_a comes from the learning criterion; run_b repeats it.
    cfg.out_dir = (work / "run_b").string();
    fs::remove_all(cfg.out_dir);
    train(cfg);
    std::size_t compared = 0, differing = 0;
    for (const auto& e : fs::directory_iterator(work / "run_a")) {
        const std::string name = e.path().filename().string();
        const bool artifact = name == "loss.csv" || e.path().extension() == ".uvxw";
        if (!artifact) continue;
        ++compared;
        differing += read_bytes(e.path()) != read_bytes(work / "run_b" / name);
    }
    return {compared >= 3 && differing == 0, std::to_string(compared) +
                                                 " artifacts (loss.csv and checkpoints) compared across two runs, " +
                                                 std::to_string(differing) + " differ"};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::string work = (fs::temp_directory_path() / "uvx_acceptance").string();
    app.add_option("--work", work, "scratch directory for datasets and runs")->capture_default_str();
    CLI11_PARSE(app, argc, argv);
    const fs::path dir(work);
    fs::create_directories(dir);

    run("gradient_suite", gradient_suite);
    run("recurrence_oracle", recurrence_oracle);
    run("stability", stability);
    run("direction_symmetry", direction_symmetry);
    run("complexity", [&] { return complexity(dir); });
    run("metric_oracles", metric_oracles);
    RunConfig cfg;
    bool trained = false;
    run("learning", [&] {
        cfg = learning_config(dir);
        Line l = learning(cfg, dir);
        trained = true;
        return l;
    });
    run("ablation", ablation);
    run("determinism", [&] {
        if (!trained) return Line{false, "learning run did not complete"};
        return determinism(cfg, dir);
    });
    return failures == 0 ? 0 : 1;
}
