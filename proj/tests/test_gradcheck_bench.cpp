#include "support.hpp"

#include "uvx/bench.hpp"
#include "uvx/gradcheck.hpp"

using namespace uvx;
using uvx::testing::random_tensor;

namespace {

bool any_offender_with(const GradcheckReport& r, const std::string& needle) {
    for (const auto& id : r.offenders()) {
        if (id.find(needle) != std::string::npos) return true;
    }
    return false;
}

} // namespace

TEST(Gradcheck, RelativeErrorDefinition) {
    EXPECT_NEAR(gradient_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
    EXPECT_DOUBLE_EQ(gradient_error(-2.0, 2.0), 2.0);
    EXPECT_NEAR(gradient_error(1e-8, 3e-8), 2e-8, 1e-22);
    EXPECT_DOUBLE_EQ(gradient_error(0.0, 0.0), 0.0);
}

TEST(Gradcheck, TinyModelPassesAndSweepIsVShaped) {
    const GradcheckReport r = run_gradcheck();
    EXPECT_TRUE(r.pass()) << r.to_csv();
    const std::size_t n_params = UVixLSTM<double>(tiny_model_config(), 0).parameters().params().size();
    ASSERT_EQ(r.params.size(), n_params);
    for (const auto& p : r.params) {
        const std::size_t numel = UVixLSTM<double>(tiny_model_config(), 0).parameters().at(p.id).value().size();
        EXPECT_EQ(p.checked + p.skipped, std::min<std::size_t>(numel, 200)) << p.id;
        EXPECT_LT(p.skipped, p.checked) << p.id;
        // Far above the absolute-error floor, so the relative check is live.
        EXPECT_GT(p.max_abs_grad, 1e-5) << p.id;
    }
    auto err = [&](double h) {
        for (const auto& row : r.sweep) {
            if (row.step == h) return row.max_rel_err;
        }
        ADD_FAILURE() << "no sweep row for " << h;
        return 0.0;
    };
    EXPECT_LT(err(1e-4), err(1e-3));
    EXPECT_LT(err(1e-4), err(1e-5));
    EXPECT_LT(err(1e-3), err(1e-2));
    EXPECT_LT(err(1e-5), err(1e-8));
    EXPECT_EQ(r.sweep_csv().substr(0, 29), "step,median_rel_err,max_rel_e");
}

TEST(Gradcheck, CorruptedRuleNamesAffectedParameters) {
    // A scaled backward rule corrupts exactly the parameters upstream of the op.
    GradcheckOptions o;
    o.corrupt_op = "layer_norm";
    const GradcheckReport ln = run_gradcheck(o);
    EXPECT_FALSE(ln.pass());
    EXPECT_TRUE(any_offender_with(ln, "vil.1.norm_gain"));
    EXPECT_TRUE(any_offender_with(ln, "enc.1.conv1.w"));
    EXPECT_FALSE(any_offender_with(ln, "vil.1.w_up"));
    EXPECT_FALSE(any_offender_with(ln, "unembed."));
    EXPECT_FALSE(any_offender_with(ln, "head."));

    o.corrupt_op = "upsample_linear";
    const GradcheckReport up = run_gradcheck(o);
    EXPECT_FALSE(up.pass());
    EXPECT_TRUE(any_offender_with(up, "unembed.w"));
    EXPECT_TRUE(any_offender_with(up, "vil.0.w_q"));
    EXPECT_FALSE(any_offender_with(up, "dec."));
    EXPECT_FALSE(any_offender_with(up, "head."));

    GradcheckOptions clean;
    clean.corrupt_op = "no_such_op";
    EXPECT_TRUE(run_gradcheck(clean).pass());
}

TEST(Attention, SingleTokenReturnsValueRow) {
    CounterRng rng(1);
    const auto X = random_tensor({1, 4}, rng);
    const auto Wq = random_tensor({4, 4}, rng), Wk = random_tensor({4, 4}, rng), Wv = random_tensor({4, 4}, rng);
    const Tensor<double> out = softmax_attention_reference(X, Wq, Wk, Wv);
    for (std::size_t j = 0; j < 4; ++j) {
        double v = 0;
        for (std::size_t p = 0; p < 4; ++p) v += X[p] * Wv.at({p, j});
        EXPECT_NEAR(out[j], v, 1e-15);
    }
}

TEST(Attention, UniformScoresAverageValues) {
    CounterRng rng(2);
    const auto V = random_tensor({5, 3}, rng);
    const Tensor<double> Q({5, 3}, 0.7), K({5, 3}, 0.7);
    const Tensor<double> out = attention_core(Q, K, V, 0.5);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double m = 0;
            for (std::size_t t = 0; t < 5; ++t) m += V.at({t, j}) / 5;
            EXPECT_NEAR(out.at({i, j}), m, 1e-15);
        }
}

TEST(Attention, MatchesDoubleLoopOracle) {
    CounterRng rng(3);
    const std::size_t N = 6, Z = 4;
    const auto X = random_tensor({N, Z}, rng);
    const auto Wq = random_tensor({Z, Z}, rng), Wk = random_tensor({Z, Z}, rng), Wv = random_tensor({Z, Z}, rng);
    const Tensor<double> out = softmax_attention_reference(X, Wq, Wk, Wv);
    auto proj = [&](const Tensor<double>& W, std::size_t t, std::size_t j) {
        double s = 0;
        for (std::size_t p = 0; p < Z; ++p) s += X.at({t, p}) * W.at({p, j});
        return s;
    };
    for (std::size_t i = 0; i < N; ++i) {
        std::vector<double> w(N);
        double total = 0;
        for (std::size_t t = 0; t < N; ++t) {
            double s = 0;
            for (std::size_t p = 0; p < Z; ++p) s += proj(Wq, i, p) * proj(Wk, t, p);
            w[t] = std::exp(s / std::sqrt(double(Z)));
            total += w[t];
        }
        for (std::size_t j = 0; j < Z; ++j) {
            double o = 0;
            for (std::size_t t = 0; t < N; ++t) o += w[t] / total * proj(Wv, t, j);
            EXPECT_NEAR(out.at({i, j}), o, 1e-10);
        }
    }
    EXPECT_THROW(attention_core(Tensor<double>({3, 2}), Tensor<double>({4, 2}), Tensor<double>({3, 2}), 1.0),
                 ShapeError);
}

TEST(Bench, LogLogSlopeRecoversPowerLaws) {
    const std::vector<double> n{64, 128, 256, 512, 1024};
    std::vector<double> lin, quad;
    for (double x : n) {
        lin.push_back(3 * x);
        quad.push_back(0.5 * x * x);
    }
    EXPECT_NEAR(loglog_slope(n, lin), 1.0, 1e-12);
    EXPECT_NEAR(loglog_slope(n, quad), 2.0, 1e-12);
    EXPECT_THROW(loglog_slope({1.0}, {1.0}), ContractError);
}

TEST(Bench, FlopCountsAndStateBytes) {
    BenchOptions o;
    o.repeats = 1;
    o.min_seconds = 0.0;
    const BenchReport r = run_bench(o);
    ASSERT_EQ(r.rows.size(), 10u);
    EXPECT_NEAR(r.fit("mlstm").flop_slope, 1.0, 1e-12);
    EXPECT_GE(r.fit("attention").flop_slope, 1.9);
    std::size_t mlstm_bytes = 0;
    for (const auto& row : r.rows) {
        if (row.mixer == "mlstm") {
            if (mlstm_bytes == 0) mlstm_bytes = row.state_bytes;
            EXPECT_EQ(row.state_bytes, mlstm_bytes);
            EXPECT_EQ(row.flops, row.n * vil::mlstm_step_flops(4, 16, 16));
        } else {
            EXPECT_EQ(row.state_bytes, 2 * row.n * 64 * sizeof(float));
        }
    }
    EXPECT_EQ(r.to_csv().substr(0, 43), "mixer,n,seconds,inner_reps,flops,state_byte");
    o.sizes = {64, 128, 256};
    EXPECT_THROW(run_bench(o), ConfigError);
}
