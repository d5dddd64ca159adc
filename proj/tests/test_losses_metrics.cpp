#include "oracles.hpp"
#include "support.hpp"

#include "uvx/losses.hpp"
#include "uvx/metrics.hpp"
#include "uvx/optim.hpp"

#include <numeric>

using namespace uvx;
using uvx::testing::finite_difference_error;

namespace {

LabelMap labels(const Shape& s, std::vector<std::uint8_t> v) { return LabelMap(s, std::move(v)); }

using uvx::oracle::brute_hd95;
using uvx::oracle::random_mask;

} // namespace

TEST(Losses, OneHotAndArgmax) {
    const LabelMap l = labels({2, 2}, {0, 2, 1, 2});
    const Tensor<double> oh = one_hot<double>(l, 3);
    ASSERT_EQ(oh.shape(), (Shape{3, 2, 2}));
    EXPECT_EQ(oh.at({0, 0, 0}), 1.0);
    EXPECT_EQ(oh.at({2, 0, 1}), 1.0);
    EXPECT_EQ(oh.at({1, 1, 0}), 1.0);
    EXPECT_EQ(argmax_labels(oh), l);
    EXPECT_THROW(one_hot<double>(l, 2), ContractError);
}

TEST(Losses, PerfectPredictionHasZeroDiceLoss) {
    const Tensor<double> gt = one_hot<double>(labels({4}, {0, 1, 1, 0}), 2);
    EXPECT_NEAR(dice_loss(Var<double>(gt), gt, 0.0).value().item(), 0.0, 1e-15);
    EXPECT_NEAR(cce_loss(Var<double>(gt), gt).value().item(), 0.0, 1e-15);
}

TEST(Losses, HandComputedDice) {
    // pred fg = [1,1,0,0], gt fg = [1,0,0,0]: fg dice 2*1/(2+1) = 2/3,
    // bg dice 2*2/(2+3) = 4/5, loss = 1 - (2/3 + 4/5)/2 = 4/15.
    const Tensor<double> pred = one_hot<double>(labels({4}, {1, 1, 0, 0}), 2);
    const Tensor<double> gt = one_hot<double>(labels({4}, {1, 0, 0, 0}), 2);
    EXPECT_NEAR(dice_loss(Var<double>(pred), gt, 0.0).value().item(), 4.0 / 15.0, 1e-15);
    // Disjoint single-voxel prediction against single-voxel truth.
    const Tensor<double> p2 = one_hot<double>(labels({3}, {1, 0, 0}), 2);
    const Tensor<double> g2 = one_hot<double>(labels({3}, {0, 1, 0}), 2);
    EXPECT_NEAR(dice_loss(Var<double>(p2), g2, 0.0).value().item(), 1.0 - (0.0 + 0.5) / 2.0, 1e-15);
}

TEST(Losses, MatchDoubleLoopOracle) {
    CounterRng rng(1);
    const std::size_t c = 3, n = 20;
    Tensor<double> logits = uvx::testing::random_tensor({c, 4, 5}, rng, -2, 2);
    const Tensor<double> p = softmax_channel(Var<double>(logits)).value();
    LabelMap l({4, 5});
    for (auto& x : l.data()) x = std::uint8_t(rng() % c);
    const Tensor<double> gt = one_hot<double>(l, c);
    const double mu = 1e-5;
    double dsum = 0, ce = 0;
    for (std::size_t g = 0; g < c; ++g) {
        double inter = 0, sp = 0, sz = 0;
        for (std::size_t i = 0; i < n; ++i) {
            inter += p[g * n + i] * gt[g * n + i];
            sp += p[g * n + i];
            sz += gt[g * n + i];
            ce -= gt[g * n + i] * std::log(p[g * n + i]);
        }
        dsum += (2 * inter + mu) / (sp + sz + mu);
    }
    EXPECT_NEAR(dice_loss(Var<double>(p), gt, mu).value().item(), 1 - dsum / c, 1e-14);
    EXPECT_NEAR(cce_loss(Var<double>(p), gt).value().item(), ce / n, 1e-14);
    EXPECT_NEAR(composite_loss(Var<double>(p), gt, mu).value().item(), 1 - dsum / c + ce / n, 1e-14);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
    CounterRng rng(2);
    LabelMap l({3, 3});
    for (auto& x : l.data()) x = std::uint8_t(rng() % 3);
    const Tensor<double> gt = one_hot<double>(l, 3);
    const auto logits = uvx::testing::random_tensor({3, 3, 3}, rng, -2, 2);
    EXPECT_LT(finite_difference_error([&](auto& v) { return composite_loss(softmax_channel(v[0]), gt); }, {logits}),
              1e-7);
    EXPECT_LT(finite_difference_error([&](auto& v) { return dice_loss(softmax_channel(v[0]), gt, 1e-5); }, {logits}),
              1e-7);
}

TEST(Losses, CceIsFiniteOnZeroProbability) {
    const Tensor<double> gt = one_hot<double>(labels({2}, {0, 1}), 2);
    const Tensor<double> pred = one_hot<double>(labels({2}, {1, 0}), 2);
    const double v = cce_loss(Var<double>(pred), gt).value().item();
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(v, -std::log(1e-12), 1e-9);
    EXPECT_THROW(dice_loss(Var<double>(pred), one_hot<double>(labels({3}, {0, 1, 0}), 2)), ShapeError);
}

TEST(Metrics, DiceIouHandValues) {
    const LabelMap gt = labels({2, 3}, {0, 1, 1, 0, 2, 2});
    const LabelMap pr = labels({2, 3}, {0, 1, 0, 0, 2, 2});
    const auto s = dsc_iou(pr, gt, 3);
    EXPECT_NEAR(s[1].dsc, 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(s[1].iou, 0.5, 1e-15);
    EXPECT_EQ(s[2].dsc, 1.0);
    const auto absent = dsc_iou(labels({2}, {0, 0}), labels({2}, {0, 0}), 2);
    EXPECT_EQ(absent[1].dsc, 1.0);
    EXPECT_EQ(absent[1].iou, 1.0);
    EXPECT_THROW(dsc_iou(labels({2}, {0, 3}), labels({2}, {0, 0}), 3), ContractError);
}

TEST(Metrics, DiceIsMonotoneInIou) {
    CounterRng rng(3);
    for (int trial = 0; trial < 1000; ++trial) {
        LabelMap a({8, 8}), b({8, 8});
        const double p = rng.uniform();
        for (std::size_t i = 0; i < 64; ++i) {
            a[i] = rng.uniform() < p;
            b[i] = rng.uniform() < p;
        }
        const auto s = dsc_iou(a, b, 2);
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(s[k].dsc, 2 * s[k].iou / (1 + s[k].iou), 1e-15);
    }
}

TEST(Metrics, Hd95MatchesAllPairsBruteForce) {
    CounterRng rng(4);
    int compared = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_mask(rng, 24 * 24, 0.05 + 0.5 * rng.uniform());
        const auto b = random_mask(rng, 24 * 24, 0.05 + 0.5 * rng.uniform());
        const auto h = hd95(a, b, {24, 24}, {1.0, 1.0});
        ASSERT_TRUE(h.has_value());
        EXPECT_EQ(*h, brute_hd95(a, b, 24, 24)) << "trial " << trial;
        ++compared;
    }
    EXPECT_EQ(compared, 50);
}

TEST(Metrics, Hd95OfTranslatedSquareIsTheTranslation) {
    auto square = [](int y, int x, int side) {
        std::vector<std::uint8_t> m(32 * 32, 0);
        for (int i = 0; i < side; ++i)
            for (int j = 0; j < side; ++j) m[(y + i) * 32 + x + j] = 1;
        return m;
    };
    EXPECT_DOUBLE_EQ(*hd95(square(5, 5, 1), square(5, 8, 1), {32, 32}, {1, 1}), 3.0);
    EXPECT_DOUBLE_EQ(*hd95(square(5, 5, 1), square(8, 9, 1), {32, 32}, {1, 1}), 5.0);
    EXPECT_DOUBLE_EQ(*hd95(square(4, 4, 6), square(4, 4, 6), {32, 32}, {1, 1}), 0.0);
    // With a filled square most boundary points land on the other boundary,
    // so the distance never exceeds the translation.
    const double big = *hd95(square(4, 4, 8), square(4, 7, 8), {32, 32}, {1, 1});
    EXPECT_LE(big, 3.0);
    EXPECT_GT(big, 0.0);
    // Anisotropic spacing scales the offset along its axis.
    EXPECT_DOUBLE_EQ(*hd95(square(5, 5, 1), square(5, 8, 1), {32, 32}, {1.0, 0.5}), 1.5);
}

TEST(Metrics, Hd95EdgeCases) {
    const std::vector<std::uint8_t> empty(16, 0), one = [] {
        std::vector<std::uint8_t> m(16, 0);
        m[5] = 1;
        return m;
    }();
    EXPECT_EQ(hd95(empty, empty, {4, 4}, {1, 1}), 0.0);
    EXPECT_FALSE(hd95(empty, one, {4, 4}, {1, 1}).has_value());
    EXPECT_THROW(hd95(one, one, {4, 4}, {1, 0}), ConfigError);
}

TEST(Metrics, DistanceTransformMatchesBruteForce3d) {
    CounterRng rng(5);
    const Shape s{5, 6, 4};
    const auto seeds = random_mask(rng, 120, 0.08);
    const std::vector<double> sp{1.0, 2.0, 0.5};
    const auto dt = squared_distance_transform(seeds, s, sp);
    for (std::size_t i = 0; i < 120; ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < 120; ++j) {
            if (!seeds[j]) continue;
            const double d0 = (double(i / 24) - double(j / 24)) * sp[0];
            const double d1 = (double(i / 4 % 6) - double(j / 4 % 6)) * sp[1];
            const double d2 = (double(i % 4) - double(j % 4)) * sp[2];
            best = std::min(best, d0 * d0 + d1 * d1 + d2 * d2);
        }
        EXPECT_DOUBLE_EQ(dt[i], best);
    }
}

TEST(Metrics, PercentileInterpolates) {
    EXPECT_DOUBLE_EQ(percentile_linear({4, 1, 3, 2}, 0.5), 2.5);
    EXPECT_DOUBLE_EQ(percentile_linear({7}, 0.95), 7.0);
    EXPECT_DOUBLE_EQ(percentile_linear({0, 10}, 0.95), 9.5);
}

TEST(Metrics, ReportCsvAndDotPlotRecomputation) {
    CounterRng rng(6);
    MetricReport rep;
    for (int c = 0; c < 4; ++c) {
        LabelMap gt({12, 12}), pr({12, 12});
        for (std::size_t i = 0; i < 144; ++i) {
            gt[i] = std::uint8_t(rng() % 3);
            pr[i] = rng.uniform() < 0.7 ? gt[i] : std::uint8_t(rng() % 3);
        }
        rep.cases.push_back(evaluate_case("c" + std::to_string(c), pr, gt, 3, {1, 1}));
    }
    const std::string csv = rep.to_csv();
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "case_id,class_id,dsc,iou,hd95,hd95_defined");
    std::vector<std::vector<double>> dsc(3);
    std::size_t rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        std::stringstream ls(line);
        std::string f[6];
        for (auto& x : f) std::getline(ls, x, ',');
        dsc[std::stoul(f[1])].push_back(std::stod(f[2]));
    }
    EXPECT_EQ(rows, 4u * 3u);

    std::istringstream dp(rep.dot_plot_csv());
    std::getline(dp, line);
    EXPECT_EQ(line, "class,metric,mean,std");
    int checked = 0;
    while (std::getline(dp, line)) {
        std::stringstream ls(line);
        std::string f[4];
        for (auto& x : f) std::getline(ls, x, ',');
        if (f[1] != "dsc") continue;
        const auto& v = dsc[std::stoul(f[0])];
        double m = 0;
        for (double x : v) m += x / double(v.size());
        double var = 0;
        for (double x : v) var += (x - m) * (x - m) / double(v.size() - 1);
        EXPECT_EQ(std::stod(f[2]), m);
        EXPECT_NEAR(std::stod(f[3]), std::sqrt(var), 1e-15);
        ++checked;
    }
    EXPECT_EQ(checked, 3);
    double fg = 0;
    for (std::size_t k = 1; k < 3; ++k)
        for (double x : dsc[k]) fg += x;
    EXPECT_NEAR(rep.mean_dsc(), fg / 8.0, 1e-15);
}

TEST(Metrics, UndefinedHd95FallsBackToDiagonal) {
    const LabelMap gt = labels({3, 4}, {0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0});
    const LabelMap pr(Shape{3, 4}, std::uint8_t{0});
    const CaseMetrics m = evaluate_case("x", pr, gt, 2, {1, 1});
    EXPECT_FALSE(m.classes[1].hd95_defined);
    EXPECT_DOUBLE_EQ(m.classes[1].hd95, 5.0);
    MetricReport rep{{m}};
    EXPECT_EQ(rep.undefined_hd95_count(), 1u);
}

TEST(Losses, UniformPredictionAgainstSingleClass) {
    // c = 2, four pixels all of class 1, pred 1/2 everywhere, mu = 0:
    // d_1 = 2*2/(2+4) = 2/3; d_0 = 0/(2+0) = 0; loss = 1 - (2/3 + 0)/2 = 2/3.
    const Tensor<double> gt = one_hot<double>(labels({4}, {1, 1, 1, 1}), 2);
    const Tensor<double> pred(Shape{2, 4}, 0.5);
    EXPECT_NEAR(dice_loss(Var<double>(pred), gt, 0.0).value().item(), 2.0 / 3.0, 1e-15);
    const Tensor<double> gt4 = one_hot<double>(labels({2, 2}, {0, 1, 2, 3}), 4);
    EXPECT_NEAR(cce_loss(Var<double>(Tensor<double>({4, 2, 2}, 0.25)), gt4).value().item(), std::log(4.0), 1e-15);
}

TEST(Losses, CompositeIsExactSumAndOracleOn3x5x5) {
    CounterRng rng(7);
    const Tensor<double> p = softmax_channel(Var<double>(uvx::testing::random_tensor({3, 5, 5}, rng, -3, 3))).value();
    LabelMap l({5, 5});
    for (auto& x : l.data()) x = std::uint8_t(rng() % 3);
    const Tensor<double> gt = one_hot<double>(l, 3);
    const double d = dice_loss(Var<double>(p), gt).value().item();
    const double c = cce_loss(Var<double>(p), gt).value().item();
    EXPECT_EQ(composite_loss(Var<double>(p), gt).value().item(), d + c);
    double ce = 0;
    for (std::size_t k = 0; k < 3; ++k)
        for (std::size_t i = 0; i < 25; ++i) ce -= gt[k * 25 + i] * std::log(p[k * 25 + i]);
    EXPECT_NEAR(c, ce / 25, 1e-10);
}

TEST(Losses, CompositeDecreasesUnderOptimization) {
    CounterRng rng(8);
    LabelMap l({4, 4});
    for (auto& x : l.data()) x = std::uint8_t(rng() % 3);
    const Tensor<double> gt = one_hot<double>(l, 3);
    ParameterStore<double> store;
    Var<double> logits = store.add("logits", uvx::testing::random_tensor({3, 4, 4}, rng));
    AdamWOptions o;
    o.lr = 1e-2;
    AdamW<double> opt(store, o);
    double prev = std::numeric_limits<double>::infinity();
    for (int it = 0; it < 50; ++it) {
        store.zero_grad();
        const Var<double> loss = composite_loss(softmax_channel(logits), gt);
        EXPECT_LT(loss.value().item(), prev) << "step " << it;
        prev = loss.value().item();
        backward(loss);
        opt.step();
    }
}

TEST(Losses, PermutationInvariance) {
    CounterRng rng(9);
    const Tensor<double> p = softmax_channel(Var<double>(uvx::testing::random_tensor({3, 12}, rng, -2, 2))).value();
    LabelMap l({12});
    for (auto& x : l.data()) x = std::uint8_t(rng() % 3);
    std::vector<std::size_t> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> pp(p.shape());
    LabelMap lp({12});
    for (std::size_t i = 0; i < 12; ++i) {
        lp[i] = l[perm[i]];
        for (std::size_t k = 0; k < 3; ++k) pp[k * 12 + i] = p[k * 12 + perm[i]];
    }
    const Tensor<double> gt = one_hot<double>(l, 3), gtp = one_hot<double>(lp, 3);
    EXPECT_NEAR(dice_loss(Var<double>(p), gt).value().item(), dice_loss(Var<double>(pp), gtp).value().item(), 1e-15);
    EXPECT_NEAR(cce_loss(Var<double>(p), gt).value().item(), cce_loss(Var<double>(pp), gtp).value().item(), 1e-15);
    const LabelMap a = argmax_labels(p), ap = argmax_labels(pp);
    const auto s = dsc_iou(a, l, 3), sp = dsc_iou(ap, lp, 3);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(s[k].dsc, sp[k].dsc);
}

TEST(Metrics, OverlapExamplesAndSymmetry) {
    // Two 4x4 squares offset by two columns: intersection 8 of area 16.
    LabelMap a(Shape{8, 8}, std::uint8_t{0}), b(Shape{8, 8}, std::uint8_t{0});
    for (std::size_t y = 2; y < 6; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
            a.at({y, x}) = 1;
            b.at({y, x + 2}) = 1;
        }
    const auto s = dsc_iou(a, b, 2);
    EXPECT_DOUBLE_EQ(s[1].dsc, 0.5);
    EXPECT_DOUBLE_EQ(s[1].iou, 1.0 / 3.0);
    LabelMap c(Shape{8, 8}, std::uint8_t{0});
    for (std::size_t x = 0; x < 4; ++x) c.at({7, x}) = 1;
    const auto disjoint = dsc_iou(a, c, 2);
    EXPECT_EQ(disjoint[1].dsc, 0.0);
    EXPECT_EQ(disjoint[1].iou, 0.0);
    const auto same = dsc_iou(a, a, 2);
    EXPECT_EQ(same[0].dsc, 1.0);
    EXPECT_EQ(same[1].iou, 1.0);
    const auto rev = dsc_iou(b, a, 2);
    EXPECT_EQ(rev[1].dsc, s[1].dsc);

    CounterRng rng(10);
    for (int t = 0; t < 20; ++t) {
        const auto m1 = random_mask(rng, 100, 0.3), m2 = random_mask(rng, 100, 0.3);
        EXPECT_EQ(hd95(m1, m2, {10, 10}, {1, 1}), hd95(m2, m1, {10, 10}, {1, 1}));
    }
}
