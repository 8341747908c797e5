#include <gtest/gtest.h>

#include <cmath>

#include "wcmorph/autodiff.hpp"
#include "wcmorph/gradient_check.hpp"
#include "wcmorph/rng.hpp"

using namespace wcm;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(shape));
    fill_gaussian(t, 0.0, sigma, rng);
    return t;
}

// Loss whose gradient with respect to y is exactly all-ones:
// mse(y, y - n/2) has d/dy_i = 2*(n/2)/n = 1.
Var ones_upstream(const Var& y) {
    const std::size_t n = y.value().numel();
    Tensor t = y.value();
    for (auto& v : t.vec()) v -= static_cast<double>(n) / 2.0;
    return mse_loss(y, Var::constant(t));
}

} // namespace

TEST(Tensor, ShapeDataMismatchThrows) {
    EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    EXPECT_THROW(Tensor({0, 3}), DimensionError);
    EXPECT_THROW(Tensor(Shape{}), DimensionError);
}

TEST(Tensor, NonFiniteRejectedAtGraphEntry) {
    Tensor t({2}, {1.0, std::nan("")});
    EXPECT_THROW(Var::leaf(t, false), InvariantError);
    Tensor inf({1}, {INFINITY});
    EXPECT_THROW(Var::constant(inf), InvariantError);
}

TEST(FullyConnected, IdentityWeight) {
    Var x = Var::constant(Tensor({2}, {1.0, 2.0}));
    Var W = Var::constant(Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0}));
    Var b = Var::constant(Tensor({2}, {0.0, 0.0}));
    Var y = fully_connected(x, W, b);
    EXPECT_DOUBLE_EQ(y.value()[0], 1.0);
    EXPECT_DOUBLE_EQ(y.value()[1], 2.0);
}

TEST(FullyConnected, HandDotProduct) {
    Var x = Var::constant(Tensor({2}, {1.0, 1.0}));
    Var W = Var::constant(Tensor({1, 2}, {2.0, 3.0}));
    Var b = Var::constant(Tensor({1}, {1.0}));
    Var y = fully_connected(x, W, b);
    EXPECT_DOUBLE_EQ(y.value()[0], 6.0);
}

TEST(FullyConnected, WidthMismatchThrows) {
    Var x = Var::constant(Tensor({3}, {1.0, 2.0, 3.0}));
    Var W = Var::constant(Tensor({1, 2}, {2.0, 3.0}));
    EXPECT_THROW(fully_connected(x, W), DimensionError);
}

TEST(Conv2d, OneByOneKernelIsIdentity) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var k = Var::constant(Tensor({1, 1, 1, 1}, {1.0}));
    Var y = conv2d(x, k, 1, 0);
    EXPECT_EQ(y.value().shape(), (Shape{1, 2, 2}));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y.value()[i], x.value()[i]);
}

TEST(Conv2d, HandConvolution) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var k = Var::constant(Tensor({1, 1, 2, 2}, {1.0, 1.0, 1.0, 1.0}));
    Var y = conv2d(x, k, 1, 0);
    EXPECT_EQ(y.value().shape(), (Shape{1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.value()[0], 10.0);
}

TEST(Conv2d, StridedShape) {
    Rng rng = make_rng(7);
    Var x = Var::constant(random_tensor({1, 32, 32}, rng));
    Var k = Var::constant(random_tensor({4, 1, 5, 5}, rng));
    Var y = conv2d(x, k, 2, 2);
    EXPECT_EQ(y.value().shape(), (Shape{4, 16, 16}));
}

TEST(Conv2d, KernelLargerThanPaddedInputThrows) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var k = Var::constant(Tensor({1, 1, 4, 4}, std::vector<double>(16, 1.0)));
    EXPECT_THROW(conv2d(x, k, 1, 0), DimensionError);
    // With padding 1 the padded input is 4x4 and the kernel fits.
    EXPECT_NO_THROW(conv2d(x, k, 1, 1));
}

TEST(Conv2d, OutputShapeFormulaHolds) {
    Rng rng = make_rng(11);
    for (std::size_t h : {3u, 5u, 8u, 13u}) {
        for (int p : {0, 1, 2}) {
            for (std::size_t kh : {1u, 2u, 3u, 5u}) {
                for (int s : {1, 2, 3}) {
                    if (kh > h + 2 * static_cast<std::size_t>(p)) continue;
                    Var x = Var::constant(random_tensor({1, h, h}, rng));
                    Var k = Var::constant(random_tensor({2, 1, kh, kh}, rng));
                    Var y = conv2d(x, k, s, p);
                    const std::size_t expect = (h + 2 * p - kh) / s + 1;
                    EXPECT_EQ(y.value().shape(), (Shape{2, expect, expect}))
                        << "h=" << h << " p=" << p << " kh=" << kh << " s=" << s;
                }
            }
        }
    }
}

TEST(Upsample, FactorOneIsIdentity) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var y = upsample_nearest(x, 1);
    EXPECT_EQ(y.value().vec(), x.value().vec());
}

TEST(Upsample, ReplicatesPixels) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    Var y = upsample_nearest(x, 2);
    const std::vector<double> expect{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    EXPECT_EQ(y.value().vec(), expect);
}

TEST(Upsample, BackwardSumsReplicas) {
    Var x = Var::leaf(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}), true);
    Var y = upsample_nearest(x, 2);
    backward(ones_upstream(y));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(x.grad()[i], 4.0, 1e-12);
}

TEST(Upsample, BadFactorThrows) {
    Var x = Var::constant(Tensor({1, 2, 2}, {1.0, 2.0, 3.0, 4.0}));
    EXPECT_THROW(upsample_nearest(x, 0), ArgumentError);
}

TEST(LeakyRelu, Examples) {
    Var x = Var::leaf(Tensor({3}, {2.0, -1.0, -3.0}), true);
    Var y = leaky_relu(x, 0.02);
    EXPECT_DOUBLE_EQ(y.value()[0], 2.0);
    EXPECT_DOUBLE_EQ(y.value()[1], -0.02);
    backward(ones_upstream(y));
    EXPECT_NEAR(x.grad()[2], 0.02, 1e-15);  // piecewise derivative on the negative side
}

TEST(Sigmoid, Examples) {
    Var x = Var::leaf(Tensor({2}, {0.0, 50.0}), true);
    Var y = sigmoid(x);
    EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
    EXPECT_NEAR(y.value()[1], 1.0, 1e-12);
}

TEST(Sigmoid, GradientAtZeroIsQuarter) {
    Var x = Var::leaf(Tensor({1}, {0.0}), true);
    Var y = sigmoid(x);
    backward(ones_upstream(y));
    EXPECT_NEAR(x.grad()[0], 0.25, 1e-15);
}

TEST(BatchNorm, NormalizesUnitBatch) {
    Var x = Var::constant(Tensor({2, 1}, {-1.0, 1.0}));
    Var gamma = Var::constant(Tensor({1}, {1.0}));
    Var beta = Var::constant(Tensor({1}, {0.0}));
    Tensor rm({1});
    Tensor rv({1});
    Var y = batch_norm(x, gamma, beta, rm, rv, BnMode::train);
    EXPECT_NEAR(y.value()[0], -1.0, 1e-4);
    EXPECT_NEAR(y.value()[1], 1.0, 1e-4);
    EXPECT_DOUBLE_EQ(y.value()[0], -1.0 / std::sqrt(1.0 + 1e-5));
}

TEST(BatchNorm, ZeroMeanUnitVarStaysPut) {
    Rng rng = make_rng(3);
    Tensor raw = random_tensor({8, 3}, rng);
    // standardize each feature column exactly
    for (std::size_t f = 0; f < 3; ++f) {
        double mean = 0.0, sq = 0.0;
        for (std::size_t b = 0; b < 8; ++b) mean += raw[b * 3 + f];
        mean /= 8.0;
        for (std::size_t b = 0; b < 8; ++b) {
            raw[b * 3 + f] -= mean;
            sq += raw[b * 3 + f] * raw[b * 3 + f];
        }
        const double sd = std::sqrt(sq / 8.0);
        for (std::size_t b = 0; b < 8; ++b) raw[b * 3 + f] /= sd;
    }
    Var x = Var::constant(raw);
    Var gamma = Var::constant(Tensor({3}, {1.0, 1.0, 1.0}));
    Var beta = Var::constant(Tensor({3}));
    Tensor rm({3});
    Tensor rv({3});
    Var y = batch_norm(x, gamma, beta, rm, rv, BnMode::train);
    for (std::size_t i = 0; i < raw.numel(); ++i) EXPECT_NEAR(y.value()[i], raw[i], 1e-4);
}

TEST(BatchNorm, EvalUsesRunningStats) {
    Var x = Var::constant(Tensor({1, 2}, {0.3, -0.7}));
    Var gamma = Var::constant(Tensor({2}, {1.0, 1.0}));
    Var beta = Var::constant(Tensor({2}));
    Tensor rm({2});
    Tensor rv = Tensor::full({2}, 1.0);
    Var y = batch_norm(x, gamma, beta, rm, rv, BnMode::eval);
    EXPECT_NEAR(y.value()[0], 0.3, 1e-4);
    EXPECT_NEAR(y.value()[1], -0.7, 1e-4);
}

TEST(BatchNorm, TrainBatchOfOneThrows) {
    Var x = Var::constant(Tensor({1, 2}, {0.3, -0.7}));
    Var gamma = Var::constant(Tensor({2}, {1.0, 1.0}));
    Var beta = Var::constant(Tensor({2}));
    Tensor rm({2});
    Tensor rv({2});
    EXPECT_THROW(batch_norm(x, gamma, beta, rm, rv, BnMode::train), ArgumentError);
}

TEST(MseLoss, Examples) {
    Var a = Var::constant(Tensor({2}, {0.5, -0.5}));
    EXPECT_DOUBLE_EQ(mse_loss(a, a).value()[0], 0.0);

    Var z = Var::constant(Tensor({2}));
    Var o = Var::constant(Tensor({2}, {1.0, 1.0}));
    EXPECT_DOUBLE_EQ(mse_loss(z, o).value()[0], 1.0);

    Var w = Var::leaf(Tensor({1}), true);
    Var t = Var::constant(Tensor({1}, {2.0}));
    Var l = mse_loss(w, t);
    backward(l);
    EXPECT_DOUBLE_EQ(w.grad()[0], -4.0);
}

TEST(MseLoss, ShapeMismatchThrows) {
    Var a = Var::constant(Tensor({2}, {0.0, 0.0}));
    Var b = Var::constant(Tensor({3}, {0.0, 0.0, 0.0}));
    EXPECT_THROW(mse_loss(a, b), DimensionError);
}

TEST(L2Normalize, Examples) {
    Var x = Var::constant(Tensor({2}, {3.0, 4.0}));
    Var y = l2_normalize(x);
    EXPECT_DOUBLE_EQ(y.value()[0], 0.6);
    EXPECT_DOUBLE_EQ(y.value()[1], 0.8);

    Var u = Var::constant(Tensor({2}, {0.6, 0.8}));
    Var yu = l2_normalize(u);
    EXPECT_NEAR(yu.value()[0], 0.6, 1e-15);
    EXPECT_NEAR(yu.value()[1], 0.8, 1e-15);

    Var zero = Var::constant(Tensor({2}));
    EXPECT_THROW(l2_normalize(zero), DegenerateInputError);
}

TEST(L2Normalize, OutputNormIsOne) {
    Rng rng = make_rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        Var x = Var::constant(random_tensor({5}, rng));
        Var y = l2_normalize(x);
        double sq = 0.0;
        for (std::size_t i = 0; i < 5; ++i) sq += y.value()[i] * y.value()[i];
        EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
    }
}

TEST(Backward, SquareHasGradientTwoX) {
    Var x = Var::leaf(Tensor({1}, {3.0}), true);
    Var y = mul(x, x);
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, NonScalarOutputThrows) {
    Var x = Var::leaf(Tensor({2}, {1.0, 2.0}), true);
    Var y = mul(x, x);
    EXPECT_THROW(backward(y), ArgumentError);
}

TEST(Backward, AccumulatesAcrossPasses) {
    Var x = Var::leaf(Tensor({1}, {3.0}), true);
    Var y = mul(x, x);
    backward(y);
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
    zero_grad(y);
    backward(y);
    EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, UnreachableLeavesKeepZeroGrad) {
    Var used = Var::leaf(Tensor({1}, {2.0}), true);
    Var unused = Var::leaf(Tensor({1}, {5.0}), true);
    Var y = mul(used, used);
    backward(y);
    EXPECT_DOUBLE_EQ(used.grad()[0], 4.0);
    EXPECT_DOUBLE_EQ(unused.grad()[0], 0.0);
}

// -- Finite-difference verification of every primitive --------------------

namespace {

double check_op(const GraphBuilder& build, const std::vector<Tensor>& params) {
    return gradient_check(build, params, 1e-6, 120);
}

} // namespace

TEST(GradCheck, FullyConnected) {
    Rng rng = make_rng(101);
    std::vector<Tensor> params{random_tensor({3, 7}, rng), random_tensor({4, 7}, rng),
                               random_tensor({4}, rng)};
    Tensor target = random_tensor({3, 4}, rng);
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            return mse_loss(fully_connected(p[0], p[1], p[2]), Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, Conv2d) {
    Rng rng = make_rng(102);
    std::vector<Tensor> params{random_tensor({2, 3, 6, 6}, rng), random_tensor({4, 3, 3, 3}, rng)};
    Tensor target = random_tensor({2, 4, 3, 3}, rng);
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            return mse_loss(conv2d(p[0], p[1], 2, 1), Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, UpsampleLeakyReluSigmoid) {
    Rng rng = make_rng(103);
    std::vector<Tensor> params{random_tensor({1, 2, 3, 3}, rng)};
    Tensor target = random_tensor({1, 2, 6, 6}, rng);
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            Var y = upsample_nearest(p[0], 2);
            y = leaky_relu(y, 0.02);
            y = sigmoid(y);
            return mse_loss(y, Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, BatchNormTrainMode) {
    Rng rng = make_rng(104);
    std::vector<Tensor> params{random_tensor({4, 3, 2, 2}, rng), random_tensor({3}, rng, 0.5),
                               random_tensor({3}, rng, 0.5)};
    Tensor target = random_tensor({4, 3, 2, 2}, rng);
    Tensor rm({3});
    Tensor rv({3});
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            Var y = batch_norm(p[0], p[1], p[2], rm, rv, BnMode::train);
            return mse_loss(y, Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, L2NormalizeAndMeanAngle) {
    Rng rng = make_rng(105);
    std::vector<Tensor> params{random_tensor({3, 5}, rng)};
    Tensor other = random_tensor({3, 5}, rng);
    // unit-normalize the constant rows
    for (std::size_t r = 0; r < 3; ++r) {
        double sq = 0.0;
        for (std::size_t i = 0; i < 5; ++i) sq += other[r * 5 + i] * other[r * 5 + i];
        for (std::size_t i = 0; i < 5; ++i) other[r * 5 + i] /= std::sqrt(sq);
    }
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            return mean_angle(l2_normalize(p[0]), Var::constant(other));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, ConcatReshapeAddBias) {
    Rng rng = make_rng(106);
    std::vector<Tensor> params{random_tensor({2, 2, 2, 2}, rng), random_tensor({2, 3, 2, 2}, rng),
                               random_tensor({5, 2, 2}, rng)};
    Tensor target = random_tensor({2, 20}, rng);
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            Var y = concat_channels(p[0], p[1]);
            y = add_bias(y, p[2]);
            y = reshape(y, {2, 20});
            return mse_loss(y, Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, SoftmaxCrossEntropy) {
    Rng rng = make_rng(107);
    std::vector<Tensor> params{random_tensor({4, 6}, rng)};
    const std::vector<int> labels{0, 5, 2, 2};
    const double err = check_op(
        [&](const std::vector<Var>& p) { return softmax_cross_entropy(p[0], labels); }, params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradCheck, CompositeConvLeakyReluMse) {
    Rng rng = make_rng(108);
    std::vector<Tensor> params{random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)};
    Tensor target = random_tensor({1, 3, 5, 5}, rng);
    const double err = check_op(
        [&](const std::vector<Var>& p) {
            Var y = conv2d(p[0], p[1], 1, 1);
            y = leaky_relu(y, 0.02);
            return mse_loss(y, Var::constant(target));
        },
        params);
    EXPECT_LT(err, 1e-6);
}

TEST(GradientCheck, QuadraticIsExact) {
    Rng rng = make_rng(109);
    std::vector<Tensor> params{random_tensor({6}, rng)};
    Tensor target = random_tensor({6}, rng);
    const double err = gradient_check(
        [&](const std::vector<Var>& p) { return mse_loss(p[0], Var::constant(target)); }, params,
        1e-5);
    EXPECT_LT(err, 1e-9);
}

TEST(GradientCheck, StepOutOfRangeThrows) {
    std::vector<Tensor> params{Tensor({1}, {1.0})};
    auto build = [](const std::vector<Var>& p) { return mse_loss(p[0], p[0]); };
    EXPECT_THROW(gradient_check(build, params, 1.0), ArgumentError);
    EXPECT_THROW(gradient_check(build, params, 1e-9), ArgumentError);
}

TEST(GradientCheck, NonScalarLossThrows) {
    std::vector<Tensor> params{Tensor({2}, {1.0, 2.0})};
    auto build = [](const std::vector<Var>& p) { return mul(p[0], p[0]); };
    EXPECT_THROW(gradient_check(build, params, 1e-6), ArgumentError);
}
