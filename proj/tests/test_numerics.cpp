#include <gtest/gtest.h>

#include <cmath>

#include "siamaf/gradcheck.hpp"
#include "siamaf/ops.hpp"
#include "siamaf/optim.hpp"
#include "siamaf/rng.hpp"

using namespace siamaf;

namespace {

template <typename T>
Tensor<T> t1(std::vector<T> v) {
    Shape s{v.size()};
    return Tensor<T>(s, std::move(v));
}

TEST(Tensor, ShapeInvariant) {
    Tensor<float> t({2, 3});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), std::invalid_argument);
    EXPECT_TRUE(Tensor<float>::scalar(1.5f).is_scalar());
}

TEST(Tensor, ConvOutLenFormula) {
    // floor((L + 2*pad - K)/stride) + 1 over a sweep of valid settings
    Rng rng(123);
    for (int trial = 0; trial < 2000; ++trial) {
        const std::size_t L = 1 + rng.below(64);
        const std::size_t K = 1 + rng.below(9);
        const std::size_t pad = rng.below(K);  // pad < K keeps windows non-degenerate
        const std::size_t stride = 1 + rng.below(4);
        if (L + 2 * pad < K) continue;
        const std::size_t expect = (L + 2 * pad - K) / stride + 1;
        EXPECT_EQ(conv_out_len(L, K, stride, pad), expect);
    }
}

// --- forward oracles -------------------------------------------------------

TEST(Ops, Conv1dIdentityKernel) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({1, 1, 3}, {1, 2, 3}), false);
    auto w = tape.leaf(Tensor<double>({1, 1, 1}, {1}), false);
    auto y = ops::conv1d(x, w, NodeRef<double>{}, 1, 0);
    EXPECT_EQ(y.value().shape, (Shape{1, 1, 3}));
    EXPECT_DOUBLE_EQ(y.value().values[0], 1.0);
    EXPECT_DOUBLE_EQ(y.value().values[1], 2.0);
    EXPECT_DOUBLE_EQ(y.value().values[2], 3.0);
}

TEST(Ops, Conv1dSlidingDot) {
    // sliding dot-product by hand: [1,2,3,4] * [1,1] -> [3,5,7]
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({1, 1, 4}, {1, 2, 3, 4}), false);
    auto w = tape.leaf(Tensor<double>({1, 1, 2}, {1, 1}), false);
    auto y = ops::conv1d(x, w, NodeRef<double>{}, 1, 0);
    ASSERT_EQ(y.value().numel(), 3u);
    EXPECT_DOUBLE_EQ(y.value().values[0], 3.0);
    EXPECT_DOUBLE_EQ(y.value().values[1], 5.0);
    EXPECT_DOUBLE_EQ(y.value().values[2], 7.0);
}

TEST(Ops, Conv1dAgainstNaiveOracle) {
    // randomized settings vs. an index-by-index reference computation
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t B = 1 + rng.below(3), Ci = 1 + rng.below(3), Co = 1 + rng.below(3);
        const std::size_t K = 1 + rng.below(5);
        const std::size_t stride = 1 + rng.below(3);
        const std::size_t pad = rng.below(K);
        const std::size_t L = K + rng.below(12);
        Tensor<double> xv({B, Ci, L}), wv({Co, Ci, K}), bv({Co});
        for (auto& v : xv.values) v = rng.uniform(-1, 1);
        for (auto& v : wv.values) v = rng.uniform(-1, 1);
        for (auto& v : bv.values) v = rng.uniform(-1, 1);

        Tape<double> tape;
        auto y = ops::conv1d(tape.leaf(xv, false), tape.leaf(wv, false), tape.leaf(bv, false),
                             static_cast<std::int64_t>(stride), static_cast<std::int64_t>(pad));
        const std::size_t Lo = conv_out_len(L, K, stride, pad);
        ASSERT_EQ(y.value().shape, (Shape{B, Co, Lo}));
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oc = 0; oc < Co; ++oc)
                for (std::size_t ol = 0; ol < Lo; ++ol) {
                    double acc = bv.values[oc];
                    for (std::size_t ic = 0; ic < Ci; ++ic)
                        for (std::size_t k = 0; k < K; ++k) {
                            const std::int64_t j = static_cast<std::int64_t>(ol * stride + k) - static_cast<std::int64_t>(pad);
                            if (j >= 0 && j < static_cast<std::int64_t>(L))
                                acc += wv.values[(oc * Ci + ic) * K + k] * xv.values[(b * Ci + ic) * L + j];
                        }
                    EXPECT_NEAR(y.value().values[(b * Co + oc) * Lo + ol], acc, 1e-12);
                }
    }
}

TEST(Ops, Relu) {
    Tape<double> tape;
    auto y = ops::relu(tape.leaf(t1<double>({-1, 0, 2}), false));
    EXPECT_DOUBLE_EQ(y.value().values[0], 0.0);
    EXPECT_DOUBLE_EQ(y.value().values[1], 0.0);
    EXPECT_DOUBLE_EQ(y.value().values[2], 2.0);
}

TEST(Ops, CosineSimilarityScalar) {
    // cos((1,0),(1,1)) = 1/sqrt(2) = 0.70711
    Tape<double> tape;
    auto c = ops::cosine_similarity(tape.leaf(t1<double>({1, 0}), false), tape.leaf(t1<double>({1, 1}), false));
    EXPECT_TRUE(c.value().is_scalar());
    EXPECT_NEAR(c.value().item(), 0.70711, 5e-6);
}

TEST(Ops, CosineZeroNormIsError) {
    Tape<double> tape;
    auto a = tape.leaf(t1<double>({0, 0}), false);
    auto b = tape.leaf(t1<double>({1, 1}), false);
    EXPECT_THROW(ops::cosine_similarity(a, b), std::runtime_error);
}

TEST(Ops, SoftmaxCrossEntropyUniformLogits) {
    // uniform logits over C classes -> ln(C); non-negative everywhere
    for (std::size_t C : {2u, 3u, 5u}) {
        Tape<double> tape;
        auto logits = tape.leaf(Tensor<double>({1, C}), false);
        auto loss = ops::softmax_cross_entropy(logits, {0});
        EXPECT_NEAR(loss.value().item(), std::log(static_cast<double>(C)), 1e-12);
    }
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Tape<double> tape;
        Tensor<double> lv({2, 3});
        for (auto& v : lv.values) v = rng.uniform(-4, 4);
        auto loss = ops::softmax_cross_entropy(tape.leaf(lv, false),
                                               {static_cast<int>(rng.below(3)), static_cast<int>(rng.below(3))});
        EXPECT_GE(loss.value().item(), 0.0);
    }
}

TEST(Ops, BatchNormTrainingNormalizesBatch) {
    // per-channel batch mean ~0 and variance ~1 before affine
    Rng rng(5);
    Tensor<double> xv({8, 3, 16});
    for (auto& v : xv.values) v = rng.uniform(-2, 3);
    Tape<double> tape;
    Tensor<double> rmean = Tensor<double>::zeros({3}), rvar = Tensor<double>::full({3}, 1.0);
    auto y = ops::batchnorm1d(tape.leaf(xv, false), tape.leaf(Tensor<double>::full({3}, 1.0), false),
                              tape.leaf(Tensor<double>::zeros({3}), false), rmean, rvar,
                              ops::BatchNormAttrs<double>{});
    const auto& ov = y.value();
    for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0, sq = 0;
        const std::size_t m = 8 * 16;
        for (std::size_t b = 0; b < 8; ++b)
            for (std::size_t l = 0; l < 16; ++l) {
                const double v = ov.values[(b * 3 + c) * 16 + l];
                sum += v;
                sq += v * v;
            }
        const double mu = sum / m;
        const double var = sq / m - mu * mu;
        EXPECT_LT(std::abs(mu), 1e-5);
        EXPECT_NEAR(var, 1.0, 1e-4);
    }
}

TEST(Ops, BatchNormInferenceUsesRunningStats) {
    Tensor<double> rmean({2}, {1.0, -1.0});
    Tensor<double> rvar({2}, {4.0, 0.25});
    Tape<double> tape;
    Tensor<double> xv({1, 2, 2}, {3.0, 3.0, 0.0, 0.0});
    ops::BatchNormAttrs<double> attrs;
    attrs.training = false;
    attrs.eps = 0.0;
    auto y = ops::batchnorm1d(tape.leaf(xv, false), tape.leaf(Tensor<double>::full({2}, 1.0), false),
                              tape.leaf(Tensor<double>::zeros({2}), false), rmean, rvar, attrs);
    EXPECT_NEAR(y.value().values[0], (3.0 - 1.0) / 2.0, 1e-12);
    EXPECT_NEAR(y.value().values[2], (0.0 + 1.0) / 0.5, 1e-12);
}

TEST(Ops, MaxPoolAndGlobalAvgPool) {
    Tape<double> tape;
    auto x = tape.leaf(Tensor<double>({1, 1, 6}, {1, 3, 2, 5, 4, 0}), false);
    auto mp = ops::maxpool1d(x, 2, 2, 0);
    EXPECT_EQ(mp.value().shape, (Shape{1, 1, 3}));
    EXPECT_DOUBLE_EQ(mp.value().values[0], 3.0);
    EXPECT_DOUBLE_EQ(mp.value().values[1], 5.0);
    EXPECT_DOUBLE_EQ(mp.value().values[2], 4.0);
    auto gap = ops::global_avgpool1d(x);
    EXPECT_DOUBLE_EQ(gap.value().values[0], 2.5);
}

TEST(Ops, UnknownKindAndShapeMismatch) {
    EXPECT_THROW(op_kind_from_string("conv9d"), std::invalid_argument);
    Tape<double> tape;
    auto a = tape.leaf(t1<double>({1, 2}), false);
    auto b = tape.leaf(t1<double>({1, 2, 3}), false);
    EXPECT_THROW(ops::add(a, b), std::invalid_argument);
}

TEST(Ops, NonFiniteOutputIsError) {
    Tape<double> tape;
    auto x = tape.leaf(t1<double>({1e308, 1e308}), false);
    auto w = tape.leaf(Tensor<double>({1, 2}, {1e308, 1e308}), false);
    auto xb = tape.leaf(Tensor<double>({1, 2}, {1e308, 1e308}), false);
    EXPECT_THROW(ops::linear(xb, w, NodeRef<double>{}), std::runtime_error);
}

// --- backward oracles ------------------------------------------------------

TEST(Backward, ReluSumPiecewise) {
    // d/dx sum relu(x) at x=[-1,2] -> [0,1]
    Tape<double> tape;
    auto x = tape.leaf(t1<double>({-1, 2}), true);
    auto loss = ops::scale_add(ops::mean_all(ops::relu(x)), tape.constant(Tensor<double>::scalar(0.0)), 2.0, 0.0);
    tape.backward(loss);
    const auto& g = tape.grad_of(x.id);
    EXPECT_DOUBLE_EQ(g.values[0], 0.0);
    EXPECT_DOUBLE_EQ(g.values[1], 1.0);
}

TEST(Backward, CosineAtColinearUnitNormIsZero) {
    // grad_a cos(a,b) at a=b, unit norm -> zero vector (stationary maximum)
    Tape<double> tape;
    const double s = 1.0 / std::sqrt(2.0);
    auto a = tape.leaf(t1<double>({s, s}), true);
    auto b = tape.leaf(t1<double>({s, s}), false);
    auto c = ops::cosine_similarity(a, b);
    tape.backward(c);
    const auto& g = tape.grad_of(a.id);
    EXPECT_NEAR(g.values[0], 0.0, 1e-14);
    EXPECT_NEAR(g.values[1], 0.0, 1e-14);
}

TEST(Backward, StopGradientBarrierIsExactlyZero) {
    Tape<double> tape;
    auto x = tape.leaf(t1<double>({0.3, -0.7}), true);
    auto sg = ops::stop_gradient(x);
    auto c = ops::cosine_similarity(tape.leaf(t1<double>({1.0, 0.5}), true), sg);
    tape.backward(c);
    EXPECT_TRUE(tape.grad_of(x.id).empty() || (tape.grad_of(x.id).values[0] == 0.0 && tape.grad_of(x.id).values[1] == 0.0));
}

TEST(Backward, ScalarLossRequired) {
    Tape<double> tape;
    auto x = tape.leaf(t1<double>({1, 2}), true);
    auto y = ops::relu(x);
    EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Backward, TapeConsumedOnce) {
    Tape<double> tape;
    auto x = tape.leaf(t1<double>({1, 2}), true);
    auto loss = ops::mean_all(ops::relu(x));
    tape.backward(loss);
    EXPECT_THROW(tape.backward(loss), std::runtime_error);
}

// --- finite differences ----------------------------------------------------

TEST(GradCheck, AllOpKinds64Bit) {
    const double eps = 1e-4;
    struct Case {
        OpKind kind;
        OpAttrs attrs;
        double threshold;
    };
    std::vector<Case> cases;
    for (std::int64_t k : {1, 3, 7})
        for (std::int64_t s : {1, 2}) {
            OpAttrs a;
            a.kernel = k;
            a.stride = s;
            a.pad = k / 2;
            cases.push_back({OpKind::Conv1d, a, 1e-6});
        }
    cases.push_back({OpKind::Linear, {}, 1e-6});
    {
        OpAttrs bn3;
        cases.push_back({OpKind::BatchNorm1d, bn3, 1e-5});
        OpAttrs bn2;
        bn2.kernel = 0;  // [B,C] layout
        cases.push_back({OpKind::BatchNorm1d, bn2, 1e-5});
    }
    cases.push_back({OpKind::Relu, {}, 1e-6});
    {
        OpAttrs mp;
        mp.kernel = 3;
        mp.stride = 2;
        mp.pad = 1;
        cases.push_back({OpKind::MaxPool1d, mp, 1e-6});
    }
    cases.push_back({OpKind::GlobalAvgPool1d, {}, 1e-6});
    cases.push_back({OpKind::Add, {}, 1e-6});
    cases.push_back({OpKind::Flatten, {}, 1e-6});
    cases.push_back({OpKind::CosineSimilarity, {}, 1e-5});
    cases.push_back({OpKind::SoftmaxCrossEntropy, {}, 1e-5});
    {
        OpAttrs sa;
        sa.alpha = 0.7;
        sa.beta = -1.3;
        cases.push_back({OpKind::ScaleAdd, sa, 1e-6});
    }
    cases.push_back({OpKind::MeanAll, {}, 1e-6});

    for (const Case& c : cases) {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const double err = finite_difference_check<double>(c.kind, c.attrs, eps, seed);
            EXPECT_LT(err, c.threshold) << op_kind_name(c.kind) << " seed " << seed;
        }
    }
}

TEST(GradCheck, Float32Mode) {
    // 32-bit mode: looser threshold per the engine contract
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        OpAttrs a;
        a.kernel = 3;
        a.pad = 1;
        EXPECT_LT(finite_difference_check<float>(OpKind::Conv1d, a, 1e-2, seed), 1e-4);
        EXPECT_LT(finite_difference_check<float>(OpKind::Linear, OpAttrs{}, 1e-2, seed), 1e-4);
    }
}

// --- optimizer -------------------------------------------------------------

TEST(Optimizer, SgdMomentumOneStep) {
    // v=0, g=1, p=0, lr=0.1, m=0.9 -> v=1, p=-0.1
    Parameter<double> p("w", Tensor<double>::scalar(0.0));
    p.grad.values[0] = 1.0;
    optimizer_step<double>({&p}, OptimizerSpec::sgd_momentum(0.1, 0.9));
    EXPECT_DOUBLE_EQ(p.opt_state.at("momentum").values[0], 1.0);
    EXPECT_DOUBLE_EQ(p.value.values[0], -0.1);
    EXPECT_DOUBLE_EQ(p.grad.values[0], 0.0);  // zeroed after step
}

TEST(Optimizer, ZeroGradientLeavesParamsUnchanged) {
    Parameter<double> p("w", t1<double>({1.0, -2.0, 3.0}));
    optimizer_step<double>({&p}, OptimizerSpec::sgd_momentum(0.1, 0.9));
    EXPECT_DOUBLE_EQ(p.value.values[0], 1.0);
    EXPECT_DOUBLE_EQ(p.value.values[1], -2.0);
    EXPECT_DOUBLE_EQ(p.value.values[2], 3.0);
}

TEST(Optimizer, AdamMatchesHandComputedStep) {
    // one Adam step with g=0.5: mhat=g, vhat=g^2 -> update = lr*g/(|g|+eps)
    Parameter<double> p("w", Tensor<double>::scalar(1.0));
    p.grad.values[0] = 0.5;
    optimizer_step<double>({&p}, OptimizerSpec::adam(0.001), 1);
    const double expect = 1.0 - 0.001 * 0.5 / (0.5 + 1e-8);
    EXPECT_NEAR(p.value.values[0], expect, 1e-15);
}

TEST(Optimizer, DeterministicTrajectories) {
    // same seed -> bit-identical parameter trajectories
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Parameter<float> w("w", Tensor<float>({4, 3}));
        for (auto& v : w.value.values) v = static_cast<float>(rng.normal());
        std::vector<float> trace;
        for (int step = 1; step <= 5; ++step) {
            Tape<float> tape;
            auto x = tape.leaf(Tensor<float>({2, 3}, {0.1f, -0.2f, 0.3f, 0.4f, 0.5f, -0.6f}), false);
            auto y = ops::linear(x, tape.param(w), NodeRef<float>{});
            auto loss = ops::mean_all(ops::relu(y));
            tape.backward(loss);
            optimizer_step<float>({&w}, OptimizerSpec::sgd_momentum(0.1, 0.9), step);
            for (float v : w.value.values) trace.push_back(v);
        }
        return trace;
    };
    const auto a = run(42), b = run(42);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);  // bitwise
}

TEST(Optimizer, MismatchedGradientIsError) {
    Parameter<double> p("w", t1<double>({1.0, 2.0}));
    p.grad = Tensor<double>({3});
    EXPECT_THROW(optimizer_step<double>({&p}, OptimizerSpec::sgd_momentum(0.1, 0.9)), std::runtime_error);
}

// --- parameter store -------------------------------------------------------

TEST(ParameterStore, UniqueNames) {
    ParameterStore<float> store;
    store.create("a.w", Tensor<float>({2}));
    EXPECT_THROW(store.create("a.w", Tensor<float>({2})), std::invalid_argument);
    EXPECT_NE(store.find("a.w"), nullptr);
    EXPECT_EQ(store.find("missing"), nullptr);
}

}  // namespace
