#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "usts/nn.hpp"

using namespace usts;
using usts::testing::check_gradients;
using usts::testing::probe;
using usts::testing::random_tensor;

TEST(Matmul, IdentityTimesMatrix) {
    Tensor<double> id({2, 2}, {1, 0, 0, 1});
    Tensor<double> m({2, 2}, {3, 4, 5, 6});
    auto r = ops::matmul(id, m);
    EXPECT_EQ(r.values(), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
    auto r = ops::matmul(Tensor<double>({1, 2}, {1, 2}), Tensor<double>({2, 1}, {3, 4}));
    EXPECT_EQ(r.shape(), (Shape{1, 1}));
    EXPECT_EQ(r.item(), 11.0);
}

TEST(Matmul, ZerosGiveZeros) {
    std::mt19937_64 rng(1);
    auto r = ops::matmul(Tensor<double>::zeros({2, 3}), random_tensor<double>({3, 2}, rng));
    for (double v : r.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    try {
        ops::matmul(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 2}));
        FAIL();
    } catch (const DimensionError& e) {
        EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("[2,2]"), std::string::npos);
    }
}

TEST(Softmax, Examples) {
    auto a = ops::softmax_lastaxis(Tensor<double>({3}, {0, 0, 0}));
    for (double v : a.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
    auto b = ops::softmax_lastaxis(Tensor<float>({2}, {1000.f, 1000.f}));
    EXPECT_FLOAT_EQ(b.values()[0], 0.5f);
    EXPECT_FLOAT_EQ(b.values()[1], 0.5f);
    auto c = ops::softmax_lastaxis(Tensor<double>({2}, {0, std::log(3.0)}));
    EXPECT_NEAR(c.values()[0], 0.25, 1e-12);
    EXPECT_NEAR(c.values()[1], 0.75, 1e-12);
}

TEST(Softmax, RowsSumToOneAndStayInUnitInterval) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = random_tensor<float>({4, 7}, rng, -30, 30);
        auto y = ops::softmax_lastaxis(x);
        for (std::size_t r = 0; r < 4; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < 7; ++j) {
                const float v = y.values()[r * 7 + j];
                EXPECT_GE(v, 0.f);
                EXPECT_LE(v, 1.f);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(Activations, ValuesAtZero) {
    auto z = Tensor<double>::zeros({1});
    EXPECT_EQ(ops::gelu(z).item(), 0.0);
    EXPECT_EQ(ops::tanh(z).item(), 0.0);
    EXPECT_EQ(ops::sigmoid(z).item(), 0.5);
}

TEST(GroupConv, AllZeroInputGivesBias) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto conv = nn::GroupConv<double>::create(ps, "g", 4, 2, 3, rng);
    auto y = conv(Tensor<double>::zeros({2, 5, 4}));
    ASSERT_EQ(y.shape(), (Shape{2, 5, 2}));
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_EQ(y.values()[i], conv.bias.values()[i % 2]);
}

TEST(GroupConv, OneGroupPerNodeUnitKernelIsIdentity) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto conv = nn::GroupConv<double>::create(ps, "g", 3, 3, 1, rng);
    std::fill(conv.weight.mutable_data().begin(), conv.weight.mutable_data().end(), 1.0);
    std::fill(conv.bias.mutable_data().begin(), conv.bias.mutable_data().end(), 0.0);
    std::mt19937_64 r(5);
    auto x = random_tensor<double>({1, 4, 3}, r);
    EXPECT_EQ(conv(x).values(), x.values());
}

TEST(GroupConv, HandComputedSingleGroup) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto conv = nn::GroupConv<double>::create(ps, "g", 2, 1, 1, rng);
    conv.weight.mutable_data()[0] = 1.0;
    conv.bias.mutable_data()[0] = 0.0;
    auto y = conv(Tensor<double>({1, 3, 2}, {1, 2, 3, 4, 5, 6}));
    EXPECT_EQ(y.values(), (std::vector<double>{3, 7, 11}));
}

TEST(GroupConv, PadsNodesToMultipleOfGroups) {
    EXPECT_EQ(nn::group_padding(5, 2), 1u);
    EXPECT_EQ(nn::group_padding(6, 3), 0u);
    ParameterSet<double> ps;
    Rng rng(1);
    auto conv = nn::GroupConv<double>::create(ps, "g", 5, 2, 1, rng);
    EXPECT_EQ(conv(Tensor<double>::zeros({1, 2, 5})).shape(), (Shape{1, 2, 2}));
}

TEST(GroupConv, KernelLongerThanSequenceIsConfigError) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto conv = nn::GroupConv<double>::create(ps, "g", 2, 1, 5, rng);
    EXPECT_THROW(conv(Tensor<double>::zeros({1, 3, 2})), ConfigError);
}

TEST(GroupConv, InvariantToNodeOrderWithinGroup) {
    ParameterSet<double> ps;
    Rng rng(2);
    auto conv = nn::GroupConv<double>::create(ps, "g", 4, 2, 3, rng);
    auto x = Tensor<double>({1, 3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
    auto swapped = Tensor<double>({1, 3, 4}, {2, 1, 4, 3, 6, 5, 8, 7, 10, 9, 12, 11});
    auto a = conv(x), b = conv(swapped);
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.values()[i], b.values()[i], 1e-12);
}

TEST(ChannelConv, Examples) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto one = nn::ChannelConv<double>::create(ps, "a", 1, rng);
    one.weight.mutable_data()[0] = 1;
    one.bias.mutable_data()[0] = 0;
    auto x = Tensor<double>({1, 2, 2, 1}, {1, 2, 3, 4});
    auto y = one(x);
    EXPECT_EQ(y.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(y.values(), x.values());

    auto zero = nn::ChannelConv<double>::create(ps, "b", 1, rng);
    zero.weight.mutable_data()[0] = 0;
    auto zy = zero(x);
    for (double v : zy.values()) EXPECT_EQ(v, zero.bias.values()[0]);

    auto two = nn::ChannelConv<double>::create(ps, "c", 2, rng);
    two.weight.mutable_data()[0] = 2;
    two.weight.mutable_data()[1] = -1;
    two.bias.mutable_data()[0] = 0;
    EXPECT_EQ(two(Tensor<double>({1, 1, 1, 2}, {3, 1})).item(), 5.0);
}

TEST(Convolutions, AffineInInput) {
    ParameterSet<double> ps;
    Rng rng(4);
    auto g = nn::GroupConv<double>::create(ps, "g", 4, 2, 3, rng);
    auto c = nn::ChannelConv<double>::create(ps, "c", 2, rng);
    auto t = nn::TemporalConv<double>::create(ps, "t", 3, 2, 3, rng);
    std::mt19937_64 r(8);
    auto check = [](auto f, const Tensor<double>& x, const Tensor<double>& y) {
        auto fx = f(x), fy = f(y), fxy = f(ops::add(x, y)), f0 = f(Tensor<double>::zeros(x.shape()));
        for (std::size_t i = 0; i < fx.numel(); ++i)
            EXPECT_NEAR(fxy.values()[i], fx.values()[i] + fy.values()[i] - f0.values()[i], 1e-5);
    };
    check(g, random_tensor<double>({2, 5, 4}, r), random_tensor<double>({2, 5, 4}, r));
    check(c, random_tensor<double>({2, 3, 4, 2}, r), random_tensor<double>({2, 3, 4, 2}, r));
    check(t, random_tensor<double>({2, 5, 3}, r), random_tensor<double>({2, 5, 3}, r));
}

namespace {
// Scalar GRU step written out directly, independent of the tensor kernels.
double gru_scalar(double x, double h, const double* wi, const double* wh, const double* bi, const double* bh) {
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    const double r = sig(wi[0] * x + bi[0] + wh[0] * h + bh[0]);
    const double z = sig(wi[1] * x + bi[1] + wh[1] * h + bh[1]);
    const double n = std::tanh(wi[2] * x + bi[2] + r * (wh[2] * h + bh[2]));
    return (1 - z) * n + z * h;
}
}  // namespace

TEST(Gru, ZeroInputZeroParamsGiveZeroStates) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto g = nn::Gru<double>::create(ps, "g", 2, 3, rng);
    for (auto& p : ps.all()) std::fill(p.value.mutable_data().begin(), p.value.mutable_data().end(), 0.0);
    auto h = nn::gru_forward(Tensor<double>::zeros({2, 4, 2}), g);
    EXPECT_EQ(h.shape(), (Shape{2, 4, 3}));
    for (double v : h.values()) EXPECT_EQ(v, 0.0);
}

TEST(Gru, SingleStepEqualsCell) {
    ParameterSet<double> ps;
    Rng rng(2);
    auto g = nn::Gru<double>::create(ps, "g", 2, 3, rng);
    std::mt19937_64 r(3);
    auto x = random_tensor<double>({4, 1, 2}, r);
    auto seq = nn::gru_forward(x, g);
    auto cell = g.step(ops::reshape(x, {4, 2}), g.initial_state(4));
    EXPECT_EQ(seq.values(), cell.values());
}

TEST(Gru, ScalarRecurrenceMatchesHandTrace) {
    ParameterSet<double> ps;
    Rng rng(1);
    auto g = nn::Gru<double>::create(ps, "g", 1, 1, rng);
    const double wi[3] = {0.5, -0.3, 0.8}, wh[3] = {0.2, 0.4, -0.6}, bi[3] = {0.1, 0.0, -0.2}, bh[3] = {0.0, 0.3, 0.05};
    std::copy(wi, wi + 3, g.w_ih.mutable_data().begin());
    std::copy(wh, wh + 3, g.w_hh.mutable_data().begin());
    std::copy(bi, bi + 3, g.b_ih.mutable_data().begin());
    std::copy(bh, bh + 3, g.b_hh.mutable_data().begin());
    const double xs[3] = {1.0, -2.0, 0.5};
    auto out = nn::gru_forward(Tensor<double>({1, 3, 1}, {xs[0], xs[1], xs[2]}), g);
    double h = 0;
    for (int t = 0; t < 3; ++t) {
        h = gru_scalar(xs[t], h, wi, wh, bi, bh);
        EXPECT_NEAR(out.values()[t], h, 1e-14);
    }
}

TEST(Gru, BidirectionalConcatenatesBothDirections) {
    ParameterSet<double> ps;
    Rng rng(5);
    auto f = nn::Gru<double>::create(ps, "f", 1, 2, rng);
    auto b = nn::Gru<double>::create(ps, "b", 1, 2, rng);
    std::mt19937_64 r(3);
    auto x = random_tensor<double>({1, 3, 1}, r);
    auto bi = nn::gru_forward(x, f, &b);
    ASSERT_EQ(bi.shape(), (Shape{1, 3, 4}));
    // The backward direction's state at the last position has only seen that position.
    auto last = b.step(ops::reshape(ops::slice(x, 1, 2, 1), {1, 1}), b.initial_state(1));
    EXPECT_EQ(bi.at({0, 2, 2}), last.values()[0]);
    EXPECT_EQ(bi.at({0, 2, 3}), last.values()[1]);
}

TEST(Backward, QuadraticGradient) {
    Tensor<double> w({2}, {1, 2});
    w.set_requires_grad(true);
    ops::sum(ops::mul(w, w)).backward();
    EXPECT_EQ(w.grad()[0], 2.0);
    EXPECT_EQ(w.grad()[1], 4.0);
}

TEST(Backward, NonScalarIsContractError) {
    Tensor<double> w({2}, {1, 2});
    w.set_requires_grad(true);
    EXPECT_THROW(ops::mul(w, w).backward(), ContractError);
}

TEST(Backward, FrozenParameterGetsNoGradient) {
    ParameterSet<double> ps;
    auto a = ps.add("a", Tensor<double>({2}, {1, 2}), true);
    auto b = ps.add("b", Tensor<double>({2}, {3, 4}), false);
    ops::sum(ops::mul(a, b)).backward();
    EXPECT_TRUE(a.has_grad());
    EXPECT_FALSE(b.has_grad());
}

TEST(Parameters, NamesAreUnique) {
    ParameterSet<double> ps;
    ps.add("x", Tensor<double>::zeros({1}), true);
    EXPECT_THROW(ps.add("x", Tensor<double>::zeros({1}), true), ContractError);
}

// ---------------------------------------------------------------- grad checks

template <class T>
class OpGradients : public ::testing::Test {
protected:
    static double tol() { return std::is_same_v<T, float> ? 1e-3 : 1e-6; }
};
using Precisions = ::testing::Types<float, double>;
TYPED_TEST_SUITE(OpGradients, Precisions);

TYPED_TEST(OpGradients, RandomShapesUpTo2x4x4x2) {
    using T = TypeParam;
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<std::size_t> dim(1, 4);
    for (int trial = 0; trial < 4; ++trial) {
        const std::size_t B = std::min<std::size_t>(dim(rng), 2), L = dim(rng) + 1, N = dim(rng),
                          C = std::min<std::size_t>(dim(rng), 2);
        const Shape s4 = {B, L, N, C};
        auto x = random_tensor<T>(s4, rng);
        auto y = random_tensor<T>(s4, rng);
        auto pos = random_tensor<T>(s4, rng, 0.5, 2.0);
        auto row = random_tensor<T>({C}, rng);

        auto elementwise = [](auto& in) {
            auto a = ops::add(ops::mul(in[0], in[1]), in[3]);
            auto b = ops::div(ops::sub(in[0], in[1]), in[2]);
            auto c = ops::add(ops::gelu(a), ops::tanh(b));
            return probe(ops::add(ops::sigmoid(c), ops::square(in[0])));
        };
        EXPECT_LT(check_gradients<T>(elementwise, {x, y, pos, row}).max_rel, this->tol());

        auto shapes = [B, L, N, C](auto& in) {
            auto p = ops::permute(in[0], {2, 0, 3, 1});
            auto s = ops::slice(p, 3, 1, L - 1);
            auto c = ops::concat<typename std::decay_t<decltype(in[0])>::value_type>({s, s}, 3);
            auto r = ops::reshape(c, {N * B, C * 2 * (L - 1)});
            return ops::add(probe(ops::sum_axis(r, 1)), probe(ops::mean_axis(in[0], 2)));
        };
        EXPECT_LT(check_gradients<T>(shapes, {x}).max_rel, this->tol());

        auto w = random_tensor<T>({C, 3}, rng);
        auto bias = random_tensor<T>({3}, rng);
        auto g = random_tensor<T>({3}, rng, 0.5, 1.5);
        auto be = random_tensor<T>({3}, rng);
        auto dense = [](auto& in) {
            auto h = ops::linear(in[0], in[1], in[2]);
            auto n = ops::layer_norm(h, in[3], in[4]);
            return probe(ops::softmax_lastaxis(ops::scale(n, static_cast<typename std::decay_t<decltype(in[0])>::value_type>(2))));
        };
        EXPECT_LT(check_gradients<T>(dense, {x, w, bias, g, be}).max_rel, this->tol());

        auto bx = random_tensor<T>({B, N, L, C}, rng);
        auto by = random_tensor<T>({B, N, C, L}, rng);
        auto batched = [](auto& in) { return probe(ops::matmul(in[0], in[1])); };
        EXPECT_LT(check_gradients<T>(batched, {bx, by}).max_rel, this->tol());
    }
}

TYPED_TEST(OpGradients, ConvolutionsGruAndGathers) {
    using T = TypeParam;
    std::mt19937_64 rng(12);
    ParameterSet<T> ps;
    Rng init(3);
    auto gconv = nn::GroupConv<T>::create(ps, "g", 3, 2, 3, init);
    auto cconv = nn::ChannelConv<T>::create(ps, "c", 2, init);
    auto tconv = nn::TemporalConv<T>::create(ps, "t", 3, 2, 3, init);
    auto gru = nn::Gru<T>::create(ps, "gru", 2, 3, init);

    auto x4 = random_tensor<T>({2, 4, 3, 2}, rng);
    auto conv_chain = [](auto& in) {
        using U = typename std::decay_t<decltype(in[0])>::value_type;
        nn::ChannelConv<U> c{in[1], in[2]};
        nn::GroupConv<U> g{in[3], in[4], 2, 3};
        return probe(ops::gelu(g(ops::gelu(c(in[0])))));
    };
    EXPECT_LT(check_gradients<T>(conv_chain, {x4, cconv.weight, cconv.bias, gconv.weight, gconv.bias}).max_rel,
              this->tol());

    auto x3 = random_tensor<T>({2, 4, 3}, rng);
    auto temporal = [](auto& in) {
        using U = typename std::decay_t<decltype(in[0])>::value_type;
        nn::TemporalConv<U> t{in[1], in[2], 3};
        return probe(t(in[0]));
    };
    EXPECT_LT(check_gradients<T>(temporal, {x3, tconv.weight, tconv.bias}).max_rel, this->tol());

    auto xs = random_tensor<T>({2, 4, 2}, rng);
    auto recurrent = [](auto& in) {
        using U = typename std::decay_t<decltype(in[0])>::value_type;
        nn::Gru<U> g{in[1], in[2], in[3], in[4]};
        return probe(nn::gru_forward(in[0], g, &g));
    };
    EXPECT_LT(check_gradients<T>(recurrent, {xs, gru.w_ih, gru.w_hh, gru.b_ih, gru.b_hh}).max_rel, this->tol());

    auto table = random_tensor<T>({5, 3}, rng);
    auto gather = [](auto& in) { return probe(ops::embedding(in[0], {4, 0, 4, 2})); };
    EXPECT_LT(check_gradients<T>(gather, {table}).max_rel, this->tol());

    auto a = random_tensor<T>({2, 3}, rng), b = random_tensor<T>({2, 3}, rng);
    std::vector<std::uint8_t> keep = {1, 0, 0, 1, 1, 0};
    auto select = [keep](auto& in) { return probe(ops::where(keep, ops::tanh(in[0]), ops::square(in[1]))); };
    EXPECT_LT(check_gradients<T>(select, {a, b}).max_rel, this->tol());
}
