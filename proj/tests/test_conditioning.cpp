#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace usts;
using namespace usts::testing;
using usts::testing::convert;

namespace {

Conditioning<double> make(std::size_t nodes, std::size_t channels, ParameterSet<double>& ps) {
    ModelConfig c;
    c.nodes = nodes;
    c.channels = channels;
    Rng rng(3);
    return Conditioning<double>::create(ps, c, rng);
}

}  // namespace

TEST(Summarize, SingleStepIsThatStep) {
    Tensor<double> x({1, 1, 2, 1}, {4, 5});
    EXPECT_EQ(Conditioning<double>::summarize(x, nullptr).values(), (std::vector<double>{4, 5}));
}

TEST(Summarize, LastStepDirectRead) {
    Tensor<double> x({1, 2, 2, 1}, {9, 9, 1, 3});
    EXPECT_EQ(Conditioning<double>::summarize(x, nullptr).values(), (std::vector<double>{1, 3}));
}

TEST(Summarize, SkipsFullyMaskedTrailingStep) {
    Tensor<double> x({1, 3, 2, 1}, {1, 2, 3, 4, 0, 0});
    std::vector<std::uint8_t> m{1, 1, 1, 0, 0, 0};
    EXPECT_EQ(Conditioning<double>::summarize(x, &m).values(), (std::vector<double>{3, 4}));
}

TEST(Summarize, AllMaskedGivesZeros) {
    Tensor<double> x({2, 2, 1, 1}, {1, 2, 3, 4});
    std::vector<std::uint8_t> m{0, 0, 1, 0};
    auto psi = Conditioning<double>::summarize(x, &m);
    EXPECT_EQ(psi.values(), (std::vector<double>{0, 3}));
}

TEST(Bounds, ZeroPerturbationCollapsesToCenter) {
    ParameterSet<double> ps;
    auto m = make(2, 1, ps);
    zero_tensor(m.fc2.weight);
    zero_tensor(m.fc2.bias);
    auto b = m.predict_bounds(Tensor<double>({1, 2}, {0.3, -2}));
    EXPECT_EQ(b.lower.item(), 1.0);
    EXPECT_EQ(b.upper.item(), 1.0);
}

TEST(Bounds, UnitPerturbationGivesRadiusInterval) {
    ParameterSet<double> ps;
    auto m = make(2, 1, ps);
    zero_tensor(m.fc2.weight);
    fill_tensor(m.fc2.bias, {-1, 1});
    auto b = m.predict_bounds(Tensor<double>({1, 2}, {1, 3}));
    EXPECT_NEAR(b.lower.item(), 0.9, 1e-15);
    EXPECT_NEAR(b.upper.item(), 1.1, 1e-15);
}

TEST(Bounds, ZeroRadiusIgnoresPredictor) {
    ParameterSet<double> ps;
    auto m = make(2, 1, ps);
    fill_tensor(m.radius, {0});
    auto b = m.predict_bounds(Tensor<double>({1, 2}, {5, -7}));
    EXPECT_EQ(b.lower.item(), 1.0);
    EXPECT_EQ(b.upper.item(), 1.0);
}

TEST(Bounds, ReorderedWhenPredictorSwaps) {
    ParameterSet<double> ps;
    auto m = make(1, 1, ps);
    zero_tensor(m.fc2.weight);
    fill_tensor(m.fc2.bias, {2, -1});
    auto b = m.predict_bounds(Tensor<double>({1, 1}, {0}));
    EXPECT_NEAR(b.lower.item(), 0.9, 1e-15);
    EXPECT_NEAR(b.upper.item(), 1.2, 1e-15);
}

TEST(SampleScale, DegenerateIntervalIsConstant) {
    ScaleBounds<double> b{Tensor<double>({1}, {2}), Tensor<double>({1}, {2})};
    Rng rng(1);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(Conditioning<double>::sample_scale(b, &rng).scale.item(), 2.0);
}

TEST(SampleScale, MidpointDraw) {
    ScaleBounds<double> b{Tensor<double>({1}, {0.9}), Tensor<double>({1}, {1.1})};
    EXPECT_NEAR(Conditioning<double>::sample_scale(b, std::vector<double>{0.5}).item(), 1.0, 1e-15);
}

TEST(SampleScale, EvalModeIsDeterministicAndTrainingStaysInBounds) {
    ScaleBounds<double> b{Tensor<double>({2}, {0.5, -3}), Tensor<double>({2}, {1.5, -1})};
    auto e1 = Conditioning<double>::sample_scale(b, nullptr);
    auto e2 = Conditioning<double>::sample_scale(b, nullptr);
    EXPECT_EQ(e1.scale.values(), e2.scale.values());
    EXPECT_EQ(e1.scale.values(), (std::vector<double>{1.0, -2.0}));
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        auto s = Conditioning<double>::sample_scale(b, &rng).scale.values();
        EXPECT_GE(s[0], 0.5);
        EXPECT_LE(s[0], 1.5);
        EXPECT_GE(s[1], -3.0);
        EXPECT_LE(s[1], -1.0);
    }
}

TEST(SampleScale, TinyScaleClampedKeepingSign) {
    ScaleBounds<double> b{Tensor<double>({2}, {-1e-9, 1e-12}), Tensor<double>({2}, {-1e-9, 1e-12})};
    auto s = Conditioning<double>::sample_scale(b, nullptr).scale.values();
    EXPECT_EQ(s[0], -1e-6);
    EXPECT_EQ(s[1], 1e-6);
}

TEST(ApplyInvert, Examples) {
    Tensor<double> x({1, 2}, {2, 4});
    Tensor<double> s({1}, {0.5});
    auto a = Conditioning<double>::apply(x, s);
    EXPECT_EQ(a.values(), (std::vector<double>{1, 2}));
    EXPECT_EQ(Conditioning<double>::invert(a, s).values(), (std::vector<double>{2, 4}));
    Tensor<double> one({1}, {1});
    EXPECT_EQ(Conditioning<double>::apply(x, one).values(), x.values());
    EXPECT_EQ(Conditioning<double>::invert(x, one).values(), x.values());
}

TEST(ApplyInvert, RoundTripOverRandomTensors) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        auto x = random_tensor<float>({3, 4, 2, 2}, rng, -10, 10);
        ScaleBounds<float> b{random_tensor<float>({3}, rng, 0.2, 1), random_tensor<float>({3}, rng, 1, 3)};
        Rng r(trial);
        auto s = Conditioning<float>::sample_scale(b, &r).scale;
        auto back = Conditioning<float>::invert(Conditioning<float>::apply(x, s), s);
        for (std::size_t i = 0; i < x.numel(); ++i)
            EXPECT_NEAR(back.values()[i], x.values()[i], 1e-6 * std::max(1.0f, std::abs(x.values()[i])));
    }
}

TEST(Conditioning, GradientsReachCenterAndRadius) {
    ParameterSet<double> ps;
    auto m = make(2, 2, ps);
    std::mt19937_64 rng(4);
    auto psi = random_tensor<double>({3, 4}, rng);
    auto x = random_tensor<double>({3, 2, 2, 2}, rng);
    std::vector<double> u{0.2, 0.7, 0.4};
    auto build = [&](auto& in) {
        using U = typename std::decay_t<decltype(in[0])>::value_type;
        Conditioning<U> c;
        c.center = in[0];
        c.radius = in[1];
        c.fc1 = {in[2], in[3]};
        c.fc2 = {in[4], in[5]};
        auto s = Conditioning<U>::sample_scale(c.predict_bounds(convert<U>(psi)), std::vector<U>(u.begin(), u.end()));
        return probe(Conditioning<U>::apply(convert<U>(x), s));
    };
    auto rep = check_gradients<double>(build, {m.center, m.radius, m.fc1.weight, m.fc1.bias, m.fc2.weight, m.fc2.bias});
    EXPECT_LT(rep.max_rel, 1e-6);
    ps.zero_grad();
    std::vector<double> uu = u;
    auto s = Conditioning<double>::sample_scale(m.predict_bounds(psi), uu);
    probe(Conditioning<double>::apply(x, s)).backward();
    EXPECT_NE(m.center.grad()[0], 0.0);
    EXPECT_NE(m.radius.grad()[0], 0.0);
}
