#include <doctest.h>

#include <cmath>
#include <vector>

#include "mpum/gradcheck.hpp"
#include "mpum/rng.hpp"
#include "mpum/tensor.hpp"

using namespace mpum;

namespace {

// Direct 7-loop cross-correlation, no tricks, used as an oracle.
std::vector<double> conv3d_naive(const std::vector<double>& in, int64_t B, int64_t Ci, int64_t D, int64_t H,
                                 int64_t W, const std::vector<double>& w, int64_t Co, int64_t K, int64_t stride,
                                 int64_t pad) {
    const int64_t Do = (D + 2 * pad - K) / stride + 1;
    const int64_t Ho = (H + 2 * pad - K) / stride + 1;
    const int64_t Wo = (W + 2 * pad - K) / stride + 1;
    std::vector<double> out(static_cast<size_t>(B * Co * Do * Ho * Wo), 0.0);
    for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Co; ++co)
            for (int64_t z = 0; z < Do; ++z)
                for (int64_t y = 0; y < Ho; ++y)
                    for (int64_t x = 0; x < Wo; ++x) {
                        double acc = 0.0;
                        for (int64_t ci = 0; ci < Ci; ++ci)
                            for (int64_t kz = 0; kz < K; ++kz)
                                for (int64_t ky = 0; ky < K; ++ky)
                                    for (int64_t kx = 0; kx < K; ++kx) {
                                        int64_t iz = z * stride + kz - pad;
                                        int64_t iy = y * stride + ky - pad;
                                        int64_t ix = x * stride + kx - pad;
                                        if (iz < 0 || iz >= D || iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
                                        acc += in[static_cast<size_t>(((b * Ci + ci) * D + iz) * H * W + iy * W + ix)] *
                                               w[static_cast<size_t>((((co * Ci + ci) * K + kz) * K + ky) * K + kx)];
                                    }
                        out[static_cast<size_t>(((b * Co + co) * Do + z) * Ho * Wo + y * Wo + x)] = acc;
                    }
    return out;
}

Tensor<double> rand_tensor(Shape shape, Rng& rng, bool rg = true) {
    Tensor<double> t = Tensor<double>::zeros(std::move(shape), rg);
    for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("tensor basics") {
    auto t = Tensor<float>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(t.scalar(), ShapeError);

    auto c = t.clone();
    c.values()[0] = 99;
    CHECK(t.values()[0] == 1);  // clone does not alias
}

TEST_CASE("non-finite forward results are rejected") {
    Graph<float> g;
    auto a = Tensor<float>::from({2}, {1.0f, 0.0f}, true);
    auto b = Tensor<float>::from({2}, {0.0f, 0.0f}, true);
    CHECK_THROWS_AS(div(g, a, b), NumericError);
    auto big = Tensor<float>::full({1}, 1e30f, true);
    CHECK_THROWS_AS(mul(g, big, big), NumericError);
    auto neg = Tensor<float>::from({1}, {-1.0f}, true);
    CHECK_THROWS_AS(pointwise(g, neg, Unary::Log), NumericError);
}

TEST_CASE("backward twice without reset errors") {
    Graph<double> g;
    auto x = Tensor<double>::from({1}, {2.0}, true);
    auto y = mul(g, x, x);
    g.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    auto y2 = mul(g, x, x);
    CHECK_THROWS_AS(g.backward(y2), Error);
    g.reset();
    x.zero_grad();
    auto y3 = mul(g, x, x);
    g.backward(y3);
    CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("gradients accumulate across reuse of one tensor") {
    Graph<double> g;
    auto x = Tensor<double>::from({1}, {3.0}, true);
    auto y = add(g, mul(g, x, x), x);  // x^2 + x, dy/dx = 2x + 1
    g.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("matmul forward and gradient") {
    Rng rng(11);
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({4, 2}, rng);
    Graph<double> fg;
    auto c = matmul(fg, a, b);
    // spot-check one entry against a hand sum
    double expect = 0;
    for (int k = 0; k < 4; ++k) expect += a.values()[1 * 4 + k] * b.values()[k * 2 + 1];
    CHECK(c.values()[1 * 2 + 1] == doctest::Approx(expect));

    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto m = matmul(g, a, b);
            auto s = mul(g, m, m);  // quadratic head so gradients vary per element
            return sum_all(g, s);
        },
        {a, b});
    CHECK(res.max_rel_err <= 1e-4);

    Graph<double> g2;
    CHECK_THROWS_AS(matmul(g2, a, a), ShapeError);
}

TEST_CASE("conv3d matches naive oracle") {
    Rng rng(7);
    for (auto [stride, pad, K] : std::vector<std::tuple<int64_t, int64_t, int64_t>>{
             {1, 1, 3}, {2, 1, 3}, {1, 0, 3}, {1, 0, 1}, {2, 0, 1}}) {
        const int64_t B = 2, Ci = 3, Co = 2, D = 5, H = 4, W = 6;
        auto x = rand_tensor({B, Ci, D, H, W}, rng, false);
        auto w = rand_tensor({Co, Ci, K, K, K}, rng, false);
        Graph<double> g;
        auto y = conv3d(g, x, w, stride, pad);
        auto ref = conv3d_naive(x.values(), B, Ci, D, H, W, w.values(), Co, K, stride, pad);
        REQUIRE(y.numel() == static_cast<int64_t>(ref.size()));
        for (size_t i = 0; i < ref.size(); ++i) CHECK(y.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv3d rejects unsupported kernels and shapes") {
    Graph<double> g;
    Rng rng(3);
    auto x = rand_tensor({1, 2, 4, 4, 4}, rng, false);
    CHECK_THROWS_AS(conv3d(g, x, rand_tensor({2, 2, 5, 5, 5}, rng, false), 1, 2), ShapeError);
    CHECK_THROWS_AS(conv3d(g, x, rand_tensor({2, 3, 3, 3, 3}, rng, false), 1, 1), ShapeError);
    CHECK_THROWS_AS(conv3d(g, x, rand_tensor({2, 2, 3, 3, 3}, rng, false), 0, 1), ShapeError);
}

TEST_CASE("conv3d output extents") {
    Graph<double> g;
    Rng rng(5);
    auto x = rand_tensor({1, 1, 7, 7, 7}, rng, false);
    auto w = rand_tensor({1, 1, 3, 3, 3}, rng, false);
    CHECK(conv3d(g, x, w, 1, 1).shape() == Shape{1, 1, 7, 7, 7});
    CHECK(conv3d(g, x, w, 2, 1).shape() == Shape{1, 1, 4, 4, 4});
    CHECK(conv3d(g, x, w, 2, 0).shape() == Shape{1, 1, 3, 3, 3});
}

TEST_CASE("conv3d gradient wrt input and kernels") {
    Rng rng(13);
    for (auto [stride, pad, K] : std::vector<std::tuple<int64_t, int64_t, int64_t>>{{1, 1, 3}, {2, 1, 3}, {1, 0, 1}}) {
        auto x = rand_tensor({1, 2, 4, 3, 5}, rng);
        auto w = rand_tensor({2, 2, K, K, K}, rng);
        auto res = grad_check<double>(
            [&, stride, pad](Graph<double>& g) {
                auto y = conv3d(g, x, w, stride, pad);
                return sum_all(g, mul(g, y, y));
            },
            {x, w});
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("pointwise ops gradient") {
    Rng rng(17);
    for (Unary k : {Unary::Relu, Unary::LeakyRelu, Unary::Sigmoid, Unary::Exp, Unary::Scale, Unary::AddC}) {
        auto x = rand_tensor({24}, rng);
        // keep ReLU kinks away from the probe points
        for (auto& v : x.values())
            if (std::abs(v) < 0.05) v = 0.1;
        auto res = grad_check<double>(
            [&, k](Graph<double>& g) {
                auto y = pointwise(g, x, k, 0.7);
                return sum_all(g, mul(g, y, y));
            },
            {x});
        CHECK(res.max_rel_err <= 1e-4);
    }
    // log needs positive input
    auto x = Tensor<double>::zeros({10}, true);
    for (auto& v : x.values()) v = rng.uniform(0.5, 2.0);
    auto res = grad_check<double>(
        [&](Graph<double>& g) { return sum_all(g, pointwise(g, x, Unary::Log)); }, {x});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("binary ops gradient") {
    Rng rng(19);
    for (Binary k : {Binary::Add, Binary::Sub, Binary::Mul, Binary::Div}) {
        auto a = rand_tensor({12}, rng);
        auto b = rand_tensor({12}, rng);
        for (auto& v : b.values()) v = v + (v >= 0 ? 1.5 : -1.5);  // keep divisors away from 0
        auto res = grad_check<double>(
            [&, k](Graph<double>& g) {
                auto y = binary_op(g, a, b, k);
                return sum_all(g, mul(g, y, y));
            },
            {a, b});
        CHECK(res.max_rel_err <= 1e-4);
    }
}

TEST_CASE("bias_add_channel and add_rowvec gradients") {
    Rng rng(23);
    auto x = rand_tensor({2, 3, 2, 2, 2}, rng);
    auto b = rand_tensor({3}, rng);
    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto y = bias_add_channel(g, x, b);
            return sum_all(g, mul(g, y, y));
        },
        {x, b});
    CHECK(res.max_rel_err <= 1e-4);

    auto m = rand_tensor({4, 3}, rng);
    auto v = rand_tensor({3}, rng);
    res = grad_check<double>(
        [&](Graph<double>& g) {
            auto y = add_rowvec(g, m, v);
            return sum_all(g, mul(g, y, y));
        },
        {m, v});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("concat_channels forward, gradient, zero-channel case") {
    Rng rng(29);
    auto a = rand_tensor({2, 2, 2, 2, 2}, rng);
    auto b = rand_tensor({2, 3, 2, 2, 2}, rng);
    Graph<double> g;
    auto c = concat_channels(g, a, b);
    CHECK(c.shape() == Shape{2, 5, 2, 2, 2});
    CHECK(c.values()[0] == a.values()[0]);
    CHECK(c.values()[2 * 8] == b.values()[0]);  // first channel of b in batch 0

    auto res = grad_check<double>(
        [&](Graph<double>& g2) {
            auto y = concat_channels(g2, a, b);
            return sum_all(g2, mul(g2, y, y));
        },
        {a, b});
    CHECK(res.max_rel_err <= 1e-4);

    auto zero = Tensor<double>::zeros({2, 0, 2, 2, 2});
    Graph<double> g3;
    auto same = concat_channels(g3, zero, b);
    CHECK(same.shape() == b.shape());
    for (size_t i = 0; i < b.values().size(); ++i) CHECK(same.values()[i] == b.values()[i]);
}

TEST_CASE("upsample_trilinear2 matches half-pixel reference on a 1-D ramp") {
    // [0,1] along x with align-corners=false doubles to [0, 0.25, 0.75, 1].
    Graph<double> g;
    auto x = Tensor<double>::from({1, 1, 1, 1, 2}, {0.0, 1.0});
    auto y = upsample_trilinear2(g, x);
    CHECK(y.shape() == Shape{1, 1, 2, 2, 4});
    for (int64_t z = 0; z < 2; ++z)
        for (int64_t yy = 0; yy < 2; ++yy) {
            const double* row = y.data() + (z * 2 + yy) * 4;
            CHECK(row[0] == doctest::Approx(0.0));
            CHECK(row[1] == doctest::Approx(0.25));
            CHECK(row[2] == doctest::Approx(0.75));
            CHECK(row[3] == doctest::Approx(1.0));
        }
}

TEST_CASE("upsample_trilinear2 gradient") {
    Rng rng(31);
    auto x = rand_tensor({1, 2, 2, 3, 2}, rng);
    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto y = upsample_trilinear2(g, x);
            return sum_all(g, mul(g, y, y));
        },
        {x});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("reductions, slice, reshape gradients") {
    Rng rng(37);
    auto x = rand_tensor({2, 3, 2, 2, 2}, rng);
    auto res = grad_check<double>(
        [&](Graph<double>& g) {
            auto s = sum_per_channel(g, x);  // [3]
            auto t = slice1d(g, s, 1, 3);    // [2]
            auto r = reshape(g, t, {2, 1});
            return sum_all(g, mul(g, r, r));
        },
        {x});
    CHECK(res.max_rel_err <= 1e-4);

    Graph<double> g;
    auto s = sum_per_channel(g, x);
    double byhand = 0;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 8; ++i) byhand += x.values()[static_cast<size_t>((b * 3 + 1) * 8 + i)];
    CHECK(s.values()[1] == doctest::Approx(byhand));
    CHECK_THROWS_AS(slice1d(g, s, 2, 5), ShapeError);
}

TEST_CASE("softmax_channel forward sums to one and gradient checks") {
    Rng rng(41);
    auto x = rand_tensor({2, 4, 2, 1, 2}, rng);
    Graph<double> g;
    auto p = softmax_channel(g, x);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 4; ++i) {
            double tot = 0;
            for (int64_t k = 0; k < 4; ++k) tot += p.values()[static_cast<size_t>(b * 16 + k * 4 + i)];
            CHECK(tot == doctest::Approx(1.0));
        }

    auto w = rand_tensor({2, 4, 2, 1, 2}, rng, false);  // fixed mixing weights
    auto res = grad_check<double>(
        [&](Graph<double>& g2) {
            auto q = softmax_channel(g2, x);
            return sum_all(g2, mul(g2, q, mul(g2, w, q)));
        },
        {x});
    CHECK(res.max_rel_err <= 1e-4);
}

TEST_CASE("softmax_cross_entropy value and gradient") {
    // two voxels, three classes, hand-computable
    auto logits = Tensor<double>::from({1, 3, 2}, {1.0, 2.0, 0.5, -0.5, 0.0, 1.5}, true);
    std::vector<int32_t> labels = {1, 2};
    Graph<double> g;
    auto loss = softmax_cross_entropy(g, logits, labels);
    auto lse = [](double a, double b, double c) { return std::log(std::exp(a) + std::exp(b) + std::exp(c)); };
    double expect = ((lse(1.0, 0.5, 0.0) - 0.5) + (lse(2.0, -0.5, 1.5) - 1.5)) / 2.0;
    CHECK(loss.scalar() == doctest::Approx(expect));

    auto res = grad_check<double>(
        [&](Graph<double>& g2) { return softmax_cross_entropy(g2, logits, labels); }, {logits});
    CHECK(res.max_rel_err <= 1e-4);

    CHECK_THROWS_AS(softmax_cross_entropy(g, logits, std::vector<int32_t>{1, 3}), DataError);
    CHECK_THROWS_AS(softmax_cross_entropy(g, logits, std::vector<int32_t>{1}), ShapeError);
}

TEST_CASE("softmax_cross_entropy agrees with composed softmax+log") {
    Rng rng(43);
    auto logits = rand_tensor({2, 3, 4}, rng);
    std::vector<int32_t> labels;
    for (int i = 0; i < 8; ++i) labels.push_back(static_cast<int32_t>(rng.uniform_int(0, 2)));
    Graph<double> g;
    auto fused = softmax_cross_entropy(g, logits, labels);

    // composed: -mean(log p[label])
    Graph<double> g2;
    NoGradGuard<double> ng(g2);
    auto p = softmax_channel(g2, logits);
    double acc = 0;
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t i = 0; i < 4; ++i)
            acc -= std::log(p.values()[static_cast<size_t>(b * 12 + labels[static_cast<size_t>(b * 4 + i)] * 4 + i)]);
    CHECK(fused.scalar() == doctest::Approx(acc / 8.0));
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(99);
    double mean = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += r.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.05);

    Rng s1 = Rng::for_stream(7, 0);
    Rng s2 = Rng::for_stream(7, 1);
    CHECK(s1.next_u64() != s2.next_u64());

    Rng c(555);
    c.uniform();
    c.normal();
    std::string st = c.state_string();
    double next = c.uniform();
    Rng d(0);
    d.set_state(st);
    CHECK(d.uniform() == next);
}
