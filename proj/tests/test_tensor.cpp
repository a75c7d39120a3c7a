#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "gren/rng.hpp"
#include "gren/tensor.hpp"

using namespace gren;

namespace {

// Central difference on one coordinate of a leaf, via a fresh forward pass.
double fd(const std::function<double()>& f, Tensor leaf, std::size_t i, double step = 1e-6) {
    auto d = leaf.mutable_data();
    const double orig = d[i];
    d[i] = orig + step;
    const double fp = f();
    d[i] = orig - step;
    const double fm = f();
    d[i] = orig;
    return (fp - fm) / (2.0 * step);
}

double rel_err(double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
}

Tensor random_leaf(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(v), true);
}

// Checks every coordinate of every leaf of a scalar-valued builder.
void check_all_grads(const std::function<Tensor()>& build, std::vector<Tensor> leaves,
                     double tol = 1e-6, double step = 1e-6) {
    for (Tensor& l : leaves) l.zero_grad();
    Tensor loss = build();
    loss.backward();
    auto value = [&] { return build().item(); };
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        Tensor& leaf = leaves[li];
        REQUIRE(leaf.has_grad());
        auto g = leaf.grad();
        for (std::size_t i = 0; i < leaf.size(); ++i) {
            const double numeric = fd(value, leaf, i, step);
            INFO("leaf ", li, " coord ", i, " analytic ", g[i], " numeric ", numeric);
            CHECK(rel_err(g[i], numeric) < tol);
        }
    }
}

}  // namespace

TEST_CASE("tensor construction and accessors") {
    Tensor z = Tensor::zeros({2, 3}, true);
    CHECK(z.shape() == Shape{2, 3});
    CHECK(z.size() == 6);
    CHECK(z.is_leaf());
    CHECK(z.requires_grad());
    for (double v : z.data()) CHECK(v == 0.0);

    Tensor f = Tensor::full({4}, 2.5);
    CHECK_FALSE(f.requires_grad());
    CHECK(f.data()[3] == 2.5);

    Tensor s = Tensor::scalar(7.0);
    CHECK(s.item() == 7.0);
    CHECK(s.size() == 1);

    Tensor t = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
    CHECK(t.data()[2] == 3.0);

    Tensor undef;
    CHECK_FALSE(undef.defined());
    CHECK_THROWS(undef.size());

    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}, false), std::invalid_argument);
    CHECK_THROWS(t.item());  // not a scalar
}

TEST_CASE("mutable_data is leaf-only") {
    Tensor a = Tensor::from_data({2}, {1, 2}, true);
    CHECK_NOTHROW(a.mutable_data());
    Tensor b = a + a;
    CHECK_FALSE(b.is_leaf());
    CHECK_THROWS(b.mutable_data());
}

TEST_CASE("backward: linear and quadratic leaves") {
    Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    Tensor loss = sum(w);
    loss.backward();
    for (double g : w.grad()) CHECK(g == 1.0);

    w.zero_grad();
    Tensor q = sum(w * w);
    q.backward();
    auto g = w.grad();
    auto d = w.data();
    for (std::size_t i = 0; i < 3; ++i) CHECK(g[i] == doctest::Approx(2.0 * d[i]).epsilon(1e-12));
}

TEST_CASE("backward: rejects non-scalars, no-grad roots, and reuse") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor v = w * w;
    CHECK_THROWS_AS(v.backward(), std::invalid_argument);  // non-scalar

    Tensor c = Tensor::scalar(3.0);  // no grad anywhere
    CHECK_THROWS_AS(c.backward(), std::invalid_argument);

    Tensor loss = sum(w * w);
    loss.backward();
    CHECK_THROWS_WITH_AS(loss.backward(), doctest::Contains("consumed"), std::logic_error);
}

TEST_CASE("backward: reusing a consumed interior node is rejected") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor mid = w * w;
    sum(mid).backward();
    Tensor second = sum(mid);  // grafts a consumed node into a new graph
    CHECK_THROWS_WITH_AS(second.backward(), doctest::Contains("consumed"), std::logic_error);
}

TEST_CASE("backward: fan-out accumulates gradients") {
    Tensor x = Tensor::from_data({4}, {0.3, -0.7, 1.1, 2.0}, true);
    // f = sum(x*x + x): grad 2x + 1
    Tensor loss = sum(x * x + x);
    loss.backward();
    auto g = x.grad();
    auto d = x.data();
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(g[i] == doctest::Approx(2.0 * d[i] + 1.0).epsilon(1e-12));
    }
}

TEST_CASE("backward: gradients accumulate across graphs until zero_grad") {
    Tensor x = Tensor::from_data({2}, {1.0, 2.0}, true);
    sum(x).backward();
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 2.0);
    x.zero_grad();
    sum(x).backward();
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("elementwise forward values") {
    Tensor x = Tensor::from_data({3}, {-1.0, 0.0, 2.0}, false);
    Tensor rt = relu(x);
    auto r = rt.data();
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
    CHECK(r[2] == 2.0);

    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    const double sat = sigmoid(Tensor::scalar(-50.0)).item();
    CHECK(sat > 0.0);
    CHECK(sat <= 1e-20);
    // strictly inside (0,1) even at extreme inputs
    CHECK(sigmoid(Tensor::scalar(1e6)).item() < 1.0);
    CHECK(sigmoid(Tensor::scalar(-1e6)).item() > 0.0);

    CHECK(gren::log(Tensor::scalar(1.0)).item() == 0.0);
    CHECK_THROWS_AS(gren::log(Tensor::scalar(0.0)), std::domain_error);
    CHECK(gren::exp(Tensor::scalar(0.0)).item() == 1.0);
    CHECK(sqrt_t(Tensor::scalar(9.0)).item() == 3.0);

    Tensor ct = clamp(Tensor::from_data({3}, {-2.0, 0.5, 3.0}, false), 0.0, 1.0);
    auto c = ct.data();
    CHECK(c[0] == 0.0);
    CHECK(c[1] == 0.5);
    CHECK(c[2] == 1.0);

    // log1m_exp(x) = log(1 - e^x) for x < 0
    const double v = log1m_exp(Tensor::scalar(-0.5)).item();
    CHECK(v == doctest::Approx(std::log(1.0 - std::exp(-0.5))).epsilon(1e-12));
}

TEST_CASE("gradients: elementwise chain ops") {
    Rng rng(11);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_leaf(rng, {4}, 0.2, 0.9);  // safely inside domains
        check_all_grads([&] { return sum(gren::log(x)); }, {x});
        check_all_grads([&] { return sum(gren::exp(x)); }, {x});
        check_all_grads([&] { return sum(sqrt_t(x)); }, {x});
        check_all_grads([&] { return sum(sigmoid(x)); }, {x});
        check_all_grads([&] { return mean(x * x); }, {x});
        check_all_grads([&] { return sum(scale(x, -1.7)); }, {x});
        check_all_grads([&] { return sum(offset(neg(x), 2.0)); }, {x});
        // log1m_exp accepts scalars only (it closes over the bag sum)
        check_all_grads([&] { return log1m_exp(neg(sum(sigmoid(x)))); }, {x});
    }
}

TEST_CASE("gradients: binary ops and fan-out") {
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = random_leaf(rng, {3, 2});
        Tensor b = random_leaf(rng, {3, 2});
        check_all_grads([&] { return sum(a + b); }, {a, b});
        check_all_grads([&] { return sum(a - b); }, {a, b});
        check_all_grads([&] { return sum(a * b); }, {a, b});
        check_all_grads([&] { return sum((a + b) * (a - b)); }, {a, b});
    }
}

TEST_CASE("gradients: relu away from the kink; subgradient 0 at 0") {
    Tensor x = Tensor::from_data({4}, {-0.8, -0.1, 0.3, 1.4}, true);
    check_all_grads([&] { return sum(relu(x)); }, {x});

    Tensor z = Tensor::from_data({1}, {0.0}, true);
    sum(relu(z)).backward();
    CHECK(z.grad()[0] == 0.0);
}

TEST_CASE("gradients: clamp passes through inside, blocks outside") {
    Tensor x = Tensor::from_data({3}, {-2.0, 0.5, 3.0}, true);
    sum(clamp(x, 0.0, 1.0)).backward();
    auto g = x.grad();
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 1.0);
    CHECK(g[2] == 0.0);
}

TEST_CASE("gradients: sigmoid at 0 is 0.25") {
    Tensor x = Tensor::from_data({1}, {0.0}, true);
    sum(sigmoid(x)).backward();
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("reshape and slice_channel route gradients") {
    Rng rng(13);
    Tensor x = random_leaf(rng, {2, 3, 2});
    check_all_grads([&] { return sum(reshape(x, {3, 4})); }, {x});
    check_all_grads([&] { return sum(slice_channel(x, 1) * slice_channel(x, 1)); }, {x});
    CHECK_THROWS_AS(reshape(x, {5}), std::invalid_argument);
    CHECK_THROWS_AS(slice_channel(x, 2), std::invalid_argument);

    auto s = slice_channel(x, 0);
    CHECK(s.shape() == Shape{3, 2});
    for (std::size_t i = 0; i < 6; ++i) CHECK(s.data()[i] == x.data()[i]);
}

TEST_CASE("upsample2x forward and gradient") {
    Tensor x = Tensor::from_data({1, 2, 2}, {1, 2, 3, 4}, true);
    Tensor u = upsample2x(x);
    CHECK(u.shape() == Shape{1, 4, 4});
    const std::vector<double> expect = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
    for (std::size_t i = 0; i < 16; ++i) CHECK(u.data()[i] == expect[i]);

    Rng rng(14);
    Tensor y = random_leaf(rng, {2, 3, 3});
    check_all_grads([&] { return sum(upsample2x(y) * upsample2x(y)); }, {y});
}

TEST_CASE("masked_avg_pool matches loop oracle; empty mask rejected") {
    Rng rng(15);
    Tensor f = random_leaf(rng, {4, 6, 6});
    std::vector<double> mv(36, 0.0);
    for (double& m : mv) m = rng.uniform() < 0.4 ? 1.0 : 0.0;
    mv[7] = 1.0;  // never empty
    Tensor mask = Tensor::from_data({6, 6}, mv, false);

    Tensor pooled = masked_avg_pool(f, mask);
    CHECK(pooled.shape() == Shape{4});
    double count = 0.0;
    for (double m : mv) count += m;
    for (std::size_t c = 0; c < 4; ++c) {
        double s = 0.0;
        for (std::size_t i = 0; i < 36; ++i) s += f.data()[c * 36 + i] * mv[i];
        CHECK(pooled.data()[c] == doctest::Approx(s / count).epsilon(1e-12));
    }
    check_all_grads([&] { return sum(masked_avg_pool(f, mask) * masked_avg_pool(f, mask)); }, {f});

    // constant field -> the constant; full mask -> global average
    Tensor c3 = Tensor::full({2, 3, 3}, 3.0);
    Tensor m1 = Tensor::full({3, 3}, 1.0);
    Tensor pct = masked_avg_pool(c3, m1);
    CHECK(pct.data()[0] == doctest::Approx(3.0).epsilon(1e-12));

    Tensor empty = Tensor::zeros({6, 6});
    CHECK_THROWS_AS(masked_avg_pool(f, empty), std::invalid_argument);
    Tensor frac = Tensor::full({6, 6}, 0.5);
    CHECK_THROWS_AS(masked_avg_pool(f, frac), std::invalid_argument);  // not {0,1}
}

TEST_CASE("l2_normalize values and gradient") {
    Tensor v = Tensor::from_data({2}, {3.0, 4.0}, false);
    Tensor nt = l2_normalize(v, 1e-12);
    CHECK(nt.data()[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(nt.data()[1] == doctest::Approx(0.8).epsilon(1e-12));

    Tensor z = Tensor::zeros({3});
    Tensor zn = l2_normalize(z, 1e-12);
    for (double x : zn.data()) CHECK(x == 0.0);

    Rng rng(16);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = random_leaf(rng, {8});
        // weight the coordinates so the functional is not the constant ||x/||x|| || = 1
        Tensor w = random_leaf(rng, {8});
        w = Tensor::from_data({8}, std::vector<double>(w.data().begin(), w.data().end()), false);
        check_all_grads([&] { return sum(l2_normalize(x, 1e-12) * w); }, {x});
    }
}

TEST_CASE("euclidean_distance: values, axioms, gradient") {
    Tensor a = Tensor::from_data({2}, {0.0, 0.0}, false);
    Tensor b = Tensor::from_data({2}, {3.0, 4.0}, false);
    CHECK(euclidean_distance(a, b).item() == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(euclidean_distance(a, a).item() == 0.0);
    CHECK_THROWS_AS(euclidean_distance(a, Tensor::zeros({3})), std::invalid_argument);

    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor x = random_leaf(rng, {5});
        Tensor y = random_leaf(rng, {5});
        Tensor z = random_leaf(rng, {5});
        const double dxy = euclidean_distance(x, y).item();
        const double dyx = euclidean_distance(y, x).item();
        const double dxz = euclidean_distance(x, z).item();
        const double dzy = euclidean_distance(z, y).item();
        CHECK(dxy == doctest::Approx(dyx).epsilon(1e-12));
        CHECK(dxy >= 0.0);
        CHECK(dxy <= dxz + dzy + 1e-9);
        double sq = 0.0;
        for (std::size_t i = 0; i < 5; ++i) {
            const double d = x.data()[i] - y.data()[i];
            sq += d * d;
        }
        CHECK(dxy * dxy == doctest::Approx(sq).epsilon(1e-12));
        check_all_grads([&] { return euclidean_distance(x, y); }, {x, y});
    }

    // zero gradient at a == b (the sqrt singularity)
    Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    Tensor q = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    euclidean_distance(p, q).backward();
    for (double g : p.grad()) CHECK(g == 0.0);
    for (double g : q.grad()) CHECK(g == 0.0);
}

TEST_CASE("cosine_similarity: values and gradient") {
    Tensor a = Tensor::from_data({2}, {1.0, 0.0}, false);
    Tensor b = Tensor::from_data({2}, {0.0, 1.0}, false);
    CHECK(cosine_similarity(a, b, 1e-12).item() == 0.0);
    Tensor c = Tensor::from_data({3}, {1.0, -2.0, 0.5}, false);
    CHECK(cosine_similarity(c, c, 1e-12).item() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(cosine_similarity(a, Tensor::zeros({3}), 1e-12), std::invalid_argument);

    Rng rng(18);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor x = random_leaf(rng, {6});
        Tensor y = random_leaf(rng, {6});
        double dot = 0.0, nx = 0.0, ny = 0.0;
        for (std::size_t i = 0; i < 6; ++i) {
            dot += x.data()[i] * y.data()[i];
            nx += x.data()[i] * x.data()[i];
            ny += y.data()[i] * y.data()[i];
        }
        const double expect = dot / std::max(std::sqrt(nx) * std::sqrt(ny), 1e-12);
        CHECK(cosine_similarity(x, y, 1e-12).item() == doctest::Approx(expect).epsilon(1e-11));
        CHECK(std::abs(cosine_similarity(x, y, 1e-12).item()) <= 1.0 + 1e-12);
        check_all_grads([&] { return cosine_similarity(x, y, 1e-12); }, {x, y});
    }
}

// ---- conv2d ----------------------------------------------------------------

namespace {

// Direct cross-correlation, six nested loops, zero padding.
std::vector<double> conv_oracle(std::span<const double> in, std::size_t N, std::size_t C,
                                std::size_t H, std::size_t W, std::span<const double> wt,
                                std::size_t F, std::size_t kh, std::size_t kw,
                                std::span<const double> bias, std::size_t stride,
                                std::size_t pad, std::size_t Ho, std::size_t Wo) {
    std::vector<double> out(N * F * Ho * Wo);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t oy = 0; oy < Ho; ++oy)
                for (std::size_t ox = 0; ox < Wo; ++ox) {
                    double acc = bias[f];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < kh; ++ky)
                            for (std::size_t kx = 0; kx < kw; ++kx) {
                                const std::ptrdiff_t iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
                                const std::ptrdiff_t ix =
                                    static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(H) ||
                                    ix >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                acc += in[((n * C + c) * H + iy) * W + ix] *
                                       wt[((f * C + c) * kh + ky) * kw + kx];
                            }
                    out[((n * F + f) * Ho + oy) * Wo + ox] = acc;
                }
    return out;
}

}  // namespace

TEST_CASE("conv2d: pinned small cases") {
    Tensor ones_in = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor ones_w = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor zero_b = Tensor::zeros({1});
    Tensor out = conv2d(ones_in, ones_w, zero_b, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == 9.0);

    // 1x1 identity kernel
    Rng rng(19);
    Tensor x = random_leaf(rng, {1, 1, 4, 5});
    Tensor idw = Tensor::full({1, 1, 1, 1}, 1.0);
    Tensor idout = conv2d(x, idw, zero_b, 1, 0);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(idout.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d: rejects bad geometry") {
    Tensor in = Tensor::zeros({1, 2, 6, 6});
    Tensor w = Tensor::zeros({3, 2, 3, 3});
    Tensor b = Tensor::zeros({3});
    // (6 + 0 - 3) % 2 != 0
    CHECK_THROWS_WITH_AS(conv2d(in, w, b, 2, 0), doctest::Contains("exact division"),
                         std::invalid_argument);
    Tensor wbadc = Tensor::zeros({3, 4, 3, 3});
    CHECK_THROWS_AS(conv2d(in, wbadc, b, 1, 0), std::invalid_argument);
    Tensor bbad = Tensor::zeros({2});
    CHECK_THROWS_AS(conv2d(in, w, bbad, 1, 0), std::invalid_argument);
    Tensor wbig = Tensor::zeros({3, 2, 8, 8});
    CHECK_THROWS_AS(conv2d(in, wbig, b, 1, 0), std::invalid_argument);  // kernel > padded input
}

TEST_CASE("conv2d: forward matches brute-force oracle over a shape sweep") {
    Rng rng(20);
    int cases = 0;
    for (std::size_t N : {1, 2})
        for (std::size_t C : {1, 3, 4})
            for (std::size_t F : {1, 2})
                for (std::size_t H : {4, 7, 9})
                    for (std::size_t k : {1, 2, 3})
                        for (std::size_t stride : {1, 2, 3})
                            for (std::size_t pad : {0, 1}) {
                                const std::size_t W = H;  // square probes
                                if (k > H + 2 * pad) continue;
                                if ((H + 2 * pad - k) % stride != 0) continue;
                                const std::size_t Ho = (H + 2 * pad - k) / stride + 1;
                                Tensor in = random_leaf(rng, {N, C, H, W});
                                Tensor wt = random_leaf(rng, {F, C, k, k});
                                Tensor bs = random_leaf(rng, {F});
                                Tensor out = conv2d(in, wt, bs, stride, pad);
                                CHECK(out.shape() == Shape{N, F, Ho, Ho});
                                auto expect = conv_oracle(in.data(), N, C, H, W, wt.data(), F,
                                                          k, k, bs.data(), stride, pad, Ho, Ho);
                                for (std::size_t i = 0; i < expect.size(); ++i) {
                                    CHECK(out.data()[i] ==
                                          doctest::Approx(expect[i]).epsilon(1e-12));
                                }
                                ++cases;
                            }
    CHECK(cases > 40);
}

TEST_CASE("conv2d: gradients match finite differences") {
    Rng rng(21);
    struct Cfg {
        std::size_t N, C, F, H, k, stride, pad;
    };
    // covers stride 1 and 2, padding 0 and 1, multi-channel, multi-batch
    const Cfg cfgs[] = {
        {1, 1, 1, 4, 2, 2, 0}, {1, 2, 2, 4, 2, 2, 0}, {2, 2, 1, 5, 3, 1, 1},
        {1, 3, 2, 4, 3, 1, 1}, {1, 2, 2, 5, 1, 1, 0}, {2, 1, 2, 5, 3, 2, 1},
    };
    for (const Cfg& c : cfgs) {
        Tensor in = random_leaf(rng, {c.N, c.C, c.H, c.H});
        Tensor wt = random_leaf(rng, {c.F, c.C, c.k, c.k});
        Tensor bs = random_leaf(rng, {c.F});
        INFO("N=", c.N, " C=", c.C, " F=", c.F, " H=", c.H, " k=", c.k, " s=", c.stride,
             " p=", c.pad);
        check_all_grads(
            [&] {
                Tensor o = conv2d(in, wt, bs, c.stride, c.pad);
                return sum(o * o);  // non-uniform upstream gradient
            },
            {in, wt, bs}, 1e-5);
    }
}

TEST_CASE("conv2d: composed two-layer gradient (regression for chained backward)") {
    Rng rng(22);
    Tensor in = Tensor::from_data({1, 1, 4, 4}, [&] {
        std::vector<double> v(16);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        return v;
    }(), false);
    Tensor w1 = random_leaf(rng, {2, 1, 2, 2});
    Tensor b1 = random_leaf(rng, {2});
    Tensor w2 = random_leaf(rng, {3, 2, 2, 2});
    Tensor b2 = random_leaf(rng, {3});
    check_all_grads(
        [&] {
            Tensor h = relu(conv2d(in, w1, b1, 2, 0));
            Tensor o = sigmoid(conv2d(h, w2, b2, 1, 0));
            return sum(o * o);
        },
        {w1, b1, w2, b2}, 1e-5);
}

// ---- grad_check API ----------------------------------------------------------

TEST_CASE("grad_check: quadratic is exact to roundoff") {
    Tensor w = Tensor::from_data({6}, {0.4, -1.2, 2.0, 0.1, -0.6, 1.5}, true);
    auto rep = grad_check([&] { return sum(w * w); }, {{"w", w}});
    CHECK(rep.max_rel_error < 1e-9);
    CHECK(rep.coords_checked == 6);
}

TEST_CASE("grad_check: sigmoid chain") {
    Rng rng(23);
    Tensor w = random_leaf(rng, {8});
    auto rep = grad_check([&] { return sum(sigmoid(w) * sigmoid(w)); }, {{"w", w}});
    CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("grad_check: subsamples large parameters deterministically") {
    Rng rng(24);
    Tensor w = random_leaf(rng, {100});
    GradCheckOptions opts;
    opts.max_coords_per_param = 8;
    auto r1 = grad_check([&] { return sum(w * w); }, {{"w", w}}, opts);
    auto r2 = grad_check([&] { return sum(w * w); }, {{"w", w}}, opts);
    CHECK(r1.coords_checked == 8);
    CHECK(r1.max_rel_error == r2.max_rel_error);
    CHECK(r1.worst_coord == r2.worst_coord);
}

TEST_CASE("grad_check: flags a deliberately wrong backward rule") {
    Tensor w = Tensor::from_data({4}, {0.5, -0.3, 1.2, 0.8}, true);
    auto broken_square = [&](const Tensor& x) {
        return make_unary_op(
            x, x.shape(), "broken_square",
            [](std::span<const double> in, std::span<double> out) {
                for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
            },
            [](std::span<const double> in, std::span<const double>, std::span<const double> gy,
               std::span<double> gx) {
                for (std::size_t i = 0; i < in.size(); ++i) gx[i] += 3.0 * in[i] * gy[i];
            });
    };
    auto rep = grad_check([&] { return sum(broken_square(w)); }, {{"w", w}});
    CHECK(rep.max_rel_error > 0.1);  // 3x vs 2x rule: ~33% relative error
}

TEST_CASE("grad_check: rejects non-finite objectives") {
    Tensor w = Tensor::from_data({1}, {800.0}, true);
    CHECK_THROWS_AS(grad_check([&] { return sum(gren::exp(w)); }, {{"w", w}}),
                    std::domain_error);
}
