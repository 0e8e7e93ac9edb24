#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <tuple>

#include "segkc/tensor.hpp"
#include "testutil.hpp"

using namespace segkc;
using testutil::approx_eq;
using testutil::fd_check;
using testutil::random_tensor;
using testutil::random_tensor_away_from_zero;

namespace {

// Direct 6-loop convolution; the independent route the implementation is
// checked against.
std::vector<real> conv2d_naive(const Tensor& input, const Tensor& kernel, int stride,
                               int padding) {
    const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
    const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = (h + 2 * padding - kh) / stride + 1;
    const int ow = (w + 2 * padding - kw) / stride + 1;
    const auto iv = input.values();
    const auto kv = kernel.values();
    std::vector<real> out(static_cast<std::size_t>(n) * co * oh * ow, 0);
    for (int b = 0; b < n; ++b)
        for (int o = 0; o < co; ++o)
            for (int oy = 0; oy < oh; ++oy)
                for (int ox = 0; ox < ow; ++ox) {
                    real acc = 0;
                    for (int c = 0; c < ci; ++c)
                        for (int ky = 0; ky < kh; ++ky)
                            for (int kx = 0; kx < kw; ++kx) {
                                const int iy = oy * stride + ky - padding;
                                const int ix = ox * stride + kx - padding;
                                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                                acc += iv[((static_cast<std::size_t>(b) * ci + c) * h + iy) * w +
                                          ix] *
                                       kv[((static_cast<std::size_t>(o) * ci + c) * kh + ky) *
                                              kw +
                                          kx];
                            }
                    out[((static_cast<std::size_t>(b) * co + o) * oh + oy) * ow + ox] = acc;
                }
    return out;
}

// Scalar bilinear formula, align-corners-false.
real bilinear_ref(const std::vector<real>& img, int h, int w, int oy, int ox, int oh, int ow) {
    auto tap = [](int d, int in, int out) {
        const double src = (d + 0.5) * static_cast<double>(in) / out - 0.5;
        const double f = std::floor(src);
        return std::tuple<int, int, double>{
            std::clamp(static_cast<int>(f), 0, in - 1),
            std::clamp(static_cast<int>(f) + 1, 0, in - 1), src - f};
    };
    const auto [y0, y1, dy] = tap(oy, h, oh);
    const auto [x0, x1, dx] = tap(ox, w, ow);
    const double v00 = img[static_cast<std::size_t>(y0) * w + x0];
    const double v01 = img[static_cast<std::size_t>(y0) * w + x1];
    const double v10 = img[static_cast<std::size_t>(y1) * w + x0];
    const double v11 = img[static_cast<std::size_t>(y1) * w + x1];
    return static_cast<real>((1 - dy) * ((1 - dx) * v00 + dx * v01) +
                             dy * ((1 - dx) * v10 + dx * v11));
}

}  // namespace

TEST_CASE("tensor construction and invariants") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.shape() == std::vector<int>{2, 3});
    CHECK_THROWS_AS(Tensor::from_values({2, 2}, {1, 2, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_values({1}, {std::numeric_limits<real>::quiet_NaN()}),
                    ValueError);
    CHECK_THROWS_AS(Tensor::from_values({1}, {std::numeric_limits<real>::infinity()}),
                    ValueError);
    CHECK(Tensor::scalar(3.5).item() == doctest::Approx(3.5));
}

TEST_CASE("non-finite op results raise instead of propagating") {
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS(mul(big, big), ValueError);
    Tensor neg = Tensor::full({2}, -1.0);
    CHECK_THROWS_AS(segkc::log(neg), ValueError);
    CHECK_THROWS_AS(segkc::exp(Tensor::full({1}, 1000.0)), ValueError);
}

TEST_CASE("backward: linear and quadratic cases") {
    Rng rng(7);
    Tensor x = random_tensor({3, 4}, rng);

    {
        GraphTape tape;
        Tensor loss = sum(x);
        tape.backward(loss);
        for (real g : x.grad()) CHECK(g == doctest::Approx(1.0));
    }
    x.zero_grad();
    {
        GraphTape tape;
        Tensor loss = sum(mul(x, x));
        tape.backward(loss);
        const auto xv = x.values();
        const auto gv = x.grad();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            CHECK(gv[i] == doctest::Approx(2 * xv[i]));
        }
    }
}

TEST_CASE("backward contract errors") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    {
        GraphTape tape;
        Tensor y = mul(x, x);
        CHECK_THROWS_AS(tape.backward(y), ContractError);  // non-scalar root
    }
    {
        GraphTape tape;
        Tensor c = Tensor::scalar(1.0);
        CHECK_THROWS_AS(tape.backward(c), ContractError);  // not on the tape
    }
    CHECK_THROWS_AS(backward(Tensor::scalar(0.0)), ContractError);  // no active tape
}

TEST_CASE("gradients accumulate additively across uses") {
    Tensor x = Tensor::from_values({2}, {1.5, -0.5}, true);
    GraphTape tape;
    Tensor loss = sum(add(x, x));
    tape.backward(loss);
    for (real g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("unused requires_grad tensors get zero grads after backward") {
    Tensor x = Tensor::from_values({2}, {1, 2}, true);
    Tensor y = Tensor::from_values({2}, {3, 4}, true);
    GraphTape tape;
    Tensor used = sum(x);
    Tensor unused = sum(y);
    (void)unused;
    tape.backward(used);
    REQUIRE(y.has_grad());
    for (real g : y.grad()) CHECK(g == 0.0);
}

TEST_CASE("conv2d spec examples") {
    // all-ones 3x3 against all-ones 3x3 kernel collapses to a single 9
    Tensor ones = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
    Tensor out = conv2d(ones, k, 1, 0);
    CHECK(out.shape() == std::vector<int>{1, 1, 1, 1});
    CHECK(out.item() == doctest::Approx(9.0));

    // identity 1x1 kernel
    Rng rng(3);
    Tensor x = random_tensor({2, 1, 4, 5}, rng, false);
    Tensor id = Tensor::full({1, 1, 1, 1}, 1.0);
    Tensor y = conv2d(x, id, 1, 0);
    const auto xv = x.values();
    const auto yv = y.values();
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(yv[i] == xv[i]);

    // random case against the naive 6-loop oracle
    Tensor input = random_tensor({1, 2, 5, 5}, rng, false);
    Tensor kernel = random_tensor({3, 2, 3, 3}, rng, false);
    Tensor got = conv2d(input, kernel, 1, 1);
    const auto want = conv2d_naive(input, kernel, 1, 1);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) {
        CHECK(approx_eq(got.values()[i], want[i], 1e-6));
    }
}

TEST_CASE("conv2d agrees with the naive oracle over strides, paddings and shapes") {
    Rng rng(11);
    const int shapes[][4] = {{1, 1, 3, 3}, {2, 3, 6, 5}, {1, 4, 8, 8}, {2, 4, 8, 8}};
    for (const auto& s : shapes) {
        for (int stride : {1, 2}) {
            for (int padding : {0, 1}) {
                for (int ksz : {1, 3}) {
                    Tensor input = random_tensor({s[0], s[1], s[2], s[3]}, rng, false);
                    Tensor kernel = random_tensor({2, s[1], ksz, ksz}, rng, false);
                    Tensor got = conv2d(input, kernel, stride, padding);
                    const auto want = conv2d_naive(input, kernel, stride, padding);
                    REQUIRE(got.size() == want.size());
                    for (std::size_t i = 0; i < want.size(); ++i) {
                        CHECK(approx_eq(got.values()[i], want[i], 1e-6));
                    }
                }
            }
        }
    }
}

TEST_CASE("conv2d shape errors") {
    Tensor x = Tensor::full({1, 2, 4, 4}, 1.0);
    CHECK_THROWS_AS(conv2d(x, Tensor::full({1, 3, 3, 3}, 1.0), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor::full({1, 2, 5, 5}, 1.0), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(x, Tensor::full({1, 2, 3, 3}, 1.0), 0, 0), ValueError);
}

TEST_CASE("bilinear_resize spec examples") {
    Rng rng(5);
    Tensor x = random_tensor({1, 2, 3, 4}, rng, false);
    Tensor same = bilinear_resize(x, 3, 4);
    for (std::size_t i = 0; i < x.size(); ++i) {
        CHECK(same.values()[i] == x.values()[i]);  // exact
    }

    Tensor flat = Tensor::full({1, 1, 2, 2}, 0.7);
    Tensor up = bilinear_resize(flat, 5, 7);
    for (real v : up.values()) CHECK(v == doctest::Approx(0.7));  // constants stay constant

    Tensor quad = Tensor::from_values({1, 1, 2, 2}, {0, 1, 2, 3});
    Tensor four = bilinear_resize(quad, 4, 4);
    const std::vector<real> img{0, 1, 2, 3};
    for (int y = 0; y < 4; ++y) {
        for (int x2 = 0; x2 < 4; ++x2) {
            const real want = bilinear_ref(img, 2, 2, y, x2, 4, 4);
            CHECK(approx_eq(four.values()[static_cast<std::size_t>(y) * 4 + x2], want, 1e-6));
        }
    }
}

TEST_CASE("softmax_t spec examples and simplex property") {
    Tensor equal = Tensor::full({1, 4, 1, 1}, 2.5);
    Tensor p = softmax_t(equal, 1.7, 1);
    for (real v : p.values()) CHECK(v == doctest::Approx(0.25));

    Tensor two = Tensor::from_values({1, 2}, {std::log(real(1)), std::log(real(2))});
    Tensor q = softmax_t(two, 1.0, 1);
    CHECK(q.values()[0] == doctest::Approx(1.0 / 3).epsilon(1e-9));
    CHECK(q.values()[1] == doctest::Approx(2.0 / 3).epsilon(1e-9));

    Tensor spread = Tensor::from_values({1, 2}, {10, 0});
    Tensor r = softmax_t(spread, 1e6, 1);
    CHECK(std::fabs(r.values()[0] - 0.5) < 1e-5);
    CHECK(std::fabs(r.values()[1] - 0.5) < 1e-5);

    CHECK_THROWS_AS(softmax_t(two, 0.0, 1), ValueError);
    CHECK_THROWS_AS(softmax_t(two, -1.0, 1), ValueError);

    // simplex property on random logits, including extreme magnitudes
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor logits = random_tensor({2, 5, 2, 2}, rng, false, -80, 80);
        Tensor probs = softmax_t(logits, trial % 2 == 0 ? 0.07 : 3.0, 1);
        for (real v : probs.values()) CHECK(v >= 0);
        for (int b = 0; b < 2; ++b)
            for (int y = 0; y < 2; ++y)
                for (int x = 0; x < 2; ++x) {
                    real s = 0;
                    for (int c = 0; c < 5; ++c) {
                        s += probs.values()[((static_cast<std::size_t>(b) * 5 + c) * 2 + y) * 2 +
                                            x];
                    }
                    CHECK(std::fabs(s - 1.0) < 1e-6);
                }
    }
}

TEST_CASE("log_softmax_t matches log(softmax_t)") {
    Rng rng(29);
    Tensor logits = random_tensor({1, 6}, rng, false, -5, 5);
    Tensor lp = log_softmax_t(logits, 2.0, 1);
    Tensor p = softmax_t(logits, 2.0, 1);
    for (std::size_t i = 0; i < lp.size(); ++i) {
        CHECK(approx_eq(lp.values()[i], std::log(p.values()[i]), 1e-9));
    }
}

TEST_CASE("argmax ties resolve to the lowest class index") {
    Tensor t = Tensor::from_values({1, 3, 1, 2}, {5, 1, 5, 7, 2, 7});
    IntMap am = argmax_axis(t, 1);
    CHECK(am.shape == std::vector<int>{1, 1, 2});
    CHECK(am.v[0] == 0);  // 5 vs 2 vs 5: lowest wins
    CHECK(am.v[1] == 1);  // 1 vs 7 vs 7
}

TEST_CASE("concat along the channel axis") {
    Tensor a = Tensor::from_values({1, 2, 1, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from_values({1, 1, 1, 2}, {9, 8});
    Tensor c = concat(a, b, 1);
    CHECK(c.shape() == std::vector<int>{1, 3, 1, 2});
    const std::vector<real> want{1, 2, 3, 4, 9, 8};
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(c.values()[i] == want[i]);
    CHECK_THROWS_AS(concat(a, Tensor::full({1, 1, 2, 2}, 0.0), 1), ShapeError);
}

TEST_CASE("stop_gradient: same values, no gradient flow") {
    Tensor x = Tensor::from_values({3}, {1, 2, 3}, true);
    GraphTape tape;
    Tensor d = stop_gradient(x);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(d.values()[i] == x.values()[i]);
    CHECK_FALSE(d.requires_grad());
    Tensor loss = add(sum(mul(d, d)), sum(x));
    tape.backward(loss);
    for (real g : x.grad()) CHECK(g == doctest::Approx(1.0));  // only the sum(x) path
}

TEST_CASE("reduce over chosen axes") {
    Tensor t = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor s0 = sum(t, {0});
    CHECK(s0.shape() == std::vector<int>{3});
    CHECK(s0.values()[0] == doctest::Approx(5));
    CHECK(s0.values()[1] == doctest::Approx(7));
    CHECK(s0.values()[2] == doctest::Approx(9));
    Tensor s1 = sum(t, {1});
    CHECK(s1.shape() == std::vector<int>{2});
    CHECK(s1.values()[0] == doctest::Approx(6));
    CHECK(s1.values()[1] == doctest::Approx(15));
    Tensor m = mean(t, {0, 1});
    CHECK(m.item() == doctest::Approx(3.5));
    CHECK(mean(t).item() == doctest::Approx(3.5));
    CHECK_THROWS_AS(sum(t, {2}), ShapeError);
    CHECK_THROWS_AS(sum(t, {0, 0}), ShapeError);
}

TEST_CASE("finite-difference gradient suite for every differentiable op") {
    const double kTol = 1e-4;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        Rng rng(1000 + trial);

        {
            Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng);
            CHECK(fd_check({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); }).max_rel <
                  kTol);
        }
        {
            Tensor a = random_tensor({2, 3}, rng);
            CHECK(fd_check({a}, [&] { return sum(scale(add_scalar(a, 0.7), -1.3)); }).max_rel <
                  kTol);
        }
        {
            Tensor a = random_tensor_away_from_zero({3, 3}, rng);
            CHECK(fd_check({a}, [&] { return sum(relu(a)); }).max_rel < kTol);
        }
        {
            Tensor a = random_tensor({2, 2}, rng, true, 0.2, 2.0);
            CHECK(fd_check({a}, [&] { return sum(segkc::log(a)); }).max_rel < kTol);
        }
        {
            Tensor a = random_tensor({2, 2}, rng);
            CHECK(fd_check({a}, [&] { return sum(segkc::exp(a)); }).max_rel < kTol);
        }
        {
            Tensor a = random_tensor({2, 3, 2}, rng);
            CHECK(fd_check({a}, [&] { return sum(mul(sum(a, {1}), sum(a, {1}))); }).max_rel <
                  kTol);
            CHECK(fd_check({a}, [&] { return sum(mul(mean(a, {0, 2}), mean(a, {0, 2}))); })
                      .max_rel < kTol);
        }
        {
            Tensor a = random_tensor({1, 2, 2, 2}, rng), b = random_tensor({1, 3, 2, 2}, rng);
            CHECK(fd_check({a, b}, [&] {
                      Tensor c = concat(a, b, 1);
                      return sum(mul(c, c));
                  }).max_rel < kTol);
        }
        {
            Tensor input = random_tensor({2, 2, 5, 4}, rng);
            Tensor kernel = random_tensor({3, 2, 3, 3}, rng);
            CHECK(fd_check({input, kernel}, [&] {
                      Tensor y = conv2d(input, kernel, 2, 1);
                      return sum(mul(y, y));
                  }).max_rel < kTol);
        }
        {
            Tensor x = random_tensor({1, 3, 2, 2}, rng);
            Tensor b = random_tensor({3}, rng);
            CHECK(fd_check({x, b}, [&] {
                      Tensor y = bias_add(x, b);
                      return sum(mul(y, y));
                  }).max_rel < kTol);
        }
        {
            Tensor x = random_tensor({1, 2, 3, 3}, rng);
            CHECK(fd_check({x}, [&] {
                      Tensor y = bilinear_resize(x, 5, 7);
                      return sum(mul(y, y));
                  }).max_rel < kTol);
            CHECK(fd_check({x}, [&] {
                      Tensor y = bilinear_resize(x, 2, 2);
                      return sum(mul(y, y));
                  }).max_rel < kTol);
        }
        {
            Tensor logits = random_tensor({2, 4, 2, 1}, rng, true, -2, 2);
            Tensor target = random_tensor({2, 4, 2, 1}, rng, false);
            CHECK(fd_check({logits}, [&] {
                      return sum(mul(softmax_t(logits, 1.7, 1), target));
                  }).max_rel < kTol);
            CHECK(fd_check({logits}, [&] {
                      return sum(mul(log_softmax_t(logits, 0.8, 1), target));
                  }).max_rel < kTol);
        }
        {
            Tensor x = random_tensor({1, 3, 2, 2}, rng);
            IntMap idx{{1, 2, 2}, {0, 2, 1, 0}};
            CHECK(fd_check({x}, [&] {
                      Tensor y = select_class(x, idx);
                      return sum(mul(y, y));
                  }).max_rel < kTol);
        }
    }
}
