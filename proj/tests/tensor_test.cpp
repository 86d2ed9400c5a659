#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"
#include "uhfsynth/tensor.hpp"

using namespace uhfsynth;
using testutil::conv2d_oracle;
using testutil::matmul_oracle;
using testutil::max_abs_diff;
using testutil::random_dyadic;
using testutil::random_tensor;

TEST_CASE("shape basics", "[tensor]") {
    Shape s{2, 3, 4};
    CHECK(s.numel() == 24);
    CHECK(s.ndim() == 3);
    CHECK(s.str() == "[2,3,4]");
    CHECK_THROWS_AS(Shape({2, 0, 4}), Error);
    CHECK_THROWS_AS(Tensor(Shape{2, 2}, {1.0, 2.0, 3.0}), Error);
}

TEST_CASE("elementwise ops", "[tensor]") {
    Tensor a(Shape{2}, {1, 2});
    Tensor b(Shape{2}, {3, 4});
    CHECK(add(a, b).data() == std::vector<real>{4, 6});
    CHECK(sub(a, a).data() == std::vector<real>{0, 0});
    CHECK(scalar_mul(a, 0).data() == std::vector<real>{0, 0});
    CHECK(mul(a, b).data() == std::vector<real>{3, 8});
    CHECK(scalar_add(a, 1.5).data() == std::vector<real>{2.5, 3.5});
    CHECK_THROWS_AS(add(a, Tensor(Shape{3}, {1, 2, 3})), Error);

    // error text names both shapes
    try {
        add(a, Tensor(Shape{3}, {1, 2, 3}));
        FAIL("expected throw");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2]") != std::string::npos);
        CHECK(msg.find("[3]") != std::string::npos);
    }
}

TEST_CASE("abs subgradient is zero at ties", "[tensor]") {
    Tensor x(Shape{3}, {-2.0, 0.0, 3.0});
    x.set_requires_grad(true);
    backward(sum(abs(x)));
    CHECK(x.grad() == std::vector<real>{-1.0, 0.0, 1.0});
}

TEST_CASE("matmul identity and hand arithmetic", "[tensor]") {
    Tensor I(Shape{2, 2}, {1, 0, 0, 1});
    Tensor A(Shape{2, 2}, {5, -2, 7, 0.5});
    CHECK(matmul(I, A).data() == A.data());

    Tensor r(Shape{1, 2}, {1, 2});
    Tensor c(Shape{2, 1}, {3, 4});
    Tensor p = matmul(r, c);
    CHECK(p.shape() == Shape{1, 1});
    CHECK(p.item() == 11.0);
}

TEST_CASE("matmul matches triple-loop oracle", "[tensor]") {
    Rng rng(101);
    Tensor a = random_tensor(Shape{5, 7}, rng);
    Tensor b = random_tensor(Shape{7, 3}, rng);
    auto want = matmul_oracle(a.data(), b.data(), 5, 7, 3);
    CHECK(max_abs_diff(matmul(a, b).data(), want) < 1e-12);

    // batched: each batch independently equals the 2-D oracle
    Tensor ab = random_tensor(Shape{2, 3, 4, 6}, rng);
    Tensor bb = random_tensor(Shape{2, 3, 6, 5}, rng);
    Tensor cb = matmul(ab, bb);
    REQUIRE(cb.shape() == Shape{2, 3, 4, 5});
    for (int64_t t = 0; t < 6; ++t) {
        std::vector<real> as(ab.data().begin() + t * 24, ab.data().begin() + (t + 1) * 24);
        std::vector<real> bs(bb.data().begin() + t * 30, bb.data().begin() + (t + 1) * 30);
        std::vector<real> cs(cb.data().begin() + t * 20, cb.data().begin() + (t + 1) * 20);
        CHECK(max_abs_diff(cs, matmul_oracle(as, bs, 4, 6, 5)) < 1e-12);
    }

    CHECK_THROWS_AS(matmul(a, Tensor(Shape{5, 3}, std::vector<real>(15, 0.0))), Error);
}

TEST_CASE("matmul gradients match oracle-derived finite differences", "[tensor]") {
    Rng rng(202);
    Tensor a0 = random_tensor(Shape{3, 4}, rng);
    Tensor b0 = random_tensor(Shape{4, 2}, rng);

    auto fa = [&](const Tensor& t) { return sum(mul(matmul(t, b0), matmul(t, b0))); };
    auto ra = grad_check(fa, a0, 1e-5, 1e-6);
    INFO("max rel err " << ra.max_rel_err << " at " << ra.worst_index);
    CHECK(ra.pass);

    auto fb = [&](const Tensor& t) { return mean(matmul(a0, t)); };
    auto rb = grad_check(fb, b0, 1e-5, 1e-6);
    CHECK(rb.pass);
}

TEST_CASE("conv2d identity kernels", "[tensor]") {
    Rng rng(303);
    Tensor x = random_tensor(Shape{2, 3, 4, 5}, rng);

    // 1x1 conv with identity weight
    std::vector<real> wi(9, 0.0);
    wi[0] = wi[4] = wi[8] = 1.0;
    Tensor w1(Shape{3, 3, 1, 1}, wi);
    CHECK(conv2d(x, w1).data() == x.data());

    // depthwise 3x3 delta kernel
    std::vector<real> wd(3 * 9, 0.0);
    for (int c = 0; c < 3; ++c) wd[static_cast<size_t>(c * 9 + 4)] = 1.0;
    Tensor w3(Shape{3, 1, 3, 3}, wd);
    CHECK(conv2d(x, w3, {}, 3).data() == x.data());
}

TEST_CASE("conv2d matches naive loop oracle", "[tensor]") {
    Rng rng(404);

    SECTION("full 3x3") {
        Tensor x = random_tensor(Shape{1, 2, 5, 5}, rng);
        Tensor w = random_tensor(Shape{4, 2, 3, 3}, rng);
        auto want = conv2d_oracle(x.data(), w.data(), nullptr, 1, 2, 5, 5, 4, 3, 1);
        CHECK(max_abs_diff(conv2d(x, w).data(), want) < 1e-12);
    }
    SECTION("grouped with bias") {
        Tensor x = random_tensor(Shape{2, 4, 3, 4}, rng);
        Tensor w = random_tensor(Shape{6, 2, 3, 3}, rng);
        Tensor b = random_tensor(Shape{6}, rng);
        auto want = conv2d_oracle(x.data(), w.data(), &b.data(), 2, 4, 3, 4, 6, 3, 2);
        CHECK(max_abs_diff(conv2d(x, w, b, 2).data(), want) < 1e-12);
    }
    SECTION("pointwise vs oracle") {
        Tensor x = random_tensor(Shape{2, 5, 4, 3}, rng);
        Tensor w = random_tensor(Shape{7, 5, 1, 1}, rng);
        auto want = conv2d_oracle(x.data(), w.data(), nullptr, 2, 5, 4, 3, 7, 1, 1);
        CHECK(max_abs_diff(conv2d(x, w).data(), want) < 1e-12);
    }
    SECTION("shape errors") {
        Tensor x = random_tensor(Shape{1, 3, 4, 4}, rng);
        CHECK_THROWS_AS(conv2d(x, random_tensor(Shape{2, 2, 3, 3}, rng)), Error);
        CHECK_THROWS_AS(conv2d(x, random_tensor(Shape{2, 3, 5, 5}, rng)), Error);
        CHECK_THROWS_AS(conv2d(x, random_tensor(Shape{2, 3, 3, 3}, rng), {}, 2), Error);
    }
}

TEST_CASE("conv2d gradients", "[tensor]") {
    Rng rng(505);
    Tensor x0 = random_tensor(Shape{1, 2, 4, 4}, rng);
    Tensor w0 = random_tensor(Shape{3, 2, 3, 3}, rng);
    Tensor b0 = random_tensor(Shape{3}, rng);

    auto fx = [&](const Tensor& t) { return sum(mul(conv2d(t, w0, b0), conv2d(t, w0, b0))); };
    CHECK(grad_check(fx, x0, 1e-5, 1e-6).pass);

    auto fw = [&](const Tensor& t) { return sum(mul(conv2d(x0, t, b0), conv2d(x0, t, b0))); };
    CHECK(grad_check(fw, w0, 1e-5, 1e-6).pass);

    auto fb = [&](const Tensor& t) { return sum(mul(conv2d(x0, w0, t), conv2d(x0, w0, t))); };
    CHECK(grad_check(fb, b0, 1e-5, 1e-6).pass);

    // grouped path
    Tensor xg = random_tensor(Shape{1, 4, 3, 3}, rng);
    Tensor wg = random_tensor(Shape{4, 1, 3, 3}, rng);
    auto fg = [&](const Tensor& t) { return sum(mul(conv2d(xg, t, {}, 4), conv2d(xg, t, {}, 4))); };
    CHECK(grad_check(fg, wg, 1e-5, 1e-6).pass);

    // pointwise fast path
    Tensor xp = random_tensor(Shape{2, 3, 3, 3}, rng);
    Tensor wp = random_tensor(Shape{5, 3, 1, 1}, rng);
    auto fp = [&](const Tensor& t) { return sum(mul(conv2d(t, wp), conv2d(t, wp))); };
    CHECK(grad_check(fp, xp, 1e-5, 1e-6).pass);
    auto fpw = [&](const Tensor& t) { return sum(mul(conv2d(xp, t), conv2d(xp, t))); };
    CHECK(grad_check(fpw, wp, 1e-5, 1e-6).pass);
}

TEST_CASE("pixel unshuffle and shuffle", "[tensor]") {
    Tensor x(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor u = pixel_unshuffle(x, 2);
    REQUIRE(u.shape() == Shape{1, 4, 1, 1});
    CHECK(u.data() == std::vector<real>{1, 2, 3, 4});
    CHECK(pixel_shuffle(u, 2).data() == x.data());

    Rng rng(606);
    Tensor r = random_tensor(Shape{2, 3, 6, 4}, rng);
    CHECK(pixel_unshuffle(r, 1).data() == r.data());
    CHECK(pixel_shuffle(r, 1).data() == r.data());
    Tensor round = pixel_shuffle(pixel_unshuffle(r, 2), 2);
    CHECK(round.data() == r.data()); // bit-exact

    // permutation: multiset preserved
    auto s1 = r.data();
    auto s2 = pixel_unshuffle(r, 2).data();
    std::sort(s1.begin(), s1.end());
    std::sort(s2.begin(), s2.end());
    CHECK(s1 == s2);

    CHECK_THROWS_AS(pixel_unshuffle(random_tensor(Shape{1, 1, 3, 4}, rng), 2), Error);
    CHECK_THROWS_AS(pixel_shuffle(random_tensor(Shape{1, 3, 4, 4}, rng), 2), Error);

    // gradient of sum(pixel_shuffle(x,2)) is all-ones
    Tensor g = random_tensor(Shape{1, 4, 2, 2}, rng);
    g.set_requires_grad(true);
    backward(sum(pixel_shuffle(g, 2)));
    CHECK(g.grad() == std::vector<real>(16, 1.0));

    auto fu = [](const Tensor& t) { return sum(mul(pixel_unshuffle(t, 2), pixel_unshuffle(t, 2))); };
    CHECK(grad_check(fu, random_tensor(Shape{1, 2, 4, 4}, rng), 1e-5, 1e-6).pass);
}

TEST_CASE("layer_norm statistics and degenerate cases", "[tensor]") {
    Rng rng(707);
    const int64_t B = 2, C = 8, H = 3, W = 4;
    Tensor x = random_tensor(Shape{B, C, H, W}, rng, -3.0, 3.0);
    Tensor gamma = Tensor::ones(Shape{C});
    Tensor beta = Tensor::zeros(Shape{C});
    Tensor y = layer_norm(x, gamma, beta);

    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < H * W; ++p) {
            real mu = 0, var = 0;
            for (int64_t c = 0; c < C; ++c) mu += y[(b * C + c) * H * W + p];
            mu /= C;
            for (int64_t c = 0; c < C; ++c) {
                real d = y[(b * C + c) * H * W + p] - mu;
                var += d * d;
            }
            var /= C;
            CHECK(std::fabs(mu) < 1e-6);
            CHECK(std::fabs(var - 1.0) < 1e-4);
        }

    // constant across channels: zero variance handled by eps
    Tensor xc = Tensor::full(Shape{1, 4, 2, 2}, 3.25);
    Tensor yc = layer_norm(xc, Tensor::ones(Shape{4}), Tensor::zeros(Shape{4}));
    for (int64_t i = 0; i < yc.numel(); ++i) CHECK(yc[i] == 0.0);

    // gamma = 0 -> output = beta broadcast
    Tensor beta2(Shape{4}, {1, 2, 3, 4});
    Tensor yb = layer_norm(x = random_tensor(Shape{1, 4, 2, 2}, rng), Tensor::zeros(Shape{4}), beta2);
    for (int64_t c = 0; c < 4; ++c)
        for (int64_t p = 0; p < 4; ++p) CHECK(yb[c * 4 + p] == beta2[c]);
}

TEST_CASE("layer_norm gradients", "[tensor]") {
    Rng rng(808);
    Tensor x0 = random_tensor(Shape{1, 5, 2, 3}, rng);
    Tensor g0 = random_tensor(Shape{5}, rng, 0.5, 1.5);
    Tensor b0 = random_tensor(Shape{5}, rng);

    auto fx = [&](const Tensor& t) {
        return sum(mul(layer_norm(t, g0, b0), layer_norm(t, g0, b0)));
    };
    CHECK(grad_check(fx, x0, 1e-5, 1e-4).pass);

    auto fg = [&](const Tensor& t) {
        return sum(mul(layer_norm(x0, t, b0), layer_norm(x0, t, b0)));
    };
    CHECK(grad_check(fg, g0, 1e-5, 1e-5).pass);

    auto fb = [&](const Tensor& t) {
        return sum(mul(layer_norm(x0, g0, t), layer_norm(x0, g0, t)));
    };
    CHECK(grad_check(fb, b0, 1e-5, 1e-5).pass);
}

TEST_CASE("softmax values and invariances", "[tensor]") {
    Tensor a(Shape{2}, {0, 0});
    CHECK(softmax(a, 0).data() == std::vector<real>{0.5, 0.5});

    Tensor b(Shape{2}, {std::log(2.0), 0.0});
    Tensor sb = softmax(b, 0);
    CHECK(std::fabs(sb[0] - 2.0 / 3.0) < 1e-12);
    CHECK(std::fabs(sb[1] - 1.0 / 3.0) < 1e-12);

    Rng rng(909);
    Tensor x = random_tensor(Shape{3, 5, 4}, rng, -10, 10);
    Tensor y = softmax(x, 1);
    for (int64_t o = 0; o < 3; ++o)
        for (int64_t in = 0; in < 4; ++in) {
            real s = 0;
            for (int64_t i = 0; i < 5; ++i) s += y[(o * 5 + i) * 4 + in];
            CHECK(std::fabs(s - 1.0) < 1e-9);
        }

    Tensor shifted = softmax(scalar_add(x, 17.5), 1);
    CHECK(max_abs_diff(shifted.data(), y.data()) < 1e-12);

    // huge inputs stay finite thanks to max subtraction
    Tensor big(Shape{3}, {1e300, 1e300, -1e300});
    Tensor sbig = softmax(big, 0);
    CHECK(std::fabs(sbig[0] - 0.5) < 1e-12);

    auto f = [](const Tensor& t) { return sum(mul(softmax(t, -1), softmax(t, -1))); };
    CHECK(grad_check(f, random_tensor(Shape{2, 6}, rng), 1e-5, 1e-5).pass);
}

TEST_CASE("activations", "[tensor]") {
    Tensor z = Tensor::scalar(0.0);
    CHECK(gelu(z).item() == 0.0);
    CHECK(uhfsynth::tanh(z).item() == 0.0);
    CHECK(std::fabs(gelu(Tensor::scalar(1.0)).item() - 0.8413447460685429) < 1e-12);

    // strict bound holds up to the point where doubles round tanh to 1
    Rng rng(111);
    Tensor x = random_tensor(Shape{64}, rng, -18, 18);
    Tensor t = uhfsynth::tanh(x);
    for (int64_t i = 0; i < t.numel(); ++i) {
        CHECK(t[i] > -1.0);
        CHECK(t[i] < 1.0);
    }
    CHECK(std::fabs(uhfsynth::tanh(Tensor::scalar(700.0)).item()) <= 1.0);

    CHECK(activation(Activation::Gelu, Tensor::scalar(1.0)).item() ==
          gelu(Tensor::scalar(1.0)).item());
    CHECK(activation(Activation::Tanh, Tensor::scalar(0.3)).item() ==
          uhfsynth::tanh(Tensor::scalar(0.3)).item());

    auto fg = [](const Tensor& t) { return sum(gelu(t)); };
    CHECK(grad_check(fg, random_tensor(Shape{32}, rng, -3, 3), 1e-5, 1e-5).pass);
    auto ft = [](const Tensor& t) { return sum(uhfsynth::tanh(t)); };
    CHECK(grad_check(ft, random_tensor(Shape{32}, rng, -3, 3), 1e-5, 1e-5).pass);
}

TEST_CASE("l2_normalize", "[tensor]") {
    Tensor v(Shape{2}, {3, 4});
    Tensor n = l2_normalize(v, 0);
    CHECK(std::fabs(n[0] - 0.6) < 1e-15);
    CHECK(std::fabs(n[1] - 0.8) < 1e-15);

    Tensor u(Shape{2}, {1, 0});
    CHECK(l2_normalize(u, 0).data() == u.data());

    Tensor z = Tensor::zeros(Shape{3});
    CHECK(l2_normalize(z, 0).data() == std::vector<real>(3, 0.0));

    Rng rng(222);
    Tensor x = random_tensor(Shape{2, 3, 5}, rng);
    Tensor y = l2_normalize(x, -1);
    for (int64_t o = 0; o < 6; ++o) {
        real ss = 0;
        for (int64_t i = 0; i < 5; ++i) ss += y[o * 5 + i] * y[o * 5 + i];
        CHECK(std::fabs(std::sqrt(ss) - 1.0) < 1e-12);
    }

    auto f = [](const Tensor& t) { return sum(mul(l2_normalize(t, -1), l2_normalize(t, -1))); };
    CHECK(grad_check(f, random_tensor(Shape{2, 7}, rng), 1e-5, 1e-4).pass);
}

TEST_CASE("structural ops", "[tensor]") {
    Rng rng(333);
    Tensor a = random_tensor(Shape{1, 2, 4, 4}, rng);
    Tensor b = random_tensor(Shape{1, 2, 4, 4}, rng);
    Tensor c = concat({a, b}, 1);
    REQUIRE(c.shape() == Shape{1, 4, 4, 4});
    CHECK(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
    CHECK(std::equal(b.data().begin(), b.data().end(), c.data().begin() + 32));

    // slice then concat of complementary slices reconstructs input
    Tensor s1 = slice(c, 1, 0, 2);
    Tensor s2 = slice(c, 1, 2, 2);
    CHECK(concat({s1, s2}, 1).data() == c.data());
    CHECK(s1.data() == a.data());

    Tensor t = transpose(a, 1, 3);
    REQUIRE(t.shape() == Shape{1, 4, 4, 2});
    CHECK(transpose(t, 1, 3).data() == a.data());

    Tensor r = reshape(a, Shape{2, 16});
    CHECK(r.data() == a.data());
    CHECK_THROWS_AS(reshape(a, Shape{3, 11}), Error);
    CHECK_THROWS_AS(concat({a, random_tensor(Shape{1, 2, 3, 4}, rng)}, 1), Error);
    CHECK_THROWS_AS(slice(a, 1, 1, 5), Error);

    auto fc = [&](const Tensor& t2) {
        Tensor cc = concat({t2, b}, 1);
        return sum(mul(cc, cc));
    };
    CHECK(grad_check(fc, a, 1e-5, 1e-6).pass);
    auto fs = [&](const Tensor& t2) {
        Tensor ss = slice(t2, 2, 1, 2);
        return sum(mul(ss, ss));
    };
    CHECK(grad_check(fs, a, 1e-5, 1e-6).pass);
    auto ft = [&](const Tensor& t2) {
        Tensor tt = transpose(t2, 1, 2);
        return sum(mul(tt, tt));
    };
    CHECK(grad_check(ft, a, 1e-5, 1e-6).pass);
}

TEST_CASE("head_scale", "[tensor]") {
    Rng rng(444);
    Tensor x = random_tensor(Shape{2, 3, 4, 5}, rng);
    Tensor t(Shape{3}, {2.0, -1.0, 0.5});
    Tensor y = head_scale(x, t);
    for (int64_t b = 0; b < 2; ++b)
        for (int64_t h = 0; h < 3; ++h)
            for (int64_t i = 0; i < 20; ++i)
                CHECK(y[(b * 3 + h) * 20 + i] == x[(b * 3 + h) * 20 + i] * t[h]);

    auto fx = [&](const Tensor& u) { return sum(mul(head_scale(u, t), head_scale(u, t))); };
    CHECK(grad_check(fx, x, 1e-5, 1e-6).pass);
    auto ft = [&](const Tensor& u) { return sum(mul(head_scale(x, u), head_scale(x, u))); };
    CHECK(grad_check(ft, t, 1e-5, 1e-6).pass);
}

TEST_CASE("backward basics and accumulation", "[tensor]") {
    Rng rng(555);
    Tensor x = random_dyadic(Shape{6}, rng);
    x.set_requires_grad(true);

    backward(sum(x));
    CHECK(x.grad() == std::vector<real>(6, 1.0));

    // repeated backward accumulates on leaves
    backward(sum(x));
    CHECK(x.grad() == std::vector<real>(6, 2.0));

    x.zero_grad();
    backward(sum(mul(x, x)));
    for (int64_t i = 0; i < 6; ++i) CHECK(x.grad()[i] == 2.0 * x[i]);

    // diamond-shaped reuse: y used twice
    x.zero_grad();
    Tensor y = scalar_mul(x, 3.0);
    backward(sum(add(y, y)));
    CHECK(x.grad() == std::vector<real>(6, 6.0));

    CHECK_THROWS_AS(backward(x), Error);                   // non-scalar loss
    CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), Error); // no graph
}

TEST_CASE("no-grad mode and detach", "[tensor]") {
    Tensor x(Shape{2}, {1, 2});
    x.set_requires_grad(true);
    {
        NoGradGuard ng;
        Tensor y = scalar_mul(x, 2.0);
        CHECK_FALSE(y.requires_grad());
    }
    Tensor d = x.detach();
    CHECK_FALSE(d.requires_grad());
    Tensor z = scalar_mul(d, 2.0);
    CHECK_FALSE(z.requires_grad());
    Tensor w = scalar_mul(x, 2.0);
    CHECK(w.requires_grad());
}

TEST_CASE("non-finite outputs are rejected", "[tensor]") {
    Tensor big = Tensor::scalar(1e308);
    CHECK_THROWS_AS(mul(big, big), Error);
    try {
        scalar_mul(big, 1e10);
        FAIL("expected throw");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("scalar_mul") != std::string::npos);
    }
}

TEST_CASE("ops are deterministic across thread counts", "[tensor]") {
    Rng rng(666);
    Tensor x = random_tensor(Shape{2, 8, 13, 11}, rng);
    Tensor w = random_tensor(Shape{8, 1, 3, 3}, rng);

    set_threads(1);
    Tensor y1 = conv2d(x, w, {}, 8);
    set_threads(hardware_threads());
    Tensor y2 = conv2d(x, w, {}, 8);
    CHECK(std::memcmp(y1.data().data(), y2.data().data(),
                      y1.data().size() * sizeof(real)) == 0);

    Tensor y3 = conv2d(x, w, {}, 8);
    CHECK(std::memcmp(y2.data().data(), y3.data().data(),
                      y2.data().size() * sizeof(real)) == 0);
}

TEST_CASE("grad_check basics", "[tensor]") {
    Rng rng(777);
    auto ft = [](const Tensor& t) { return sum(uhfsynth::tanh(t)); };
    CHECK(grad_check(ft, random_tensor(Shape{16}, rng, -2, 2), 1e-5, 1e-5).pass);

    // linear function on dyadic inputs with a dyadic step: exactly zero error
    auto fs = [](const Tensor& t) { return sum(t); };
    auto rep = grad_check(fs, random_dyadic(Shape{16}, rng), 0x1p-14, 1e-12);
    CHECK(rep.max_rel_err == 0.0);
    CHECK(rep.pass);

    CHECK_THROWS_AS(grad_check(fs, random_dyadic(Shape{4}, rng), 1e-2, 1e-5), Error);

    // non-determinism is detected by double evaluation
    int calls = 0;
    auto fnd = [&calls](const Tensor& t) {
        ++calls;
        return scalar_mul(sum(t), calls == 1 ? 1.0 : 2.0);
    };
    CHECK_THROWS_AS(grad_check(fnd, random_dyadic(Shape{4}, rng), 1e-5, 1e-5), Error);
}

TEST_CASE("mac counter tracks conv and matmul", "[tensor]") {
    Rng rng(888);
    Tensor x = random_tensor(Shape{1, 4, 6, 6}, rng);
    Tensor w = random_tensor(Shape{8, 4, 3, 3}, rng);

    reset_mac_counter();
    conv2d(x, w);
    CHECK(mac_counter() == 1ull * 8 * 6 * 6 * 4 * 9);

    reset_mac_counter();
    matmul(random_tensor(Shape{3, 4, 5}, rng), random_tensor(Shape{3, 5, 2}, rng));
    CHECK(mac_counter() == 3ull * 4 * 5 * 2);

    reset_mac_counter();
    {
        NoGradGuard ng;
        conv2d(x, random_tensor(Shape{8, 2, 3, 3}, rng), {}, 2);
    }
    CHECK(mac_counter() == 1ull * 8 * 6 * 6 * 2 * 9);
}
