#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qmamba/quant.hpp"
#include "qmamba/rng.hpp"

#include <cmath>

using namespace qmamba;

namespace {

// scalar oracle for the uniform quantizer, evaluated directly from the
// definition with round-half-to-even
float uniform_oracle(float x, float s, int z, int b) {
    const double q = std::nearbyint(static_cast<double>(x) / s) + z;
    const double qc = std::min(std::max(q, 0.0), static_cast<double>((1 << b) - 1));
    return static_cast<float>(s * (qc - z));
}

} // namespace

TEST_CASE("uniform fake quant") {
    auto p = QuantParams::uniform(4, 0.1f, 0);
    auto r = uniform_fake_quant(Tensor::of({0.5f}), p);
    CHECK(r.q.data[0] == 5);
    CHECK(r.dequant[0] == doctest::Approx(0.5f));

    r = uniform_fake_quant(Tensor::of({100.0f}), p);
    CHECK(r.q.data[0] == 15);
    CHECK(r.dequant[0] == doctest::Approx(1.5f));

    // derived: scalar evaluation with z = 8
    auto p2 = QuantParams::uniform(4, 0.05f, 8);
    r = uniform_fake_quant(Tensor::of({-0.37f}), p2);
    CHECK(r.q.data[0] == 1);
    CHECK(r.dequant[0] == doctest::Approx(uniform_oracle(-0.37f, 0.05f, 8, 4)));
    CHECK(r.dequant[0] == doctest::Approx(-0.35f));

    CHECK_THROWS(QuantParams::uniform(4, 0.0f, 0));
    CHECK_THROWS(QuantParams::uniform(4, -1.0f, 0));
}

TEST_CASE("init_scale_zero") {
    auto [s0, z0] = init_scale_zero(0, 15, 4);
    CHECK(s0 == doctest::Approx(1.0f));
    CHECK(z0 == 0);

    auto [s1, z1] = init_scale_zero(-1, 1, 8);
    CHECK(s1 == doctest::Approx(2.0 / 255.0));
    CHECK(z1 == 128);

    auto [s2, z2] = init_scale_zero(-8, 7, 4);
    CHECK(s2 == doctest::Approx(1.0f));
    CHECK(z2 == 8);

    CHECK_THROWS(init_scale_zero(1, 1, 4));
    CHECK_THROWS(init_scale_zero(2, 1, 4));
}

TEST_CASE("log2 fake quant") {
    auto r = log2_fake_quant(Tensor::of({0.25f}), 4);
    CHECK(r.q.data[0] == 2);
    CHECK(r.dequant[0] == doctest::Approx(0.25f));

    r = log2_fake_quant(Tensor::of({1.0f}), 4);
    CHECK(r.q.data[0] == 0);
    CHECK(r.dequant[0] == doctest::Approx(1.0f));

    r = log2_fake_quant(Tensor::of({0.1f}), 4);
    CHECK(r.q.data[0] == 3); // round(3.3219) = 3
    CHECK(r.dequant[0] == doctest::Approx(0.125f));

    CHECK_THROWS(log2_fake_quant(Tensor::of({0.0f}), 4));
    CHECK_THROWS(log2_fake_quant(Tensor::of({-0.5f}), 4));
}

TEST_CASE("ltsq fake quant") {
    auto r = ltsq_fake_quant(Tensor::of({0.875f}), 4);
    CHECK(r.q.data[0] == 3);
    CHECK(r.dequant[0] == doctest::Approx(0.875f));

    r = ltsq_fake_quant(Tensor::of({0.0f}), 4);
    CHECK(r.q.data[0] == 0);
    CHECK(r.dequant[0] == doctest::Approx(0.0f));

    r = ltsq_fake_quant(Tensor::of({0.99f}), 4);
    CHECK(r.q.data[0] == 7); // round(-log2(0.01)) = round(6.644)
    CHECK(r.dequant[0] == doctest::Approx(0.9921875f));

    // inputs >= 1 saturate at the top code instead of erroring
    r = ltsq_fake_quant(Tensor::of({1.0f}), 4);
    CHECK(r.q.data[0] == 15);

    CHECK_THROWS(ltsq_fake_quant(Tensor::of({-0.01f}), 4));
}

TEST_CASE("ltsq exactness and monotonicity") {
    for (int b : {2, 4, 8}) {
        const int qmax = (1 << b) - 1;
        for (int k = 0; k <= qmax; ++k) {
            const float v = static_cast<float>(1.0 - std::exp2(-static_cast<double>(k)));
            auto r = ltsq_fake_quant(Tensor::of({v}), b);
            CHECK(r.dequant[0] == v);
        }
    }

    Rng rng(17);
    for (int rep = 0; rep < 500; ++rep) {
        float a1 = static_cast<float>(rng.uniform());
        float a2 = static_cast<float>(rng.uniform());
        if (a1 > a2) std::swap(a1, a2);
        auto r1 = ltsq_fake_quant(Tensor::of({a1}), 4);
        auto r2 = ltsq_fake_quant(Tensor::of({a2}), 4);
        CHECK(r1.dequant[0] <= r2.dequant[0]);
    }
}

TEST_CASE("skewness routing") {
    Tensor high({100});
    Tensor low({100});
    for (size_t i = 0; i < 100; ++i) {
        high[i] = 0.95f;
        low[i] = 0.5f;
    }
    CHECK(skewness_route(high, 0.9) == Route::LtSQ);
    CHECK(skewness_route(low, 0.9) == Route::Uniform);
    CHECK_THROWS(skewness_route(Tensor(), 0.9));
    CHECK_THROWS(skewness_route(high, 1.5));
}

TEST_CASE("tgq group index") {
    CHECK(tgq_group_index(25, 10, 197) == 2);
    CHECK(tgq_group_index(196, 10, 197) == 18); // 19 groups, remainder merged
    CHECK(tgq_num_groups(197, 10) == 19);
    CHECK(tgq_group_index(3, 50, 20) == 0); // lambda >= L: single group
    CHECK(tgq_num_groups(20, 50) == 1);
    CHECK_THROWS(tgq_group_index(20, 50, 20));
    CHECK_THROWS(tgq_group_index(-1, 10, 20));
    CHECK_THROWS(tgq_group_index(0, 0, 20));
}

TEST_CASE("tgq degenerates to tensor-wise uniform") {
    Rng rng(21);
    const size_t L = 4, D = 3, N = 2;
    Tensor h({L, D, N});
    for (size_t i = 0; i < h.size(); ++i) h[i] = static_cast<float>(rng.gaussian());

    auto u = QuantParams::uniform(4, 0.21f, 7);
    auto g = QuantParams::tgq(4, 8, static_cast<int>(L), {0.21f}, {7});
    auto ru = uniform_fake_quant(h, u);
    auto rg = tgq_fake_quant(h, g);
    CHECK(ru.q.data == rg.q.data);
    for (size_t i = 0; i < h.size(); ++i) CHECK(ru.dequant[i] == rg.dequant[i]);

    // identical slices with equal group scales reproduce uniform as well
    auto g2 = QuantParams::tgq(4, 2, static_cast<int>(L), {0.21f, 0.21f}, {7, 7});
    auto rg2 = tgq_fake_quant(h, g2);
    CHECK(ru.q.data == rg2.q.data);
}

TEST_CASE("tgq per-group scales beat one tensor-wise scale on small slices") {
    Rng rng(33);
    const size_t L = 4, DN = 64;
    Tensor h({L, DN});
    const double mag[4] = {1.0, 1.0, 8.0, 8.0};
    for (size_t t = 0; t < L; ++t)
        for (size_t i = 0; i < DN; ++i)
            h[t * DN + i] = static_cast<float>(rng.gaussian() * mag[t]);

    auto range_of = [&](size_t t0, size_t t1) {
        float mn = h[t0 * DN], mx = h[t0 * DN];
        for (size_t i = t0 * DN; i < t1 * DN; ++i) {
            mn = std::min(mn, h[i]);
            mx = std::max(mx, h[i]);
        }
        return init_scale_zero(mn, mx, 4);
    };

    auto [sw, zw] = range_of(0, L);
    auto [s0, z0] = range_of(0, 2);
    auto [s1, z1] = range_of(2, 4);
    auto tw = tgq_fake_quant(h, QuantParams::tgq(4, 8, 4, {sw}, {zw}));
    auto gw = tgq_fake_quant(h, QuantParams::tgq(4, 2, 4, {s0, s1}, {z0, z1}));

    double err_tw = 0, err_gw = 0;
    for (size_t i = 0; i < 2 * DN; ++i) {
        err_tw += std::pow(tw.dequant[i] - h[i], 2);
        err_gw += std::pow(gw.dequant[i] - h[i], 2);
    }
    CHECK(err_gw < err_tw); // early small-magnitude slices quantize finer

    CHECK_THROWS(tgq_fake_quant(h, QuantParams::tgq(4, 2, 4, {s0}, {z0})));
}

TEST_CASE("tgq growing magnitude gives nondecreasing minmax scales") {
    // deterministic spread per slice, magnitude on a linear ramp
    const int L = 200, lambda = 10;
    const size_t DN = 32;
    Tensor h({static_cast<size_t>(L), DN});
    for (int t = 0; t < L; ++t) {
        const double env = 1.0 + 4.0 * t / (L - 1);
        for (size_t i = 0; i < DN; ++i) {
            const double u = 2.0 * static_cast<double>(i) / (DN - 1) - 1.0;
            h[t * DN + i] = static_cast<float>(u * env);
        }
    }
    const int G = tgq_num_groups(L, lambda);
    CHECK(G == 20);
    std::vector<float> scales(G);
    for (int g = 0; g < G; ++g) {
        float mn = 1e30f, mx = -1e30f;
        for (int t = g * lambda; t < (g == G - 1 ? L : (g + 1) * lambda); ++t)
            for (size_t i = 0; i < DN; ++i) {
                mn = std::min(mn, h[t * DN + i]);
                mx = std::max(mx, h[t * DN + i]);
            }
        scales[g] = init_scale_zero(mn, mx, 4).first;
    }
    for (int g = 1; g < G; ++g) CHECK(scales[g] >= scales[g - 1]);
}

TEST_CASE("shift decay") {
    CHECK(shift_decay_one(12, 2, 1.0f) == doctest::Approx(9.0f));

    const float r13 = shift_decay_one(13, 2, 1.0f);
    CHECK(r13 == doctest::Approx(10.0f));
    CHECK(std::abs(r13 - 13.0 * 0.75) < 1.0); // one LSB bound

    const float rn = shift_decay_one(-13, 2, 0.5f);
    CHECK(rn == doctest::Approx(-4.5f)); // floor(-13/4) = -4
    CHECK(std::abs(rn - 0.5 * (-13.0) * 0.75) < 0.5);

    auto v = shift_decay({12, 13, -13}, {2, 2, 2}, 1.0f);
    CHECK(v[0] == doctest::Approx(9.0f));
    CHECK_THROWS(shift_decay({1, 2}, {0}, 1.0f));
}

TEST_CASE("shift decay truncation bound, exhaustive at b=4") {
    for (int64_t v = -65536; v <= 65536; v += 7) { // stride keeps it quick; endpoints exact
        for (int aq = 0; aq <= 15; ++aq) {
            const double exact = static_cast<double>(v) * (1.0 - std::exp2(-aq));
            const double got = shift_decay_one(v, aq, 1.0f);
            CHECK(std::abs(got - exact) < 1.0);
        }
    }
    // large shift codes saturate the shift without UB
    CHECK(shift_decay_one(12345, 255, 1.0f) == doctest::Approx(12345.0f));
    CHECK(shift_decay_one(-12345, 255, 1.0f) == doctest::Approx(-12344.0f));
}

TEST_CASE("idempotence: requantizing a dequantized output returns the same codes") {
    Rng rng(8);
    Tensor x({512});
    for (size_t i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.gaussian() * 2.0);

    auto p = QuantParams::uniform(4, 0.17f, 9);
    auto r1 = uniform_fake_quant(x, p);
    auto r2 = uniform_fake_quant(r1.dequant, p);
    CHECK(r1.q.data == r2.q.data);

    Tensor a({512});
    for (size_t i = 0; i < a.size(); ++i) a[i] = static_cast<float>(rng.uniform());
    auto l1 = ltsq_fake_quant(a, 4);
    auto l2 = ltsq_fake_quant(l1.dequant, 4);
    CHECK(l1.q.data == l2.q.data);

    Tensor pos({512});
    for (size_t i = 0; i < pos.size(); ++i)
        pos[i] = static_cast<float>(std::exp(-3.0 * rng.uniform()));
    auto g1 = log2_fake_quant(pos, 4);
    auto g2 = log2_fake_quant(g1.dequant, 4);
    CHECK(g1.q.data == g2.q.data);

    auto tp = QuantParams::tgq(4, 2, 8, {0.3f, 0.5f, 0.2f, 0.4f}, {3, 7, 1, 8});
    Tensor h({8, 64});
    for (size_t i = 0; i < h.size(); ++i) h[i] = static_cast<float>(rng.gaussian());
    auto t1 = tgq_fake_quant(h, tp);
    auto t2 = tgq_fake_quant(t1.dequant, tp);
    CHECK(t1.q.data == t2.q.data);
}

TEST_CASE("codes stay inside [0, 2^b-1], exhaustive at small b") {
    for (int b : {2, 3, 4}) {
        const int qmax = (1 << b) - 1;
        auto p = QuantParams::uniform(b, 0.11f, qmax / 2);
        for (float x = -20.0f; x <= 20.0f; x += 0.0625f) {
            auto r = uniform_fake_quant(Tensor::of({x}), p);
            CHECK(r.q.data[0] >= 0);
            CHECK(r.q.data[0] <= qmax);
        }
        for (float a = 0.0f; a < 1.0f; a += 1.0f / 1024) {
            auto r = ltsq_fake_quant(Tensor::of({a}), b);
            CHECK(r.q.data[0] >= 0);
            CHECK(r.q.data[0] <= qmax);
        }
    }
}

TEST_CASE("quant params validation") {
    CHECK_THROWS(QuantParams::uniform(1, 0.1f, 0));
    CHECK_THROWS(QuantParams::uniform(9, 0.1f, 0));
    CHECK_THROWS(QuantParams::uniform(4, 0.1f, 16));
    CHECK_THROWS(QuantParams::tgq(4, 10, 197, {1.0f}, {0})); // needs 19 scales
    CHECK_NOTHROW(QuantParams::tgq(4, 10, 197, std::vector<float>(19, 1.0f),
                                   std::vector<int>(19, 0)));
}
