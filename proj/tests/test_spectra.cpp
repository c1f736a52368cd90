#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "calpa/harness.hpp"
#include "calpa/rng.hpp"
#include "calpa/spectra.hpp"
#include "tiny_net.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

namespace fs = std::filesystem;
using namespace calpa;

namespace {

TensorF make_image(int size, std::uint64_t seed) {
    Rng rng(seed, "spectra-img");
    TensorF x({1, size, size});
    for (auto& v : x.v) v = (float)(rng.uniform() * 255.0);
    return x;
}

double total_energy(const TensorD& amp) {
    double e = 0.0;
    for (double a : amp.v) e += a * a;
    return e;
}

// Test-side copy of the decomposition: input channel j convolved with the
// single kernel W[k][j] at the layer's stride and pad.
TensorF presum_term(Model& m, const std::string& layer_id, int k, int j) {
    const LayerSpec& l = m.graph().layer(layer_id);
    const TensorF& in = m.node_out(m.graph().preds(layer_id)[0]);
    TensorF xj({1, 1, in.shape[2], in.shape[3]});
    for (int y = 0; y < in.shape[2]; ++y)
        for (int x = 0; x < in.shape[3]; ++x) xj.at(0, 0, y, x) = in.at(0, j, y, x);
    const FilterBankF& fb = m.conv_weights(layer_id);
    FilterBankF one(1, 1, fb.Wk);
    for (int a = 0; a < fb.Wk; ++a)
        for (int b = 0; b < fb.Wk; ++b) one.at(0, 0, a, b) = fb.at(k, j, a, b);
    return conv2d(xj, one, l.stride, l.pad);
}

} // namespace

TEST_CASE("band energies split the grid's total energy") {
    SUBCASE("hand grid, DC only") {
        TensorD amp({4, 4});
        amp.at(2, 2) = 3.0; // DC bin for a 4x4 grid
        auto [lo, hi] = band_energies(amp, 0.25);
        CHECK(lo == 9.0);
        CHECK(hi == 0.0);
    }
    SUBCASE("hand grid, uniform ones") {
        TensorD amp({4, 4});
        for (auto& v : amp.v) v = 1.0;
        auto [lo, hi] = band_energies(amp, 0.25);
        CHECK(lo == 1.0); // only the DC bin has r < 0.25
        CHECK(hi == 15.0);
        auto [lo1, hi1] = band_energies(amp, 1.0);
        CHECK(lo1 == 9.0); // r < 1 region of the 4x4 normalized grid
        CHECK(hi1 == 7.0);
    }
    SUBCASE("conservation on a random grid") {
        Rng rng(11, "band");
        TensorD amp({8, 6});
        for (auto& v : amp.v) v = rng.uniform() * 4.0 - 1.0;
        const double total = total_energy(amp);
        for (double split : {0.1, 0.25, 0.5, 0.9}) {
            auto [lo, hi] = band_energies(amp, split);
            CHECK(lo + hi == doctest::Approx(total).epsilon(1e-12));
            CHECK(lo >= 0.0);
            CHECK(hi >= 0.0);
        }
    }
    SUBCASE("rejects bad input") {
        TensorD amp({4, 4});
        CHECK_THROWS_AS(band_energies(TensorD({3}), 0.25), SpectraError);
        CHECK_THROWS_AS(band_energies(amp, 0.0), SpectraError);
        CHECK_THROWS_AS(band_energies(amp, 1.5), SpectraError);
        CHECK_THROWS_AS(band_energies(amp, -0.2), SpectraError);
    }
}

TEST_CASE("suppression curve is an exact running product") {
    SUBCASE("constant ratio 1/2 reaches 2^-J without underflow") {
        std::vector<double> r(64, 0.5);
        SuppressionCurve c = suppression_curve(r);
        REQUIRE(c.ratios.size() == 64);
        for (int j = 1; j <= 64; ++j) {
            const double want = std::pow(2.0, -j);
            CHECK(std::fabs(c.ratios[j - 1] - want) / want <= 1e-9);
        }
    }
    SUBCASE("interleaved doubling and halving returns to one") {
        std::vector<double> r;
        for (int i = 0; i < 10; ++i) {
            r.push_back(2.0);
            r.push_back(0.5);
        }
        SuppressionCurve c = suppression_curve(r, 0.1, 0.6);
        CHECK(c.omega1 == 0.1);
        CHECK(c.omega2 == 0.6);
        for (int i = 0; i < 10; ++i)
            CHECK(c.ratios[2 * i + 1] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("random ratios match the direct product") {
        Rng rng(5, "ratios");
        std::vector<double> r;
        for (int i = 0; i < 20; ++i) r.push_back(0.2 + 0.6 * rng.uniform());
        SuppressionCurve c = suppression_curve(r);
        double run = 1.0;
        for (int i = 0; i < 20; ++i) {
            run *= r[i];
            CHECK(c.ratios[i] == doctest::Approx(run).epsilon(1e-9));
        }
    }
    SUBCASE("empty input gives an empty curve") {
        CHECK(suppression_curve({}).ratios.empty());
    }
    SUBCASE("nonpositive ratios are rejected") {
        CHECK_THROWS_AS(suppression_curve({0.5, 0.0}), SpectraError);
        CHECK_THROWS_AS(suppression_curve({-0.3}), SpectraError);
    }
}

TEST_CASE("sampled index sums converge to the discrete convolution") {
    SUBCASE("two uniform densities") {
        std::vector<std::vector<double>> h(2, std::vector<double>(64, 1.0 / 64.0));
        CHECK(pdf_convolution_check(h, 100000, 21) <= 0.05);
    }
    SUBCASE("hand-convolved pair") {
        // conv of {.5,.5} and {.25,.75} is {.125,.5,.375}; the sampler's L1
        // error at 2e5 draws sits well under 0.01
        std::vector<std::vector<double>> h = {{0.5, 0.5}, {0.25, 0.75}};
        CHECK(pdf_convolution_check(h, 200000, 3) <= 0.01);
    }
    SUBCASE("three asymmetric densities") {
        std::vector<std::vector<double>> h = {
            {0.7, 0.1, 0.05, 0.05, 0.04, 0.03, 0.02, 0.01},
            {0.01, 0.02, 0.03, 0.04, 0.05, 0.05, 0.1, 0.7},
            {0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125},
        };
        const double far = pdf_convolution_check(h, 1000, 9);
        const double close = pdf_convolution_check(h, 100000, 9);
        CHECK(close <= 0.05);
        CHECK(close < far);
    }
    SUBCASE("same seed, same distance") {
        std::vector<std::vector<double>> h = {{0.4, 0.6}, {0.9, 0.1}};
        CHECK(pdf_convolution_check(h, 5000, 7) == pdf_convolution_check(h, 5000, 7));
        CHECK(pdf_convolution_check(h, 5000, 7) != pdf_convolution_check(h, 5000, 8));
    }
    SUBCASE("rejects malformed input") {
        std::vector<double> u = {0.5, 0.5};
        CHECK_THROWS_AS(pdf_convolution_check({u}, 1000, 1), SpectraError);
        CHECK_THROWS_AS(pdf_convolution_check({u, {0.3, 0.3, 0.4}}, 1000, 1), SpectraError);
        CHECK_THROWS_AS(pdf_convolution_check({u, {0.4, 0.5}}, 1000, 1), SpectraError);
        CHECK_THROWS_AS(pdf_convolution_check({u, {-0.2, 1.2}}, 1000, 1), SpectraError);
        CHECK_THROWS_AS(pdf_convolution_check({{1.0}, {1.0}}, 1000, 1), SpectraError);
        CHECK_THROWS_AS(pdf_convolution_check({u, u}, 0, 1), SpectraError);
    }
}

TEST_CASE("channel spectra mirror the conv outputs") {
    ArchGraph g = tiny::plain_net(8);
    Model m(g, 7);
    TensorF img = make_image(8, 13);

    auto maps = channel_spectra(m, img, "conv_b", 0.25);
    REQUIRE((int)maps.size() == g.layer("conv_b").out_ch);
    const TensorF& out = m.node_out("conv_b");
    for (int k = 0; k < (int)maps.size(); ++k) {
        CHECK(maps[k].layer == "conv_b");
        CHECK(maps[k].channel == k);
        CHECK(maps[k].split == 0.25);
        TensorD chan({out.shape[2], out.shape[3]});
        for (int y = 0; y < out.shape[2]; ++y)
            for (int x = 0; x < out.shape[3]; ++x) chan.at(y, x) = out.at(0, k, y, x);
        TensorD want = fft2d_amplitude(chan);
        REQUIRE(maps[k].amplitude.shape == want.shape);
        for (std::size_t i = 0; i < want.v.size(); ++i) CHECK(maps[k].amplitude.v[i] == want.v[i]);
        auto [lo, hi] = band_energies(maps[k].amplitude, 0.25);
        CHECK(maps[k].low_energy == lo);
        CHECK(maps[k].high_energy == hi);
        CHECK(lo + hi == doctest::Approx(total_energy(maps[k].amplitude)).epsilon(1e-9));
    }

    SUBCASE("zeroed weights give an all-zero spectrum") {
        auto st = m.named_state();
        for (auto& [name, t] : st)
            if (name == "conv_a.w")
                for (auto& v : t.v) v = 0.0f;
        m.set_state(st);
        for (const auto& sm : channel_spectra(m, img, "conv_a", 0.25)) {
            for (double a : sm.amplitude.v) CHECK(a == 0.0);
            CHECK(sm.low_energy == 0.0);
            CHECK(sm.high_energy == 0.0);
        }
    }

    SUBCASE("rank-4 batch input is accepted") {
        TensorF batch({1, 1, 8, 8});
        batch.v = img.v;
        auto a = channel_spectra(m, batch, "conv_a", 0.25);
        auto b = channel_spectra(m, img, "conv_a", 0.25);
        REQUIRE(a.size() == b.size());
        for (std::size_t k = 0; k < a.size(); ++k)
            for (std::size_t i = 0; i < a[k].amplitude.v.size(); ++i)
                CHECK(a[k].amplitude.v[i] == b[k].amplitude.v[i]);
    }

    SUBCASE("non-conv and missing layers are rejected") {
        CHECK_THROWS_AS(channel_spectra(m, img, "bn_a", 0.25), SpectraError);
        CHECK_THROWS_AS(channel_spectra(m, img, "nope", 0.25), GraphError);
        TensorF flat({8, 8});
        CHECK_THROWS_AS(channel_spectra(m, flat, "conv_a", 0.25), SpectraError);
    }
}

TEST_CASE("presum terms add up to the output channel") {
    ArchGraph g = tiny::plain_net(8);
    Model m(g, 19);
    TensorF img = make_image(8, 23);

    SUBCASE("single input channel equals the channel spectrum") {
        auto pres = presum_spectra(m, img, "conv_a", 2, 0.25);
        REQUIRE(pres.size() == 1);
        CHECK(pres[0].channel == 0);
        auto chans = channel_spectra(m, img, "conv_a", 0.25);
        REQUIRE(pres[0].amplitude.shape == chans[2].amplitude.shape);
        for (std::size_t i = 0; i < pres[0].amplitude.v.size(); ++i)
            CHECK(pres[0].amplitude.v[i] ==
                  doctest::Approx(chans[2].amplitude.v[i]).epsilon(5e-5));
    }

    SUBCASE("four input channels decompose the output") {
        const int k = 1;
        auto pres = presum_spectra(m, img, "conv_b", k, 0.25);
        REQUIRE((int)pres.size() == g.layer("conv_b").in_ch);

        const TensorF& out = m.node_out("conv_b");
        TensorF sum({1, 1, out.shape[2], out.shape[3]});
        for (int j = 0; j < (int)pres.size(); ++j) {
            CHECK(pres[j].channel == j);
            TensorF term = presum_term(m, "conv_b", k, j);
            for (std::size_t i = 0; i < sum.v.size(); ++i) sum.v[i] += term.v[i];

            TensorD td({term.shape[2], term.shape[3]});
            for (int y = 0; y < term.shape[2]; ++y)
                for (int x = 0; x < term.shape[3]; ++x) td.at(y, x) = term.at(0, 0, y, x);
            TensorD want = fft2d_amplitude(td);
            for (std::size_t i = 0; i < want.v.size(); ++i)
                CHECK(pres[j].amplitude.v[i] == doctest::Approx(want.v[i]).epsilon(1e-6));
        }
        double scale = 0.0;
        for (int y = 0; y < out.shape[2]; ++y)
            for (int x = 0; x < out.shape[3]; ++x)
                scale = std::max(scale, (double)std::fabs(out.at(0, k, y, x)));
        REQUIRE(scale > 0.0);
        for (int y = 0; y < out.shape[2]; ++y)
            for (int x = 0; x < out.shape[3]; ++x)
                CHECK(std::fabs(sum.at(0, 0, y, x) - out.at(0, k, y, x)) / scale <= 1e-5);
    }

    SUBCASE("bad channel or layer is rejected") {
        CHECK_THROWS_AS(presum_spectra(m, img, "conv_b", -1, 0.25), SpectraError);
        CHECK_THROWS_AS(presum_spectra(m, img, "conv_b", 5, 0.25), SpectraError);
        CHECK_THROWS_AS(presum_spectra(m, img, "bn_b", 0, 0.25), SpectraError);
    }
}

TEST_CASE("spectrum heat maps and csv output") {
    SUBCASE("single hot pixel maps to full white") {
        SpectrumMap sm;
        sm.layer = "conv_a";
        sm.amplitude = TensorD({3, 4});
        sm.amplitude.at(1, 2) = 100.0;
        fs::remove_all("spectra_pgm");
        fs::create_directories("spectra_pgm");
        save_spectrum_pgm("spectra_pgm/hot.pgm", sm);
        int w = 0, h = 0;
        auto pix = load_pgm("spectra_pgm/hot.pgm", w, h);
        REQUIRE(w == 4);
        REQUIRE(h == 3);
        for (int i = 0; i < 12; ++i) CHECK(pix[i] == (i == 1 * 4 + 2 ? 255 : 0));
    }
    SUBCASE("all-zero map stays black") {
        SpectrumMap sm;
        sm.amplitude = TensorD({2, 2});
        save_spectrum_pgm("spectra_pgm/zero.pgm", sm);
        int w = 0, h = 0;
        for (auto p : load_pgm("spectra_pgm/zero.pgm", w, h)) CHECK(p == 0);
    }
    SUBCASE("csv layouts") {
        SpectrumMap a, b;
        a.layer = "l2_conv";
        a.channel = 0;
        a.low_energy = 1.5;
        a.high_energy = 0.25;
        b.layer = "l2_conv";
        b.channel = 1;
        b.low_energy = 2.0;
        b.high_energy = 0.0;
        CHECK(band_energies_csv({a, b}) ==
              "layer,channel,low_energy,high_energy\n"
              "l2_conv,0,1.5,0.25\n"
              "l2_conv,1,2,0\n");
        SuppressionCurve c = suppression_curve({0.5, 0.5});
        CHECK(suppression_csv(c) == "J,ratio\n1,0.5\n2,0.25\n");
    }
}
