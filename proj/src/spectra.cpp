#include "calpa/spectra.hpp"

#include "calpa/harness.hpp"
#include "calpa/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace calpa {

namespace {

TensorF as_batch(const TensorF& image) {
    if (image.rank() == 4) return image;
    if (image.rank() == 3) {
        TensorF x = image;
        x.shape = {1, image.shape[0], image.shape[1], image.shape[2]};
        return x;
    }
    throw SpectraError("image must be (C,H,W) or (1,C,H,W)");
}

TensorD channel_slice(const TensorF& out, int k) {
    const int h = out.shape[2], w = out.shape[3];
    TensorD c({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) c.at(y, x) = out.at(0, k, y, x);
    return c;
}

SpectrumMap make_map(const std::string& layer, int k, const TensorD& channel, double split) {
    SpectrumMap m;
    m.layer = layer;
    m.channel = k;
    m.amplitude = fft2d_amplitude(channel);
    m.split = split;
    auto [lo, hi] = band_energies(m.amplitude, split);
    m.low_energy = lo;
    m.high_energy = hi;
    return m;
}

const LayerSpec& conv_layer(const Model& model, const std::string& layer_id) {
    const LayerSpec& l = model.graph().layer(layer_id);
    if (l.kind != LayerKind::conv && l.kind != LayerKind::fixed_preproc)
        throw SpectraError("spectra want a conv layer, got " + layer_id);
    return l;
}

} // namespace

std::pair<double, double> band_energies(const TensorD& amplitude, double split) {
    if (amplitude.rank() != 2) throw SpectraError("amplitude grid must be rank 2");
    if (!(split > 0.0 && split <= 1.0)) throw SpectraError("band split must lie in (0,1]");
    const int h = amplitude.shape[0], w = amplitude.shape[1];
    const int cy = h / 2, cx = w / 2;
    double low = 0.0, high = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double fy = cy > 0 ? (double)(y - cy) / cy : 0.0;
            const double fx = cx > 0 ? (double)(x - cx) / cx : 0.0;
            const double r = std::sqrt(fy * fy + fx * fx);
            const double e = amplitude.at(y, x) * amplitude.at(y, x);
            (r < split ? low : high) += e;
        }
    }
    return {low, high};
}

std::vector<SpectrumMap> channel_spectra(Model& model, const TensorF& image,
                                         const std::string& layer_id, double split) {
    const LayerSpec& l = conv_layer(model, layer_id);
    model.forward(as_batch(image), false);
    const TensorF& out = model.node_out(layer_id);
    std::vector<SpectrumMap> maps;
    for (int k = 0; k < l.out_ch; ++k)
        maps.push_back(make_map(layer_id, k, channel_slice(out, k), split));
    return maps;
}

std::vector<SpectrumMap> presum_spectra(Model& model, const TensorF& image,
                                        const std::string& layer_id, int k, double split) {
    const LayerSpec& l = conv_layer(model, layer_id);
    if (k < 0 || k >= l.out_ch) throw SpectraError("channel index out of range");
    const auto& preds = model.graph().preds(layer_id);
    if (preds.size() != 1) throw SpectraError("conv must have one input node");
    model.forward(as_batch(image), false);
    const TensorF& in = model.node_out(preds[0]);
    const FilterBankF& fb = model.conv_weights(layer_id);

    std::vector<SpectrumMap> maps;
    for (int j = 0; j < l.in_ch; ++j) {
        TensorF xj({1, 1, in.shape[2], in.shape[3]});
        for (int y = 0; y < in.shape[2]; ++y)
            for (int x = 0; x < in.shape[3]; ++x) xj.at(0, 0, y, x) = in.at(0, j, y, x);
        FilterBankF one(1, 1, fb.Wk);
        for (int a = 0; a < fb.Wk; ++a)
            for (int b = 0; b < fb.Wk; ++b) one.at(0, 0, a, b) = fb.at(k, j, a, b);
        TensorF term = conv2d(xj, one, l.stride, l.pad);
        SpectrumMap m = make_map(layer_id, k, channel_slice(term, 0), split);
        m.channel = j; // indexed by the aggregated term, not the output
        maps.push_back(std::move(m));
    }
    return maps;
}

double pdf_convolution_check(const std::vector<std::vector<double>>& histograms,
                             long long samples, std::uint64_t seed) {
    if (histograms.size() < 2) throw SpectraError("need at least two distributions");
    if (samples < 1) throw SpectraError("need at least one sample");
    const std::size_t bins = histograms[0].size();
    if (bins < 2) throw SpectraError("histograms need at least two bins");
    for (const auto& h : histograms) {
        if (h.size() != bins) throw SpectraError("histograms must share their binning");
        double sum = 0.0;
        for (double p : h) {
            if (p < 0.0) throw SpectraError("negative histogram mass");
            sum += p;
        }
        if (std::fabs(sum - 1.0) > 1e-9) throw SpectraError("histograms must be normalized");
    }

    // exact discrete convolution over bin indices
    std::vector<double> conv = histograms[0];
    for (std::size_t j = 1; j < histograms.size(); ++j) {
        const auto& h = histograms[j];
        std::vector<double> next(conv.size() + bins - 1, 0.0);
        for (std::size_t a = 0; a < conv.size(); ++a)
            for (std::size_t b = 0; b < bins; ++b) next[a + b] += conv[a] * h[b];
        conv = std::move(next);
    }

    // inverse-CDF sampling of the index sum
    std::vector<std::vector<double>> cdf(histograms.size());
    for (std::size_t j = 0; j < histograms.size(); ++j) {
        cdf[j].resize(bins);
        double run = 0.0;
        for (std::size_t b = 0; b < bins; ++b) {
            run += histograms[j][b];
            cdf[j][b] = run;
        }
        cdf[j][bins - 1] = 1.0;
    }
    Rng rng(seed, "pdf-conv");
    std::vector<double> mc(conv.size(), 0.0);
    for (long long s = 0; s < samples; ++s) {
        std::size_t idx = 0;
        for (const auto& c : cdf) {
            const double u = rng.uniform();
            idx += (std::size_t)(std::lower_bound(c.begin(), c.end(), u) - c.begin());
        }
        mc[idx] += 1.0;
    }
    double l1 = 0.0;
    for (std::size_t i = 0; i < conv.size(); ++i) l1 += std::fabs(mc[i] / (double)samples - conv[i]);
    return l1;
}

SuppressionCurve suppression_curve(const std::vector<double>& per_channel_ratios, double omega1,
                                   double omega2) {
    SuppressionCurve c;
    c.omega1 = omega1;
    c.omega2 = omega2;
    double log_run = 0.0;
    for (double r : per_channel_ratios) {
        if (!(r > 0.0)) throw SpectraError("amplitude ratios must be positive");
        log_run += std::log(r);
        c.ratios.push_back(std::exp(log_run));
    }
    return c;
}

void save_spectrum_pgm(const std::string& path, const SpectrumMap& map) {
    const int h = map.amplitude.shape[0], w = map.amplitude.shape[1];
    double peak = 0.0;
    for (double a : map.amplitude.v) peak = std::max(peak, std::log1p(a));
    std::vector<std::uint8_t> pix((std::size_t)h * w, 0);
    if (peak > 0.0)
        for (std::size_t i = 0; i < pix.size(); ++i)
            pix[i] = (std::uint8_t)std::floor(std::log1p(map.amplitude.v[i]) / peak * 255.0 + 0.5);
    save_pgm(path, pix, w, h);
}

std::string band_energies_csv(const std::vector<SpectrumMap>& maps) {
    std::ostringstream os;
    os << "layer,channel,low_energy,high_energy\n";
    for (const auto& m : maps) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g\n", m.layer.c_str(), m.channel,
                      m.low_energy, m.high_energy);
        os << buf;
    }
    return os.str();
}

std::string suppression_csv(const SuppressionCurve& curve) {
    std::ostringstream os;
    os << "J,ratio\n";
    for (std::size_t j = 0; j < curve.ratios.size(); ++j) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", j + 1, curve.ratios[j]);
        os << buf;
    }
    return os.str();
}

} // namespace calpa
