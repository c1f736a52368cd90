#pragma once

#include "calpa/model.hpp"

#include <string>
#include <vector>

namespace calpa {

struct SpectraError : std::runtime_error {
    explicit SpectraError(const std::string& what) : std::runtime_error(what) {}
};

struct SpectrumMap {
    std::string layer;
    int channel = 0;
    TensorD amplitude; // DC-centered (H, W) grid
    double low_energy = 0.0;
    double high_energy = 0.0;
    double split = 0.25; // radial fraction of Nyquist separating the bands
};

// Squared-amplitude mass below and above the radial split; the two always
// sum to the grid's total spectral energy.
std::pair<double, double> band_energies(const TensorD& amplitude, double split);

// Spectra of every output channel of a conv layer on one forward pass of the
// image (the conv's own outputs, before normalization).
std::vector<SpectrumMap> channel_spectra(Model& model, const TensorF& image,
                                         const std::string& layer_id, double split = 0.25);

// Spectra of the per-input-channel intermediates x_j * W_{jk} whose sum is
// output channel k; the right-panel view of the aggregation.
std::vector<SpectrumMap> presum_spectra(Model& model, const TensorF& image,
                                        const std::string& layer_id, int k, double split = 0.25);

// Monte-Carlo check that summing independent draws from J bin-center
// distributions reproduces their discrete convolution; returns the L1
// distance between the sampled and convolved densities.
double pdf_convolution_check(const std::vector<std::vector<double>>& histograms,
                             long long samples, std::uint64_t seed);

struct SuppressionCurve {
    std::vector<double> ratios; // ratios[j-1] = product of the first j terms
    double omega1 = 0.0, omega2 = 0.0;
};

// Running product of per-channel amplitude ratios, accumulated in the log
// domain so large J cannot underflow.
SuppressionCurve suppression_curve(const std::vector<double>& per_channel_ratios,
                                   double omega1 = 0.0, double omega2 = 0.0);

// Heat map after log(1+x) scaling and per-map normalization to 8 bits.
void save_spectrum_pgm(const std::string& path, const SpectrumMap& map);

std::string band_energies_csv(const std::vector<SpectrumMap>& maps);
std::string suppression_csv(const SuppressionCurve& curve);

} // namespace calpa
