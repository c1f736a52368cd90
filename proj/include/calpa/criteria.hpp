#pragma once

#include "calpa/arch.hpp"
#include "calpa/ops.hpp"

#include <string>
#include <vector>

namespace calpa {

class Model;

struct SampleSpec {
    int m = 32; // images drawn from the search split
    int n = 10; // output elements sampled per image
    std::uint64_t seed = 0;
    int samples() const { return m * n; }
};

// One (receptive field, consumer kernel cube) pair per sampled output element.
struct ThiNetInstance {
    std::vector<Patch<float>> patches;
    std::vector<TensorF> filters; // (J, Wk, Wk) cube of the sampled output channel
    int J = 0;
    std::vector<double> sampled_values; // the Z^{l+1} elements, for audit
    std::string layer_id;
    std::string consumer_id;
};

struct PruneSet {
    std::vector<int> T; // weak channels, in selection order, zero-based
    std::vector<int> sorted() const;
};

// Per-sample per-channel scalar contributions c[t*J + j].
std::vector<double> thinet_contributions(const ThiNetInstance& inst);

// Greedy argmin of sum_t (sum_{i in T} c_{t,i})^2, one channel at a time;
// prefixes nest, so the order can be cut at any target size.
std::vector<int> thinet_greedy_order(const ThiNetInstance& inst, int upto);
PruneSet thinet_select(const ThiNetInstance& inst, double gamma);

// Output channels ordered by ascending l1 norm of W_{:k::}, ties by index.
std::vector<int> l1_rank(const FilterBankF& filters);
PruneSet l1_select(const FilterBankF& filters, double gamma);

// Forward-propagates the images, samples n output elements of layer l's
// consumer conv per image, and records (receptive field, kernel cube) pairs.
// Throws GraphError if the consumer is not a conv (the l1 path applies then).
// Mutates only the model's forward caches.
ThiNetInstance sample_instance(Model& model, const std::string& layer_id,
                               const std::vector<TensorF>& images, const SampleSpec& spec);

nlohmann::json prune_set_to_json(const PruneSet& s);
nlohmann::json instance_summary_json(const ThiNetInstance& inst, const SampleSpec& spec);

} // namespace calpa
