#include "calpa/criteria.hpp"

#include "calpa/model.hpp"
#include "calpa/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace calpa {

std::vector<int> PruneSet::sorted() const {
    std::vector<int> s = T;
    std::sort(s.begin(), s.end());
    return s;
}

std::vector<double> thinet_contributions(const ThiNetInstance& inst) {
    const int m = static_cast<int>(inst.patches.size());
    if (m == 0) throw GraphError("thinet: empty instance");
    if (static_cast<int>(inst.filters.size()) != m)
        throw GraphError("thinet: patch/filter count mismatch");
    const int J = inst.J;
    std::vector<double> c(static_cast<std::size_t>(m) * J);
    for (int t = 0; t < m; ++t) {
        const TensorF& p = inst.patches[t].values;
        const TensorF& f = inst.filters[t];
        if (p.rank() != 3 || !p.same_shape(f) || p.dim(0) != J)
            throw GraphError("thinet: sample " + std::to_string(t) + " shapes are inconsistent");
        const std::size_t plane = static_cast<std::size_t>(p.dim(1)) * p.dim(2);
        for (int j = 0; j < J; ++j) {
            double s = 0;
            const float* pv = p.v.data() + j * plane;
            const float* fv = f.v.data() + j * plane;
            for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(pv[i]) * fv[i];
            c[static_cast<std::size_t>(t) * J + j] = s;
        }
    }
    return c;
}

std::vector<int> thinet_greedy_order(const ThiNetInstance& inst, int upto) {
    const int m = static_cast<int>(inst.patches.size());
    const int J = inst.J;
    if (upto < 0 || upto >= J) throw GraphError("thinet: order length must be in [0, J)");
    const std::vector<double> c = thinet_contributions(inst);

    std::vector<int> order;
    std::vector<char> taken(J, 0);
    std::vector<double> partial(m, 0.0); // sum of contributions of channels taken so far
    for (int step = 0; step < upto; ++step) {
        int best = -1;
        double best_obj = std::numeric_limits<double>::infinity();
        for (int j = 0; j < J; ++j) {
            if (taken[j]) continue;
            double obj = 0;
            for (int t = 0; t < m; ++t) {
                const double s = partial[t] + c[static_cast<std::size_t>(t) * J + j];
                obj += s * s;
            }
            if (obj < best_obj) { // strict: ties keep the lowest index
                best_obj = obj;
                best = j;
            }
        }
        taken[best] = 1;
        order.push_back(best);
        for (int t = 0; t < m; ++t) partial[t] += c[static_cast<std::size_t>(t) * J + best];
    }
    return order;
}

PruneSet thinet_select(const ThiNetInstance& inst, double gamma) {
    if (gamma < 0.0 || gamma >= 1.0) throw GraphError("thinet: pruning rate must be in [0,1)");
    PruneSet out;
    out.T = thinet_greedy_order(inst, prune_count(inst.J, gamma));
    return out;
}

std::vector<int> l1_rank(const FilterBankF& filters) {
    std::vector<double> norm(filters.K, 0.0);
    for (int k = 0; k < filters.K; ++k) {
        const float* cube = filters.out_cube(k);
        double s = 0;
        for (std::size_t i = 0; i < filters.per_out(); ++i) s += std::abs(static_cast<double>(cube[i]));
        norm[k] = s;
    }
    std::vector<int> idx(filters.K);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&norm](int a, int b) { return norm[a] < norm[b]; });
    return idx;
}

PruneSet l1_select(const FilterBankF& filters, double gamma) {
    if (gamma < 0.0 || gamma >= 1.0) throw GraphError("l1: pruning rate must be in [0,1)");
    const std::vector<int> rank = l1_rank(filters);
    PruneSet out;
    const int n = prune_count(filters.K, gamma);
    out.T.assign(rank.begin(), rank.begin() + n);
    return out;
}

ThiNetInstance sample_instance(Model& model, const std::string& layer_id,
                               const std::vector<TensorF>& images, const SampleSpec& spec) {
    const ArchGraph& g = model.graph();
    const LayerSpec& target = g.layer(layer_id);
    if (target.kind != LayerKind::conv) throw GraphError(layer_id + " is not a conv");
    if (static_cast<int>(images.size()) != spec.m)
        throw GraphError("sample_instance: got " + std::to_string(images.size()) + " images, want " +
                         std::to_string(spec.m));

    // The consumer is the next conv fed by the target's channel class.
    const auto classes = channel_out_classes(g);
    const std::string& cls = classes.at(layer_id);
    const auto depth = g.depths();
    std::string consumer;
    std::string non_conv_consumer;
    for (const auto& l : g.layers) {
        const auto& ps = g.preds(l.id);
        if (ps.empty() || classes.at(ps[0]) != cls) continue;
        if (l.kind == LayerKind::conv) {
            if (consumer.empty() || depth.at(l.id) < depth.at(consumer) ||
                (depth.at(l.id) == depth.at(consumer) && l.id < consumer))
                consumer = l.id;
        } else if (l.kind == LayerKind::fully_connected || l.kind == LayerKind::fixed_preproc) {
            non_conv_consumer = l.id;
        }
    }
    if (consumer.empty())
        throw GraphError("consumer of " + layer_id + " is not a conv" +
                         (non_conv_consumer.empty() ? "" : " (" + non_conv_consumer + ")"));

    const LayerSpec& cons = g.layer(consumer);
    const std::string& cons_in = g.preds(consumer)[0];

    ThiNetInstance inst;
    inst.J = cons.in_ch;
    inst.layer_id = layer_id;
    inst.consumer_id = consumer;

    Rng rng(spec.seed, "sample/" + layer_id);
    const FilterBankF& w = model.conv_weights(consumer);
    for (int i = 0; i < spec.m; ++i) {
        TensorF x = images[i];
        if (x.rank() == 3) x.shape = {1, x.dim(0), x.dim(1), x.dim(2)};
        model.forward(x, false);
        const TensorF& feat4 = model.node_out(cons_in);
        const TensorF& out4 = model.node_out(consumer);
        TensorF feat = feat4;
        feat.shape = {feat4.dim(1), feat4.dim(2), feat4.dim(3)};
        for (int s = 0; s < spec.n; ++s) {
            const int k = static_cast<int>(rng.below(static_cast<std::uint64_t>(cons.out_ch)));
            const int oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(cons.out_h)));
            const int ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(cons.out_w)));
            Patch<float> p = extract_patch(feat, w, k, oy, ox, cons.stride, cons.pad);
            p.layer_id = layer_id;
            p.sample_index = i;
            inst.patches.push_back(std::move(p));
            TensorF cube({w.J, w.Wk, w.Wk});
            std::copy(w.out_cube(k), w.out_cube(k) + w.per_out(), cube.v.begin());
            inst.filters.push_back(std::move(cube));
            inst.sampled_values.push_back(static_cast<double>(out4.at(0, k, oy, ox)));
        }
    }
    return inst;
}

nlohmann::json prune_set_to_json(const PruneSet& s) {
    return nlohmann::json{{"order", s.T}, {"sorted", s.sorted()}, {"count", s.T.size()}};
}

nlohmann::json instance_summary_json(const ThiNetInstance& inst, const SampleSpec& spec) {
    nlohmann::json j;
    j["layer"] = inst.layer_id;
    j["consumer"] = inst.consumer_id;
    j["channels"] = inst.J;
    j["samples"] = inst.patches.size();
    j["images"] = spec.m;
    j["locations_per_image"] = spec.n;
    j["seed"] = spec.seed;
    return j;
}

} // namespace calpa
