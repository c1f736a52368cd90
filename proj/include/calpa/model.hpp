#pragma once

#include "calpa/arch.hpp"
#include "calpa/ops.hpp"
#include "calpa/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace calpa {

struct ModelError : std::runtime_error {
    explicit ModelError(const std::string& what) : std::runtime_error(what) {}
};

// An ArchGraph bound to parameters, with forward/backward over cached node
// outputs. Convs carry no bias (normalization follows every learned conv);
// the fixed bottom bank is stored like a conv but never updated.
class Model {
public:
    Model() = default;
    Model(const ArchGraph& g, std::uint64_t seed); // He-initialized

    const ArchGraph& graph() const { return graph_; }
    std::uint64_t init_seed() const { return seed_; }
    const std::vector<std::string>& topo_order() const { return topo_; }

    // x is (N, C, H, W) raw pixel values in [0, 255].
    TensorF forward(const TensorF& x, bool train);
    void backward(const TensorF& dlogits); // adds into stored grads
    void zero_grads();
    // Train-mode forward + loss + full backward in one call.
    double loss_and_grads(const TensorF& x, const std::vector<int>& labels, TensorF* probs = nullptr);

    const TensorF& node_out(const std::string& id) const; // cache of the last forward

    struct ParamRef {
        std::string name;
        float* data = nullptr;
        float* grad = nullptr;
        std::size_t n = 0;
    };
    std::vector<ParamRef> trainable(); // convs, bn affine, fc; excludes the fixed bank

    const FilterBankF& conv_weights(const std::string& id) const;

    // Physically removes the zero-based channels in T from the whole channel
    // class of conv_id: producer out-slices, bn parameter slices, consumer
    // in-slices. Grads are reset; cached outputs are dropped.
    void prune_channels(const std::string& conv_id, const std::vector<int>& T);

    // Flat state in topo order: conv "id.w" (K,J,Wk,Wk), bn "id.gamma" /
    // ".beta" / ".run_mean" / ".run_var", fc "id.w" (K,J) and "id.b".
    std::vector<std::pair<std::string, TensorF>> named_state() const;
    void set_state(const std::vector<std::pair<std::string, TensorF>>& st);
    void save_params(const std::string& path) const;
    void load_params(const std::string& path);
    std::string params_digest() const;

private:
    struct LayerState {
        FilterBankF w, dw;                          // conv / fixed_preproc
        std::vector<float> gamma, beta;             // bn affine
        std::vector<float> run_mean, run_var;       // bn running stats (momentum 0.9)
        std::vector<float> dgamma, dbeta;
        BnTrainCache<float> bn_cache;
        TensorF fw, dfw;                            // fc
        std::vector<float> fb, dfb;
    };

    void init_params();
    TensorF head_input(const std::string& fc_id) const; // (N,C,1,1) -> (N,C)

    ArchGraph graph_;
    std::uint64_t seed_ = 0;
    std::vector<std::string> topo_;
    std::string head_id_;
    std::map<std::string, LayerState> st_;
    std::map<std::string, TensorF> outs_;
    bool last_forward_train_ = false;
};

} // namespace calpa
