#include "calpa/model.hpp"

#include "calpa/util.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace calpa {

namespace {

TensorF reshaped(const TensorF& t, std::vector<int> shape) {
    if (Tensor<float>::numel_of(shape) != t.numel()) throw ModelError("reshape: element count mismatch");
    TensorF r = t;
    r.shape = std::move(shape);
    return r;
}

std::string shape_str(const std::vector<int>& sh) {
    std::string s = "(";
    for (std::size_t i = 0; i < sh.size(); ++i) s += (i ? "," : "") + std::to_string(sh[i]);
    return s + ")";
}

} // namespace

Model::Model(const ArchGraph& g, std::uint64_t seed) : graph_(g), seed_(seed) {
    validate_graph(graph_);
    for (const auto& l : graph_.layers) {
        topo_.push_back(l.id);
        if (l.kind == LayerKind::fully_connected) head_id_ = l.id;
    }
    init_params();
}

void Model::init_params() {
    for (const auto& l : graph_.layers) {
        LayerState st;
        switch (l.kind) {
            case LayerKind::fixed_preproc: {
                FilterBankF bank = dct_bank_4x4();
                if (l.in_ch != bank.J || l.out_ch != bank.K || l.kernel != bank.Wk)
                    throw ModelError(l.id + ": no fixed filter bank with J=" + std::to_string(l.in_ch) +
                                     " K=" + std::to_string(l.out_ch) + " Wk=" + std::to_string(l.kernel));
                st.w = std::move(bank);
                st.dw = FilterBankF(l.in_ch, l.out_ch, l.kernel);
                break;
            }
            case LayerKind::conv: {
                st.w = FilterBankF(l.in_ch, l.out_ch, l.kernel);
                st.dw = FilterBankF(l.in_ch, l.out_ch, l.kernel);
                Rng rng(seed_, l.id + ".w");
                const double std_dev = std::sqrt(2.0 / (static_cast<double>(l.in_ch) * l.kernel * l.kernel));
                for (auto& x : st.w.w) x = static_cast<float>(rng.normal() * std_dev);
                break;
            }
            case LayerKind::bn: {
                st.gamma.assign(l.out_ch, 1.0f);
                st.beta.assign(l.out_ch, 0.0f);
                st.run_mean.assign(l.out_ch, 0.0f);
                st.run_var.assign(l.out_ch, 1.0f);
                st.dgamma.assign(l.out_ch, 0.0f);
                st.dbeta.assign(l.out_ch, 0.0f);
                break;
            }
            case LayerKind::fully_connected: {
                st.fw = TensorF({l.out_ch, l.in_ch});
                st.fb.assign(l.out_ch, 0.0f);
                st.dfw = TensorF({l.out_ch, l.in_ch});
                st.dfb.assign(l.out_ch, 0.0f);
                Rng rng(seed_, l.id + ".w");
                const double std_dev = std::sqrt(2.0 / static_cast<double>(l.in_ch));
                for (auto& x : st.fw.v) x = static_cast<float>(rng.normal() * std_dev);
                break;
            }
            default:
                break;
        }
        st_[l.id] = std::move(st);
    }
}

TensorF Model::forward(const TensorF& x, bool train) {
    outs_.clear();
    last_forward_train_ = train;
    for (const auto& id : topo_) {
        const LayerSpec& l = graph_.layer(id);
        LayerState& st = st_[id];
        const auto& ps = graph_.preds(id);
        switch (l.kind) {
            case LayerKind::input: {
                if (x.rank() != 4 || x.dim(1) != l.out_ch || x.dim(2) != graph_.input_size ||
                    x.dim(3) != graph_.input_size)
                    throw ModelError("forward: want (N," + std::to_string(l.out_ch) + "," +
                                     std::to_string(graph_.input_size) + "," + std::to_string(graph_.input_size) +
                                     "), got " + shape_str(x.shape));
                outs_[id] = x;
                break;
            }
            case LayerKind::fixed_preproc:
            case LayerKind::conv:
                outs_[id] = conv2d(outs_.at(ps[0]), st.w, l.stride, l.pad);
                break;
            case LayerKind::bn: {
                if (train) {
                    outs_[id] = bn_train_forward(outs_.at(ps[0]), st.gamma, st.beta, st.bn_cache);
                    for (int c = 0; c < l.out_ch; ++c) {
                        st.run_mean[c] = 0.9f * st.run_mean[c] + 0.1f * st.bn_cache.mean[c];
                        st.run_var[c] = 0.9f * st.run_var[c] + 0.1f * st.bn_cache.var[c];
                    }
                } else {
                    BnStats<float> stats{st.run_mean, st.run_var, st.gamma, st.beta};
                    outs_[id] = batch_norm(outs_.at(ps[0]), stats);
                }
                break;
            }
            case LayerKind::activation:
                outs_[id] = l.act == ActKind::relu
                                ? activate_relu(outs_.at(ps[0]))
                                : activate_truncate(outs_.at(ps[0]), static_cast<float>(l.threshold));
                break;
            case LayerKind::pool:
                outs_[id] = avg_pool(outs_.at(ps[0]), l.kernel, l.stride, l.pad);
                break;
            case LayerKind::global_pool:
                outs_[id] = global_avg_pool(outs_.at(ps[0]));
                break;
            case LayerKind::fully_connected:
                outs_[id] = fc_forward(head_input(id), st.fw, st.fb);
                break;
            case LayerKind::add:
                outs_[id] = add(outs_.at(ps[0]), outs_.at(ps[1]));
                break;
        }
    }
    return outs_.at(head_id_);
}

TensorF Model::head_input(const std::string& fc_id) const {
    const auto& pred = graph_.preds(fc_id)[0];
    const TensorF& t = outs_.at(pred);
    return reshaped(t, {t.dim(0), t.dim(1)});
}

void Model::backward(const TensorF& dlogits) {
    if (outs_.empty()) throw ModelError("backward: no cached forward pass");
    std::map<std::string, TensorF> douts;

    auto acc = [&douts](const std::string& id, TensorF&& t) {
        auto it = douts.find(id);
        if (it == douts.end()) {
            douts.emplace(id, std::move(t));
            return;
        }
        if (!it->second.same_shape(t))
            throw ModelError("backward: gradient shape mismatch at " + id);
        for (std::size_t i = 0; i < t.numel(); ++i) it->second.v[i] += t.v[i];
    };

    douts.emplace(head_id_, dlogits);
    for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
        const std::string& id = *it;
        auto dit = douts.find(id);
        if (dit == douts.end()) continue;
        const LayerSpec& l = graph_.layer(id);
        LayerState& st = st_[id];
        const auto& ps = graph_.preds(id);
        TensorF& dy = dit->second;
        switch (l.kind) {
            case LayerKind::input:
                break;
            case LayerKind::fixed_preproc: {
                // The bank is frozen and sits on the input, so usually
                // neither dW nor dX is needed.
                if (graph_.layer(ps[0]).kind != LayerKind::input) {
                    auto g = conv2d_backward(outs_.at(ps[0]), st.w, l.stride, l.pad, dy);
                    acc(ps[0], std::move(g.dx));
                }
                break;
            }
            case LayerKind::conv: {
                auto g = conv2d_backward(outs_.at(ps[0]), st.w, l.stride, l.pad, dy);
                for (std::size_t i = 0; i < st.dw.w.size(); ++i) st.dw.w[i] += g.dw.w[i];
                acc(ps[0], std::move(g.dx));
                break;
            }
            case LayerKind::bn: {
                BnGrads<float> g;
                if (last_forward_train_) {
                    g = bn_train_backward(outs_.at(ps[0]), st.gamma, st.bn_cache, dy);
                } else {
                    BnStats<float> stats{st.run_mean, st.run_var, st.gamma, st.beta};
                    g = batch_norm_backward(outs_.at(ps[0]), stats, dy);
                }
                for (int c = 0; c < l.out_ch; ++c) {
                    st.dgamma[c] += g.dgamma[c];
                    st.dbeta[c] += g.dbeta[c];
                }
                acc(ps[0], std::move(g.dx));
                break;
            }
            case LayerKind::activation:
                acc(ps[0], l.act == ActKind::relu
                               ? relu_backward(outs_.at(ps[0]), dy)
                               : truncate_backward(outs_.at(ps[0]), static_cast<float>(l.threshold), dy));
                break;
            case LayerKind::pool:
                acc(ps[0], avg_pool_backward(outs_.at(ps[0]).shape, l.kernel, l.stride, l.pad, dy));
                break;
            case LayerKind::global_pool:
                acc(ps[0], global_avg_pool_backward(outs_.at(ps[0]).shape, dy));
                break;
            case LayerKind::fully_connected: {
                auto g = fc_backward(head_input(id), st.fw, dy);
                for (std::size_t i = 0; i < st.dfw.numel(); ++i) st.dfw.v[i] += g.dw.v[i];
                for (int k = 0; k < l.out_ch; ++k) st.dfb[k] += g.dbias[k];
                acc(ps[0], reshaped(g.dx, outs_.at(ps[0]).shape));
                break;
            }
            case LayerKind::add: {
                TensorF copy = dy;
                acc(ps[0], std::move(copy));
                acc(ps[1], std::move(dy));
                break;
            }
        }
    }
}

void Model::zero_grads() {
    for (auto& [id, st] : st_) {
        (void)id;
        std::fill(st.dw.w.begin(), st.dw.w.end(), 0.0f);
        std::fill(st.dgamma.begin(), st.dgamma.end(), 0.0f);
        std::fill(st.dbeta.begin(), st.dbeta.end(), 0.0f);
        std::fill(st.dfw.v.begin(), st.dfw.v.end(), 0.0f);
        std::fill(st.dfb.begin(), st.dfb.end(), 0.0f);
    }
}

double Model::loss_and_grads(const TensorF& x, const std::vector<int>& labels, TensorF* probs) {
    TensorF logits = forward(x, true);
    TensorF dlogits;
    const double loss = softmax_cross_entropy(logits, labels, dlogits, probs);
    backward(dlogits);
    return loss;
}

const TensorF& Model::node_out(const std::string& id) const {
    auto it = outs_.find(id);
    if (it == outs_.end()) throw ModelError("node_out: no cached output for " + id);
    return it->second;
}

std::vector<Model::ParamRef> Model::trainable() {
    std::vector<ParamRef> out;
    for (const auto& id : topo_) {
        const LayerSpec& l = graph_.layer(id);
        LayerState& st = st_[id];
        switch (l.kind) {
            case LayerKind::conv:
                out.push_back({id + ".w", st.w.w.data(), st.dw.w.data(), st.w.w.size()});
                break;
            case LayerKind::bn:
                out.push_back({id + ".gamma", st.gamma.data(), st.dgamma.data(), st.gamma.size()});
                out.push_back({id + ".beta", st.beta.data(), st.dbeta.data(), st.beta.size()});
                break;
            case LayerKind::fully_connected:
                out.push_back({id + ".w", st.fw.v.data(), st.dfw.v.data(), st.fw.numel()});
                out.push_back({id + ".b", st.fb.data(), st.dfb.data(), st.fb.size()});
                break;
            default:
                break;
        }
    }
    return out;
}

const FilterBankF& Model::conv_weights(const std::string& id) const {
    const LayerSpec& l = graph_.layer(id);
    if (l.kind != LayerKind::conv && l.kind != LayerKind::fixed_preproc)
        throw ModelError(id + " carries no filter bank");
    return st_.at(id).w;
}

void Model::prune_channels(const std::string& conv_id, const std::vector<int>& T) {
    const LayerSpec& target = graph_.layer(conv_id);
    if (target.kind != LayerKind::conv) throw ModelError("prune target " + conv_id + " is not a conv");
    if (!target.prunable) throw ModelError(conv_id + " is not prunable");
    const int K = target.out_ch;

    std::set<int> drop;
    for (int t : T) {
        if (t < 0 || t >= K)
            throw ModelError("prune index " + std::to_string(t) + " outside [0," + std::to_string(K) + ")");
        drop.insert(t);
    }
    if (static_cast<int>(drop.size()) >= K) throw ModelError(conv_id + ": cannot remove every channel");
    if (drop.empty()) return;

    std::vector<int> keep;
    for (int k = 0; k < K; ++k)
        if (!drop.count(k)) keep.push_back(k);
    const int K2 = static_cast<int>(keep.size());

    const auto classes = channel_out_classes(graph_);
    const std::string& cls = classes.at(conv_id);

    for (const auto& l : graph_.layers) {
        LayerState& st = st_[l.id];
        // Producer side: slice the output dimension of every class member.
        if (classes.at(l.id) == cls) {
            if (l.kind == LayerKind::fixed_preproc)
                throw ModelError(l.id + ": the fixed bank cannot be pruned");
            if (l.kind == LayerKind::conv) {
                if (l.out_ch != K) throw ModelError(l.id + ": class member width differs from target");
                FilterBankF nw(st.w.J, K2, st.w.Wk);
                for (int k2 = 0; k2 < K2; ++k2)
                    std::copy(st.w.out_cube(keep[k2]), st.w.out_cube(keep[k2]) + st.w.per_out(),
                              nw.out_cube(k2));
                st.w = std::move(nw);
                st.dw = FilterBankF(st.w.J, K2, st.w.Wk);
                graph_.layer(l.id).out_ch = K2;
            } else if (l.kind == LayerKind::bn) {
                auto pick = [&keep, K2](std::vector<float>& v) {
                    std::vector<float> nv(K2);
                    for (int k2 = 0; k2 < K2; ++k2) nv[k2] = v[keep[k2]];
                    v = std::move(nv);
                };
                pick(st.gamma);
                pick(st.beta);
                pick(st.run_mean);
                pick(st.run_var);
                st.dgamma.assign(K2, 0.0f);
                st.dbeta.assign(K2, 0.0f);
                st.bn_cache = BnTrainCache<float>{};
            }
        }
        // Consumer side: slice the input dimension of nodes fed by the class.
        const auto& ps = graph_.preds(l.id);
        if (ps.empty() || classes.at(ps[0]) != cls) continue;
        if (l.kind == LayerKind::conv) {
            FilterBankF nw(K2, st.w.K, st.w.Wk);
            const std::size_t plane = static_cast<std::size_t>(st.w.Wk) * st.w.Wk;
            for (int k = 0; k < st.w.K; ++k)
                for (int j2 = 0; j2 < K2; ++j2)
                    std::copy(&st.w.at(k, keep[j2], 0, 0), &st.w.at(k, keep[j2], 0, 0) + plane,
                              &nw.at(k, j2, 0, 0));
            st.w = std::move(nw);
            st.dw = FilterBankF(K2, st.w.K, st.w.Wk);
        } else if (l.kind == LayerKind::fixed_preproc) {
            throw ModelError(l.id + ": the fixed bank cannot consume a pruned class");
        } else if (l.kind == LayerKind::fully_connected) {
            TensorF nw({l.out_ch, K2});
            for (int k = 0; k < l.out_ch; ++k)
                for (int j2 = 0; j2 < K2; ++j2) nw.at(k, j2) = st.fw.at(k, keep[j2]);
            st.fw = std::move(nw);
            st.dfw = TensorF({l.out_ch, K2});
        }
    }

    infer_geometry(graph_);
    graph_.groups = classify_shortcuts(graph_);
    validate_graph(graph_);
    outs_.clear();
    zero_grads();
}

std::vector<std::pair<std::string, TensorF>> Model::named_state() const {
    std::vector<std::pair<std::string, TensorF>> out;
    auto vec1 = [](const std::vector<float>& v) {
        TensorF t({static_cast<int>(v.size())});
        t.v = v;
        return t;
    };
    for (const auto& id : topo_) {
        const LayerSpec& l = graph_.layer(id);
        const LayerState& st = st_.at(id);
        switch (l.kind) {
            case LayerKind::fixed_preproc:
            case LayerKind::conv:
                out.emplace_back(id + ".w", st.w.to_tensor());
                break;
            case LayerKind::bn:
                out.emplace_back(id + ".gamma", vec1(st.gamma));
                out.emplace_back(id + ".beta", vec1(st.beta));
                out.emplace_back(id + ".run_mean", vec1(st.run_mean));
                out.emplace_back(id + ".run_var", vec1(st.run_var));
                break;
            case LayerKind::fully_connected:
                out.emplace_back(id + ".w", st.fw);
                out.emplace_back(id + ".b", vec1(st.fb));
                break;
            default:
                break;
        }
    }
    return out;
}

void Model::set_state(const std::vector<std::pair<std::string, TensorF>>& state) {
    auto expected = named_state();
    if (state.size() != expected.size())
        throw ModelError("set_state: got " + std::to_string(state.size()) + " tensors, want " +
                         std::to_string(expected.size()));
    for (std::size_t i = 0; i < state.size(); ++i) {
        if (state[i].first != expected[i].first)
            throw ModelError("set_state: tensor " + std::to_string(i) + " is " + state[i].first + ", want " +
                             expected[i].first);
        if (state[i].second.shape != expected[i].second.shape)
            throw ModelError("set_state: " + state[i].first + " shape " + shape_str(state[i].second.shape) +
                             ", want " + shape_str(expected[i].second.shape));
    }
    for (const auto& [name, t] : state) {
        const auto dot = name.rfind('.');
        const std::string id = name.substr(0, dot);
        const std::string field = name.substr(dot + 1);
        LayerState& st = st_[id];
        const LayerSpec& l = graph_.layer(id);
        if (l.kind == LayerKind::conv || l.kind == LayerKind::fixed_preproc) {
            st.w = FilterBankF::from_tensor(t);
        } else if (l.kind == LayerKind::bn) {
            std::vector<float>& dst = field == "gamma"      ? st.gamma
                                      : field == "beta"     ? st.beta
                                      : field == "run_mean" ? st.run_mean
                                                            : st.run_var;
            dst = t.v;
        } else if (l.kind == LayerKind::fully_connected) {
            if (field == "w")
                st.fw = t;
            else
                st.fb = t.v;
        }
    }
    outs_.clear();
}

void Model::save_params(const std::string& path) const {
    std::vector<std::uint8_t> buf;
    for (const auto& [name, t] : named_state()) {
        (void)name;
        append_blob(buf, t);
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ModelError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

void Model::load_params(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ModelError("cannot read " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t off = 0;
    std::vector<std::pair<std::string, TensorF>> state;
    for (const auto& [name, t] : named_state()) {
        (void)t;
        state.emplace_back(name, read_blob(buf.data(), buf.size(), off));
    }
    if (off != buf.size()) throw ModelError(path + ": trailing bytes after parameter stream");
    set_state(state);
}

std::string Model::params_digest() const {
    std::vector<std::uint8_t> buf;
    for (const auto& [name, t] : named_state()) {
        (void)name;
        append_blob(buf, t);
    }
    return bytes_digest_hex(buf.data(), buf.size());
}

} // namespace calpa
