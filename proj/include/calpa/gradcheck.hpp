#pragma once

// Finite-difference probes for every backward pass, shared by the unit tests
// and the acceptance suite. Double precision, h = 1e-4, losses are fixed
// random weighted sums of the outputs so gradients stay O(1).

#include "calpa/ops.hpp"
#include "calpa/rng.hpp"

#include <functional>

namespace calpa {

struct GradReport {
    double worst_rel = 0;
    int checked = 0;
};

namespace graddetail {

inline void note(GradReport& r, double analytic, double numeric) {
    double den = std::max({1.0, std::abs(analytic), std::abs(numeric)});
    r.worst_rel = std::max(r.worst_rel, std::abs(analytic - numeric) / den);
    r.checked++;
}

// loss = sum_i w_i * out_i for a fixed random w.
inline std::vector<double> loss_weights(std::size_t n, std::uint64_t seed) {
    std::vector<double> w(n);
    Rng rng(seed, "lossw");
    for (auto& x : w) x = rng.uniform() * 2.0 - 1.0;
    return w;
}

inline double weighted(const std::vector<double>& vals, const std::vector<double>& w) {
    double s = 0;
    for (std::size_t i = 0; i < vals.size(); ++i) s += vals[i] * w[i];
    return s;
}

// Central difference of f along component i of a flat parameter vector.
inline void check_vector(GradReport& r, std::vector<double>& theta, const std::vector<double>& analytic,
                         const std::function<double()>& f, double h = 1e-4) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double save = theta[i];
        theta[i] = save + h;
        const double fp = f();
        theta[i] = save - h;
        const double fm = f();
        theta[i] = save;
        note(r, analytic[i], (fp - fm) / (2 * h));
    }
}

inline TensorD rand_t(std::vector<int> sh, std::uint64_t seed, double lo = -1, double hi = 1) {
    TensorD t(sh);
    Rng rng(seed, "gct");
    for (auto& x : t.v) x = lo + (hi - lo) * rng.uniform();
    return t;
}

inline FilterBankD rand_b(int J, int K, int Wk, std::uint64_t seed) {
    FilterBankD fb(J, K, Wk);
    Rng rng(seed, "gcb");
    for (auto& x : fb.w) x = rng.uniform() * 2.0 - 1.0;
    return fb;
}

} // namespace graddetail

inline GradReport gradcheck_conv(std::uint64_t seed, int J, int K, int H, int k, int stride, int pad) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({2, J, H, H}, seed);
    FilterBankD fb = rand_b(J, K, k, seed + 1);
    std::vector<double> bias(static_cast<std::size_t>(K));
    Rng brng(seed + 2, "bias");
    for (auto& b : bias) b = brng.uniform() - 0.5;

    auto forward = [&] {
        TensorD y = conv2d(x, fb, stride, pad, &bias);
        return y;
    };
    TensorD y0 = forward();
    auto w = loss_weights(y0.numel(), seed + 3);
    auto f = [&] {
        TensorD y = forward();
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(y0.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    ConvGrads<double> g = conv2d_backward(x, fb, stride, pad, dy);

    check_vector(r, x.v, g.dx.v, f);
    check_vector(r, fb.w, g.dw.w, f);
    check_vector(r, bias, g.dbias, f);
    return r;
}

inline GradReport gradcheck_bn_fixed(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({2, 3, 4, 4}, seed, -2, 2);
    BnStats<double> st;
    st.mean = {0.2, -0.5, 1.0};
    st.var = {0.9, 1.7, 0.3};
    st.gamma = {1.2, -0.6, 0.8};
    st.beta = {0.0, 0.3, -0.2};
    auto w = loss_weights(x.numel(), seed + 1);
    auto f = [&] {
        TensorD y = batch_norm(x, st);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(x.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    BnGrads<double> g = batch_norm_backward(x, st, dy);
    check_vector(r, x.v, g.dx.v, f);
    check_vector(r, st.gamma, g.dgamma, f);
    check_vector(r, st.beta, g.dbeta, f);
    return r;
}

inline GradReport gradcheck_bn_train(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({2, 2, 3, 3}, seed, -2, 2);
    std::vector<double> gamma{1.1, -0.7}, beta{0.2, 0.5};
    auto w = loss_weights(x.numel(), seed + 1);
    auto f = [&] {
        BnTrainCache<double> c;
        TensorD y = bn_train_forward(x, gamma, beta, c);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(x.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    BnTrainCache<double> cache;
    bn_train_forward(x, gamma, beta, cache);
    BnGrads<double> g = bn_train_backward(x, gamma, cache, dy);
    check_vector(r, x.v, g.dx.v, f);
    check_vector(r, gamma, g.dgamma, f);
    check_vector(r, beta, g.dbeta, f);
    return r;
}

inline GradReport gradcheck_relu(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({3, 4, 4}, seed, -2, 2);
    for (auto& v : x.v)
        if (std::abs(v) < 0.05) v = 0.1; // keep probes away from the kink
    auto w = loss_weights(x.numel(), seed + 1);
    auto f = [&] {
        TensorD y = activate_relu(x);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(x.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    TensorD dx = relu_backward(x, dy);
    check_vector(r, x.v, dx.v, f);
    return r;
}

inline GradReport gradcheck_truncate(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    const double T = 1.0;
    TensorD x = rand_t({3, 4, 4}, seed, -2, 2);
    for (auto& v : x.v)
        if (std::abs(std::abs(v) - T) < 0.05) v *= 0.8;
    auto w = loss_weights(x.numel(), seed + 1);
    auto f = [&] {
        TensorD y = activate_truncate(x, T);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(x.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    TensorD dx = truncate_backward(x, T, dy);
    check_vector(r, x.v, dx.v, f);
    return r;
}

inline GradReport gradcheck_avg_pool(std::uint64_t seed, int k, int stride, int pad) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({2, 2, 6, 6}, seed);
    TensorD y0 = avg_pool(x, k, stride, pad);
    auto w = loss_weights(y0.numel(), seed + 1);
    auto f = [&] {
        TensorD y = avg_pool(x, k, stride, pad);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(y0.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    TensorD dx = avg_pool_backward(x.shape, k, stride, pad, dy);
    check_vector(r, x.v, dx.v, f);
    return r;
}

inline GradReport gradcheck_global_pool(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({2, 3, 5, 5}, seed);
    TensorD y0 = global_avg_pool(x);
    auto w = loss_weights(y0.numel(), seed + 1);
    auto f = [&] {
        TensorD y = global_avg_pool(x);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy(y0.shape);
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    TensorD dx = global_avg_pool_backward(x.shape, dy);
    check_vector(r, x.v, dx.v, f);
    return r;
}

inline GradReport gradcheck_add(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD a = rand_t({2, 3, 3}, seed);
    TensorD b = rand_t({2, 3, 3}, seed + 1);
    auto w = loss_weights(a.numel(), seed + 2);
    auto f = [&] {
        TensorD y = add(a, b);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    // d(add)/da = d(add)/db = identity, so both gradients equal the loss weights.
    check_vector(r, a.v, w, f);
    check_vector(r, b.v, w, f);
    return r;
}

inline GradReport gradcheck_fc(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD x = rand_t({3, 5}, seed);
    TensorD wgt = rand_t({4, 5}, seed + 1);
    std::vector<double> bias(4);
    Rng brng(seed + 2, "fcb");
    for (auto& b : bias) b = brng.uniform() - 0.5;
    auto w = loss_weights(12, seed + 3);
    auto f = [&] {
        TensorD y = fc_forward(x, wgt, bias);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y.v[i] * w[i];
        return s;
    };
    TensorD dy({3, 4});
    for (std::size_t i = 0; i < dy.numel(); ++i) dy.v[i] = w[i];
    FcGrads<double> g = fc_backward(x, wgt, dy);
    check_vector(r, x.v, g.dx.v, f);
    check_vector(r, wgt.v, g.dw.v, f);
    check_vector(r, bias, g.dbias, f);
    return r;
}

inline GradReport gradcheck_softmax_ce(std::uint64_t seed) {
    using namespace graddetail;
    GradReport r;
    TensorD logits = rand_t({4, 2}, seed, -2, 2);
    std::vector<int> labels{0, 1, 1, 0};
    auto f = [&] {
        TensorD d;
        return softmax_cross_entropy(logits, labels, d);
    };
    TensorD dlogits;
    softmax_cross_entropy(logits, labels, dlogits);
    check_vector(r, logits.v, dlogits.v, f);
    return r;
}

inline GradReport gradcheck_all(std::uint64_t seed) {
    GradReport total;
    for (const GradReport& r :
         {gradcheck_conv(seed, 2, 3, 5, 3, 2, 1), gradcheck_conv(seed + 1, 3, 2, 6, 1, 1, 0),
          gradcheck_bn_fixed(seed + 2), gradcheck_bn_train(seed + 3), gradcheck_relu(seed + 4),
          gradcheck_truncate(seed + 5), gradcheck_avg_pool(seed + 6, 2, 2, 0),
          gradcheck_avg_pool(seed + 7, 3, 2, 1), gradcheck_global_pool(seed + 8),
          gradcheck_add(seed + 9), gradcheck_fc(seed + 10), gradcheck_softmax_ce(seed + 11)}) {
        total.worst_rel = std::max(total.worst_rel, r.worst_rel);
        total.checked += r.checked;
    }
    return total;
}

} // namespace calpa
