#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace calpa {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major N-d array. Rank 3 is (C,H,W), rank 4 is (N,C,H,W).
template <class S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> sh, S fill = S(0)) : shape(std::move(sh)) {
        v.assign(numel_of(shape), fill);
    }

    static std::size_t numel_of(const std::vector<int>& sh) {
        std::size_t n = 1;
        for (int d : sh) {
            if (d < 0) throw ShapeError("tensor: negative dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return v.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    S& at(int a) { return v[idx({a})]; }
    S& at(int a, int b) { return v[idx({a, b})]; }
    S& at(int a, int b, int c) { return v[idx({a, b, c})]; }
    S& at(int a, int b, int c, int d) { return v[idx({a, b, c, d})]; }
    const S& at(int a) const { return v[idx({a})]; }
    const S& at(int a, int b) const { return v[idx({a, b})]; }
    const S& at(int a, int b, int c) const { return v[idx({a, b, c})]; }
    const S& at(int a, int b, int c, int d) const { return v[idx({a, b, c, d})]; }

    std::size_t idx(std::initializer_list<int> ix) const {
        if (ix.size() != shape.size()) throw ShapeError("tensor: index rank mismatch");
        std::size_t flat = 0;
        std::size_t k = 0;
        for (int i : ix) {
            flat = flat * static_cast<std::size_t>(shape[k]) + static_cast<std::size_t>(i);
            ++k;
        }
        return flat;
    }

    template <class T>
    Tensor<T> cast() const {
        Tensor<T> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<T>(v[i]);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Filter bank W^l: K output channels, each a J x Wk x Wk cube.
// Layout [K][J][kh][kw], so the K-th cube (all kernels feeding output k)
// is one contiguous run and single kernels are strided views.
template <class S>
struct FilterBank {
    int J = 0;
    int K = 0;
    int Wk = 0;
    std::vector<S> w;

    FilterBank() = default;
    FilterBank(int j, int k, int wk) : J(j), K(k), Wk(wk) {
        if (j < 1 || k < 1 || wk < 1) throw ShapeError("filter bank: J, K, Wk must be >= 1");
        w.assign(static_cast<std::size_t>(j) * k * wk * wk, S(0));
    }

    std::size_t per_out() const { return static_cast<std::size_t>(J) * Wk * Wk; }

    S& at(int k, int j, int a, int b) {
        return w[((static_cast<std::size_t>(k) * J + j) * Wk + a) * Wk + b];
    }
    const S& at(int k, int j, int a, int b) const {
        return w[((static_cast<std::size_t>(k) * J + j) * Wk + a) * Wk + b];
    }

    // View of all kernels feeding output channel k (a J x Wk x Wk cube).
    const S* out_cube(int k) const { return w.data() + static_cast<std::size_t>(k) * per_out(); }
    S* out_cube(int k) { return w.data() + static_cast<std::size_t>(k) * per_out(); }

    Tensor<S> to_tensor() const {
        Tensor<S> t({K, J, Wk, Wk});
        t.v = w;
        return t;
    }
    static FilterBank from_tensor(const Tensor<S>& t) {
        if (t.rank() != 4 || t.dim(2) != t.dim(3)) throw ShapeError("filter bank: want (K,J,Wk,Wk)");
        FilterBank fb(t.dim(1), t.dim(0), t.dim(2));
        fb.w = t.v;
        return fb;
    }

    template <class T>
    FilterBank<T> cast() const {
        FilterBank<T> out(J, K, Wk);
        for (std::size_t i = 0; i < w.size(); ++i) out.w[i] = static_cast<T>(w[i]);
        return out;
    }
};

using FilterBankF = FilterBank<float>;
using FilterBankD = FilterBank<double>;

// Binary blob: 16-byte header (magic "CLPT", u32 version, u32 rank, u32 reserved),
// little-endian u32 dims, then little-endian f32 values row-major.
void save_blob(const std::string& path, const TensorF& t);
TensorF load_blob(const std::string& path);
void append_blob(std::vector<std::uint8_t>& out, const TensorF& t);
TensorF read_blob(const std::uint8_t* data, std::size_t size, std::size_t& off);

} // namespace calpa
