#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "rstm/ops.hpp"
#include "rstm/rng.hpp"
#include "rstm/tape.hpp"
#include "rstm/tensor.hpp"

namespace rstm {

// Named parameter collection with per-parameter ADAM state. Iteration is in
// sorted name order so update order is deterministic.
template <typename T>
class ParamStore {
  public:
    struct Entry {
        Tensor<T> value;
        Tensor<T> m, v;  // ADAM moments, allocated on first step
        std::int64_t step = 0;
        bool trainable = true;
    };

    Tensor<T>& add(const std::string& name, std::vector<int> dims, bool trainable = true) {
        auto [it, inserted] = entries_.emplace(name, Entry{});
        if (!inserted) throw std::logic_error("ParamStore: duplicate name " + name);
        it->second.value = Tensor<T>(std::move(dims));
        it->second.trainable = trainable;
        return it->second.value;
    }

    Tensor<T>& get(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return it->second.value;
    }
    const Tensor<T>& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return it->second.value;
    }
    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw std::out_of_range("ParamStore: no parameter " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }
    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    void zero_grads() {
        for (auto& [k, e] : entries_)
            if (!e.value.grad.empty()) e.value.zero_grad();
    }

    // One ADAM update for every trainable parameter whose name matches the
    // prefix and which accumulated a gradient this step.
    void adam_step(const std::string& prefix, T lr, T beta1, T beta2, T eps = T(1e-8)) {
        for (auto& [k, e] : entries_) {
            if (!e.trainable || e.value.grad.empty()) continue;
            if (k.rfind(prefix, 0) != 0) continue;
            if (e.m.data.empty()) {
                e.m = Tensor<T>(e.value.dims);
                e.v = Tensor<T>(e.value.dims);
            }
            ++e.step;
            T bc1 = T(1) - std::pow(beta1, static_cast<T>(e.step));
            T bc2 = T(1) - std::pow(beta2, static_cast<T>(e.step));
            for (std::size_t i = 0; i < e.value.data.size(); ++i) {
                T g = e.value.grad[i];
                e.m.data[i] = beta1 * e.m.data[i] + (T(1) - beta1) * g;
                e.v.data[i] = beta2 * e.v.data[i] + (T(1) - beta2) * g * g;
                T mhat = e.m.data[i] / bc1;
                T vhat = e.v.data[i] / bc2;
                e.value.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& [k, e] : entries_) {
            auto& t = out.add(k, e.value.dims, e.trainable);
            t = e.value.template cast<U>();
        }
        return out;
    }

    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

  private:
    std::map<std::string, Entry> entries_;
};

// --------------------------------------------------------------------------
// initializers

template <typename T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev) {
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * stddev);
}

// He-style scaling from fan-in; fan_in = product of dims past the first
template <typename T>
void init_kaiming(Tensor<T>& t, Rng& rng) {
    std::int64_t fan_in = 1;
    for (std::size_t i = 1; i < t.dims.size(); ++i) fan_in *= t.dims[i];
    init_normal(t, rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

// --------------------------------------------------------------------------
// spectral normalization (power iteration)

// One-shot: divide the matrix view [rows = dims[0], cols = rest] by its
// estimated largest singular value. u is persistent power-iteration state.
// A zero matrix is returned unchanged.
template <typename T>
Tensor<T> spectral_normalize(const Tensor<T>& w, std::vector<T>& u, int iters) {
    int rows = w.dims[0];
    std::int64_t cols = w.size() / rows;
    if (static_cast<int>(u.size()) != rows) u.assign(static_cast<std::size_t>(rows), T(1));
    ECMap<T> W(w.data.data(), rows, static_cast<int>(cols));
    Eigen::Matrix<T, Eigen::Dynamic, 1> uv =
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(u.data(), rows);
    Eigen::Matrix<T, Eigen::Dynamic, 1> vv(cols);
    for (int it = 0; it < iters; ++it) {
        vv.noalias() = W.transpose() * uv;
        T nv = vv.norm();
        if (nv < T(1e-12)) return w;  // zero matrix
        vv /= nv;
        uv.noalias() = W * vv;
        T nu = uv.norm();
        if (nu < T(1e-12)) return w;
        uv /= nu;
    }
    T sigma = uv.dot(W * vv);
    for (int r = 0; r < rows; ++r) u[static_cast<std::size_t>(r)] = uv(r);
    if (sigma < T(1e-12)) return w;
    Tensor<T> out = w;
    for (auto& x : out.data) x /= sigma;
    return out;
}

// Graph version used during training: u/v are refreshed outside the graph
// (one power iteration per call when update_u), then sigma = u^T W v is built
// from differentiable primitives so gradients flow through the division.
template <typename T>
Var<T> spectral_norm_var(Tape<T>& tape, Var<T> w_var, Tensor<T>& u_state, bool update_u) {
    const Tensor<T>& w = w_var.val();
    int rows = w.dims[0];
    std::int64_t cols = w.size() / rows;
    if (u_state.data.size() != static_cast<std::size_t>(rows)) {
        u_state = Tensor<T>({rows}, T(1));
    }
    ECMap<T> W(w.data.data(), rows, static_cast<int>(cols));
    Eigen::Matrix<T, Eigen::Dynamic, 1> uv =
        Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(u_state.data.data(), rows);
    Eigen::Matrix<T, Eigen::Dynamic, 1> vv(cols);
    vv.noalias() = W.transpose() * uv;
    T nv = vv.norm();
    if (nv < T(1e-12)) return w_var;
    vv /= nv;
    if (update_u) {
        Eigen::Matrix<T, Eigen::Dynamic, 1> unew = W * vv;
        T nu = unew.norm();
        if (nu > T(1e-12)) {
            unew /= nu;
            for (int r = 0; r < rows; ++r) u_state.data[static_cast<std::size_t>(r)] = unew(r);
            uv = unew;
            vv.noalias() = W.transpose() * uv;
            nv = vv.norm();
            if (nv < T(1e-12)) return w_var;
            vv /= nv;
        }
    }
    Tensor<T> ut({rows, 1});
    for (int r = 0; r < rows; ++r) ut.data[static_cast<std::size_t>(r)] = uv(r);
    Tensor<T> vt({static_cast<int>(cols), 1});
    for (std::int64_t c = 0; c < cols; ++c) vt.data[static_cast<std::size_t>(c)] = vv(c);
    Var<T> w2d = reshape(w_var, {rows, static_cast<int>(cols)});
    Var<T> Wv = matmul(w2d, tape.constant(vt));
    Var<T> sigma = sum_all(mul(tape.constant(ut), Wv));
    if (std::abs(sigma.val().data[0]) < T(1e-12)) return w_var;
    return mul_scalar(w_var, reciprocal(sigma));
}

}  // namespace rstm
