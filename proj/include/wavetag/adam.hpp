#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "wavetag/error.hpp"
#include "wavetag/params.hpp"

namespace wavetag {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  bool operator==(const AdamHyper&) const = default;
};

// Moment buffers indexed like the ParamStore; empty tensors for buffers.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t t = 0;
  AdamHyper hyper;

  static AdamState fresh(const ParamStore<T>& params, AdamHyper h = {}) {
    AdamState s;
    s.hyper = h;
    for (const auto& p : params) {
      s.m.emplace_back(p.trainable ? Tensor<T>(p.value.shape()) : Tensor<T>());
      s.v.emplace_back(p.trainable ? Tensor<T>(p.value.shape()) : Tensor<T>());
    }
    return s;
  }

  bool operator==(const AdamState&) const = default;
};

// One bias-corrected Adam update of every trainable parameter from its grad.
// Gradients are validated before anything is modified.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state, double lr) {
  if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameter store");
  for (const auto& p : params) {
    if (p.trainable && !p.grad.all_finite()) throw NonFiniteError("adam: non-finite gradient in '" + p.name + "'");
  }
  state.t += 1;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      const double mk = h.beta1 * m[k] + (1.0 - h.beta1) * g;
      const double vk = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double mhat = mk / c1;
      const double vhat = vk / c2;
      p.value[k] = static_cast<T>(p.value[k] - lr * mhat / (std::sqrt(vhat) + h.eps));
    }
  }
}

}  // namespace wavetag
