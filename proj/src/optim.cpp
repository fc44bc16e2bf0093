// SPDX-License-Identifier: Apache-2.0
#include "sella/optim.hpp"

#include <cmath>

#include "sella/errors.hpp"

namespace sella {

std::string group_bytes(const ParamGroup& group) {
  std::string out;
  for (const Parameter* p : group.params) {
    out += p->name;
    out += '\n';
    out += tensor_bytes(p->value);
  }
  return out;
}

void GradAccumulator::add(const Gradients& grads, double weight) {
  for (const auto& [param, g] : grads.by_parameter()) {
    Tensor& dst = sums_[param];
    if (dst.empty()) dst = Tensor(g.shape());
    auto d = dst.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += weight * s[i];
  }
}

void Adam::step(const GradAccumulator& grads) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (Parameter* param : params_) {
    if (!param->trainable) continue;
    auto it = grads.sums().find(param);
    if (it == grads.sums().end()) continue;
    const Tensor& g = it->second;
    if (!g.all_finite()) throw NumericError("adam: non-finite gradient for " + param->name);
    Moments& mo = moments_[param];
    if (mo.m.empty()) {
      mo.m = Tensor(g.shape());
      mo.v = Tensor(g.shape());
    }
    auto w = param->value.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mo.m[i] = cfg_.beta1 * mo.m[i] + (1.0 - cfg_.beta1) * g[i];
      mo.v[i] = cfg_.beta2 * mo.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      w[i] -= cfg_.lr * (mo.m[i] / bc1) / (std::sqrt(mo.v[i] / bc2) + cfg_.eps);
    }
  }
}

}  // namespace sella
