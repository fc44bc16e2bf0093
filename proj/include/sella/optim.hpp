// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <unordered_map>
#include <vector>

#include "sella/autograd.hpp"
#include "sella/parameter.hpp"

namespace sella {

// Sums parameter gradients over the examples of a minibatch.
class GradAccumulator {
 public:
  void add(const Gradients& grads, double weight = 1.0);
  bool empty() const { return sums_.empty(); }
  void clear() { sums_.clear(); }
  const std::unordered_map<const Parameter*, Tensor>& sums() const { return sums_; }

 private:
  std::unordered_map<const Parameter*, Tensor> sums_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction over a fixed parameter list. Parameters whose
// trainable flag is off are skipped even if a gradient is present.
class Adam {
 public:
  Adam(AdamConfig cfg, std::vector<Parameter*> params) : cfg_(cfg), params_(std::move(params)) {}

  void step(const GradAccumulator& grads);
  std::size_t steps() const { return t_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  AdamConfig cfg_;
  std::vector<Parameter*> params_;
  std::size_t t_ = 0;
  std::unordered_map<const Parameter*, Moments> moments_;
};

}  // namespace sella
