// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "sella/tensor.hpp"

namespace sella {

// A named trainable tensor. `trainable` acts as the gradient mask: graphs
// only propagate into parameters whose flag is set.
struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = false;
};

// A named set of parameters that is frozen or trained as a unit.
struct ParamGroup {
  std::string name;
  std::vector<Parameter*> params;

  void set_trainable(bool on) const {
    for (Parameter* p : params) p->trainable = on;
  }
};

// Serialized bytes of every tensor in the group, in order. Used to audit
// that frozen groups are untouched by a stage.
std::string group_bytes(const ParamGroup& group);

}  // namespace sella
