// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sella/collab.hpp"
#include "sella/data.hpp"
#include "sella/minilm.hpp"

namespace sella {

struct TrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t patience = 5;
};

// Every knob of a run. Defaults are listed by `describe_config()`.
struct RunConfig {
  // Data: synthetic unless both paths are set.
  std::string ratings_path;
  std::string items_path;
  int threshold = 3;
  std::size_t min_user_interactions = 0;
  std::array<double, 3> split = {0.5, 0.25, 0.25};
  SynthConfig synth;

  // Models.
  LmConfig lm;
  std::size_t d_c = 32;
  std::size_t proj_hidden = 64;
  std::size_t history_k = 10;

  // Stages.
  TrainConfig stage1{1e-3, 10, 16, 5};
  TrainConfig stage2{1e-3, 200, 64, 5};
  TrainConfig stage3{1e-4, 10, 16, 5};
  double lambda = 0.1;
  double tau = 0.07;
  std::size_t align_batch_size = 64;

  std::uint64_t seed = 1;
  std::string out_dir = "runs/default";

  // Applies one key=value pair. Throws ContractViolation on an unknown key
  // or a malformed value.
  void set(std::string_view key, std::string_view value);
  // Lines of "key = value"; '#' starts a comment.
  void load_file(const std::filesystem::path& path);

  AlignConfig align_config() const;
  bool synthetic() const { return ratings_path.empty() && items_path.empty(); }

  nlohmann::json to_json() const;
  std::string hash() const;
};

struct ConfigKey {
  std::string key;
  std::string default_value;
  std::string doc;
};

// Every accepted key with its default and a one-line description.
std::vector<ConfigKey> describe_config();

}  // namespace sella
