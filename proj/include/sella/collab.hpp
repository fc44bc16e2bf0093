// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "sella/autograd.hpp"
#include "sella/data.hpp"
#include "sella/distill.hpp"
#include "sella/parameter.hpp"

namespace sella {

inline constexpr double kCollabInitStd = 0.01;

// Matrix factorization: user and item tables of width d_C scored by inner
// product. Rows follow the dataset's dense user/item indices.
class CollabModel {
 public:
  CollabModel() = default;
  CollabModel(std::size_t n_users, std::size_t n_items, std::size_t dim, std::uint64_t seed);

  std::size_t dim() const { return users.value.cols(); }
  std::size_t num_users() const { return users.value.rows(); }
  std::size_t num_items() const { return items.value.rows(); }

  double predict(std::size_t user_row, std::size_t item_row) const;

  ParamGroup user_group() { return {"collab.users", {&users}}; }
  ParamGroup item_group() { return {"collab.items", {&items}}; }

  void save(const std::filesystem::path& dir) const;
  static CollabModel load(const std::filesystem::path& dir);

  Parameter users{"collab.users", {}, false};
  Parameter items{"collab.items", {}, false};
};

// Two-layer map from collaborative to language-model space:
// GELU(x W1 + b1) W2 + b2, applied to row vectors.
class ProjCtoL {
 public:
  ProjCtoL() = default;
  ProjCtoL(std::size_t d_c, std::size_t hidden, std::size_t d_l, std::uint64_t seed);

  std::size_t in_dim() const { return w1.value.rows(); }
  std::size_t out_dim() const { return w2.value.cols(); }

  NodeId apply(Graph& g, NodeId x) const;
  Tensor apply(const Tensor& x) const;

  ParamGroup group() { return {"proj_c2l", {&w1, &b1, &w2, &b2}}; }

  void save(const std::filesystem::path& path) const;
  static ProjCtoL load(const std::filesystem::path& path);

  Parameter w1{"proj_c2l.w1", {}, false};
  Parameter b1{"proj_c2l.b1", {}, false};
  Parameter w2{"proj_c2l.w2", {}, false};
  Parameter b2{"proj_c2l.b2", {}, false};
};

struct AlignConfig {
  double tau = 0.07;
  double lambda = 0.1;
  std::size_t batch_size = 64;
  std::size_t align_batch_size = 64;
  std::size_t proj_hidden = 64;
  std::size_t epochs = 200;
  std::size_t patience = 5;
  double lr = 1e-3;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
};

struct LabeledPair {
  std::size_t user_row = 0;
  std::size_t item_row = 0;
  int label = 0;
};

// mean((y - <e_u, e_i>)^2)
NodeId collab_loss(Graph& g, const CollabModel& model, std::span<const LabeledPair> batch);
double collab_loss(const CollabModel& model, std::span<const LabeledPair> batch);

// In-batch InfoNCE between projected collaborative item vectors and their
// semantic vectors: mean_i -log softmax_j(cos(proj(c_i), s_j) / tau)[i].
NodeId align_loss(Graph& g, const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank,
                  std::span<const std::size_t> item_rows, double tau);
double align_loss(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank,
                  std::span<const std::size_t> item_rows, double tau);

// Same objective over explicit matrices; used by the checks that compare
// against a direct formula.
double info_nce(const Tensor& anchors, const Tensor& targets, double tau);

// Per-item cosine between proj(item row) and the bank row.
std::vector<double> item_cosines(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank);
double mean_item_cosine(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_auc = 0.0;
};

struct Stage2Result {
  CollabModel collab;
  ProjCtoL proj;
  SemanticBank bank;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_valid_auc = 0.0;
};

// Minimizes collab_loss + lambda * align_loss over the train split. The bank
// and projection are trained only when lambda > 0. Keeps the snapshot with
// the best validation AUC.
Stage2Result train_stage2(const InteractionDataset& ds, SemanticBank bank, std::size_t d_c,
                          const AlignConfig& cfg);

std::vector<LabeledPair> labeled_pairs(const InteractionDataset& ds, std::span<const std::size_t> positions);

}  // namespace sella
