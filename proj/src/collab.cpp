// SPDX-License-Identifier: Apache-2.0
#include "sella/collab.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "sella/errors.hpp"
#include "sella/metrics.hpp"
#include "sella/optim.hpp"

namespace sella {
namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

std::vector<double> scores_for(const CollabModel& m, std::span<const LabeledPair> pairs) {
  std::vector<double> s;
  s.reserve(pairs.size());
  for (const auto& p : pairs) s.push_back(m.predict(p.user_row, p.item_row));
  return s;
}

}  // namespace

CollabModel::CollabModel(std::size_t n_users, std::size_t n_items, std::size_t dim, std::uint64_t seed) {
  if (n_users == 0 || n_items == 0 || dim == 0) throw ContractViolation("CollabModel: empty table");
  std::mt19937_64 rng(seed);
  users.value = gaussian(n_users, dim, kCollabInitStd, rng);
  items.value = gaussian(n_items, dim, kCollabInitStd, rng);
}

double CollabModel::predict(std::size_t user_row, std::size_t item_row) const {
  if (user_row >= num_users()) throw LookupError("collab: user row " + std::to_string(user_row) + " out of range");
  if (item_row >= num_items()) throw LookupError("collab: item row " + std::to_string(item_row) + " out of range");
  auto u = users.value.row_span(user_row);
  auto i = items.value.row_span(item_row);
  return std::inner_product(u.begin(), u.end(), i.begin(), 0.0);
}

void CollabModel::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "collab_users.tensor", users.value);
  save_tensor(dir / "collab_items.tensor", items.value);
}

CollabModel CollabModel::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "collab_users.tensor")) {
    throw PrerequisiteError("no collaborative model in " + dir.string());
  }
  CollabModel m;
  m.users.value = load_tensor(dir / "collab_users.tensor");
  m.items.value = load_tensor(dir / "collab_items.tensor");
  return m;
}

ProjCtoL::ProjCtoL(std::size_t d_c, std::size_t hidden, std::size_t d_l, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  w1.value = gaussian(d_c, hidden, 1.0 / std::sqrt(static_cast<double>(d_c)), rng);
  b1.value = Tensor::zeros(1, hidden);
  w2.value = gaussian(hidden, d_l, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  b2.value = Tensor::zeros(1, d_l);
}

NodeId ProjCtoL::apply(Graph& g, NodeId x) const {
  NodeId h = g.gelu(g.add(g.matmul(x, g.parameter(w1)), g.parameter(b1)));
  return g.add(g.matmul(h, g.parameter(w2)), g.parameter(b2));
}

Tensor ProjCtoL::apply(const Tensor& x) const {
  Graph g;
  return g.value(apply(g, g.constant(x)));
}

void ProjCtoL::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const Parameter* p : {&w1, &b1, &w2, &b2}) write_tensor(os, p->value);
}

ProjCtoL ProjCtoL::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PrerequisiteError("no projection at " + path.string());
  ProjCtoL p;
  for (Parameter* q : {&p.w1, &p.b1, &p.w2, &p.b2}) q->value = read_tensor(is);
  return p;
}

nlohmann::json AlignConfig::to_json() const {
  return {{"tau", tau},     {"lambda", lambda},     {"batch_size", batch_size}, {"align_batch_size", align_batch_size},
          {"proj_hidden", proj_hidden},
          {"epochs", epochs}, {"patience", patience}, {"lr", lr},                 {"seed", seed}};
}

NodeId collab_loss(Graph& g, const CollabModel& model, std::span<const LabeledPair> batch) {
  if (batch.empty()) throw ContractViolation("collab_loss: empty batch");
  std::vector<std::size_t> urows;
  std::vector<std::size_t> irows;
  Tensor y = Tensor::zeros(batch.size(), 1);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    urows.push_back(batch[k].user_row);
    irows.push_back(batch[k].item_row);
    y(k, 0) = batch[k].label;
  }
  NodeId u = g.embedding_lookup(g.parameter(model.users), std::move(urows));
  NodeId i = g.embedding_lookup(g.parameter(model.items), std::move(irows));
  NodeId s = g.matmul(g.mul(u, i), g.constant(Tensor::full(model.dim(), 1, 1.0)));
  NodeId err = g.sub(g.constant(std::move(y)), s);
  return g.mean(g.mul(err, err));
}

double collab_loss(const CollabModel& model, std::span<const LabeledPair> batch) {
  Graph g;
  return g.value(collab_loss(g, model, batch)).item();
}

NodeId align_loss(Graph& g, const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank,
                  std::span<const std::size_t> item_rows, double tau) {
  if (item_rows.empty()) throw ContractViolation("align_loss: empty item batch");
  if (!(tau > 0.0)) throw ContractViolation("align_loss: tau must be positive");
  for (std::size_t r : item_rows) {
    if (r >= bank.size()) throw LookupError("align_loss: item row " + std::to_string(r) + " missing from bank");
  }
  const std::vector<std::size_t> rows(item_rows.begin(), item_rows.end());
  NodeId anchors = proj.apply(g, g.embedding_lookup(g.parameter(model.items), rows));
  NodeId targets = g.embedding_lookup(g.parameter(bank.vectors), rows);
  NodeId logits = g.scale(g.cosine_similarity(anchors, targets), 1.0 / tau);
  NodeId logp = g.log_softmax(logits);
  NodeId diag = g.sum(g.mul(logp, g.constant(Tensor::identity(rows.size()))));
  return g.scale(diag, -1.0 / static_cast<double>(rows.size()));
}

double align_loss(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank,
                  std::span<const std::size_t> item_rows, double tau) {
  Graph g;
  return g.value(align_loss(g, model, proj, bank, item_rows, tau)).item();
}

double info_nce(const Tensor& anchors, const Tensor& targets, double tau) {
  Graph g;
  NodeId logits = g.scale(g.cosine_similarity(g.constant(anchors), g.constant(targets)), 1.0 / tau);
  NodeId logp = g.log_softmax(logits);
  const std::size_t b = anchors.rows();
  NodeId diag = g.sum(g.mul(logp, g.constant(Tensor::identity(b))));
  return -g.value(diag).item() / static_cast<double>(b);
}

std::vector<double> item_cosines(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank) {
  const Tensor projected = proj.apply(model.items.value);
  std::vector<double> out(bank.size(), 0.0);
  for (std::size_t r = 0; r < bank.size(); ++r) {
    auto a = projected.row_span(r);
    auto b = bank.row(r);
    const double dot = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
    const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
    const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
    out[r] = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (na * nb);
  }
  return out;
}

double mean_item_cosine(const CollabModel& model, const ProjCtoL& proj, const SemanticBank& bank) {
  const auto c = item_cosines(model, proj, bank);
  return std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
}

std::vector<LabeledPair> labeled_pairs(const InteractionDataset& ds, std::span<const std::size_t> positions) {
  std::vector<LabeledPair> out;
  out.reserve(positions.size());
  for (std::size_t p : positions) {
    const Interaction& x = ds.interactions[p];
    out.push_back({ds.user_index(x.user_id), ds.item_index(x.item_id), x.label});
  }
  return out;
}

Stage2Result train_stage2(const InteractionDataset& ds, SemanticBank bank, std::size_t d_c, const AlignConfig& cfg) {
  if (bank.provenance != Provenance::kDistilled) {
    throw ContractViolation("train_stage2: expected a distilled semantic bank");
  }
  if (bank.size() != ds.num_items()) {
    throw ContractViolation("train_stage2: bank has " + std::to_string(bank.size()) + " rows for " +
                            std::to_string(ds.num_items()) + " items");
  }
  if (!(cfg.tau > 0.0)) throw ContractViolation("train_stage2: tau must be positive");
  if (cfg.lambda < 0.0) throw ContractViolation("train_stage2: lambda must be non-negative");

  Stage2Result res;
  res.collab = CollabModel(ds.num_users(), ds.num_items(), d_c, cfg.seed);
  res.proj = ProjCtoL(d_c, cfg.proj_hidden, bank.dim(), cfg.seed + 1);
  res.bank = std::move(bank);

  const bool align = cfg.lambda > 0.0;
  res.collab.users.trainable = true;
  res.collab.items.trainable = true;
  for (Parameter* p : res.proj.group().params) p->trainable = align;
  res.bank.vectors.trainable = align;

  std::vector<Parameter*> params{&res.collab.users, &res.collab.items, &res.bank.vectors};
  for (Parameter* p : res.proj.group().params) params.push_back(p);
  Adam opt(AdamConfig{.lr = cfg.lr}, params);

  const auto train = labeled_pairs(ds, ds.positions(Split::kTrain));
  const auto valid = labeled_pairs(ds, ds.positions(Split::kValid));
  std::vector<int> valid_labels;
  for (const auto& p : valid) valid_labels.push_back(p.label);

  std::mt19937_64 rng(cfg.seed + 2);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::size_t> item_order(ds.num_items());
  std::iota(item_order.begin(), item_order.end(), 0);
  std::size_t item_cursor = item_order.size();

  std::vector<Tensor> best{res.collab.users.value, res.collab.items.value, res.bank.vectors.value};
  for (Parameter* p : res.proj.group().params) best.push_back(p->value);
  res.best_valid_auc = -1.0;
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<LabeledPair> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(train[order[k]]);
      Graph g;
      NodeId loss = collab_loss(g, res.collab, batch);
      if (align) {
        std::vector<std::size_t> items;
        while (items.size() < std::min(cfg.align_batch_size, item_order.size())) {
          if (item_cursor == item_order.size()) {
            std::shuffle(item_order.begin(), item_order.end(), rng);
            item_cursor = 0;
          }
          items.push_back(item_order[item_cursor++]);
        }
        loss = g.add(loss, g.scale(align_loss(g, res.collab, res.proj, res.bank, items, cfg.tau), cfg.lambda));
      }
      const double lv = g.value(loss).item();
      if (!std::isfinite(lv)) {
        throw NumericError("train_stage2: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(steps));
      }
      GradAccumulator acc;
      acc.add(g.backward(loss));
      opt.step(acc);
      loss_sum += lv;
      ++steps;
    }
    const double vauc = auc(scores_for(res.collab, valid), valid_labels);
    res.log.push_back({epoch, loss_sum / static_cast<double>(std::max<std::size_t>(steps, 1)), vauc});
    if (vauc > res.best_valid_auc) {
      res.best_valid_auc = vauc;
      res.best_epoch = epoch;
      since_best = 0;
      best = {res.collab.users.value, res.collab.items.value, res.bank.vectors.value};
      for (Parameter* p : res.proj.group().params) best.push_back(p->value);
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  res.collab.users.value = best[0];
  res.collab.items.value = best[1];
  res.bank.vectors.value = best[2];
  auto proj_params = res.proj.group().params;
  for (std::size_t k = 0; k < proj_params.size(); ++k) proj_params[k]->value = best[3 + k];
  for (Parameter* p : params) p->trainable = false;
  res.bank.provenance = Provenance::kAligned;
  return res;
}

}  // namespace sella
