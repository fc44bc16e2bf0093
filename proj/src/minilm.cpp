// SPDX-License-Identifier: Apache-2.0
#include "sella/minilm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "sella/errors.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

void write_group(const std::filesystem::path& path, const ParamGroup& group) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const Parameter* p : group.params) write_tensor(os, p->value);
  if (!os) throw Error("write failed: " + path.string());
}

void read_group(const std::filesystem::path& path, const ParamGroup& group) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  for (Parameter* p : group.params) {
    Tensor t = read_tensor(is);
    if (t.shape() != p->value.shape()) {
      throw DataError(path.string() + ": parameter " + p->name + " has shape " + shape_str(t.shape()) +
                      ", expected " + shape_str(p->value.shape()));
    }
    p->value = std::move(t);
  }
}

}  // namespace

nlohmann::json LmConfig::to_json() const {
  return {{"d_model", d_model},     {"n_layers", n_layers},   {"n_heads", n_heads},
          {"max_len", max_len},     {"ffn_mult", ffn_mult},   {"lora_rank", lora_rank},
          {"lora_alpha", lora_alpha}, {"seed", seed}};
}

LmConfig LmConfig::from_json(const nlohmann::json& j) {
  LmConfig c;
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.max_len = j.at("max_len");
  c.ffn_mult = j.at("ffn_mult");
  c.lora_rank = j.at("lora_rank");
  c.lora_alpha = j.at("lora_alpha");
  c.seed = j.at("seed");
  return c;
}

MiniLM::MiniLM(const LmConfig& cfg, std::size_t vocab_size) : cfg_(cfg), vocab_size_(vocab_size) {
  if (cfg.d_model == 0 || cfg.n_heads == 0 || cfg.d_model % cfg.n_heads != 0) {
    throw ContractViolation("MiniLM: d_model " + std::to_string(cfg.d_model) + " not divisible by n_heads " +
                            std::to_string(cfg.n_heads));
  }
  if (cfg.lora_rank == 0) throw ContractViolation("MiniLM: lora_rank must be positive");
  if (vocab_size <= tokens::kReservedCount) throw ContractViolation("MiniLM: vocabulary too small");

  std::mt19937_64 rng(cfg.seed);
  const std::size_t d = cfg.d_model;
  const std::size_t h = cfg.ffn_mult * d;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(cfg.n_layers, 1)));

  tok_emb_ = make("tok_emb", gaussian(vocab_size, d, emb_std, rng), backbone_);
  pos_emb_ = make("pos_emb", gaussian(cfg.max_len, d, emb_std, rng), backbone_);

  auto lora_pair = [&](const std::string& name, std::size_t in, std::size_t out) {
    LoraPair p;
    p.down = make(name + ".lora_a", gaussian(in, cfg.lora_rank, 1.0 / std::sqrt(static_cast<double>(in)), rng), lora_);
    p.up = make(name + ".lora_b", Tensor::zeros(cfg.lora_rank, out), lora_);
    return p;
  };

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    const double in_std = 1.0 / std::sqrt(static_cast<double>(d));
    Block b{};
    b.ln1_g = make(pre + "ln1.gain", Tensor::full(1, d, 1.0), backbone_);
    b.ln1_b = make(pre + "ln1.bias", Tensor::zeros(1, d), backbone_);
    b.wq = make(pre + "attn.wq", gaussian(d, d, in_std, rng), backbone_);
    b.bq = make(pre + "attn.bq", Tensor::zeros(1, d), backbone_);
    b.wk = make(pre + "attn.wk", gaussian(d, d, in_std, rng), backbone_);
    b.bk = make(pre + "attn.bk", Tensor::zeros(1, d), backbone_);
    b.wv = make(pre + "attn.wv", gaussian(d, d, in_std, rng), backbone_);
    b.bv = make(pre + "attn.bv", Tensor::zeros(1, d), backbone_);
    b.wo = make(pre + "attn.wo", gaussian(d, d, in_std * resid_scale, rng), backbone_);
    b.bo = make(pre + "attn.bo", Tensor::zeros(1, d), backbone_);
    b.ln2_g = make(pre + "ln2.gain", Tensor::full(1, d, 1.0), backbone_);
    b.ln2_b = make(pre + "ln2.bias", Tensor::zeros(1, d), backbone_);
    b.w1 = make(pre + "ffn.w1", gaussian(d, h, in_std, rng), backbone_);
    b.b1 = make(pre + "ffn.b1", Tensor::zeros(1, h), backbone_);
    b.w2 = make(pre + "ffn.w2", gaussian(h, d, resid_scale / std::sqrt(static_cast<double>(h)), rng), backbone_);
    b.b2 = make(pre + "ffn.b2", Tensor::zeros(1, d), backbone_);
    b.lq = lora_pair(pre + "attn.wq", d, d);
    b.lk = lora_pair(pre + "attn.wk", d, d);
    b.lv = lora_pair(pre + "attn.wv", d, d);
    b.lo = lora_pair(pre + "attn.wo", d, d);
    b.l1 = lora_pair(pre + "ffn.w1", d, h);
    b.l2 = lora_pair(pre + "ffn.w2", h, d);
    blocks_.push_back(b);
  }
  lnf_g_ = make("lnf.gain", Tensor::full(1, d, 1.0), backbone_);
  lnf_b_ = make("lnf.bias", Tensor::zeros(1, d), backbone_);
}

Parameter* MiniLM::make(std::string name, Tensor value, ParamGroup& group) {
  storage_.push_back(std::make_unique<Parameter>(Parameter{std::move(name), std::move(value), false}));
  group.params.push_back(storage_.back().get());
  return storage_.back().get();
}

NodeId MiniLM::embed_tokens(Graph& g, std::span<const TokenId> ids) const {
  return g.embedding_lookup(g.parameter(*tok_emb_), std::vector<std::size_t>(ids.begin(), ids.end()));
}

NodeId MiniLM::linear(Graph& g, NodeId x, const Parameter* w, const Parameter* b, const LoraPair& lora,
                      bool lora_enabled) const {
  NodeId y = g.add(g.matmul(x, g.parameter(*w)), g.parameter(*b));
  if (lora_enabled) {
    NodeId delta = g.matmul(g.matmul(x, g.parameter(*lora.down)), g.parameter(*lora.up));
    y = g.add(y, g.scale(delta, cfg_.lora_alpha / static_cast<double>(cfg_.lora_rank)));
  }
  return y;
}

NodeId MiniLM::hidden_states(Graph& g, NodeId embeddings, bool lora_enabled, AttentionCapture* capture) const {
  const Tensor& e = g.value(embeddings);
  const std::size_t len = e.rows();
  if (e.cols() != cfg_.d_model) {
    throw ContractViolation("MiniLM: embeddings have width " + std::to_string(e.cols()) + ", expected " +
                            std::to_string(cfg_.d_model));
  }
  if (len > cfg_.max_len) {
    throw ContractViolation("MiniLM: sequence length " + std::to_string(len) + " exceeds max_len " +
                            std::to_string(cfg_.max_len));
  }
  std::vector<std::size_t> positions(len);
  for (std::size_t t = 0; t < len; ++t) positions[t] = t;
  NodeId x = g.add(embeddings, g.embedding_lookup(g.parameter(*pos_emb_), std::move(positions)));

  const std::size_t dh = cfg_.d_model / cfg_.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    NodeId h = g.layer_norm(x, g.parameter(*b.ln1_g), g.parameter(*b.ln1_b));
    NodeId q = linear(g, h, b.wq, b.bq, b.lq, lora_enabled);
    NodeId k = linear(g, h, b.wk, b.bk, b.lk, lora_enabled);
    NodeId v = linear(g, h, b.wv, b.bv, b.lv, lora_enabled);
    std::vector<NodeId> heads;
    Tensor avg;
    const bool capture_layer =
        capture && std::find(capture->layers.begin(), capture->layers.end(), l) != capture->layers.end();
    for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
      NodeId qh = g.slice_cols(q, hd * dh, dh);
      NodeId kh = g.slice_cols(k, hd * dh, dh);
      NodeId vh = g.slice_cols(v, hd * dh, dh);
      NodeId att = g.causal_softmax(g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt));
      if (capture_layer) {
        const Tensor& a = g.value(att);
        if (avg.empty()) avg = Tensor(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) avg[i] += a[i] / static_cast<double>(cfg_.n_heads);
      }
      heads.push_back(g.matmul(att, vh));
    }
    if (capture_layer) capture->averaged[l] = std::move(avg);
    NodeId attn = heads.size() == 1 ? heads[0] : g.concat_cols(heads);
    x = g.add(x, linear(g, attn, b.wo, b.bo, b.lo, lora_enabled));
    NodeId h2 = g.layer_norm(x, g.parameter(*b.ln2_g), g.parameter(*b.ln2_b));
    NodeId f = g.gelu(linear(g, h2, b.w1, b.b1, b.l1, lora_enabled));
    x = g.add(x, linear(g, f, b.w2, b.b2, b.l2, lora_enabled));
  }
  return g.layer_norm(x, g.parameter(*lnf_g_), g.parameter(*lnf_b_));
}

NodeId MiniLM::logits(Graph& g, NodeId hidden) const {
  return g.matmul(hidden, g.transpose(g.parameter(*tok_emb_)));
}

NodeId MiniLM::yes_probability(Graph& g, NodeId hidden) const {
  const std::size_t len = g.value(hidden).rows();
  NodeId last = g.slice_rows(hidden, len - 1, 1);
  NodeId yes_no = g.embedding_lookup(g.parameter(*tok_emb_), {tokens::kYes, tokens::kNo});
  NodeId pair = g.matmul(last, g.transpose(yes_no));  // [l_yes, l_no]
  NodeId gap = g.matmul(pair, g.constant(Tensor({2, 1}, {1.0, -1.0})));
  return g.sigmoid(gap);
}

Tensor MiniLM::forward(const Tensor& embeddings, bool lora_enabled) const {
  Graph g;
  NodeId e = g.constant(embeddings);
  return g.value(logits(g, hidden_states(g, e, lora_enabled)));
}

double MiniLM::score(std::span<const TokenId> ids, bool lora_enabled) const {
  Graph g;
  return g.value(yes_probability(g, hidden_states(g, embed_tokens(g, ids), lora_enabled))).item();
}

void MiniLM::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json m;
  m["config"] = cfg_.to_json();
  m["vocab_size"] = vocab_size_;
  m["reserved_ids"] = {{"pad", tokens::kPad},        {"unk", tokens::kUnk},         {"yes", tokens::kYes},
                       {"no", tokens::kNo},          {"user_id", tokens::kUserId}, {"item_id", tokens::kItemId},
                       {"warm_id", tokens::kWarmId}};
  for (const ParamGroup* grp : {&backbone_, &lora_}) {
    auto& names = m["groups"][grp->name];
    names = nlohmann::json::array();
    for (const Parameter* p : grp->params) names.push_back(p->name);
  }
  write_group(dir / "backbone.bin", backbone_);
  write_group(dir / "lora.bin", lora_);
  write_file(dir / "lm.json", m.dump(2) + "\n");
}

MiniLM MiniLM::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "lm.json")) throw PrerequisiteError("no language-model checkpoint in " + dir.string());
  auto m = nlohmann::json::parse(read_file(dir / "lm.json"));
  MiniLM lm(LmConfig::from_json(m.at("config")), m.at("vocab_size").get<std::size_t>());
  read_group(dir / "backbone.bin", lm.backbone_);
  read_group(dir / "lora.bin", lm.lora_);
  return lm;
}

double yes_no_probability(std::span<const double> logits_row) {
  if (logits_row.size() <= std::max(tokens::kYes, tokens::kNo)) {
    throw ContractViolation("yes_no_probability: logits row shorter than the reserved ids");
  }
  const double ly = logits_row[tokens::kYes];
  const double ln = logits_row[tokens::kNo];
  const double m = std::max(ly, ln);
  const double ey = std::exp(ly - m);
  const double en = std::exp(ln - m);
  return ey / (ey + en);
}

double bce(double p, int label) {
  const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
  return label ? -std::log(q) : -std::log(1.0 - q);
}

NodeId bce(Graph& g, NodeId p, int label) {
  NodeId q = g.clamp(p, kProbClamp, 1.0 - kProbClamp);
  if (label) return g.scale(g.log(q), -1.0);
  NodeId one_minus = g.sub(g.constant(Tensor::scalar(1.0)), q);
  return g.scale(g.log(one_minus), -1.0);
}

std::string render_rec_prompt(std::span<const HistoryEntry> history, std::string_view target_title,
                              const PromptSlots& slots, std::size_t k) {
  const std::size_t from = history.size() > k ? history.size() - k : 0;
  std::string liked;
  std::string disliked;
  for (std::size_t i = from; i < history.size(); ++i) {
    std::string& list = history[i].label ? liked : disliked;
    if (!list.empty()) list += " ; ";
    list += history[i].title.empty() ? "unknown" : history[i].title;
  }
  std::string s = "user";
  if (slots.user) s += " <User_ID>";
  s += " liked : " + (liked.empty() ? std::string("none") : liked);
  s += " . disliked : " + (disliked.empty() ? std::string("none") : disliked);
  s += " . target : ";
  s += target_title.empty() ? std::string("unknown") : std::string(target_title);
  if (slots.item) s += " <Item_ID>";
  if (slots.warm) s += " <Warm_ID>";
  s += " . will the user like it ? answer :";
  return s;
}

std::vector<TokenId> build_rec_prompt(const Tokenizer& tok, std::span<const HistoryEntry> history,
                                      std::string_view target_title, const PromptSlots& slots, std::size_t k,
                                      std::size_t max_len) {
  std::size_t keep = std::min(k, history.size());
  while (true) {
    auto recent = history.subspan(history.size() - keep);
    std::vector<TokenId> ids = tok.encode(render_rec_prompt(recent, target_title, slots, keep));
    if (ids.size() <= max_len) return ids;
    if (keep == 0) {
      throw ContractViolation("prompt of " + std::to_string(ids.size()) + " tokens exceeds max_len " +
                              std::to_string(max_len) + " even without history");
    }
    --keep;
  }
}

std::vector<std::string> template_corpus() {
  return {render_rec_prompt({}, "unknown", PromptSlots{true, true, true}, 0), "none ;",
          "item : unknown . this item is about"};
}

}  // namespace sella
