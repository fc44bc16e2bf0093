// SPDX-License-Identifier: Apache-2.0
#include "sella/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>

#include "sella/errors.hpp"
#include "sella/optim.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

using Json = nlohmann::json;

constexpr std::uint64_t kProjCSeedOffset = 101;
constexpr std::uint64_t kProjWSeedOffset = 103;
constexpr std::uint64_t kStage1ShuffleOffset = 211;
constexpr std::uint64_t kStage3ShuffleOffset = 223;

std::vector<int> labels_of(std::span<const RecExample> ex) {
  std::vector<int> l;
  l.reserve(ex.size());
  for (const auto& e : ex) l.push_back(e.label);
  return l;
}

std::vector<Tensor> snapshot(const std::vector<Parameter*>& params) {
  std::vector<Tensor> s;
  s.reserve(params.size());
  for (const Parameter* p : params) s.push_back(p->value);
  return s;
}

void restore(const std::vector<Parameter*>& params, const std::vector<Tensor>& s) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s[i];
}

struct FitSpec {
  std::string phase;
  std::vector<std::string> trainable;
  std::vector<Parameter*> params;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::function<NodeId(Graph&, std::size_t)> loss;
  std::function<double()> valid_auc;
};

// Mini-batch Adam with validation-AUC model selection. Restores the best
// snapshot before returning.
std::vector<TrainLogEntry> fit(const FitSpec& spec) {
  std::vector<TrainLogEntry> log;
  for (Parameter* p : spec.params) p->trainable = true;
  Adam opt(AdamConfig{.lr = spec.train.lr}, spec.params);
  std::mt19937_64 rng(spec.seed);
  std::vector<std::size_t> order(spec.n_train);
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::max<std::size_t>(1, spec.train.batch_size);

  std::vector<Tensor> best = snapshot(spec.params);
  double best_auc = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= spec.train.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      GradAccumulator acc;
      for (std::size_t k = start; k < end; ++k) {
        Graph g;
        NodeId loss = spec.loss(g, order[k]);
        const double lv = g.value(loss).item();
        if (!std::isfinite(lv)) {
          throw NumericError(spec.phase + ": non-finite loss at epoch " + std::to_string(epoch) + ", example " +
                             std::to_string(order[k]));
        }
        loss_sum += lv;
        acc.add(g.backward(loss), 1.0 / static_cast<double>(end - start));
      }
      opt.step(acc);
    }
    const double vauc = spec.valid_auc();
    log.push_back({spec.phase, epoch, spec.trainable, loss_sum / static_cast<double>(std::max<std::size_t>(1, order.size())),
                   vauc});
    if (vauc > best_auc) {
      best_auc = vauc;
      best = snapshot(spec.params);
      since_best = 0;
    } else if (++since_best >= spec.train.patience) {
      break;
    }
  }
  restore(spec.params, best);
  for (Parameter* p : spec.params) p->trainable = false;
  return log;
}

std::map<std::string, std::string> digests(const std::map<std::string, ParamGroup>& groups,
                                           const std::vector<std::string>& names) {
  std::map<std::string, std::string> out;
  for (const auto& n : names) out[n] = group_digest(groups.at(n));
  return out;
}

std::map<std::string, ParamGroup> lm_groups(const MiniLM& lm) {
  return {{groups::kBackbone, lm.backbone()}, {groups::kLora, lm.lora()}};
}

Json read_manifest(const std::filesystem::path& dir, std::string_view what) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw PrerequisiteError(std::string(what) + " has not been run (" + dir.string() + ")");
  return Json::parse(read_file(path));
}

void write_manifest(const std::filesystem::path& dir, const Json& m) {
  std::filesystem::create_directories(dir);
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

// The language model on disk must match what stage 1 recorded.
void check_lm_against_stage1(const MiniLM& lm, const Json& stage1_manifest, std::string_view stage) {
  std::vector<std::string> changed;
  for (const auto& [name, group] : lm_groups(lm)) {
    if (stage1_manifest.at("group_digests").at(name).get<std::string>() != group_digest(group)) changed.push_back(name);
  }
  if (!changed.empty()) {
    std::string list;
    for (const auto& c : changed) list += (list.empty() ? "" : ", ") + c;
    throw FreezeViolation(std::string(stage) + ": language-model groups differ from the stage 1 checkpoint: " + list);
  }
}

std::string checkpoint_id(const Json& digests, const std::vector<std::string>& parents) {
  std::string s = digests.dump();
  for (const auto& p : parents) s += p;
  return hex64(fnv1a64(s));
}

Json base_manifest(const RunConfig& cfg, int stage, const std::string& data_hash) {
  Json m;
  m["stage"] = stage;
  m["seed"] = cfg.seed;
  m["config"] = cfg.to_json();
  m["config_hash"] = cfg.hash();
  m["data_hash"] = data_hash;
  return m;
}

void write_report(const std::filesystem::path& dir, const MetricsReport& r) {
  write_file(dir / "metrics.json", r.to_json().dump(2) + "\n");
  write_file(dir / "metrics.txt", r.table());
}

bool fresh(const std::filesystem::path& dir, const RunConfig& cfg) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) return false;
  return Json::parse(read_file(path)).value("config_hash", "") == cfg.hash();
}

std::string dataset_label(const RunConfig& cfg) { return cfg.synthetic() ? "synthetic" : cfg.ratings_path; }

}  // namespace

StagePlan StagePlan::for_stage(int stage, const RunConfig& cfg) {
  StagePlan p;
  p.stage = stage;
  switch (stage) {
    case 1:
      p.trainable = {groups::kLora};
      p.frozen = {groups::kBackbone};
      p.data_source = "train split, plain prompts";
      p.train = cfg.stage1;
      break;
    case 2:
      p.trainable = {groups::kCollabUsers, groups::kCollabItems, groups::kBank, groups::kProjC};
      p.frozen = {groups::kBackbone, groups::kLora};
      p.data_source = "train split interactions, catalog items";
      p.train = cfg.stage2;
      break;
    case 3:
      p.trainable = {groups::kCollabUsers, groups::kCollabItems, groups::kBank, groups::kProjC, groups::kProjW};
      p.frozen = {groups::kBackbone, groups::kLora};
      p.data_source = "train split, fused prompts";
      p.train = cfg.stage3;
      break;
    default:
      throw ContractViolation("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
  return p;
}

Json StagePlan::to_json() const {
  return {{"stage", stage},
          {"trainable", trainable},
          {"frozen", frozen},
          {"data_source", data_source},
          {"lr", train.lr},
          {"epochs", train.epochs},
          {"batch_size", train.batch_size},
          {"patience", train.patience}};
}

Json VariantSpec::to_json() const {
  const char* order_name = order == SubOrder::kJoint ? "joint" : order == SubOrder::kWarmThenUi ? "warm-then-ui" : "ui-then-warm";
  return {{"name", name},         {"alignment", alignment}, {"warm_start", warm_start},
          {"warm_token", warm_token}, {"ui_tokens", ui_tokens}, {"order", order_name}};
}

const std::vector<std::string>& VariantSpec::names() {
  static const std::vector<std::string> n = {"SeLLa-Rec",  "SeLLa-w/o",   "SeLLa-Proj", "SeLLa-Warm",
                                             "SeLLa-UI",   "SeLLa-W-UI",  "SeLLa-UI-W"};
  return n;
}

VariantSpec VariantSpec::named(std::string_view name) {
  VariantSpec v;
  v.name = std::string(name);
  if (name == "SeLLa-Rec") return v;
  if (name == "SeLLa-w/o") {
    v.alignment = false;
    v.warm_start = false;
    v.warm_token = false;
    return v;
  }
  if (name == "SeLLa-Proj") {
    v.warm_start = false;
    return v;
  }
  if (name == "SeLLa-Warm") {
    v.warm_token = false;
    return v;
  }
  if (name == "SeLLa-UI") {
    v.ui_tokens = false;
    return v;
  }
  if (name == "SeLLa-W-UI") {
    v.order = SubOrder::kWarmThenUi;
    return v;
  }
  if (name == "SeLLa-UI-W") {
    v.order = SubOrder::kUiThenWarm;
    return v;
  }
  std::string list;
  for (const auto& n : names()) list += (list.empty() ? "" : ", ") + n;
  throw ContractViolation("unknown variant '" + std::string(name) + "' (valid: " + list + ")");
}

std::vector<RecExample> rec_examples(const InteractionDataset& ds, Split split, std::size_t k) {
  std::vector<RecExample> out;
  for (std::size_t pos : ds.positions(split)) {
    const Interaction& x = ds.interactions[pos];
    RecExample e;
    e.position = pos;
    e.user_id = x.user_id;
    e.user_row = ds.user_index(x.user_id);
    e.item_row = ds.item_index(x.item_id);
    e.label = x.label;
    e.cold = x.cold;
    e.title = ds.items.at(x.item_id);
    for (std::size_t h : ds.history_before(pos, k)) {
      const Interaction& y = ds.interactions[h];
      e.history.push_back({ds.items.at(y.item_id), y.label});
    }
    out.push_back(std::move(e));
  }
  return out;
}

Tokenizer build_tokenizer(const InteractionDataset& ds) {
  std::vector<std::string> corpus = template_corpus();
  for (const auto& [id, title] : ds.items) corpus.push_back(title);
  return Tokenizer::build(corpus);
}

Json log_json(const std::vector<TrainLogEntry>& log) {
  Json a = Json::array();
  for (const auto& e : log) {
    a.push_back({{"phase", e.phase},
                 {"epoch", e.epoch},
                 {"trainable", e.trainable},
                 {"train_loss", e.train_loss},
                 {"valid_auc", e.valid_auc}});
  }
  return a;
}

std::vector<double> score_plain(const MiniLM& lm, const Tokenizer& tok, std::span<const RecExample> examples,
                                std::size_t k) {
  std::vector<double> s;
  s.reserve(examples.size());
  for (const auto& e : examples) {
    s.push_back(lm.score(build_sft_prompt(tok, e.history, e.title, k, lm.config().max_len), true));
  }
  return s;
}

std::vector<TrainLogEntry> train_stage1(MiniLM& lm, const Tokenizer& tok, const InteractionDataset& ds,
                                        const RunConfig& cfg) {
  const auto train = rec_examples(ds, Split::kTrain, cfg.history_k);
  const auto valid = rec_examples(ds, Split::kValid, cfg.history_k);
  const auto valid_labels = labels_of(valid);
  std::vector<std::vector<TokenId>> prompts;
  prompts.reserve(train.size());
  for (const auto& e : train) prompts.push_back(build_sft_prompt(tok, e.history, e.title, cfg.history_k, lm.config().max_len));

  FitSpec spec;
  spec.phase = "stage1";
  spec.trainable = {groups::kLora};
  spec.params = lm.lora().params;
  spec.train = cfg.stage1;
  spec.seed = cfg.seed + kStage1ShuffleOffset;
  spec.n_train = train.size();
  spec.loss = [&](Graph& g, std::size_t i) {
    NodeId p = lm.yes_probability(g, lm.hidden_states(g, lm.embed_tokens(g, prompts[i]), true));
    return bce(g, p, train[i].label);
  };
  spec.valid_auc = [&] { return auc(score_plain(lm, tok, valid, cfg.history_k), valid_labels); };
  return fit(spec);
}

std::map<std::string, ParamGroup> FusionState::groups() {
  return {{groups::kBackbone, lm.backbone()},
          {groups::kLora, lm.lora()},
          {groups::kCollabUsers, collab.user_group()},
          {groups::kCollabItems, collab.item_group()},
          {groups::kBank, ParamGroup{groups::kBank, {&bank.vectors}}},
          {groups::kProjC, proj_c.group()},
          {groups::kProjW, proj_w.group()}};
}

FusionPrompt fusion_prompt(const Tokenizer& tok, const RecExample& ex, const PromptSlots& slots, std::size_t k,
                           std::size_t max_len) {
  return FusionPrompt::locate(build_rec_prompt(tok, ex.history, ex.title, slots, k, max_len));
}

std::vector<double> score_fused(const FusionState& st, std::span<const RecExample> examples, const PromptSlots& slots,
                                std::size_t k) {
  std::vector<double> s;
  s.reserve(examples.size());
  const FusionParts parts = st.parts();
  for (const auto& e : examples) {
    s.push_back(fused_score(parts, fusion_prompt(st.tok, e, slots, k, st.lm.config().max_len), e.user_row, e.item_row));
  }
  return s;
}

std::vector<TrainLogEntry> train_stage3(FusionState& st, const InteractionDataset& ds, const VariantSpec& variant,
                                        const RunConfig& cfg) {
  const auto train = rec_examples(ds, Split::kTrain, cfg.history_k);
  const auto valid = rec_examples(ds, Split::kValid, cfg.history_k);
  const auto valid_labels = labels_of(valid);
  auto all_groups = st.groups();

  struct Phase {
    std::string name;
    PromptSlots slots;
    std::vector<std::string> trainable;
    std::size_t epochs;
  };
  const PromptSlots full = variant.slots();
  const std::vector<std::string> ui_groups = {groups::kCollabUsers, groups::kCollabItems, groups::kProjC};
  const std::vector<std::string> warm_groups = {groups::kBank, groups::kProjW};
  std::vector<std::string> joint_groups;
  if (full.user || full.item) joint_groups.insert(joint_groups.end(), ui_groups.begin(), ui_groups.end());
  if (full.warm) joint_groups.insert(joint_groups.end(), warm_groups.begin(), warm_groups.end());

  const std::size_t first = std::max<std::size_t>(1, cfg.stage3.epochs / 2);
  const std::size_t second = cfg.stage3.epochs > first ? cfg.stage3.epochs - first : 1;
  std::vector<Phase> phases;
  switch (variant.order) {
    case SubOrder::kJoint:
      phases.push_back({"joint", full, joint_groups, cfg.stage3.epochs});
      break;
    case SubOrder::kWarmThenUi:
      phases.push_back({"warm", PromptSlots{false, false, true}, warm_groups, first});
      phases.push_back({"ui", full, ui_groups, second});
      break;
    case SubOrder::kUiThenWarm:
      phases.push_back({"ui", PromptSlots{true, true, false}, ui_groups, first});
      phases.push_back({"warm", full, warm_groups, second});
      break;
  }

  std::vector<TrainLogEntry> log;
  for (std::size_t pi = 0; pi < phases.size(); ++pi) {
    const Phase& ph = phases[pi];
    std::vector<FusionPrompt> prompts;
    prompts.reserve(train.size());
    for (const auto& e : train) prompts.push_back(fusion_prompt(st.tok, e, ph.slots, cfg.history_k, st.lm.config().max_len));

    FitSpec spec;
    spec.phase = ph.name;
    spec.trainable = ph.trainable;
    for (const auto& n : ph.trainable) {
      for (Parameter* p : all_groups.at(n).params) spec.params.push_back(p);
    }
    spec.train = cfg.stage3;
    spec.train.epochs = ph.epochs;
    spec.seed = cfg.seed + kStage3ShuffleOffset + pi;
    spec.n_train = train.size();
    const FusionParts parts = st.parts();
    spec.loss = [&, parts](Graph& g, std::size_t i) {
      return stage3_loss(g, fused_probability(g, parts, prompts[i], train[i].user_row, train[i].item_row),
                         train[i].label);
    };
    const PromptSlots slots = ph.slots;
    spec.valid_auc = [&, slots] { return auc(score_fused(st, valid, slots, cfg.history_k), valid_labels); };
    auto part = fit(spec);
    log.insert(log.end(), part.begin(), part.end());
  }
  return log;
}

std::string group_digest(const ParamGroup& group) { return hex64(fnv1a64(group_bytes(group))); }

void audit_frozen(const std::map<std::string, std::string>& before, const std::map<std::string, ParamGroup>& groups,
                  std::string_view stage) {
  std::string changed;
  for (const auto& [name, digest] : before) {
    if (group_digest(groups.at(name)) != digest) changed += (changed.empty() ? "" : ", ") + name;
  }
  if (!changed.empty()) {
    throw FreezeViolation(std::string(stage) + ": frozen groups changed during training: " + changed);
  }
}

Json prepare_data(const RunConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  InteractionDataset ds;
  if (cfg.synthetic()) {
    ds = synth_generate(cfg.synth);
  } else {
    IngestOptions opt;
    opt.threshold = cfg.threshold;
    opt.min_user_interactions = cfg.min_user_interactions;
    ds = ingest(cfg.ratings_path, cfg.items_path, opt);
  }
  ds = tag_warm_cold(temporal_split(std::move(ds), cfg.split));
  save_dataset(ds, ws.data());
  return dataset_manifest(ds);
}

InteractionDataset load_workspace_data(const Workspace& ws) {
  if (!std::filesystem::exists(ws.data() / "manifest.json")) {
    throw PrerequisiteError("no dataset in " + ws.data().string() + " (run ingest or synth first)");
  }
  return load_dataset(ws.data());
}

Json run_stage1(const RunConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  const InteractionDataset ds = load_workspace_data(ws);
  const Tokenizer tok = build_tokenizer(ds);
  LmConfig lmc = cfg.lm;
  lmc.seed = cfg.seed;
  MiniLM lm(lmc, tok.size());

  const StagePlan plan = StagePlan::for_stage(1, cfg);
  const auto before = digests(lm_groups(lm), plan.frozen);
  const auto log = train_stage1(lm, tok, ds, cfg);
  audit_frozen(before, lm_groups(lm), "stage 1");

  const auto test = rec_examples(ds, Split::kTest, cfg.history_k);
  const auto scores = score_plain(lm, tok, test, cfg.history_k);
  const MetricsReport report = report_for(test, scores, dataset_label(cfg), "stage1-only");

  std::filesystem::create_directories(ws.stage1());
  lm.save(ws.stage1() / "lm");
  tok.save(ws.stage1() / "vocab.txt");
  write_report(ws.stage1(), report);

  Json m = base_manifest(cfg, 1, dataset_hash(ds));
  m["plan"] = plan.to_json();
  m["group_digests"] = digests(lm_groups(lm), {groups::kBackbone, groups::kLora});
  m["checkpoint_id"] = checkpoint_id(m["group_digests"], {m["data_hash"].get<std::string>()});
  m["log"] = log_json(log);
  m["metrics"] = report.to_json();
  write_manifest(ws.stage1(), m);
  return m;
}

Json run_distill(const RunConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  const Json s1 = read_manifest(ws.stage1(), "stage 1");
  const InteractionDataset ds = load_workspace_data(ws);
  const MiniLM lm = MiniLM::load(ws.stage1() / "lm");
  check_lm_against_stage1(lm, s1, "distill");
  const Tokenizer tok = Tokenizer::load(ws.stage1() / "vocab.txt");
  SemanticBank bank = distill_all(lm, tok, ds, s1.at("checkpoint_id").get<std::string>());
  bank.save(ws.distill());
  Json m = base_manifest(cfg, 0, dataset_hash(ds));
  m["step"] = "distill";
  m["parent"] = s1.at("checkpoint_id");
  m["group_digests"] = {{groups::kBank, group_digest(ParamGroup{groups::kBank, {&bank.vectors}})}};
  m["checkpoint_id"] = checkpoint_id(m["group_digests"], {s1.at("checkpoint_id").get<std::string>()});
  write_manifest(ws.distill(), m);
  return m;
}

Json run_stage2(const RunConfig& cfg, bool alignment) {
  const Workspace ws{cfg.out_dir};
  const Json s1 = read_manifest(ws.stage1(), "stage 1");
  const Json dm = read_manifest(ws.distill(), "distill (required by stage 2)");
  const InteractionDataset ds = load_workspace_data(ws);
  const MiniLM lm = MiniLM::load(ws.stage1() / "lm");
  check_lm_against_stage1(lm, s1, "stage 2");
  SemanticBank bank = SemanticBank::load(ws.distill());

  AlignConfig ac = cfg.align_config();
  if (!alignment) ac.lambda = 0.0;
  const StagePlan plan = StagePlan::for_stage(2, cfg);
  const double cos_before = [&] {
    const CollabModel init(ds.num_users(), ds.num_items(), cfg.d_c, ac.seed);
    const ProjCtoL proj(cfg.d_c, ac.proj_hidden, bank.dim(), ac.seed + 1);
    return mean_item_cosine(init, proj, bank);
  }();
  Stage2Result res = train_stage2(ds, std::move(bank), cfg.d_c, ac);
  check_lm_against_stage1(lm, s1, "stage 2");

  const auto dir = ws.stage2(alignment);
  res.collab.save(dir);
  res.proj.save(dir / "proj_c2l.bin");
  res.bank.save(dir / "bank");

  const auto test = labeled_pairs(ds, ds.positions(Split::kTest));
  std::vector<double> scores;
  std::vector<RecExample> test_ex = rec_examples(ds, Split::kTest, 0);
  for (const auto& p : test) scores.push_back(res.collab.predict(p.user_row, p.item_row));
  const MetricsReport report = report_for(test_ex, scores, dataset_label(cfg), alignment ? "collab" : "collab-noalign");
  write_report(dir, report);

  Json m = base_manifest(cfg, 2, dataset_hash(ds));
  m["plan"] = plan.to_json();
  m["alignment"] = alignment;
  m["align"] = ac.to_json();
  m["parents"] = {s1.at("checkpoint_id"), dm.at("checkpoint_id")};
  Json gd = digests(lm_groups(lm), {groups::kBackbone, groups::kLora});
  gd[groups::kCollabUsers] = group_digest(res.collab.user_group());
  gd[groups::kCollabItems] = group_digest(res.collab.item_group());
  gd[groups::kBank] = group_digest(ParamGroup{groups::kBank, {&res.bank.vectors}});
  gd[groups::kProjC] = group_digest(res.proj.group());
  m["group_digests"] = gd;
  m["checkpoint_id"] = checkpoint_id(gd, {s1.at("checkpoint_id").get<std::string>(), dm.at("checkpoint_id").get<std::string>()});
  Json log = Json::array();
  for (const auto& e : res.log) log.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"valid_auc", e.valid_auc}});
  m["log"] = log;
  m["best_epoch"] = res.best_epoch;
  m["best_valid_auc"] = res.best_valid_auc;
  m["mean_cosine_init"] = cos_before;
  m["mean_cosine_final"] = mean_item_cosine(res.collab, res.proj, res.bank);
  m["metrics"] = report.to_json();
  write_manifest(dir, m);
  return m;
}

FusionState initial_fusion_state(const RunConfig& cfg, const VariantSpec& variant) {
  const Workspace ws{cfg.out_dir};
  const Json s1 = read_manifest(ws.stage1(), "stage 1 (required by stage 3)");
  const auto s2dir = ws.stage2(variant.alignment);
  read_manifest(s2dir, variant.alignment ? "stage 2 (required by stage 3)" : "stage 2 without alignment (required by stage 3)");
  FusionState st{MiniLM::load(ws.stage1() / "lm"), Tokenizer::load(ws.stage1() / "vocab.txt"),
                 CollabModel::load(s2dir), ProjCtoL{}, ProjWtoL{}, SemanticBank::load(s2dir / "bank")};
  check_lm_against_stage1(st.lm, s1, "stage 3");
  const std::size_t d_l = st.lm.config().d_model;
  if (variant.warm_start) {
    st.proj_c = ProjCtoL::load(s2dir / "proj_c2l.bin");
  } else {
    st.proj_c = ProjCtoL(st.collab.dim(), cfg.proj_hidden, d_l, cfg.seed + kProjCSeedOffset);
  }
  st.proj_w = ProjWtoL(d_l, cfg.seed + kProjWSeedOffset);
  return st;
}

Json run_stage3(const RunConfig& cfg, const VariantSpec& variant) {
  const Workspace ws{cfg.out_dir};
  FusionState st = initial_fusion_state(cfg, variant);
  const Json s1 = read_manifest(ws.stage1(), "stage 1");
  const Json s2 = read_manifest(ws.stage2(variant.alignment), "stage 2");
  const InteractionDataset ds = load_workspace_data(ws);

  const StagePlan plan = StagePlan::for_stage(3, cfg);
  auto all = st.groups();
  const auto before = digests(all, plan.frozen);
  const auto log = train_stage3(st, ds, variant, cfg);
  audit_frozen(before, st.groups(), "stage 3");

  const auto test = rec_examples(ds, Split::kTest, cfg.history_k);
  const auto scores = score_fused(st, test, variant.slots(), cfg.history_k);
  const MetricsReport report = report_for(test, scores, dataset_label(cfg), variant.name);

  const auto dir = ws.stage3(variant.name);
  st.collab.save(dir);
  st.proj_c.save(dir / "proj_c2l.bin");
  st.proj_w.save(dir / "proj_w2l.bin");
  st.bank.save(dir / "bank");
  write_report(dir, report);

  Json m = base_manifest(cfg, 3, dataset_hash(ds));
  m["plan"] = plan.to_json();
  m["variant"] = variant.to_json();
  m["parents"] = {s1.at("checkpoint_id"), s2.at("checkpoint_id")};
  Json gd = Json::object();
  auto after = st.groups();
  for (const auto& [name, g] : after) gd[name] = group_digest(g);
  m["group_digests"] = gd;
  m["checkpoint_id"] = checkpoint_id(gd, {s1.at("checkpoint_id").get<std::string>(), s2.at("checkpoint_id").get<std::string>()});
  m["log"] = log_json(log);
  m["metrics"] = report.to_json();
  write_manifest(dir, m);
  return m;
}

FusionState load_stage3_state(const RunConfig& cfg, const VariantSpec& variant) {
  const Workspace ws{cfg.out_dir};
  const auto dir = ws.stage3(variant.name);
  read_manifest(dir, "stage 3 (" + variant.name + ")");
  const Json s1 = read_manifest(ws.stage1(), "stage 1");
  FusionState st{MiniLM::load(ws.stage1() / "lm"), Tokenizer::load(ws.stage1() / "vocab.txt"), CollabModel::load(dir),
                 ProjCtoL::load(dir / "proj_c2l.bin"), ProjWtoL::load(dir / "proj_w2l.bin"),
                 SemanticBank::load(dir / "bank")};
  check_lm_against_stage1(st.lm, s1, "eval");
  return st;
}

MetricsReport evaluate_stage3(const RunConfig& cfg, const VariantSpec& variant) {
  const FusionState st = load_stage3_state(cfg, variant);
  const InteractionDataset ds = load_workspace_data(Workspace{cfg.out_dir});
  const auto test = rec_examples(ds, Split::kTest, cfg.history_k);
  return report_for(test, score_fused(st, test, variant.slots(), cfg.history_k), dataset_label(cfg), variant.name);
}

std::string export_attention(const RunConfig& cfg, const VariantSpec& variant, std::size_t example,
                             const std::vector<std::size_t>& layers) {
  const FusionState st = load_stage3_state(cfg, variant);
  for (std::size_t l : layers) {
    if (l >= st.lm.config().n_layers) {
      throw ContractViolation("layer " + std::to_string(l) + " out of range (model has " +
                              std::to_string(st.lm.config().n_layers) + ")");
    }
  }
  const InteractionDataset ds = load_workspace_data(Workspace{cfg.out_dir});
  const auto test = rec_examples(ds, Split::kTest, cfg.history_k);
  if (example >= test.size()) throw LookupError("test example " + std::to_string(example) + " out of range");
  const FusionPrompt prompt = fusion_prompt(st.tok, test[example], variant.slots(), cfg.history_k, st.lm.config().max_len);
  AttentionCapture cap;
  cap.layers = layers;
  Graph g;
  fused_probability(g, st.parts(), prompt, test[example].user_row, test[example].item_row, &cap);
  std::vector<std::string> labels;
  for (TokenId id : prompt.ids) labels.push_back(st.tok.token(id));
  return attention_csv(cap.averaged, labels);
}

Json run_stage(int stage, const VariantSpec& variant, const RunConfig& cfg) {
  switch (stage) {
    case 1:
      return run_stage1(cfg);
    case 2:
      return run_stage2(cfg, variant.alignment);
    case 3:
      return run_stage3(cfg, variant);
    default:
      throw ContractViolation("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
}

MetricsReport run_variant(std::string_view name, const RunConfig& cfg) {
  const VariantSpec v = VariantSpec::named(name);
  const Workspace ws{cfg.out_dir};
  if (!std::filesystem::exists(ws.data() / "manifest.json")) prepare_data(cfg);
  if (!fresh(ws.stage1(), cfg)) run_stage1(cfg);
  if (!fresh(ws.distill(), cfg)) run_distill(cfg);
  if (!fresh(ws.stage2(v.alignment), cfg)) run_stage2(cfg, v.alignment);
  const Json m = run_stage3(cfg, v);
  MetricsReport r;
  r.dataset = m.at("metrics").at("dataset");
  r.variant = v.name;
  const auto& mj = m.at("metrics");
  auto slice = [](const Json& j) {
    SliceMetrics s;
    s.count = j.at("count");
    s.positives = j.at("positives");
    if (!j.at("auc").is_null()) s.auc = j.at("auc").get<double>();
    if (!j.at("uauc").is_null()) s.uauc = j.at("uauc").get<double>();
    s.uauc_users = j.at("uauc_users");
    s.uauc_excluded = j.at("uauc_excluded");
    return s;
  };
  r.all = slice(mj.at("all"));
  r.warm = slice(mj.at("warm"));
  r.cold = slice(mj.at("cold"));
  return r;
}

Json run_all(const RunConfig& cfg) {
  Json out;
  out["data"] = prepare_data(cfg);
  out["stage1"] = run_stage1(cfg).at("metrics");
  run_distill(cfg);
  out["stage2"] = run_stage2(cfg, true).at("metrics");
  out["stage3"] = run_stage3(cfg, VariantSpec::named("SeLLa-Rec")).at("metrics");
  return out;
}

MetricsReport report_for(const std::vector<RecExample>& examples, std::span<const double> scores, std::string dataset,
                         std::string variant) {
  if (examples.size() != scores.size()) throw ContractViolation("report: examples and scores differ in count");
  std::vector<ScoredExample> s;
  s.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    s.push_back({examples[i].user_id, examples[i].label, examples[i].cold, scores[i]});
  }
  return warm_cold_report(std::move(dataset), std::move(variant), s);
}

}  // namespace sella
