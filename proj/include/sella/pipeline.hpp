// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sella/collab.hpp"
#include "sella/config.hpp"
#include "sella/data.hpp"
#include "sella/distill.hpp"
#include "sella/fusion.hpp"
#include "sella/metrics.hpp"
#include "sella/minilm.hpp"
#include "sella/tokenizer.hpp"

namespace sella {

// Group names used in stage plans, manifests and freeze audits.
namespace groups {
inline constexpr const char* kBackbone = "backbone";
inline constexpr const char* kLora = "lora";
inline constexpr const char* kCollabUsers = "collab.users";
inline constexpr const char* kCollabItems = "collab.items";
inline constexpr const char* kBank = "bank";
inline constexpr const char* kProjC = "proj_c2l";
inline constexpr const char* kProjW = "proj_w2l";
}  // namespace groups

struct StagePlan {
  int stage = 1;
  std::vector<std::string> trainable;
  std::vector<std::string> frozen;
  std::string data_source;
  TrainConfig train;

  // Stage 1 trains only the adapters, stage 2 the collaborative tables,
  // bank and projection, stage 3 adds the warm projection. The backbone is
  // frozen throughout.
  static StagePlan for_stage(int stage, const RunConfig& cfg);
  nlohmann::json to_json() const;
};

enum class SubOrder { kJoint, kWarmThenUi, kUiThenWarm };

struct VariantSpec {
  std::string name = "SeLLa-Rec";
  bool alignment = true;
  bool warm_start = true;
  bool warm_token = true;
  bool ui_tokens = true;
  SubOrder order = SubOrder::kJoint;

  PromptSlots slots() const { return {ui_tokens, ui_tokens, warm_token}; }
  nlohmann::json to_json() const;

  // Throws ContractViolation listing the valid names.
  static VariantSpec named(std::string_view name);
  static const std::vector<std::string>& names();
};

// One recommendation example: the target interaction plus its history.
struct RecExample {
  std::size_t position = 0;
  std::int64_t user_id = 0;
  std::size_t user_row = 0;
  std::size_t item_row = 0;
  int label = 0;
  bool cold = false;
  std::vector<HistoryEntry> history;
  std::string title;
};

std::vector<RecExample> rec_examples(const InteractionDataset& ds, Split split, std::size_t k);

Tokenizer build_tokenizer(const InteractionDataset& ds);

struct TrainLogEntry {
  std::string phase;
  std::size_t epoch = 0;
  std::vector<std::string> trainable;
  double train_loss = 0.0;
  double valid_auc = 0.0;
};
nlohmann::json log_json(const std::vector<TrainLogEntry>& log);

// Stage 1: fine-tunes the adapters on plain prompts and keeps the best
// validation snapshot.
std::vector<TrainLogEntry> train_stage1(MiniLM& lm, const Tokenizer& tok, const InteractionDataset& ds,
                                        const RunConfig& cfg);

// Yes probabilities of the plain-prompt model.
std::vector<double> score_plain(const MiniLM& lm, const Tokenizer& tok, std::span<const RecExample> examples,
                                std::size_t k);

// All stage-3 state for one variant.
struct FusionState {
  MiniLM lm;
  Tokenizer tok;
  CollabModel collab;
  ProjCtoL proj_c;
  ProjWtoL proj_w;
  SemanticBank bank;

  FusionParts parts() const { return {&lm, &collab, &proj_c, &proj_w, &bank}; }
  std::map<std::string, ParamGroup> groups();
};

FusionPrompt fusion_prompt(const Tokenizer& tok, const RecExample& ex, const PromptSlots& slots, std::size_t k,
                           std::size_t max_len);

std::vector<double> score_fused(const FusionState& st, std::span<const RecExample> examples, const PromptSlots& slots,
                                std::size_t k);

std::vector<TrainLogEntry> train_stage3(FusionState& st, const InteractionDataset& ds, const VariantSpec& variant,
                                        const RunConfig& cfg);

// Hex digest of a parameter group's serialized bytes.
std::string group_digest(const ParamGroup& group);

// Throws FreezeViolation naming every group whose bytes changed.
void audit_frozen(const std::map<std::string, std::string>& before, const std::map<std::string, ParamGroup>& groups,
                  std::string_view stage);

// Directory layout of one run.
struct Workspace {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data"; }
  std::filesystem::path stage1() const { return root / "stage1"; }
  std::filesystem::path distill() const { return root / "distill"; }
  std::filesystem::path stage2(bool alignment) const { return root / (alignment ? "stage2" : "stage2-noalign"); }
  // '/' in a variant name is dropped ("SeLLa-w/o" -> "SeLLa-wo").
  std::filesystem::path stage3(std::string_view variant) const {
    std::string dir(variant);
    std::erase(dir, '/');
    return root / "stage3" / dir;
  }
};

// Writes the dataset described by `cfg` into the workspace.
nlohmann::json prepare_data(const RunConfig& cfg);
InteractionDataset load_workspace_data(const Workspace& ws);

nlohmann::json run_stage1(const RunConfig& cfg);
nlohmann::json run_distill(const RunConfig& cfg);
nlohmann::json run_stage2(const RunConfig& cfg, bool alignment);
nlohmann::json run_stage3(const RunConfig& cfg, const VariantSpec& variant);

// Stage 1, 2 or 3 with the prerequisite checks of the stage schedule.
nlohmann::json run_stage(int stage, const VariantSpec& variant, const RunConfig& cfg);

// Loads the stage-3 inputs for `variant` before any stage-3 update.
FusionState initial_fusion_state(const RunConfig& cfg, const VariantSpec& variant);

// The trained stage-3 checkpoint of `variant`.
FusionState load_stage3_state(const RunConfig& cfg, const VariantSpec& variant);

// Test-split report recomputed from the stage-3 checkpoint.
MetricsReport evaluate_stage3(const RunConfig& cfg, const VariantSpec& variant);

// Head-averaged attention of one fused test prompt as CSV.
std::string export_attention(const RunConfig& cfg, const VariantSpec& variant, std::size_t example,
                             const std::vector<std::size_t>& layers);

// Runs whatever is missing for `variant` and returns its test report.
MetricsReport run_variant(std::string_view name, const RunConfig& cfg);

// Data, stages 1 to 3 and the default variant.
nlohmann::json run_all(const RunConfig& cfg);

MetricsReport report_for(const std::vector<RecExample>& examples, std::span<const double> scores,
                         std::string dataset, std::string variant);

}  // namespace sella
