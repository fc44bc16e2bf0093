// SPDX-License-Identifier: Apache-2.0
// Command-line entry point: data preparation, the three training stages,
// evaluation, ablations and diagnostic exports.
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sella/config.hpp"
#include "sella/errors.hpp"
#include "sella/metrics.hpp"
#include "sella/pipeline.hpp"
#include "sella/util.hpp"

namespace {

using sella::RunConfig;
using Json = nlohmann::json;

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> overrides;
};

// Config file first, then --set pairs, then the dedicated flags.
RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_file.empty()) cfg.load_file(c.config_file);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw sella::ContractViolation("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void print(const Json& j) { std::cout << j.dump(2) << "\n"; }

std::vector<std::size_t> parse_layers(const std::string& s) {
  std::vector<std::size_t> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const std::string part = s.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (part.empty()) throw sella::ContractViolation("--layers expects a comma-separated list of indices");
    std::size_t used = 0;
    const unsigned long v = std::stoul(part, &used);
    if (used != part.size()) throw sella::ContractViolation("--layers: bad index '" + part + "'");
    out.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

std::string config_help() {
  std::string s = "Config keys (key = value, '#' comments):\n";
  for (const auto& k : sella::describe_config()) {
    s += "  " + k.key + " = " + k.default_value + "\n      " + k.doc + "\n";
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Three-stage LLM and collaborative-filtering recommender"};
  app.footer(config_help());
  app.require_subcommand(1);
  app.fallthrough();

  Common common;
  app.add_option("--config", common.config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", common.seed, "training seed (overrides the config)");
  app.add_option("--out", common.out, "run directory (overrides the config)");
  app.add_option("--set", common.overrides, "override one config key, key=value (repeatable)");

  // ingest
  auto* ingest = app.add_subcommand("ingest", "Read rating and title files into the run directory");
  std::string ratings, items;
  int threshold = 3;
  std::size_t min_inter = 0;
  std::optional<std::int64_t> win_start, win_end;
  ingest->add_option("--ratings", ratings, "ratings file")->required()->check(CLI::ExistingFile);
  ingest->add_option("--items", items, "item titles file")->required()->check(CLI::ExistingFile);
  ingest->add_option("--threshold", threshold, "ratings above this are positive")->check(CLI::IsMember({3, 4}));
  ingest->add_option("--min-interactions", min_inter, "drop users with fewer interactions");
  ingest->add_option("--window-start", win_start, "first timestamp kept");
  ingest->add_option("--window-end", win_end, "last timestamp kept (inclusive)");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset into the run directory");
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--data-seed", synth_seed, "generator seed (defaults to --seed, then the config)");

  auto* stage1 = app.add_subcommand("stage1", "Fine-tune the adapters on plain prompts");
  auto* distill = app.add_subcommand("distill", "Harvest semantic item vectors from the stage 1 model");
  auto* stage2 = app.add_subcommand("stage2", "Train the collaborative model with semantic alignment");
  bool no_align = false;
  stage2->add_flag("--no-align", no_align, "skip alignment (plain matrix factorization)");

  std::string variant = "SeLLa-Rec";
  std::string variant_help = "variant name: ";
  for (const auto& n : sella::VariantSpec::names()) variant_help += n + " ";
  auto* stage3 = app.add_subcommand("stage3", "Train the fused model");
  stage3->add_option("--variant", variant, variant_help);

  auto* eval = app.add_subcommand("eval", "Recompute test metrics from a stage 3 checkpoint");
  eval->add_option("--variant", variant, variant_help);

  auto* ablate = app.add_subcommand("ablate", "Run one variant end to end, reusing finished stages");
  ablate->add_option("--variant", variant, variant_help)->required();

  auto* export_align = app.add_subcommand("export-align", "Cosine histogram and embedding CSVs from stage 2");
  export_align->add_flag("--no-align", no_align, "read the stage 2 run without alignment");

  auto* export_attn = app.add_subcommand("export-attn", "Head-averaged attention for one test prompt");
  std::string layers = "0";
  std::size_t example = 0;
  export_attn->add_option("--variant", variant, variant_help);
  export_attn->add_option("--layers", layers, "comma-separated layer indices");
  export_attn->add_option("--example", example, "test example index");

  auto* run = app.add_subcommand("run", "Run one stage or the whole pipeline");
  std::optional<int> stage;
  bool all = false;
  auto* stage_opt = run->add_option("--stage", stage, "stage number")->check(CLI::Range(1, 3));
  auto* all_flag = run->add_flag("--all", all, "data, stages 1 to 3 and evaluation");
  stage_opt->excludes(all_flag);
  run->add_option("--variant", variant, variant_help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (run->parsed() && !stage && !all) {
    std::cerr << "run: one of --stage or --all is required\n" << run->help();
    return 2;
  }

  try {
    RunConfig cfg = resolve(common);
    const sella::Workspace ws{cfg.out_dir};
    if (ingest->parsed()) {
      sella::IngestOptions opt;
      opt.threshold = threshold;
      opt.min_user_interactions = min_inter;
      if (win_start || win_end) {
        opt.window = sella::TimeWindow{win_start.value_or(INT64_MIN), win_end.value_or(INT64_MAX)};
      }
      auto ds = sella::tag_warm_cold(sella::temporal_split(sella::ingest(ratings, items, opt), cfg.split));
      sella::save_dataset(ds, ws.data());
      print(sella::dataset_manifest(ds));
    } else if (synth->parsed()) {
      cfg.synth.seed = synth_seed ? *synth_seed : common.seed ? *common.seed : cfg.synth.seed;
      print(sella::prepare_data(cfg));
    } else if (stage1->parsed()) {
      print(sella::run_stage1(cfg).at("metrics"));
    } else if (distill->parsed()) {
      print(sella::run_distill(cfg));
    } else if (stage2->parsed()) {
      const Json m = sella::run_stage2(cfg, !no_align);
      print({{"best_epoch", m["best_epoch"]},
             {"best_valid_auc", m["best_valid_auc"]},
             {"mean_cosine_init", m["mean_cosine_init"]},
             {"mean_cosine_final", m["mean_cosine_final"]},
             {"metrics", m["metrics"]}});
    } else if (stage3->parsed()) {
      print(sella::run_stage3(cfg, sella::VariantSpec::named(variant)).at("metrics"));
    } else if (eval->parsed()) {
      const auto r = sella::evaluate_stage3(cfg, sella::VariantSpec::named(variant));
      std::cout << r.table();
    } else if (ablate->parsed()) {
      const auto r = sella::run_variant(variant, cfg);
      std::cout << r.table();
    } else if (export_align->parsed()) {
      const auto dir = ws.stage2(!no_align);
      const auto collab = sella::CollabModel::load(dir);
      const auto proj = sella::ProjCtoL::load(dir / "proj_c2l.bin");
      const auto bank = sella::SemanticBank::load(dir / "bank");
      const auto rep = sella::cosine_report(collab, proj, bank);
      const auto out = ws.root / "exports";
      std::filesystem::create_directories(out);
      sella::write_file(out / "cosine_hist.csv", rep.csv());
      sella::write_file(out / "cosine_summary.json", rep.summary().dump(2) + "\n");
      sella::embedding_export(bank, collab, proj, out / "embeddings.csv");
      print(rep.summary());
    } else if (export_attn->parsed()) {
      const auto csv = sella::export_attention(cfg, sella::VariantSpec::named(variant), example, parse_layers(layers));
      const auto out = ws.root / "exports";
      std::filesystem::create_directories(out);
      sella::write_file(out / "attention.csv", csv);
      std::cout << "wrote " << (out / "attention.csv").string() << "\n";
    } else if (run->parsed()) {
      if (all) {
        print(sella::run_all(cfg));
      } else {
        const auto v = sella::VariantSpec::named(variant);
        if (*stage == 2 && !std::filesystem::exists(ws.distill() / "manifest.json")) sella::run_distill(cfg);
        print(sella::run_stage(*stage, v, cfg).at("metrics"));
      }
    }
  } catch (const sella::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
