// SPDX-License-Identifier: Apache-2.0
#include "sella/config.hpp"

#include <charconv>
#include <functional>
#include <sstream>
#include <type_traits>

#include "sella/errors.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

struct Field {
  const char* key;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, std::string_view)> set;
};

template <typename T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  if constexpr (std::is_floating_point_v<T>) {
    // from_chars for doubles is missing on some toolchains; stod is fine here.
    std::size_t used = 0;
    try {
      out = static_cast<T>(std::stod(std::string(v), &used));
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty()) {
      throw ContractViolation("config: " + std::string(key) + " expects a number, got '" + std::string(v) + "'");
    }
  } else {
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
      throw ContractViolation("config: " + std::string(key) + " expects an integer, got '" + std::string(v) + "'");
    }
  }
  return out;
}

std::string show(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}
template <typename T>
std::string show(T v) {
  return std::to_string(v);
}

#define SELLA_FIELD(KEY, MEMBER, DOC)                                                              \
  Field {                                                                                          \
    KEY, DOC, [](const RunConfig& c) { return show(c.MEMBER); },                                   \
        [](RunConfig& c, std::string_view v) { c.MEMBER = parse_number<std::remove_cvref_t<decltype(c.MEMBER)>>(KEY, v); } \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      Field{"ratings", "ratings file (user item rating timestamp); empty means synthetic data",
            [](const RunConfig& c) { return c.ratings_path; },
            [](RunConfig& c, std::string_view v) { c.ratings_path = v; }},
      Field{"items", "item title file (item title...)", [](const RunConfig& c) { return c.items_path; },
            [](RunConfig& c, std::string_view v) { c.items_path = v; }},
      SELLA_FIELD("threshold", threshold, "ratings above this are positive (3 or 4)"),
      SELLA_FIELD("min_user_interactions", min_user_interactions, "drop users with fewer interactions"),
      SELLA_FIELD("split_train", split[0], "chronological train fraction"),
      SELLA_FIELD("split_valid", split[1], "chronological validation fraction"),
      SELLA_FIELD("split_test", split[2], "chronological test fraction"),
      SELLA_FIELD("synth_users", synth.n_users, "synthetic users"),
      SELLA_FIELD("synth_items", synth.n_items, "synthetic items"),
      SELLA_FIELD("synth_rank", synth.rank, "synthetic latent rank"),
      SELLA_FIELD("synth_density", synth.density, "synthetic interaction density"),
      SELLA_FIELD("synth_noise", synth.noise, "synthetic label noise"),
      SELLA_FIELD("synth_seed", synth.seed, "synthetic generator seed"),
      SELLA_FIELD("synth_cold_fraction", synth.cold_fraction, "fraction of items held back to the end"),
      SELLA_FIELD("d_model", lm.d_model, "language-model width"),
      SELLA_FIELD("n_layers", lm.n_layers, "transformer blocks"),
      SELLA_FIELD("n_heads", lm.n_heads, "attention heads"),
      SELLA_FIELD("max_len", lm.max_len, "maximum prompt length in tokens"),
      SELLA_FIELD("ffn_mult", lm.ffn_mult, "feed-forward width multiplier"),
      SELLA_FIELD("lora_rank", lm.lora_rank, "adapter rank"),
      SELLA_FIELD("lora_alpha", lm.lora_alpha, "adapter scale numerator"),
      SELLA_FIELD("d_c", d_c, "collaborative embedding width"),
      SELLA_FIELD("proj_hidden", proj_hidden, "hidden width of the collaborative projection"),
      SELLA_FIELD("history_k", history_k, "history entries kept in a prompt"),
      SELLA_FIELD("stage1_lr", stage1.lr, "stage 1 learning rate"),
      SELLA_FIELD("stage1_epochs", stage1.epochs, "stage 1 epochs"),
      SELLA_FIELD("stage1_batch", stage1.batch_size, "stage 1 batch size"),
      SELLA_FIELD("stage1_patience", stage1.patience, "stage 1 early-stop patience"),
      SELLA_FIELD("stage2_lr", stage2.lr, "stage 2 learning rate"),
      SELLA_FIELD("stage2_epochs", stage2.epochs, "stage 2 epochs"),
      SELLA_FIELD("stage2_batch", stage2.batch_size, "stage 2 batch size"),
      SELLA_FIELD("stage2_patience", stage2.patience, "stage 2 early-stop patience"),
      SELLA_FIELD("stage3_lr", stage3.lr, "stage 3 learning rate"),
      SELLA_FIELD("stage3_epochs", stage3.epochs, "stage 3 epochs"),
      SELLA_FIELD("stage3_batch", stage3.batch_size, "stage 3 batch size"),
      SELLA_FIELD("stage3_patience", stage3.patience, "stage 3 early-stop patience"),
      SELLA_FIELD("lambda", lambda, "alignment loss weight"),
      SELLA_FIELD("tau", tau, "contrastive temperature"),
      SELLA_FIELD("align_batch", align_batch_size, "items per contrastive batch"),
      SELLA_FIELD("seed", seed, "training seed"),
      Field{"out", "output directory", [](const RunConfig& c) { return c.out_dir; },
            [](RunConfig& c, std::string_view v) { c.out_dir = v; }},
  };
  return f;
}

#undef SELLA_FIELD

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  for (const auto& f : fields()) {
    if (key == f.key) {
      f.set(*this, value);
      return;
    }
  }
  std::string known;
  for (const auto& f : fields()) known += std::string(known.empty() ? "" : ", ") + f.key;
  throw ContractViolation("config: unknown key '" + std::string(key) + "' (known: " + known + ")");
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ContractViolation(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      set(trim(std::string_view(t).substr(0, eq)), trim(std::string_view(t).substr(eq + 1)));
    } catch (const ContractViolation& e) {
      throw ContractViolation(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

AlignConfig RunConfig::align_config() const {
  AlignConfig a;
  a.tau = tau;
  a.lambda = lambda;
  a.batch_size = stage2.batch_size;
  a.align_batch_size = align_batch_size;
  a.proj_hidden = proj_hidden;
  a.epochs = stage2.epochs;
  a.patience = stage2.patience;
  a.lr = stage2.lr;
  a.seed = seed;
  return a;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& f : fields()) j[f.key] = f.get(*this);
  return j;
}

std::string RunConfig::hash() const { return hex64(fnv1a64(to_json().dump())); }

std::vector<ConfigKey> describe_config() {
  const RunConfig defaults;
  std::vector<ConfigKey> out;
  for (const auto& f : fields()) out.push_back({f.key, f.get(defaults), f.doc});
  return out;
}

}  // namespace sella
