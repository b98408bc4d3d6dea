#pragma once

// INI-style run configuration. Sections: [model] [task] [optimizer] [clip]
// [scaler] [run]. Keys are applied through apply_setting(), which the CLI
// also uses for flag overrides, so file and flags share one vocabulary.

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lomo/error.hpp"
#include "lomo/trainer.hpp"

namespace lomo {

namespace detail {

inline std::string unquote(std::string s) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: " + key + " = '" + text + "' is not a valid number");
  }
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "off" || text == "no") return false;
  throw ConfigError("config: " + key + " = '" + text + "' is not a boolean");
}

}  // namespace detail

// Sets one `section.key` on cfg. Unknown keys and malformed values throw
// ConfigError naming the key.
inline void apply_setting(RunConfig& cfg, const std::string& key, const std::string& raw) {
  using detail::parse_bool;
  using detail::parse_number;
  const std::string v = detail::unquote(raw);
  auto i = [&] { return parse_number<int>(key, v); };
  auto u = [&] { return parse_number<std::uint64_t>(key, v); };
  auto d = [&] { return parse_number<double>(key, v); };
  auto bad = [&](const std::string& allowed) {
    return ConfigError("config: " + key + " = '" + v + "', expected one of " + allowed);
  };
  auto scaler = [&]() -> LossScalerConfig& {
    if (!cfg.scaler) cfg.scaler.emplace();
    return *cfg.scaler;
  };

  if (key == "model.kind") {
    if (v == "mlp") cfg.model.kind = ModelKind::Mlp;
    else if (v == "transformer") cfg.model.kind = ModelKind::MiniTransformer;
    else throw bad("mlp, transformer");
  } else if (key == "model.layers") cfg.model.layers = i();
  else if (key == "model.hidden") cfg.model.hidden = i();
  else if (key == "model.vocab") cfg.model.vocab = i();
  else if (key == "model.heads") cfg.model.heads = i();
  else if (key == "model.ffn_hidden") cfg.model.ffn_hidden = i();
  else if (key == "model.bias") cfg.model.bias = parse_bool(key, v);
  else if (key == "model.seed") cfg.model.seed = u();
  else if (key == "task.kind") {
    if (v == "regression") cfg.task.kind = TaskKind::Regression;
    else if (v == "sequence_copy") cfg.task.kind = TaskKind::SequenceCopy;
    else throw bad("regression, sequence_copy");
  } else if (key == "task.input_dim") cfg.task.input_dim = i();
  else if (key == "task.seq_len") cfg.task.seq_len = i();
  else if (key == "task.dataset_seed") cfg.task.dataset_seed = u();
  else if (key == "optimizer.kind") {
    if (v == "lomo") cfg.optimizer = OptimizerKind::Lomo;
    else if (v == "sgd") cfg.optimizer = OptimizerKind::Sgd;
    else if (v == "adamw") cfg.optimizer = OptimizerKind::AdamW;
    else throw bad("lomo, sgd, adamw");
  } else if (key == "optimizer.lr") cfg.lr = d();
  else if (key == "optimizer.beta1") cfg.adamw.beta1 = d();
  else if (key == "optimizer.beta2") cfg.adamw.beta2 = d();
  else if (key == "optimizer.eps") cfg.adamw.eps = d();
  else if (key == "optimizer.weight_decay") cfg.adamw.weight_decay = d();
  else if (key == "clip.mode") {
    if (v == "none") cfg.clip.kind = ClipKind::None;
    else if (v == "value") cfg.clip.kind = ClipKind::ByValue;
    else if (v == "global_norm") cfg.clip.kind = ClipKind::ByGlobalNorm;
    else if (v == "group_norm") cfg.clip.kind = ClipKind::ByGroupNorm;
    else throw bad("none, value, global_norm, group_norm");
  } else if (key == "clip.threshold") cfg.clip.threshold = d();
  else if (key == "clip.window") cfg.clip.window = i();
  else if (key == "scaler.enabled") {
    if (parse_bool(key, v)) scaler();
    else cfg.scaler.reset();
  } else if (key == "scaler.initial_scale") scaler().initial_scale = d();
  else if (key == "scaler.growth_interval") scaler().growth_interval = i();
  else if (key == "scaler.min_scale") scaler().min_scale = d();
  else if (key == "scaler.max_scale") scaler().max_scale = d();
  else if (key == "run.steps") cfg.steps = i();
  else if (key == "run.batch_size") cfg.batch_size = i();
  else if (key == "run.precision") {
    if (v == "full") cfg.precision = Precision::Full;
    else if (v == "half") cfg.precision = Precision::HalfEmulated;
    else throw bad("full, half");
  } else if (key == "run.checkpointing") cfg.checkpointing = parse_bool(key, v);
  else if (key == "run.lr_schedule") {
    if (v == "constant") cfg.lr_schedule = LrSchedule::Constant;
    else if (v == "linear") cfg.lr_schedule = LrSchedule::LinearDecay;
    else throw bad("constant, linear");
  } else if (key == "run.warmup_ratio") cfg.warmup_ratio = d();
  else if (key == "run.report_dir") cfg.report_dir = v;
  else throw ConfigError("config: unknown key '" + key + "'");
}

// Applies every key of an INI document on top of cfg.
inline void apply_config_stream(RunConfig& cfg, std::istream& in) {
  CLI::ConfigINI parser;
  std::vector<CLI::ConfigItem> items;
  try {
    items = parser.from_config(in);
  } catch (const CLI::Error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  for (const auto& item : items) {
    if (item.name == "--" || item.name == "++") continue;  // section markers
    if (item.parents.empty() || (item.parents.size() == 1 && item.parents[0] == "default")) {
      throw ConfigError("config: key '" + item.name + "' sits outside a section");
    }
    if (item.inputs.size() != 1) {
      throw ConfigError("config: key '" + item.fullname() + "' needs exactly one value");
    }
    apply_setting(cfg, item.fullname(), item.inputs.front());
  }
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  apply_config_stream(base, in);
  return base;
}

// The report directory from the environment, when set and non-empty.
inline std::optional<std::string> report_dir_from_env() {
  const char* v = std::getenv(kReportDirEnv);
  if (v == nullptr || *v == '\0') return std::nullopt;
  return std::string(v);
}

}  // namespace lomo
