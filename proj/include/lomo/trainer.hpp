#pragma once

// Training runs, the implicit-batch experiment and run reports.

#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lomo/error.hpp"
#include "lomo/memory_ledger.hpp"
#include "lomo/model_zoo.hpp"
#include "lomo/optimizers.hpp"
#include "lomo/stabilization.hpp"

namespace lomo {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kReportDirEnv = "LOMO_REPORT_DIR";

enum class LrSchedule { Constant, LinearDecay };

struct RunConfig {
  ModelConfig model;
  SyntheticTask task;
  OptimizerKind optimizer = OptimizerKind::Lomo;
  double lr = 5e-2;
  AdamWHyper adamw;
  ClipMode clip;
  std::optional<LossScalerConfig> scaler;
  Precision precision = Precision::Full;
  bool checkpointing = false;
  int steps = 100;
  int batch_size = 16;
  LrSchedule lr_schedule = LrSchedule::LinearDecay;
  double warmup_ratio = 0.0;
  std::string report_dir = "reports";

  // Model config with run-level precision, checkpointing and task dims applied.
  ModelConfig effective_model() const {
    ModelConfig m = model;
    m.precision = precision;
    m.checkpoint = checkpointing ? CheckpointPolicy::CheckpointPerLayer : CheckpointPolicy::StoreAll;
    if (m.kind == ModelKind::Mlp) {
      m.input_dim = task.input_dim;
      m.output_dim = 1;
    }
    return m;
  }

  // The copy task draws ids from the model's vocabulary.
  SyntheticTask effective_task() const {
    SyntheticTask t = task;
    if (model.kind == ModelKind::MiniTransformer) t.vocab = model.vocab;
    return t;
  }

  void validate() const {
    if (steps < 1) throw ConfigError("run: steps must be >= 1");
    if (batch_size < 1) throw ConfigError("run: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ConfigError("run: lr must be > 0");
    if (warmup_ratio < 0.0 || warmup_ratio >= 1.0) {
      throw ConfigError("run: warmup_ratio must lie in [0, 1)");
    }
    clip.validate();
    if (model.kind == ModelKind::Mlp && task.kind != TaskKind::Regression) {
      throw ConfigError("run: the mlp model trains on the regression task");
    }
    if (model.kind == ModelKind::MiniTransformer) {
      if (task.kind != TaskKind::SequenceCopy) {
        throw ConfigError("run: the transformer model trains on the sequence_copy task");
      }
    }
    if (scaler) LossScaler check(*scaler);
  }
};

// Linear warmup over the first warmup_ratio * steps steps, then linear decay
// towards zero (the last step keeps a positive rate).
inline double learning_rate_at(const RunConfig& cfg, int step) {
  if (cfg.lr_schedule == LrSchedule::Constant) return cfg.lr;
  const int warm = static_cast<int>(std::floor(cfg.warmup_ratio * cfg.steps));
  if (step < warm) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const int span = cfg.steps - warm;
  return cfg.lr * static_cast<double>(cfg.steps - step) / static_cast<double>(span);
}

struct ScalerEventRecord {
  std::uint64_t step = 0;
  std::string kind;
  double scale = 0.0;
  bool operator==(const ScalerEventRecord&) const = default;
};

struct MemoryRecord {
  std::array<std::int64_t, kNumMemoryCategories> current{};
  std::array<std::int64_t, kNumMemoryCategories> peak{};
  std::array<double, kNumMemoryCategories> peak_share_percent{};
  std::int64_t total_peak = 0;
  bool operator==(const MemoryRecord&) const = default;
};

struct RunReport {
  int schema_version = kReportSchemaVersion;
  nlohmann::json config;
  std::string config_hash;
  std::vector<double> losses;
  std::vector<double> learning_rates;
  std::vector<std::string> outcomes;
  std::vector<int> backward_passes;
  std::string param_digest;
  MemoryRecord memory;
  std::vector<ScalerEventRecord> scaler_events;
  std::vector<double> step_ms;  // timing, excluded from determinism checks

  bool operator==(const RunReport&) const = default;
};

// 64-bit FNV-1a.
class Fnv1a {
 public:
  void add_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= p[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  void add(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      const auto byte = static_cast<unsigned char>(bits >> (8 * i));
      add_bytes(&byte, 1);
    }
  }
  void add(std::string_view s) { add_bytes(s.data(), s.size()); }
  std::uint64_t value() const { return hash_; }
  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_;
    return os.str();
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// Hash of every parameter's name and value bits, in model order.
inline std::string parameter_digest(const Model& model) {
  Fnv1a h;
  for (const auto& p : model.parameters()) {
    h.add(p.name);
    for (double v : p.value.data()) h.add(v);
  }
  return h.hex();
}

inline std::string to_string(LrSchedule s) {
  return s == LrSchedule::Constant ? "constant" : "linear";
}

inline std::string model_kind_name(ModelKind k) {
  return k == ModelKind::Mlp ? "mlp" : "transformer";
}

inline std::string task_kind_name(TaskKind k) {
  return k == TaskKind::Regression ? "regression" : "sequence_copy";
}

// Canonical echo of the configuration; also the input of the config hash.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = {{"kind", model_kind_name(c.model.kind)}, {"layers", c.model.layers},
                {"hidden", c.model.hidden},          {"vocab", c.model.vocab},
                {"heads", c.model.heads},            {"ffn_hidden", c.model.ffn_hidden},
                {"bias", c.model.bias},              {"seed", c.model.seed}};
  j["task"] = {{"kind", task_kind_name(c.task.kind)}, {"input_dim", c.task.input_dim},
               {"seq_len", c.task.seq_len},
               {"dataset_seed", c.task.dataset_seed}};
  j["optimizer"] = {{"kind", std::string(to_string(c.optimizer))}, {"lr", c.lr},
                    {"beta1", c.adamw.beta1}, {"beta2", c.adamw.beta2},
                    {"eps", c.adamw.eps},     {"weight_decay", c.adamw.weight_decay}};
  j["clip"] = {{"mode", to_string(c.clip)}, {"threshold", c.clip.threshold},
               {"window", c.clip.window}};
  if (c.scaler) {
    j["scaler"] = {{"enabled", true},
                   {"initial_scale", c.scaler->initial_scale},
                   {"growth_interval", c.scaler->growth_interval},
                   {"min_scale", c.scaler->min_scale},
                   {"max_scale", c.scaler->max_scale}};
  } else {
    j["scaler"] = {{"enabled", false}};
  }
  j["run"] = {{"steps", c.steps},
              {"batch_size", c.batch_size},
              {"precision", std::string(to_string(c.precision))},
              {"checkpointing", c.checkpointing},
              {"lr_schedule", to_string(c.lr_schedule)},
              {"warmup_ratio", c.warmup_ratio}};
  return j;
}

inline std::string config_hash(const RunConfig& c) {
  Fnv1a h;
  h.add(config_to_json(c).dump());
  return h.hex();
}

inline std::string outcome_name(StepOutcome o) {
  return o == StepOutcome::Applied ? "applied" : "skipped_overflow";
}

inline MemoryRecord to_record(const LedgerSnapshot& s) {
  return {s.current, s.peak, s.peak_share_percent, s.total_peak};
}

// Executes the configured run. Never touches the filesystem.
inline RunReport run(const RunConfig& cfg) {
  cfg.validate();
  MemoryLedger ledger;
  auto model = build_model(cfg.effective_model(), &ledger);
  auto opt = make_optimizer(cfg.optimizer, *model, cfg.clip, cfg.scaler, cfg.adamw);

  const SyntheticTask task = cfg.effective_task();
  RunReport rep;
  rep.config = config_to_json(cfg);
  rep.config_hash = config_hash(cfg);
  for (int t = 0; t < cfg.steps; ++t) {
    const double lr = learning_rate_at(cfg, t);
    const Batch batch = sample_batch(task, cfg.batch_size, static_cast<std::uint64_t>(t));
    const auto start = std::chrono::steady_clock::now();
    const StepResult r = opt->step(batch, lr);
    const auto stop = std::chrono::steady_clock::now();
    rep.losses.push_back(r.loss);
    rep.learning_rates.push_back(lr);
    rep.outcomes.push_back(outcome_name(r.outcome));
    rep.backward_passes.push_back(r.backward_passes);
    rep.step_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
  }
  rep.param_digest = parameter_digest(*model);
  rep.memory = to_record(ledger.snapshot());
  if (const LossScaler* s = opt->scaler()) {
    for (const auto& e : s->events()) {
      rep.scaler_events.push_back(
          {e.step, e.kind == ScalerEventKind::Overflow ? "overflow" : "growth", e.new_scale});
    }
  }
  return rep;
}

inline nlohmann::json memory_to_json(const MemoryRecord& m) {
  nlohmann::json j;
  for (std::size_t i = 0; i < kNumMemoryCategories; ++i) {
    const std::string name(to_string(kAllMemoryCategories[i]));
    j["current"][name] = m.current[i];
    j["peak"][name] = m.peak[i];
    j["peak_share_percent"][name] = m.peak_share_percent[i];
  }
  j["total_peak"] = m.total_peak;
  return j;
}

inline nlohmann::json report_to_json(const RunReport& r) {
  nlohmann::json j;
  j["schema_version"] = r.schema_version;
  j["config"] = r.config;
  j["config_hash"] = r.config_hash;
  j["steps_executed"] = r.losses.size();
  j["losses"] = r.losses;
  j["learning_rates"] = r.learning_rates;
  j["outcomes"] = r.outcomes;
  j["backward_passes"] = r.backward_passes;
  j["param_digest"] = r.param_digest;
  j["memory"] = memory_to_json(r.memory);
  j["scaler_events"] = nlohmann::json::array();
  for (const auto& e : r.scaler_events) {
    j["scaler_events"].push_back({{"step", e.step}, {"kind", e.kind}, {"scale", e.scale}});
  }
  j["timing"] = {{"step_ms", r.step_ms}};
  return j;
}

inline RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.schema_version = j.at("schema_version").get<int>();
  if (r.schema_version != kReportSchemaVersion) {
    throw ConfigError("report: unsupported schema_version " + std::to_string(r.schema_version));
  }
  r.config = j.at("config");
  r.config_hash = j.at("config_hash").get<std::string>();
  r.losses = j.at("losses").get<std::vector<double>>();
  r.learning_rates = j.at("learning_rates").get<std::vector<double>>();
  r.outcomes = j.at("outcomes").get<std::vector<std::string>>();
  r.backward_passes = j.at("backward_passes").get<std::vector<int>>();
  r.param_digest = j.at("param_digest").get<std::string>();
  const auto& m = j.at("memory");
  for (std::size_t i = 0; i < kNumMemoryCategories; ++i) {
    const std::string name(to_string(kAllMemoryCategories[i]));
    r.memory.current[i] = m.at("current").at(name).get<std::int64_t>();
    r.memory.peak[i] = m.at("peak").at(name).get<std::int64_t>();
    r.memory.peak_share_percent[i] = m.at("peak_share_percent").at(name).get<double>();
  }
  r.memory.total_peak = m.at("total_peak").get<std::int64_t>();
  for (const auto& e : j.at("scaler_events")) {
    r.scaler_events.push_back({e.at("step").get<std::uint64_t>(), e.at("kind").get<std::string>(),
                               e.at("scale").get<double>()});
  }
  r.step_ms = j.at("timing").at("step_ms").get<std::vector<double>>();
  return r;
}

inline std::filesystem::path loss_table_path(const std::filesystem::path& report_path) {
  auto p = report_path;
  p.replace_extension(".loss.tsv");
  return p;
}

// Writes the JSON record at `path` and a tab-separated loss curve next to it.
inline void emit_report(const RunReport& r, const std::filesystem::path& path) {
  {
    std::ofstream out(path);
    if (!out) throw Error("report: cannot open " + path.string() + " for writing");
    out << report_to_json(r).dump(2) << '\n';
    if (!out) throw Error("report: write to " + path.string() + " failed");
  }
  const auto tsv = loss_table_path(path);
  std::ofstream out(tsv);
  if (!out) throw Error("report: cannot open " + tsv.string() + " for writing");
  out << "step\tloss\tlr\toutcome\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < r.losses.size(); ++i) {
    out << i << '\t' << r.losses[i] << '\t' << r.learning_rates[i] << '\t' << r.outcomes[i]
        << '\n';
  }
  if (!out) throw Error("report: write to " + tsv.string() + " failed");
}

inline RunReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("report: cannot open " + path.string());
  return report_from_json(nlohmann::json::parse(in));
}

// Reports are never overwritten: run-<hash>.json, then run-<hash>-2.json, ...
inline std::filesystem::path next_report_path(const std::filesystem::path& dir,
                                              const std::string& hash) {
  std::filesystem::create_directories(dir);
  auto candidate = dir / ("run-" + hash + ".json");
  for (int n = 2; std::filesystem::exists(candidate); ++n) {
    candidate = dir / ("run-" + hash + "-" + std::to_string(n) + ".json");
  }
  return candidate;
}

// --- implicit batch size -------------------------------------------------

struct ImplicitBatchResult {
  double lr = 0.0;
  double divergence = 0.0;       // ||theta_2 - theta'|| at lr
  double divergence_half = 0.0;  // same at lr / 2
  double shrink_ratio() const {
    return divergence_half > 0.0 ? divergence / divergence_half : 0.0;
  }
};

// ||theta_2 - theta'||_2 where theta' takes one step on the summed gradients
// of both samples at theta and theta_2 takes two sequential single-sample
// steps. Parameters are restored before returning. Full precision only.
inline double implicit_batch_divergence(Model& model, const Batch& d_i, const Batch& d_j,
                                        double lr) {
  if (model.precision() != Precision::Full) {
    throw ConfigError("implicit batch: needs a full-precision model");
  }
  auto& params = model.parameters();
  std::vector<Tensor> theta;
  for (const auto& p : params) theta.push_back(cast(p.value, Precision::Full));
  auto restore = [&] {
    for (std::size_t k = 0; k < params.size(); ++k) {
      params[k].value.update([&](std::size_t e, double) { return theta[k][e]; });
    }
  };

  auto gradients_at_theta = [&](const Batch& b) {
    Tape tape(Precision::Full, CheckpointPolicy::StoreAll, nullptr);
    const Var loss = model.record_loss(tape, b);
    tape.backward(loss, Tensor::scalar(1.0));
    std::vector<Tensor> g;
    for (auto& p : params) {
      g.push_back(p.grad ? std::move(*p.grad) : Tensor(p.value.shape()));
      p.grad.reset();
    }
    return g;
  };
  const auto gi = gradients_at_theta(d_i);
  const auto gj = gradients_at_theta(d_j);

  lomo_step(model, d_i, lr);
  lomo_step(model, d_j, lr);

  double sq = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t e = 0; e < theta[k].size(); ++e) {
      const double batched = theta[k][e] - lr * (gi[k][e] + gj[k][e]);
      const double d = params[k].value[e] - batched;
      sq += d * d;
    }
  }
  restore();
  return std::sqrt(sq);
}

inline ImplicitBatchResult implicit_batch_experiment(Model& model, const Batch& d_i,
                                                     const Batch& d_j, double lr) {
  ImplicitBatchResult r;
  r.lr = lr;
  r.divergence = implicit_batch_divergence(model, d_i, d_j, lr);
  r.divergence_half = implicit_batch_divergence(model, d_i, d_j, lr / 2.0);
  return r;
}

}  // namespace lomo
