// lomo: train toy models, compare LOMO with SGD, and size LLaMA-class runs.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lomo/config_file.hpp"
#include "lomo/lomo.hpp"

namespace {

using namespace lomo;

// Options shared by every subcommand that builds a RunConfig.
struct RunFlags {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<int> steps;
  std::optional<double> lr;
  std::optional<std::string> optimizer;
  std::optional<std::string> precision;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> report_dir;
  bool checkpointing = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "INI config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one key, e.g. --set clip.mode=value")
        ->take_all();
    cmd->add_option("--steps", steps, "run.steps");
    cmd->add_option("--lr", lr, "optimizer.lr");
    cmd->add_option("--optimizer", optimizer, "optimizer.kind: lomo, sgd, adamw");
    cmd->add_option("--precision", precision, "run.precision: full, half");
    cmd->add_option("--seed", seed, "model.seed");
    cmd->add_option("--report-dir", report_dir, "run.report_dir (overrides LOMO_REPORT_DIR)");
    cmd->add_flag("--checkpointing", checkpointing, "run.checkpointing = true");
  }

  // defaults < file < environment (report dir only) < flags
  RunConfig resolve() const {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path, cfg);
    if (auto env = report_dir_from_env()) cfg.report_dir = *env;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (steps) cfg.steps = *steps;
    if (lr) cfg.lr = *lr;
    if (optimizer) apply_setting(cfg, "optimizer.kind", *optimizer);
    if (precision) apply_setting(cfg, "run.precision", *precision);
    if (seed) cfg.model.seed = *seed;
    if (report_dir) cfg.report_dir = *report_dir;
    if (checkpointing) cfg.checkpointing = true;
    cfg.validate();
    return cfg;
  }
};

std::string gib2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

int cmd_train(const RunFlags& flags, bool no_report) {
  const RunConfig cfg = flags.resolve();
  const RunReport rep = run(cfg);
  std::cout << "config " << rep.config_hash << "  steps " << rep.losses.size() << "\n";
  std::cout << "loss " << rep.losses.front() << " -> " << rep.losses.back() << "\n";
  std::cout << "params digest " << rep.param_digest << "\n";
  for (std::size_t i = 0; i < kNumMemoryCategories; ++i) {
    std::cout << "peak " << to_string(kAllMemoryCategories[i]) << " " << rep.memory.peak[i]
              << " B\n";
  }
  if (!no_report) {
    const auto path = next_report_path(cfg.report_dir, rep.config_hash);
    emit_report(rep, path);
    std::cout << "report " << path.string() << "\n";
  }
  return 0;
}

struct EstimateFlags {
  std::string preset = "llama-7b";
  std::optional<std::int64_t> layers, hidden, heads, ffn, vocab;
  bool tie = false;
  std::string optimizer = "all";
  std::string precision = "mixed";
  std::string ac = "both";
  std::int64_t seq = 512;
  std::int64_t batch = 8;
  bool json = false;
};

int cmd_estimate(const EstimateFlags& f) {
  ArchSpec arch;
  if (f.preset == "llama-7b") arch = ArchSpec::llama_7b();
  else if (f.preset == "llama-13b") arch = ArchSpec::llama_13b();
  else if (f.preset != "none") throw ConfigError("unknown preset '" + f.preset + "'");
  if (f.layers) arch.layers = *f.layers;
  if (f.hidden) arch.hidden = *f.hidden;
  if (f.heads) arch.heads = *f.heads;
  if (f.ffn) arch.ffn_hidden = *f.ffn;
  if (f.vocab) arch.vocab = *f.vocab;
  if (f.tie) arch.tie_embeddings = true;
  arch.validate();

  std::vector<OptimizerKind> opts;
  if (f.optimizer == "all") opts = {OptimizerKind::AdamW, OptimizerKind::Sgd, OptimizerKind::Lomo};
  else if (f.optimizer == "adamw") opts = {OptimizerKind::AdamW};
  else if (f.optimizer == "sgd") opts = {OptimizerKind::Sgd};
  else if (f.optimizer == "lomo") opts = {OptimizerKind::Lomo};
  else throw ConfigError("unknown optimizer '" + f.optimizer + "'");
  std::vector<bool> acs;
  if (f.ac == "both") acs = {false, true};
  else if (f.ac == "on") acs = {true};
  else if (f.ac == "off") acs = {false};
  else throw ConfigError("--ac expects on, off or both");
  TrainPrecision prec;
  if (f.precision == "mixed") prec = TrainPrecision::Mixed16;
  else if (f.precision == "full") prec = TrainPrecision::Full32;
  else throw ConfigError("--precision expects mixed or full");

  nlohmann::json rows = nlohmann::json::array();
  if (!f.json) {
    std::printf("params %lld  (%s)\n", static_cast<long long>(param_count(arch)),
                f.precision.c_str());
    std::printf("%-6s %-3s %9s %9s %12s %12s %9s\n", "optim", "AC", "Params", "Gradients",
                "Optim States", "Activations", "Total");
  }
  for (auto k : opts) {
    for (bool ac : acs) {
      TrainSetup s{k, prec, ac, f.seq, f.batch};
      const auto e = estimate(arch, s);
      if (f.json) {
        rows.push_back({{"optimizer", std::string(to_string(k))},
                        {"activation_checkpointing", ac},
                        {"params_gb", e.params_gib()},
                        {"gradients_gb", e.gradients_gib()},
                        {"optim_states_gb", e.optim_states_gib()},
                        {"activations_gb", e.activations_gib()},
                        {"activations_calibrated", true},
                        {"total_gb", e.total_gib()},
                        {"optim_share_of_total", e.optim_share_of_total()},
                        {"optim_share_of_model_states", e.optim_share_of_model_states()}});
      } else {
        std::printf("%-6s %-3s %9s %9s %12s %12s %9s\n", std::string(to_string(k)).c_str(),
                    ac ? "yes" : "no", gib2(e.params_gib()).c_str(),
                    gib2(e.gradients_gib()).c_str(), gib2(e.optim_states_gib()).c_str(),
                    gib2(e.activations_gib()).c_str(), gib2(e.total_gib()).c_str());
      }
    }
  }
  if (f.json) {
    nlohmann::json out = {{"arch",
                           {{"layers", arch.layers},
                            {"hidden", arch.hidden},
                            {"heads", arch.heads},
                            {"ffn_hidden", arch.ffn_hidden},
                            {"vocab", arch.vocab},
                            {"tie_embeddings", arch.tie_embeddings}}},
                          {"param_count", param_count(arch)},
                          {"seq_len", f.seq},
                          {"batch", f.batch},
                          {"unit", "GiB"},
                          {"rows", rows}};
    std::cout << out.dump(2) << "\n";
  } else {
    std::printf("sizes in GiB; activations use a calibrated formula\n");
  }
  return 0;
}

// LOMO and SGD from the same config; exit 1 when the digests differ.
int cmd_equivalence(const RunFlags& flags) {
  RunConfig cfg = flags.resolve();
  if (cfg.precision != Precision::Full || cfg.clip.kind != ClipKind::None || cfg.scaler) {
    throw ConfigError("equivalence needs full precision, no clipping and no loss scaler");
  }
  cfg.optimizer = OptimizerKind::Lomo;
  const RunReport lomo_rep = run(cfg);
  cfg.optimizer = OptimizerKind::Sgd;
  const RunReport sgd_rep = run(cfg);
  const bool same = lomo_rep.param_digest == sgd_rep.param_digest;
  std::cout << "lomo " << lomo_rep.param_digest << "\n"
            << "sgd  " << sgd_rep.param_digest << "\n"
            << (same ? "identical" : "DIFFERENT") << " after " << cfg.steps << " steps\n";
  return same ? 0 : 1;
}

struct ImplicitFlags {
  double lr = 0.05;
  int layers = 2;
  int hidden = 8;
  int input_dim = 4;
  std::uint64_t seed = 0;
  bool json = false;
};

int cmd_implicit(const ImplicitFlags& f) {
  ModelConfig mc;
  mc.kind = ModelKind::Mlp;
  mc.layers = f.layers;
  mc.hidden = f.hidden;
  mc.input_dim = f.input_dim;
  mc.seed = f.seed;
  auto model = build_model(mc);
  SyntheticTask task;
  task.input_dim = f.input_dim;
  task.dataset_seed = f.seed;
  const Batch di = sample_batch(task, 1, 0);
  const Batch dj = sample_batch(task, 1, 1);
  const auto r = implicit_batch_experiment(*model, di, dj, f.lr);
  if (f.json) {
    std::cout << nlohmann::json{{"lr", r.lr},
                                {"divergence", r.divergence},
                                {"divergence_half_lr", r.divergence_half},
                                {"ratio", r.shrink_ratio()}}
                     .dump(2)
              << "\n";
  } else {
    std::printf("lr %-10g ||theta2 - theta'|| = %.6e\n", r.lr, r.divergence);
    std::printf("lr %-10g ||theta2 - theta'|| = %.6e\n", r.lr / 2.0, r.divergence_half);
    std::printf("ratio %.4f\n", r.shrink_ratio());
  }
  return 0;
}

// Same config under every optimizer; prints the ledger peaks side by side.
int cmd_profile(const RunFlags& flags) {
  RunConfig cfg = flags.resolve();
  std::printf("%-6s %12s %12s %12s %12s %12s\n", "optim", "params", "gradients", "optim_states",
              "activations", "total_peak");
  for (auto k : {OptimizerKind::AdamW, OptimizerKind::Sgd, OptimizerKind::Lomo}) {
    cfg.optimizer = k;
    const RunReport rep = run(cfg);
    const auto& m = rep.memory;
    std::printf("%-6s %12lld %12lld %12lld %12lld %12lld\n", std::string(to_string(k)).c_str(),
                static_cast<long long>(m.peak[0]), static_cast<long long>(m.peak[1]),
                static_cast<long long>(m.peak[2]), static_cast<long long>(m.peak[3]),
                static_cast<long long>(m.total_peak));
  }
  std::printf("bytes; peak per category over the whole run\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LOMO training engine"};
  app.require_subcommand(1);

  RunFlags train_flags;
  bool no_report = false;
  auto* train = app.add_subcommand("train", "run training and write a report");
  train_flags.attach(train);
  train->add_flag("--no-report", no_report, "skip writing the report files");

  EstimateFlags est;
  auto* estimate_cmd = app.add_subcommand("estimate", "memory estimate for a transformer");
  estimate_cmd->add_option("--preset", est.preset, "llama-7b, llama-13b or none")
      ->capture_default_str();
  estimate_cmd->add_option("--layers", est.layers);
  estimate_cmd->add_option("--hidden", est.hidden);
  estimate_cmd->add_option("--heads", est.heads);
  estimate_cmd->add_option("--ffn", est.ffn);
  estimate_cmd->add_option("--vocab", est.vocab);
  estimate_cmd->add_flag("--tie", est.tie, "tie input and output embeddings");
  estimate_cmd->add_option("--optimizer", est.optimizer, "adamw, sgd, lomo or all")
      ->capture_default_str();
  estimate_cmd->add_option("--precision", est.precision, "mixed or full")->capture_default_str();
  estimate_cmd->add_option("--ac", est.ac, "activation checkpointing: on, off, both")
      ->capture_default_str();
  estimate_cmd->add_option("--seq", est.seq)->capture_default_str();
  estimate_cmd->add_option("--batch", est.batch)->capture_default_str();
  estimate_cmd->add_flag("--json", est.json);

  RunFlags eq_flags;
  auto* equivalence = app.add_subcommand("equivalence", "LOMO vs SGD parameter digests");
  eq_flags.attach(equivalence);

  ImplicitFlags imp;
  auto* implicit = app.add_subcommand("implicit-batch", "two sequential steps vs one batched step");
  implicit->add_option("--lr", imp.lr)->capture_default_str();
  implicit->add_option("--layers", imp.layers)->capture_default_str();
  implicit->add_option("--hidden", imp.hidden)->capture_default_str();
  implicit->add_option("--input-dim", imp.input_dim)->capture_default_str();
  implicit->add_option("--seed", imp.seed)->capture_default_str();
  implicit->add_flag("--json", imp.json);

  RunFlags prof_flags;
  auto* profile = app.add_subcommand("profile", "ledger peaks for each optimizer");
  prof_flags.attach(profile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return cmd_train(train_flags, no_report);
    if (*estimate_cmd) return cmd_estimate(est);
    if (*equivalence) return cmd_equivalence(eq_flags);
    if (*implicit) return cmd_implicit(imp);
    if (*profile) return cmd_profile(prof_flags);
  } catch (const lomo::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
