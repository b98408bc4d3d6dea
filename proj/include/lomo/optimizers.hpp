#pragma once

// SGD, AdamW and LOMO over the same tape.
//
// SGD and AdamW retain every gradient, then update. LOMO updates each
// parameter from inside the backward hook and releases its gradient before
// the next one is produced. Norm clipping and loss scaling need a first
// backward pass that only measures; both share that pass, so a LOMO step
// runs at most two backward passes.

#include <cmath>
#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/model_zoo.hpp"
#include "lomo/stabilization.hpp"
#include "lomo/tape.hpp"

namespace lomo {

enum class StepOutcome { Applied, SkippedOverflow };

struct StepResult {
  double loss = 0.0;
  StepOutcome outcome = StepOutcome::Applied;
  int forward_passes = 0;
  int backward_passes = 0;
  std::size_t forward_ops = 0;
  std::size_t backward_ops = 0;
};

enum class OptimizerKind { Sgd, AdamW, Lomo };

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::AdamW: return "adamw";
    case OptimizerKind::Lomo: return "lomo";
  }
  return "unknown";
}

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// p <- p - lr * g, in full precision, written back with p's rounding.
inline void apply_sgd_update(Tensor& value, const Tensor& grad_full, double lr) {
  value.update([&](std::size_t i, double old) { return old - lr * grad_full[i]; });
}

inline std::size_t parameter_index(const Model& model, const Parameter& p) {
  const auto& ps = model.parameters();
  const auto i = static_cast<std::size_t>(&p - ps.data());
  if (i >= ps.size()) throw TapeError("parameter '" + p.name + "' does not belong to the model");
  return i;
}

namespace detail {

// One forward plus backward. Returns the (unscaled) loss. With
// `tolerate_nonfinite` a non-finite loss skips the backward and is returned;
// otherwise it throws.
inline double forward_backward(Model& model, const Batch& batch, double loss_scale,
                               const GradHook& hook, StepResult& r, bool tolerate_nonfinite) {
  Tape tape(model.precision(), model.checkpoint_policy(), model.ledger());
  const Var loss = model.record_loss(tape, batch);
  const double value = tape.value(loss).item();
  ++r.forward_passes;
  if (!std::isfinite(value)) {
    r.forward_ops += tape.counters().forward_ops;
    if (!tolerate_nonfinite) throw NonFiniteLossError("loss is not finite: " + std::to_string(value));
    return value;
  }
  tape.backward(loss, Tensor::scalar(loss_scale), hook);
  ++r.backward_passes;
  r.forward_ops += tape.counters().forward_ops;
  r.backward_ops += tape.counters().backward_ops;
  return value;
}

// Group index of each parameter for grouped clipping.
inline std::vector<int> parameter_groups(const Model& model, int window) {
  std::vector<int> g;
  for (const auto& p : model.parameters()) g.push_back(p.layer / window);
  return g;
}

// Buffers the gradients of one layer window at a time and applies them
// with that window's own clip factor once the last member arrives.
class GroupedApplier {
 public:
  GroupedApplier(Model& model, const ClipMode& clip, double loss_scale, double lr)
      : model_(model), clip_(clip), scale_(loss_scale), lr_(lr),
        group_of_(parameter_groups(model, clip.window)) {
    for (int g : group_of_) ++group_size_[g];
  }

  GradDisposition receive(Parameter& p, Tensor& g) {
    const std::size_t i = parameter_index(model_, p);
    const int group = group_of_[i];
    pending_.emplace(i, std::move(g));
    if (static_cast<int>(pending_.size()) == group_size_[group]) flush();
    return GradDisposition::Consume;
  }

  // Applies anything left (parameters that did not take part in the pass).
  void finish() {
    if (!pending_.empty()) flush();
  }

  const std::vector<double>& applied_factors() const { return factors_; }

 private:
  void flush() {
    double sq = 0.0;
    for (const auto& [i, g] : pending_) sq += unscaled_squared_norm(g, scale_);
    const double norm = std::sqrt(sq);
    auto& params = model_.parameters();
    if (std::isfinite(norm)) {
      const double factor = clip_factor(norm, clip_.threshold);
      factors_.push_back(factor);
      for (const auto& [i, g] : pending_) {
        apply_sgd_update(params[i].value, prepare_gradient(g, scale_, ClipMode::none(), factor),
                         lr_);
      }
    } else {
      // Non-finite window: leave it untouched.
      factors_.push_back(std::nan(""));
    }
    pending_.clear();
  }

  Model& model_;
  ClipMode clip_;
  double scale_;
  double lr_;
  std::vector<int> group_of_;
  std::map<int, int> group_size_;
  std::map<std::size_t, Tensor> pending_;
  std::vector<double> factors_;
};

}  // namespace detail

// Fused SGD step with optional clipping and loss scaling.
inline StepResult fused_step(Model& model, const Batch& batch, double lr,
                             const ClipMode& clip = {}, LossScaler* scaler = nullptr) {
  clip.validate();
  StepResult r;
  const double scale = scaler != nullptr ? scaler->scale() : 1.0;
  const bool measure_first = scaler != nullptr || clip.kind == ClipKind::ByGlobalNorm;
  double norm_factor = 1.0;

  if (measure_first) {
    std::vector<double> sq(model.parameters().size(), 0.0);
    bool overflow = false;
    const bool want_norm = clip.kind == ClipKind::ByGlobalNorm;
    GradHook measure = [&](Parameter& p, Tensor& g) {
      if (!g.all_finite()) {
        overflow = true;
      } else if (want_norm) {
        sq[parameter_index(model, p)] = unscaled_squared_norm(g, scale);
      }
      return GradDisposition::Consume;
    };
    r.loss = detail::forward_backward(model, batch, scale, measure, r, true);
    double total = 0.0;
    for (double s : sq) total += s;
    const double norm = std::sqrt(total);
    if (overflow || !std::isfinite(r.loss) || !std::isfinite(norm)) {
      if (scaler == nullptr && !std::isfinite(r.loss)) {
        throw NonFiniteLossError("loss is not finite: " + std::to_string(r.loss));
      }
      if (scaler != nullptr) scaler->on_overflow();
      r.outcome = StepOutcome::SkippedOverflow;
      return r;
    }
    if (want_norm) norm_factor = clip_factor(norm, clip.threshold);
  }

  std::optional<detail::GroupedApplier> grouped;
  GradHook update;
  if (clip.kind == ClipKind::ByGroupNorm) {
    grouped.emplace(model, clip, scale, lr);
    update = [&](Parameter& p, Tensor& g) { return grouped->receive(p, g); };
  } else {
    update = [&](Parameter& p, Tensor& g) {
      apply_sgd_update(p.value, prepare_gradient(g, scale, clip, norm_factor), lr);
      return GradDisposition::Consume;
    };
  }
  const double loss = detail::forward_backward(model, batch, scale, update, r, false);
  if (grouped) grouped->finish();
  if (!measure_first) r.loss = loss;
  if (scaler != nullptr) scaler->on_clean();
  return r;
}

struct LomoOptions {
  ClipMode clip;
  LossScaler* scaler = nullptr;
};

// p <- p - lr * dL/dp, fused into the backward pass.
inline StepResult lomo_step(Model& model, const Batch& batch, double lr,
                            const LomoOptions& opts = {}) {
  return fused_step(model, batch, lr, opts.clip, opts.scaler);
}

// Common interface for the trainer.
class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual StepResult step(const Batch& batch, double lr) = 0;
  virtual OptimizerKind kind() const = 0;
  virtual LossScaler* scaler() { return nullptr; }
};

// Retain-all-then-update path shared by SGD and AdamW.
class MaterializedOptimizer : public Optimizer {
 public:
  MaterializedOptimizer(Model& model, ClipMode clip, std::optional<LossScalerConfig> scaler)
      : model_(model), clip_(clip) {
    clip_.validate();
    if (scaler) scaler_.emplace(*scaler);
  }

  LossScaler* scaler() override { return scaler_ ? &*scaler_ : nullptr; }

  StepResult step(const Batch& batch, double lr) override {
    StepResult r;
    auto& params = model_.parameters();
    const double scale = scaler_ ? scaler_->scale() : 1.0;
    r.loss = detail::forward_backward(model_, batch, scale, {}, r, scaler_.has_value());

    bool overflow = !std::isfinite(r.loss);
    if (scaler_ && !overflow) {
      for (const auto& p : params) {
        if (p.grad && !p.grad->all_finite()) overflow = true;
      }
    }
    std::vector<double> factors(params.size(), 1.0);
    if (!overflow && (clip_.kind == ClipKind::ByGlobalNorm || clip_.kind == ClipKind::ByGroupNorm)) {
      const auto groups = clip_.kind == ClipKind::ByGroupNorm
                              ? detail::parameter_groups(model_, clip_.window)
                              : std::vector<int>(params.size(), 0);
      std::map<int, double> sq;
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].grad) sq[groups[i]] += unscaled_squared_norm(*params[i].grad, scale);
      }
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double norm = std::sqrt(sq[groups[i]]);
        if (!std::isfinite(norm)) {
          overflow = true;
          break;
        }
        factors[i] = clip_factor(norm, clip_.threshold);
      }
    }
    if (overflow) {
      for (auto& p : params) p.grad.reset();
      if (scaler_) scaler_->on_overflow();
      r.outcome = StepOutcome::SkippedOverflow;
      return r;
    }
    begin_update();
    const ClipMode elementwise = clip_.kind == ClipKind::ByValue ? clip_ : ClipMode::none();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!params[i].grad) continue;
      const Tensor g = prepare_gradient(*params[i].grad, scale, elementwise, factors[i]);
      params[i].grad.reset();
      update(i, params[i], g, lr);
    }
    if (scaler_) scaler_->on_clean();
    return r;
  }

 protected:
  virtual void begin_update() {}
  virtual void update(std::size_t index, Parameter& p, const Tensor& grad_full, double lr) = 0;

  // Full-precision state tensor charged to optimizer states.
  Tensor make_state(const Tensor& like, bool copy_values) {
    Tensor t = copy_values ? cast(like, Precision::Full) : Tensor(like.shape(), Precision::Full);
    t.track(model_.ledger(), MemoryCategory::OptimStates);
    return t;
  }

  Model& model_;
  ClipMode clip_;
  std::optional<LossScaler> scaler_;
};

// Plain SGD. Under half precision it keeps a full-precision master copy of
// every parameter.
class SgdOptimizer final : public MaterializedOptimizer {
 public:
  explicit SgdOptimizer(Model& model, ClipMode clip = {},
                        std::optional<LossScalerConfig> scaler = std::nullopt)
      : MaterializedOptimizer(model, clip, scaler) {
    if (model.precision() == Precision::HalfEmulated) {
      for (const auto& p : model.parameters()) master_.push_back(make_state(p.value, true));
    }
  }

  OptimizerKind kind() const override { return OptimizerKind::Sgd; }

  std::int64_t state_bytes() const {
    std::int64_t n = 0;
    for (const auto& t : master_) n += t.nbytes();
    return n;
  }

 protected:
  void update(std::size_t i, Parameter& p, const Tensor& g, double lr) override {
    if (master_.empty()) {
      apply_sgd_update(p.value, g, lr);
      return;
    }
    apply_sgd_update(master_[i], g, lr);
    p.value.update([&](std::size_t j, double) { return master_[i][j]; });
  }

 private:
  std::vector<Tensor> master_;
};

// Decoupled weight decay Adam. States: momentum and variance, plus a master
// copy under half precision.
class AdamWOptimizer final : public MaterializedOptimizer {
 public:
  AdamWOptimizer(Model& model, AdamWHyper hyper, ClipMode clip = {},
                 std::optional<LossScalerConfig> scaler = std::nullopt)
      : MaterializedOptimizer(model, clip, scaler), hyper_(hyper) {
    if (!(hyper.beta1 >= 0.0 && hyper.beta1 < 1.0 && hyper.beta2 >= 0.0 && hyper.beta2 < 1.0)) {
      throw ConfigError("adamw: betas must lie in [0, 1)");
    }
    if (hyper.eps < 0.0 || hyper.weight_decay < 0.0) {
      throw ConfigError("adamw: eps and weight_decay must be >= 0");
    }
    const bool half = model.precision() == Precision::HalfEmulated;
    for (const auto& p : model.parameters()) {
      if (half) master_.push_back(make_state(p.value, true));
      momentum_.push_back(make_state(p.value, false));
      variance_.push_back(make_state(p.value, false));
    }
  }

  OptimizerKind kind() const override { return OptimizerKind::AdamW; }

  std::int64_t state_bytes() const {
    std::int64_t n = 0;
    for (const auto* v : {&master_, &momentum_, &variance_})
      for (const auto& t : *v) n += t.nbytes();
    return n;
  }

 protected:
  void begin_update() override { ++t_; }

  void update(std::size_t i, Parameter& p, const Tensor& g, double lr) override {
    const double b1 = hyper_.beta1, b2 = hyper_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    Tensor& m = momentum_[i];
    Tensor& v = variance_[i];
    m.update([&](std::size_t j, double old) { return b1 * old + (1.0 - b1) * g[j]; });
    v.update([&](std::size_t j, double old) { return b2 * old + (1.0 - b2) * g[j] * g[j]; });
    auto rule = [&](std::size_t j, double w) {
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      return w - lr * (mhat / (std::sqrt(vhat) + hyper_.eps) + hyper_.weight_decay * w);
    };
    if (master_.empty()) {
      p.value.update(rule);
    } else {
      master_[i].update(rule);
      p.value.update([&](std::size_t j, double) { return master_[i][j]; });
    }
  }

 private:
  AdamWHyper hyper_;
  std::int64_t t_ = 0;
  std::vector<Tensor> master_, momentum_, variance_;
};

// LOMO: no optimizer state at all.
class LomoOptimizer final : public Optimizer {
 public:
  explicit LomoOptimizer(Model& model, ClipMode clip = {},
                         std::optional<LossScalerConfig> scaler = std::nullopt)
      : model_(model), clip_(clip) {
    clip_.validate();
    if (scaler) scaler_.emplace(*scaler);
  }

  OptimizerKind kind() const override { return OptimizerKind::Lomo; }
  LossScaler* scaler() override { return scaler_ ? &*scaler_ : nullptr; }
  std::int64_t state_bytes() const { return 0; }

  StepResult step(const Batch& batch, double lr) override {
    return fused_step(model_, batch, lr, clip_, scaler());
  }

 private:
  Model& model_;
  ClipMode clip_;
  std::optional<LossScaler> scaler_;
};

// Materialize-then-update SGD for full-precision models (no master copy).
inline StepResult sgd_step(Model& model, const Batch& batch, double lr) {
  if (model.precision() != Precision::Full) {
    throw ConfigError("sgd_step: half-precision models need an SgdOptimizer (master copies)");
  }
  SgdOptimizer opt(model);
  return opt.step(batch, lr);
}

inline std::unique_ptr<Optimizer> make_optimizer(OptimizerKind kind, Model& model,
                                                 const ClipMode& clip,
                                                 std::optional<LossScalerConfig> scaler,
                                                 const AdamWHyper& adamw = {}) {
  switch (kind) {
    case OptimizerKind::Sgd: return std::make_unique<SgdOptimizer>(model, clip, scaler);
    case OptimizerKind::AdamW: return std::make_unique<AdamWOptimizer>(model, adamw, clip, scaler);
    case OptimizerKind::Lomo: return std::make_unique<LomoOptimizer>(model, clip, scaler);
  }
  throw ConfigError("unknown optimizer kind");
}

}  // namespace lomo
