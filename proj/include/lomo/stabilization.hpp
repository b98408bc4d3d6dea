#pragma once

// Gradient clipping modes and the dynamic loss scaler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/tensor.hpp"

namespace lomo {

enum class ClipKind { None, ByValue, ByGlobalNorm, ByGroupNorm };

struct ClipMode {
  ClipKind kind = ClipKind::None;
  double threshold = 0.0;  // ByValue: clamp bound; norm modes: max norm
  int window = 1;          // ByGroupNorm: consecutive layers per group

  static ClipMode none() { return {}; }
  static ClipMode by_value(double threshold) { return checked({ClipKind::ByValue, threshold, 1}); }
  static ClipMode by_global_norm(double max_norm) {
    return checked({ClipKind::ByGlobalNorm, max_norm, 1});
  }
  static ClipMode by_group_norm(double max_norm, int window) {
    return checked({ClipKind::ByGroupNorm, max_norm, window});
  }

  void validate() const {
    if (kind == ClipKind::None) return;
    if (!(threshold > 0.0) || !std::isfinite(threshold)) {
      throw ConfigError("clip: threshold must be a positive finite number");
    }
    if (kind == ClipKind::ByGroupNorm && window < 1) {
      throw ConfigError("clip: group window must be >= 1");
    }
  }

 private:
  static ClipMode checked(ClipMode m) {
    m.validate();
    return m;
  }
};

inline std::string to_string(const ClipMode& m) {
  switch (m.kind) {
    case ClipKind::None: return "none";
    case ClipKind::ByValue: return "value";
    case ClipKind::ByGlobalNorm: return "global_norm";
    case ClipKind::ByGroupNorm: return "group_norm";
  }
  return "unknown";
}

// Clamps every element to [-threshold, threshold]. Works on a single tensor,
// so it runs inside the backward hook without an extra pass.
inline Tensor clip_by_value(const Tensor& g, double threshold) {
  if (!(threshold > 0.0)) throw ConfigError("clip_by_value: threshold must be > 0");
  Tensor out = cast(g, g.precision());
  out.update([&](std::size_t, double v) { return std::clamp(v, -threshold, threshold); });
  return out;
}

// Full-precision working copy of a (possibly half, possibly loss-scaled)
// gradient: divide by the loss scale, then apply value clipping and a norm
// factor. The factor is skipped when it is exactly 1.
inline Tensor prepare_gradient(const Tensor& g, double loss_scale, const ClipMode& clip,
                               double norm_factor) {
  Tensor out = cast(g, Precision::Full);
  const bool unscale = loss_scale != 1.0;
  const bool by_value = clip.kind == ClipKind::ByValue;
  const bool rescale = norm_factor != 1.0;
  if (unscale || by_value || rescale) {
    out.update([&](std::size_t, double v) {
      if (unscale) v = v / loss_scale;
      if (by_value) v = std::clamp(v, -clip.threshold, clip.threshold);
      if (rescale) v = v * norm_factor;
      return v;
    });
  }
  return out;
}

// Sum of squares of g / loss_scale, accumulated in element order.
inline double unscaled_squared_norm(const Tensor& g, double loss_scale) {
  double acc = 0.0;
  for (double v : g.data()) {
    const double u = loss_scale != 1.0 ? v / loss_scale : v;
    acc += u * u;
  }
  return acc;
}

// min(1, max_norm / norm); non-finite norms are the caller's problem.
inline double clip_factor(double norm, double max_norm) {
  return norm > max_norm ? max_norm / norm : 1.0;
}

inline bool is_power_of_two(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) return false;
  int e = 0;
  return std::frexp(x, &e) == 0.5;
}

struct LossScalerConfig {
  double initial_scale = 1024.0;
  int growth_interval = 16;
  double min_scale = 1.0;
  double max_scale = 16777216.0;  // 2^24
};

enum class ScalerEventKind { Overflow, Growth };

struct ScalerEvent {
  std::uint64_t step;  // value of LossScaler::steps_seen() when the event fired
  ScalerEventKind kind;
  double new_scale;
};

// Dynamic loss scaling: halve and skip on overflow, double after
// `growth_interval` consecutive clean steps. The scale stays a power of two
// inside [min_scale, max_scale]; halving below min_scale is a hard error.
class LossScaler {
 public:
  explicit LossScaler(LossScalerConfig cfg = {}) : cfg_(cfg), scale_(cfg.initial_scale) {
    if (!is_power_of_two(cfg.min_scale) || !is_power_of_two(cfg.max_scale) ||
        !is_power_of_two(cfg.initial_scale)) {
      throw ConfigError("loss scaler: scales must be positive powers of two");
    }
    if (cfg.min_scale > cfg.max_scale || cfg.initial_scale < cfg.min_scale ||
        cfg.initial_scale > cfg.max_scale) {
      throw ConfigError("loss scaler: need min_scale <= initial_scale <= max_scale");
    }
    if (cfg.growth_interval < 1) throw ConfigError("loss scaler: growth_interval must be >= 1");
  }

  double scale() const { return scale_; }
  int clean_steps() const { return clean_steps_; }
  const LossScalerConfig& config() const { return cfg_; }
  const std::vector<ScalerEvent>& events() const { return events_; }
  std::uint64_t steps_seen() const { return steps_; }

  // Returns true when the scale grew.
  bool on_clean() {
    ++steps_;
    ++clean_steps_;
    if (clean_steps_ < cfg_.growth_interval) return false;
    clean_steps_ = 0;
    scale_ = std::min(scale_ * 2.0, cfg_.max_scale);
    events_.push_back({steps_, ScalerEventKind::Growth, scale_});
    return true;
  }

  void on_overflow() {
    ++steps_;
    if (scale_ / 2.0 < cfg_.min_scale) {
      throw ScalerUnderflowError("loss scaler: overflow at minimum scale " +
                                 std::to_string(cfg_.min_scale) + "; training diverged");
    }
    scale_ /= 2.0;
    clean_steps_ = 0;
    events_.push_back({steps_, ScalerEventKind::Overflow, scale_});
  }

 private:
  LossScalerConfig cfg_;
  double scale_;
  int clean_steps_ = 0;
  std::uint64_t steps_ = 0;
  std::vector<ScalerEvent> events_;
};

}  // namespace lomo
