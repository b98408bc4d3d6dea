#pragma once

// LOMO steps with the stabilizers switched on.

#include "lomo/optimizers.hpp"
#include "lomo/stabilization.hpp"

namespace lomo {

// Pass 1 accumulates the global gradient norm without touching parameters;
// pass 2 applies the fused update scaled by min(1, max_norm / norm).
inline StepResult two_pass_norm_clip_step(Model& model, const Batch& batch, double lr,
                                          double max_norm) {
  return fused_step(model, batch, lr, ClipMode::by_global_norm(max_norm));
}

// One backward pass. Each window of `window` consecutive layers is clipped by
// its own norm, so different windows get different effective step sizes.
inline StepResult grouped_norm_clip_step(Model& model, const Batch& batch, double lr,
                                         double max_norm, int window) {
  return fused_step(model, batch, lr, ClipMode::by_group_norm(max_norm, window));
}

// Loss-scaled LOMO step. Pass 1 looks for non-finite gradients (and
// accumulates the norm when clipping by norm); on overflow the scale halves
// and the parameters are left alone. Otherwise pass 2 unscales in full
// precision and updates.
inline StepResult scaled_step(Model& model, const Batch& batch, double lr, LossScaler& scaler,
                              const ClipMode& clip = {}) {
  return fused_step(model, batch, lr, clip, &scaler);
}

}  // namespace lomo
