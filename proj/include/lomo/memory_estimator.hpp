#pragma once

// Closed-form memory arithmetic for decoder-only transformers in the
// parameter / gradient / optimizer-state / activation breakdown.

#include <algorithm>
#include <cstdint>
#include <string>

#include "lomo/error.hpp"
#include "lomo/model_zoo.hpp"
#include "lomo/optimizers.hpp"

namespace lomo {

inline constexpr double kBytesPerGiB = 1024.0 * 1024.0 * 1024.0;

// Pre-norm decoder with gain-only norms, no biases, a three-matrix gated
// feed-forward and an optionally tied output projection.
struct ArchSpec {
  std::int64_t layers = 0;
  std::int64_t hidden = 0;
  std::int64_t heads = 1;
  std::int64_t ffn_hidden = 0;
  std::int64_t vocab = 0;
  bool tie_embeddings = false;

  static ArchSpec llama_7b() { return {32, 4096, 32, 11008, 32000, false}; }
  static ArchSpec llama_13b() { return {40, 5120, 40, 13824, 32000, false}; }

  static ArchSpec from_model(const ModelConfig& cfg) {
    if (cfg.kind != ModelKind::MiniTransformer) {
      throw ConfigError("arch spec: only transformer configs map onto an ArchSpec");
    }
    return {cfg.layers, cfg.hidden, cfg.heads, cfg.effective_ffn(), cfg.vocab, false};
  }

  void validate() const {
    if (layers < 0 || hidden < 1 || heads < 1 || ffn_hidden < 1 || vocab < 1) {
      throw ConfigError("arch spec: layers >= 0 and hidden, heads, ffn_hidden, vocab >= 1");
    }
    if (hidden % heads != 0) throw ConfigError("arch spec: hidden not divisible by heads");
  }
};

inline std::int64_t param_count(const ArchSpec& a) {
  a.validate();
  const std::int64_t h = a.hidden, f = a.ffn_hidden, v = a.vocab;
  const std::int64_t embed = v * h;
  const std::int64_t per_layer = 4 * h * h + 3 * h * f + 2 * h;
  const std::int64_t head = a.tie_embeddings ? 0 : v * h;
  return embed + a.layers * per_layer + h + head;
}

inline std::int64_t largest_tensor_elements(const ArchSpec& a) {
  a.validate();
  std::int64_t m = a.vocab * a.hidden;
  if (a.layers > 0) m = std::max({m, a.hidden * a.hidden, a.hidden * a.ffn_hidden});
  return m;
}

enum class TrainPrecision { Mixed16, Full32 };

struct TrainSetup {
  OptimizerKind optimizer = OptimizerKind::AdamW;
  TrainPrecision precision = TrainPrecision::Mixed16;
  bool activation_checkpointing = false;
  std::int64_t seq_len = 512;
  std::int64_t batch = 8;
};

struct MemoryEstimate {
  std::int64_t params_bytes = 0;
  std::int64_t gradients_bytes = 0;
  std::int64_t optim_states_bytes = 0;
  std::int64_t activations_bytes = 0;  // calibrated, see activation_bytes()
  std::int64_t total_bytes = 0;

  static double gib(std::int64_t b) { return static_cast<double>(b) / kBytesPerGiB; }
  double params_gib() const { return gib(params_bytes); }
  double gradients_gib() const { return gib(gradients_bytes); }
  double optim_states_gib() const { return gib(optim_states_bytes); }
  double activations_gib() const { return gib(activations_bytes); }
  double total_gib() const { return gib(total_bytes); }

  std::int64_t model_states_bytes() const {
    return params_bytes + gradients_bytes + optim_states_bytes;
  }
  double optim_share_of_total() const {
    return total_bytes > 0 ? static_cast<double>(optim_states_bytes) / total_bytes : 0.0;
  }
  double optim_share_of_model_states() const {
    const auto m = model_states_bytes();
    return m > 0 ? static_cast<double>(optim_states_bytes) / m : 0.0;
  }
};

// Activation bytes. Element size e is 2 (Mixed16) or 4 (Full32); tokens =
// batch * seq.
//
// Without checkpointing each layer keeps, per token, 14 hidden-sized and 4
// ffn-sized tensors plus 5 values per attention score (heads * seq), and the
// output logits are kept once:
//   tokens * layers * e * (14h + 4f + 5 * heads * seq) + tokens * vocab * e
// With per-layer checkpointing only the layer inputs stay resident, plus the
// working set of the one block being recomputed (8 hidden-sized and 4
// ffn-sized tensors; attention scores are recomputed in tiles) and the
// logits:
//   tokens * layers * e * h + tokens * e * (8h + 4f) + tokens * vocab * e
// The coefficients are calibrated against published LLaMA-7B measurements
// (seq 512, batch 8), which they match to within about 2%.
inline std::int64_t activation_bytes(const ArchSpec& a, const TrainSetup& s) {
  const std::int64_t e = s.precision == TrainPrecision::Mixed16 ? 2 : 4;
  const std::int64_t tokens = s.batch * s.seq_len;
  const std::int64_t h = a.hidden, f = a.ffn_hidden;
  const std::int64_t logits = tokens * a.vocab * e;
  if (!s.activation_checkpointing) {
    const std::int64_t per_token_layer = e * (14 * h + 4 * f + 5 * a.heads * s.seq_len);
    return tokens * a.layers * per_token_layer + logits;
  }
  const std::int64_t boundaries = tokens * a.layers * e * h;
  const std::int64_t working = a.layers > 0 ? tokens * e * (8 * h + 4 * f) : 0;
  return boundaries + working + logits;
}

inline MemoryEstimate estimate(const ArchSpec& a, const TrainSetup& s) {
  a.validate();
  if (s.seq_len < 1 || s.batch < 1) throw ConfigError("train setup: seq_len and batch must be >= 1");
  const bool mixed = s.precision == TrainPrecision::Mixed16;
  const std::int64_t n = param_count(a);
  const std::int64_t e = mixed ? 2 : 4;
  MemoryEstimate m;
  m.params_bytes = n * e;
  switch (s.optimizer) {
    case OptimizerKind::AdamW:
      m.gradients_bytes = n * e;
      // master copy (mixed only) + momentum + variance, all fp32
      m.optim_states_bytes = n * (mixed ? 12 : 8);
      break;
    case OptimizerKind::Sgd:
      m.gradients_bytes = n * e;
      m.optim_states_bytes = mixed ? n * 4 : 0;
      break;
    case OptimizerKind::Lomo:
      m.gradients_bytes = largest_tensor_elements(a) * e;
      m.optim_states_bytes = 0;
      break;
  }
  m.activations_bytes = activation_bytes(a, s);
  m.total_bytes = m.params_bytes + m.gradients_bytes + m.optim_states_bytes + m.activations_bytes;
  return m;
}

}  // namespace lomo
