#pragma once

// Small deterministic models and synthetic tasks.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/tape.hpp"
#include "lomo/tensor.hpp"

namespace lomo {

enum class ModelKind { Mlp, MiniTransformer };

inline constexpr double kInitRange = 0.08;

struct ModelConfig {
  ModelKind kind = ModelKind::Mlp;
  int layers = 2;
  int hidden = 16;
  int vocab = 64;       // transformer only
  int heads = 4;        // transformer only
  int ffn_hidden = 0;   // transformer only; 0 means 2 * hidden
  int input_dim = 4;    // mlp only
  int output_dim = 1;   // mlp only
  bool bias = true;     // mlp only
  std::uint64_t seed = 0;
  Precision precision = Precision::Full;
  CheckpointPolicy checkpoint = CheckpointPolicy::StoreAll;

  int effective_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * hidden; }
};

enum class TaskKind { Regression, SequenceCopy };

struct SyntheticTask {
  TaskKind kind = TaskKind::Regression;
  int input_dim = 4;   // regression
  int seq_len = 8;     // sequence copy
  int vocab = 64;      // sequence copy
  std::uint64_t dataset_seed = 0;
};

struct Batch {
  Tensor inputs;
  Tensor targets;
};

namespace detail {

// Uniform double in [0, 1) from the top 53 bits; independent of the
// standard library's distribution implementations.
inline double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * unit_uniform(rng);
}

inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(step),
                    static_cast<std::uint32_t>(step >> 32)};
  return std::mt19937_64(seq);
}

inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kTeacherStream = 2;
inline constexpr std::uint64_t kBatchStream = 3;

}  // namespace detail

class Model {
 public:
  virtual ~Model() = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Records inputs, the forward computation and the scalar loss on `tape`.
  virtual Var record_loss(Tape& tape, const Batch& batch) = 0;

  const ModelConfig& config() const { return config_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  MemoryLedger* ledger() const { return ledger_; }
  Precision precision() const { return config_.precision; }
  CheckpointPolicy checkpoint_policy() const { return config_.checkpoint; }
  void set_checkpoint_policy(CheckpointPolicy p) { config_.checkpoint = p; }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += static_cast<std::int64_t>(p.value.size());
    return n;
  }
  std::int64_t total_parameter_bytes() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.nbytes();
    return n;
  }
  std::int64_t largest_parameter_bytes() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n = std::max(n, p.value.nbytes());
    return n;
  }

  // Loss at the current parameters, without a backward pass.
  double evaluate(const Batch& batch) {
    Tape tape(precision(), CheckpointPolicy::StoreAll, nullptr);
    return tape.value(record_loss(tape, batch)).item();
  }

 protected:
  Model(ModelConfig cfg, MemoryLedger* ledger) : config_(std::move(cfg)), ledger_(ledger) {}

  void add_parameter(std::string name, int layer, Shape shape, std::mt19937_64& rng) {
    std::vector<double> v(element_count(shape));
    for (auto& x : v) x = detail::uniform(rng, -kInitRange, kInitRange);
    Tensor t(std::move(shape), std::move(v), config_.precision);
    t.track(ledger_, MemoryCategory::Params);
    params_.push_back(Parameter{std::move(name), layer, std::move(t), std::nullopt});
  }

  ModelConfig config_;
  MemoryLedger* ledger_;
  std::vector<Parameter> params_;
};

// Stack of dense layers with tanh between them and a squared-error head.
// Layer i owns W_i (and b_i when bias is on); the loss sits in the last layer.
class Mlp final : public Model {
 public:
  Mlp(const ModelConfig& cfg, MemoryLedger* ledger) : Model(cfg, ledger) {
    if (cfg.layers < 1 || cfg.hidden < 1 || cfg.input_dim < 1 || cfg.output_dim < 1) {
      throw ConfigError("mlp: layers, hidden, input_dim and output_dim must be >= 1");
    }
    auto rng = detail::seeded_rng(cfg.seed, detail::kInitStream, 0);
    params_.reserve(static_cast<std::size_t>(2 * cfg.layers));
    for (int l = 0; l < cfg.layers; ++l) {
      const auto in = static_cast<std::size_t>(l == 0 ? cfg.input_dim : cfg.hidden);
      const auto out = static_cast<std::size_t>(l == cfg.layers - 1 ? cfg.output_dim : cfg.hidden);
      add_parameter("layer" + std::to_string(l) + ".weight", l, {in, out}, rng);
      if (cfg.bias) add_parameter("layer" + std::to_string(l) + ".bias", l, {out}, rng);
    }
  }

  Var record_loss(Tape& tape, const Batch& batch) override {
    tape.begin_layer(0);
    Var h = tape.input(batch.inputs);
    Var target = tape.input(batch.targets);
    std::size_t p = 0;
    for (int l = 0; l < config_.layers; ++l) {
      tape.begin_layer(l);
      h = tape.matmul(h, tape.param(params_[p++]));
      if (config_.bias) h = tape.add_row(h, tape.param(params_[p++]));
      if (l + 1 < config_.layers) h = tape.tanh(h);
    }
    return tape.mean_squared_error(h, target);
  }
};

// Pre-norm decoder: token embedding (layer 0), `layers` blocks of causal
// multi-head attention plus a GELU-gated feed-forward (layers 1..L), and a
// final norm with an untied output projection (layer L+1). Norms carry a gain
// only; no biases and no position embedding.
class MiniTransformer final : public Model {
 public:
  MiniTransformer(const ModelConfig& cfg, MemoryLedger* ledger) : Model(cfg, ledger) {
    if (cfg.layers < 0 || cfg.hidden < 1 || cfg.vocab < 1 || cfg.heads < 1 ||
        cfg.effective_ffn() < 1) {
      throw ConfigError("mini-transformer: hidden, vocab, heads and ffn must be >= 1");
    }
    if (cfg.hidden % cfg.heads != 0) {
      throw ConfigError("mini-transformer: hidden " + std::to_string(cfg.hidden) +
                        " not divisible by heads " + std::to_string(cfg.heads));
    }
    const auto h = static_cast<std::size_t>(cfg.hidden);
    const auto v = static_cast<std::size_t>(cfg.vocab);
    const auto f = static_cast<std::size_t>(cfg.effective_ffn());
    auto rng = detail::seeded_rng(cfg.seed, detail::kInitStream, 0);
    params_.reserve(static_cast<std::size_t>(3 + 9 * cfg.layers));
    add_parameter("embed.weight", 0, {v, h}, rng);
    for (int l = 1; l <= cfg.layers; ++l) {
      const std::string pre = "block" + std::to_string(l - 1) + ".";
      add_parameter(pre + "attn_norm.gain", l, {h}, rng);
      add_parameter(pre + "attn.wq", l, {h, h}, rng);
      add_parameter(pre + "attn.wk", l, {h, h}, rng);
      add_parameter(pre + "attn.wv", l, {h, h}, rng);
      add_parameter(pre + "attn.wo", l, {h, h}, rng);
      add_parameter(pre + "ffn_norm.gain", l, {h}, rng);
      add_parameter(pre + "ffn.w_gate", l, {h, f}, rng);
      add_parameter(pre + "ffn.w_up", l, {h, f}, rng);
      add_parameter(pre + "ffn.w_down", l, {f, h}, rng);
    }
    add_parameter("final_norm.gain", cfg.layers + 1, {h}, rng);
    add_parameter("head.weight", cfg.layers + 1, {h, v}, rng);
  }

  Var record_loss(Tape& tape, const Batch& batch) override {
    if (batch.inputs.rank() != 2) {
      throw ShapeError("mini-transformer: token batch must be [batch, seq], got " +
                       shape_string(batch.inputs.shape()));
    }
    const kernels::AttentionShape attn{batch.inputs.dim(0), batch.inputs.dim(1),
                                       static_cast<std::size_t>(config_.heads)};
    std::size_t p = 0;
    tape.begin_layer(0);
    Var ids = tape.index_input(batch.inputs);
    Var targets = tape.index_input(batch.targets);
    Var x = tape.embedding(ids, tape.param(params_[p++]));
    for (int l = 1; l <= config_.layers; ++l) {
      tape.begin_layer(l);
      Var n1 = tape.mul_row(tape.layer_norm(x), tape.param(params_[p++]));
      Var q = tape.matmul(n1, tape.param(params_[p++]));
      Var k = tape.matmul(n1, tape.param(params_[p++]));
      Var v = tape.matmul(n1, tape.param(params_[p++]));
      Var att = tape.causal_attention(q, k, v, attn);
      Var x1 = tape.add(x, tape.matmul(att, tape.param(params_[p++])));
      Var n2 = tape.mul_row(tape.layer_norm(x1), tape.param(params_[p++]));
      Var gate = tape.gelu(tape.matmul(n2, tape.param(params_[p++])));
      Var up = tape.matmul(n2, tape.param(params_[p++]));
      x = tape.add(x1, tape.matmul(tape.mul(gate, up), tape.param(params_[p++])));
    }
    tape.begin_layer(config_.layers + 1);
    Var nf = tape.mul_row(tape.layer_norm(x), tape.param(params_[p++]));
    Var logits = tape.matmul(nf, tape.param(params_[p++]));
    return tape.softmax_cross_entropy(logits, targets);
  }

  // vocab*hidden (embedding) + layers*(4h^2 + 3hf + 2h) + h + hidden*vocab (head)
  static std::int64_t closed_form_parameter_count(const ModelConfig& cfg) {
    const std::int64_t h = cfg.hidden, v = cfg.vocab, f = cfg.effective_ffn(), l = cfg.layers;
    return v * h + l * (4 * h * h + 3 * h * f + 2 * h) + h + h * v;
  }
};

inline std::unique_ptr<Model> build_model(const ModelConfig& cfg, MemoryLedger* ledger = nullptr) {
  switch (cfg.kind) {
    case ModelKind::Mlp: return std::make_unique<Mlp>(cfg, ledger);
    case ModelKind::MiniTransformer: return std::make_unique<MiniTransformer>(cfg, ledger);
  }
  throw ConfigError("unknown model kind");
}

// Deterministic in (dataset_seed, step).
inline Batch sample_batch(const SyntheticTask& task, int batch, std::uint64_t step) {
  if (batch < 1) throw ConfigError("sample_batch: batch must be >= 1");
  const auto b = static_cast<std::size_t>(batch);
  auto rng = detail::seeded_rng(task.dataset_seed, detail::kBatchStream, step);
  switch (task.kind) {
    case TaskKind::Regression: {
      if (task.input_dim < 1) throw ConfigError("regression: input_dim must be >= 1");
      const auto d = static_cast<std::size_t>(task.input_dim);
      // Fixed teacher direction per dataset.
      auto teacher_rng = detail::seeded_rng(task.dataset_seed, detail::kTeacherStream, 0);
      std::vector<double> teacher(d);
      for (auto& w : teacher) w = detail::uniform(teacher_rng, -1.0, 1.0);
      std::vector<double> x(b * d), y(b);
      for (std::size_t i = 0; i < b; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          x[i * d + j] = detail::uniform(rng, -1.0, 1.0);
          dot += x[i * d + j] * teacher[j];
        }
        y[i] = std::tanh(1.5 * dot);
      }
      return {Tensor({b, d}, std::move(x)), Tensor({b, 1}, std::move(y))};
    }
    case TaskKind::SequenceCopy: {
      if (task.seq_len < 1 || task.vocab < 1) {
        throw ConfigError("sequence copy: seq_len and vocab must be >= 1");
      }
      const auto t = static_cast<std::size_t>(task.seq_len);
      std::vector<double> ids(b * t);
      for (auto& id : ids) {
        id = static_cast<double>(rng() % static_cast<std::uint64_t>(task.vocab));
      }
      Tensor in({b, t}, ids);
      return {in, Tensor({b, t}, std::move(ids))};
    }
  }
  throw ConfigError("unknown task kind");
}

}  // namespace lomo
