#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lomo/error.hpp"
#include "lomo/kernels.hpp"
#include "lomo/memory_ledger.hpp"
#include "lomo/tensor.hpp"

namespace lomo {

// A trainable leaf. `grad` is populated only while a gradient is retained.
struct Parameter {
  std::string name;
  int layer = 0;
  Tensor value;
  std::optional<Tensor> grad;
};

enum class GradDisposition { Consume, Retain };

// Called once per parameter during backward, in non-increasing layer order.
// Consume releases the gradient before the next one is materialized; Retain
// moves it into Parameter::grad.
using GradHook = std::function<GradDisposition(Parameter&, Tensor&)>;

enum class CheckpointPolicy { StoreAll, CheckpointPerLayer };

enum class OpKind {
  MatMul,
  Add,
  AddRow,
  Mul,
  MulRow,
  Tanh,
  Gelu,
  Embedding,
  LayerNorm,
  CausalAttention,
  SoftmaxCrossEntropy,
  MeanSquaredError,
};

inline std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::AddRow: return "add_row";
    case OpKind::Mul: return "mul";
    case OpKind::MulRow: return "mul_row";
    case OpKind::Tanh: return "tanh";
    case OpKind::Gelu: return "gelu";
    case OpKind::Embedding: return "embedding";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::CausalAttention: return "causal_attention";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::MeanSquaredError: return "mean_squared_error";
  }
  return "unknown";
}

struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
};

struct TapeCounters {
  std::size_t forward_ops = 0;    // op executions, including recomputation
  std::size_t recomputed_ops = 0;
  std::size_t backward_ops = 0;
};

// Eager reverse-mode tape. Ops execute as they are recorded; backward walks
// layers from the highest index down. Layer indices must be non-decreasing
// in recording order, and every parameter may feed exactly one op.
//
// Under CheckpointPerLayer, once a layer is complete only its last produced
// value is kept; the rest are replayed from that boundary right before the
// layer's backward.
class Tape {
 public:
  explicit Tape(Precision compute = Precision::Full,
                CheckpointPolicy policy = CheckpointPolicy::StoreAll,
                MemoryLedger* ledger = nullptr)
      : precision_(compute), policy_(policy), ledger_(ledger) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Precision precision() const { return precision_; }
  CheckpointPolicy policy() const { return policy_; }
  const TapeCounters& counters() const { return counters_; }
  std::size_t op_count() const { return nodes_.size(); }
  const std::vector<Parameter*>& parameters() const { return params_; }
  // Layer index of each gradient handed to the hook, in delivery order.
  const std::vector<int>& delivery_layers() const { return delivery_layers_; }

  void begin_layer(int layer) {
    if (layer < layer_) {
      throw TapeError("tape: layer " + std::to_string(layer) + " recorded after layer " +
                      std::to_string(layer_));
    }
    if (layer != layer_) {
      seal_current_layer();
      layer_ = layer;
      layer_begin_node_ = nodes_.size();
    }
  }
  int current_layer() const { return layer_; }

  // External, non-differentiable input (data, targets). Always retained.
  Var input(Tensor t) {
    t.convert(precision_);
    t.track(ledger_, MemoryCategory::Activations);
    Slot s;
    s.kind = SlotKind::Input;
    s.layer = layer_;
    s.value = std::move(t);
    slots_.push_back(std::move(s));
    return Var{slots_.size() - 1};
  }

  // Token ids and class targets are stored at full precision.
  Var index_input(Tensor t) {
    t.convert(Precision::Full);
    t.track(ledger_, MemoryCategory::Activations);
    Slot s;
    s.kind = SlotKind::Input;
    s.layer = layer_;
    s.value = std::move(t);
    slots_.push_back(std::move(s));
    return Var{slots_.size() - 1};
  }

  Var param(Parameter& p) {
    for (const Parameter* q : params_) {
      if (q == &p) {
        throw TapeError("tape: parameter '" + p.name +
                        "' registered twice; shared parameters are not supported");
      }
    }
    if (p.layer != layer_) {
      throw TapeError("tape: parameter '" + p.name + "' belongs to layer " +
                      std::to_string(p.layer) + " but was registered in layer " +
                      std::to_string(layer_));
    }
    params_.push_back(&p);
    Slot s;
    s.kind = SlotKind::Param;
    s.layer = layer_;
    s.param = &p;
    slots_.push_back(std::move(s));
    return Var{slots_.size() - 1};
  }

  Var matmul(Var x, Var w) { return record(OpKind::MatMul, {x, w}); }
  Var add(Var a, Var b) { return record(OpKind::Add, {a, b}); }
  Var add_row(Var x, Var bias) { return record(OpKind::AddRow, {x, bias}); }
  Var mul(Var a, Var b) { return record(OpKind::Mul, {a, b}); }
  Var mul_row(Var x, Var gain) { return record(OpKind::MulRow, {x, gain}); }
  Var tanh(Var x) { return record(OpKind::Tanh, {x}); }
  Var gelu(Var x) { return record(OpKind::Gelu, {x}); }
  Var embedding(Var ids, Var table) { return record(OpKind::Embedding, {ids, table}); }
  Var layer_norm(Var x) { return record(OpKind::LayerNorm, {x}); }
  Var causal_attention(Var q, Var k, Var v, kernels::AttentionShape shape) {
    return record(OpKind::CausalAttention, {q, k, v}, shape);
  }
  Var softmax_cross_entropy(Var logits, Var targets) {
    return record(OpKind::SoftmaxCrossEntropy, {logits, targets});
  }
  Var mean_squared_error(Var pred, Var target) {
    return record(OpKind::MeanSquaredError, {pred, target});
  }

  const Tensor& value(Var v) const {
    const Slot& s = slot(v);
    if (s.kind == SlotKind::Param) return s.param->value;
    if (!s.value) {
      throw TapeError("tape: value " + std::to_string(v.id) + " is not retained");
    }
    return *s.value;
  }

  // Reverse pass. `loss_grad` seeds d(loss); pass a scalar holding the loss
  // scale to backpropagate a scaled loss. Without a hook every gradient is
  // retained.
  void backward(Var loss, const Tensor& loss_grad, const GradHook& hook = {}) {
    if (backward_done_) {
      throw TapeError("tape: backward already ran; record a new forward pass first");
    }
    if (nodes_.empty()) throw TapeError("tape: backward on an empty tape");
    const Slot& ls = slot(loss);
    if (ls.kind != SlotKind::Op || !ls.value || ls.value->size() != 1) {
      throw TapeError("tape: backward needs a scalar op output as the loss");
    }
    backward_done_ = true;
    grads_.assign(slots_.size(), std::nullopt);
    if (loss_grad.size() != 1) throw TapeError("tape: loss gradient seed must hold one value");
    grads_[loss.id] = Tensor(ls.value->shape(), {loss_grad[0]});

    std::size_t end = nodes_.size();
    while (end > 0) {
      const int layer = nodes_[end - 1].layer;
      std::size_t begin = end;
      while (begin > 0 && nodes_[begin - 1].layer == layer) --begin;

      if (layer_dropped(layer)) recompute(begin, end);
      for (std::size_t n = end; n-- > begin;) {
        const Node& node = nodes_[n];
        if (!grads_[node.output]) continue;
        backprop(node, hook);
        grads_[node.output].reset();
      }
      // Nothing below this layer reads its values again.
      for (std::size_t n = begin; n < end; ++n) slots_[nodes_[n].output].value.reset();
      end = begin;
    }
    grads_.clear();
  }

 private:
  enum class SlotKind { Input, Param, Op };

  struct Slot {
    SlotKind kind = SlotKind::Op;
    int layer = 0;
    Parameter* param = nullptr;
    std::optional<Tensor> value;
    bool param_consumed = false;
  };

  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::size_t output;
    int layer;
    kernels::AttentionShape attention;
  };

  const Slot& slot(Var v) const {
    if (v.id >= slots_.size()) throw TapeError("tape: unknown value id");
    return slots_[v.id];
  }

  bool layer_dropped(int layer) const {
    for (int l : dropped_layers_) {
      if (l == layer) return true;
    }
    return false;
  }

  const Tensor& input_value(std::size_t id, OpKind kind) const {
    const Slot& s = slots_[id];
    if (s.kind == SlotKind::Param) return s.param->value;
    if (!s.value) {
      throw TapeError("tape: " + std::string(to_string(kind)) + " reads value " +
                      std::to_string(id) + " from layer " + std::to_string(s.layer) +
                      ", which is not a retained layer boundary");
    }
    return *s.value;
  }

  Var record(OpKind kind, std::vector<Var> in, kernels::AttentionShape attn = {}) {
    if (backward_done_) throw TapeError("tape: cannot record after backward");
    Node node{kind, {}, 0, layer_, attn};
    int params_in = 0;
    for (Var v : in) {
      if (v.id >= slots_.size()) throw TapeError("tape: unknown value id");
      Slot& s = slots_[v.id];
      if (s.kind == SlotKind::Param) {
        if (s.param_consumed) {
          throw TapeError("tape: parameter '" + s.param->name +
                          "' feeds more than one op; shared parameters are not supported");
        }
        s.param_consumed = true;
        ++params_in;
      }
      node.inputs.push_back(v.id);
    }
    if (params_in > 1) {
      throw TapeError("tape: " + std::string(to_string(kind)) + " takes more than one parameter");
    }
    Tensor out = execute(node);
    out.track(ledger_, MemoryCategory::Activations);
    Slot s;
    s.kind = SlotKind::Op;
    s.layer = layer_;
    s.value = std::move(out);
    slots_.push_back(std::move(s));
    node.output = slots_.size() - 1;
    nodes_.push_back(std::move(node));
    layer_last_output_ = nodes_.back().output;
    return Var{nodes_.back().output};
  }

  Tensor execute(const Node& node) {
    ++counters_.forward_ops;
    const auto& in = node.inputs;
    auto val = [&](std::size_t i) -> const Tensor& { return input_value(in[i], node.kind); };
    const Precision p = precision_;
    switch (node.kind) {
      case OpKind::MatMul: return kernels::matmul(val(0), val(1), p);
      case OpKind::Add: return kernels::add(val(0), val(1), p);
      case OpKind::AddRow: return kernels::add_row(val(0), val(1), p);
      case OpKind::Mul: return kernels::mul(val(0), val(1), p);
      case OpKind::MulRow: return kernels::mul_row(val(0), val(1), p);
      case OpKind::Tanh: return kernels::tanh(val(0), p);
      case OpKind::Gelu: return kernels::gelu(val(0), p);
      case OpKind::Embedding: return kernels::embedding(val(0), val(1), p);
      case OpKind::LayerNorm: return kernels::layer_norm(val(0), p);
      case OpKind::CausalAttention:
        return kernels::causal_attention(val(0), val(1), val(2), node.attention, p);
      case OpKind::SoftmaxCrossEntropy: return kernels::softmax_cross_entropy(val(0), val(1));
      case OpKind::MeanSquaredError: return kernels::mean_squared_error(val(0), val(1));
    }
    throw TapeError("tape: unhandled op");
  }

  void seal_current_layer() {
    if (policy_ != CheckpointPolicy::CheckpointPerLayer) return;
    if (layer_begin_node_ == nodes_.size()) return;
    for (std::size_t n = layer_begin_node_; n < nodes_.size(); ++n) {
      if (nodes_[n].output != layer_last_output_) slots_[nodes_[n].output].value.reset();
    }
    dropped_layers_.push_back(layer_);
  }

  void recompute(std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      Slot& s = slots_[nodes_[n].output];
      if (s.value) continue;
      Tensor out = execute(nodes_[n]);
      ++counters_.recomputed_ops;
      out.track(ledger_, MemoryCategory::Activations);
      s.value = std::move(out);
    }
  }

  Precision grad_precision(std::size_t id) const {
    const Slot& s = slots_[id];
    return s.kind == SlotKind::Param ? s.param->value.precision() : precision_;
  }

  bool wants_grad(std::size_t id) const { return slots_[id].kind != SlotKind::Input; }

  void backprop(const Node& node, const GradHook& hook) {
    ++counters_.backward_ops;
    const auto& in = node.inputs;
    auto val = [&](std::size_t i) -> const Tensor& { return input_value(in[i], node.kind); };
    const Tensor& dy = *grads_[node.output];
    std::vector<std::optional<Tensor>> g(in.size());
    auto need = [&](std::size_t i) { return wants_grad(in[i]); };
    auto gp = [&](std::size_t i) { return grad_precision(in[i]); };

    switch (node.kind) {
      case OpKind::MatMul:
        if (need(0)) g[0] = kernels::matmul_grad_lhs(dy, val(1), gp(0));
        if (need(1)) g[1] = kernels::matmul_grad_rhs(val(0), dy, gp(1));
        break;
      case OpKind::Add:
        if (need(0)) g[0] = cast(dy, gp(0));
        if (need(1)) g[1] = cast(dy, gp(1));
        break;
      case OpKind::AddRow:
        if (need(0)) g[0] = cast(dy, gp(0));
        if (need(1)) g[1] = kernels::sum_rows(dy, val(1), gp(1));
        break;
      case OpKind::Mul:
        if (need(0)) g[0] = kernels::mul(dy, val(1), gp(0));
        if (need(1)) g[1] = kernels::mul(dy, val(0), gp(1));
        break;
      case OpKind::MulRow:
        if (need(0)) g[0] = kernels::mul_row_grad_input(dy, val(1), gp(0));
        if (need(1)) g[1] = kernels::mul_row_grad_gain(val(0), dy, val(1), gp(1));
        break;
      case OpKind::Tanh:
        if (need(0)) g[0] = kernels::tanh_grad(*slots_[node.output].value, dy, gp(0));
        break;
      case OpKind::Gelu:
        if (need(0)) g[0] = kernels::gelu_grad(val(0), dy, gp(0));
        break;
      case OpKind::Embedding:
        if (need(1)) g[1] = kernels::embedding_grad(val(0), val(1), dy, gp(1));
        break;
      case OpKind::LayerNorm:
        if (need(0)) g[0] = kernels::layer_norm_grad(val(0), dy, gp(0));
        break;
      case OpKind::CausalAttention: {
        auto r = kernels::causal_attention_grad(val(0), val(1), val(2), dy, node.attention,
                                                precision_);
        if (need(0)) g[0] = cast(r.dq, gp(0));
        if (need(1)) g[1] = cast(r.dk, gp(1));
        if (need(2)) g[2] = cast(r.dv, gp(2));
        break;
      }
      case OpKind::SoftmaxCrossEntropy:
        if (need(0)) g[0] = kernels::softmax_cross_entropy_grad(val(0), val(1), dy.item(), gp(0));
        break;
      case OpKind::MeanSquaredError:
        if (need(0)) g[0] = kernels::mean_squared_error_grad(val(0), val(1), dy.item(), gp(0));
        if (need(1)) {
          g[1] = kernels::mean_squared_error_grad(val(1), val(0), dy.item(), gp(1));
        }
        break;
    }

    // Activation gradients first; the single parameter gradient (if any) is
    // handed to the hook last, after everything that reads the old value.
    std::optional<std::size_t> param_index;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!g[i]) continue;
      const std::size_t id = in[i];
      if (slots_[id].kind == SlotKind::Param) {
        param_index = i;
        continue;
      }
      if (!grads_[id]) {
        grads_[id] = std::move(*g[i]);
      } else {
        grads_[id] = kernels::add(*grads_[id], *g[i], precision_);
      }
      g[i].reset();
    }
    if (param_index) deliver(*slots_[in[*param_index]].param, std::move(*g[*param_index]), hook);
  }

  void deliver(Parameter& p, Tensor grad, const GradHook& hook) {
    grad.track(ledger_, MemoryCategory::Gradients);
    delivery_layers_.push_back(p.layer);
    const GradDisposition d = hook ? hook(p, grad) : GradDisposition::Retain;
    if (d == GradDisposition::Retain) {
      p.grad = std::move(grad);
    }
  }

  Precision precision_;
  CheckpointPolicy policy_;
  MemoryLedger* ledger_;
  int layer_ = 0;
  std::size_t layer_last_output_ = 0;
  std::size_t layer_begin_node_ = 0;
  std::vector<Slot> slots_;
  std::vector<Node> nodes_;
  std::vector<Parameter*> params_;
  std::vector<int> dropped_layers_;
  std::vector<std::optional<Tensor>> grads_;
  std::vector<int> delivery_layers_;
  TapeCounters counters_;
  bool backward_done_ = false;
};

}  // namespace lomo
