#pragma once

// Neural layers, declarative architecture specs, and the parameter / FLOP
// counting rules. One multiply-accumulate counts as one FLOP, so for every
// layer here the per-timestep FLOPs equal the parameter count.

#include "scc/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace scc {

enum class LayerKind { linear, gru, bigru, conv1d, leaky_relu, dropout, log_softmax };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::linear;
  Index in_dim = 0;
  /// Output width. For bigru this is 2 * hidden (both directions).
  Index out_dim = 0;
  Index kernel = 1;      // conv1d only, must be odd
  double dropout = 0.0;  // dropout only
  double alpha = 0.125;  // leaky_relu only

  static LayerSpec linear(Index in, Index out) { return {LayerKind::linear, in, out}; }
  static LayerSpec gru(Index in, Index hidden) { return {LayerKind::gru, in, hidden}; }
  static LayerSpec bigru(Index in, Index hidden_per_direction) {
    return {LayerKind::bigru, in, 2 * hidden_per_direction};
  }
  static LayerSpec conv1d(Index length, Index in, Index out) {
    return {LayerKind::conv1d, in, out, length};
  }
  static LayerSpec leaky_relu(Index dim, double alpha = 0.125) {
    return {LayerKind::leaky_relu, dim, dim, 1, 0.0, alpha};
  }
  static LayerSpec dropout_layer(Index dim, double p) {
    return {LayerKind::dropout, dim, dim, 1, p};
  }
  static LayerSpec log_softmax(Index dim) { return {LayerKind::log_softmax, dim, dim}; }

  bool operator==(const LayerSpec&) const = default;
};

using StackSpec = std::vector<LayerSpec>;

/// Layer stacks of the conditional model. The autoregressive predictor is
/// implied: a linear map from the encoder width back to `obs_dim`.
struct ArchitectureSpec {
  std::string name;
  Index obs_dim = 0;
  /// n + 1 outputs, the last one is the CTC blank.
  Index label_count = 0;
  StackSpec ar_encoder;
  std::optional<StackSpec> pre_net;
  StackSpec small_net;
  StackSpec big_net;
  std::optional<StackSpec> post_net;
  /// Hidden width of the learned-gate baseline.
  Index gate_hidden = 80;

  Index feature_dim() const;  // AR encoder output width
  Index routing_dim() const;  // width entering the pre-net (or experts)
  Index expert_in_dim() const;

  bool operator==(const ArchitectureSpec&) const = default;
};

struct ParamCount {
  std::int64_t ar_model = 0;
  std::int64_t pre_net = 0;
  std::int64_t small_net = 0;
  std::int64_t big_net = 0;
  std::int64_t post_net = 0;
  std::int64_t controller = 2;

  std::int64_t total() const {
    return ar_model + pre_net + small_net + big_net + post_net + controller;
  }
};

/// Throws ParameterError describing the first inconsistency.
void validate(const ArchitectureSpec& spec);
void validate_stack(const StackSpec& stack, const std::string& what);

std::int64_t count_params(const LayerSpec& layer);
std::int64_t count_params(const StackSpec& stack);
ParamCount count_params(const ArchitectureSpec& spec);
/// Per input timestep; identical to the parameter count for these layers.
std::int64_t flops_per_timestep(const StackSpec& stack);
std::int64_t ar_model_params(const ArchitectureSpec& spec);
std::int64_t gate_params(const ArchitectureSpec& spec, Index input_dim);

/// "main", "model1", "model2", "model3" at full size, plus "desk", the
/// scaled-down default used for the synthetic experiments.
ArchitectureSpec preset(const std::string& name);
std::vector<std::string> preset_names();

/// Same architecture with the pre-net (or experts, if no pre-net) reading raw
/// observations instead of autoregressive features.
ArchitectureSpec without_ar_features(const ArchitectureSpec& spec);

void to_json(nlohmann::json& j, const LayerSpec& l);
void from_json(const nlohmann::json& j, LayerSpec& l);
void to_json(nlohmann::json& j, const ArchitectureSpec& a);
void from_json(const nlohmann::json& j, ArchitectureSpec& a);

// ---------------------------------------------------------------------------
// Layer parameters and forward functions.

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [1 x out]
};

/// Gate blocks are packed column-wise in the order update, reset, candidate.
/// A single bias per gate.
struct GruParams {
  Tensor w_input;   // [in x 3H]
  Tensor w_hidden;  // [H x 3H]
  Tensor bias;      // [1 x 3H]
  Index hidden() const { return w_hidden.rows(); }
};

struct BiGruParams {
  GruParams forward;
  GruParams backward;
};

struct Conv1dParams {
  Tensor kernel;  // [(length * in) x out], row index = tap * in + channel
  Tensor bias;    // [1 x out]
  Index length = 1;
};

LinearParams make_linear(Index in, Index out, Rng& rng, const std::string& name);
GruParams make_gru(Index in, Index hidden, Rng& rng, const std::string& name);
Conv1dParams make_conv1d(Index length, Index in, Index out, Rng& rng, const std::string& name);

/// xW + b, applied to every row of x.
Tensor linear_forward(const Tensor& x, const LinearParams& p);
/// One GRU step composed from primitive ops; x_t [1 x in], h_prev [1 x H].
Tensor gru_cell_step(const Tensor& x_t, const Tensor& h_prev, const GruParams& p);
/// Left-to-right GRU over seq [T x in] from a zero state; returns [T x H].
/// Fused into one graph node with a hand-written backward-through-time.
Tensor gru_forward(const Tensor& seq, const GruParams& p);
/// [forward states | time-reversed backward states], [T x 2H].
Tensor bigru_forward(const Tensor& seq, const BiGruParams& p);
/// Length-preserving cross-correlation with (L-1)/2 zero padding each side.
Tensor conv1d_forward(const Tensor& seq, const Conv1dParams& p);

struct ForwardContext {
  Rng* rng = nullptr;
  bool training = false;
};

/// A built layer stack holding its parameters.
class Stack {
 public:
  Stack() = default;
  Stack(StackSpec spec, Rng& init_rng, const std::string& prefix);

  Tensor forward(const Tensor& x, ForwardContext ctx) const;
  std::vector<Tensor> parameters() const;
  const StackSpec& spec() const { return spec_; }
  bool empty() const { return spec_.empty(); }
  /// True when every layer acts on each row independently (no conv/GRU).
  bool pointwise() const;
  bool ends_with_log_softmax() const;
  Index in_dim() const;
  Index out_dim() const;

 private:
  struct LeakyRelu {
    double alpha;
  };
  struct Dropout {
    double p;
  };
  struct LogSoftmax {};
  using Layer =
      std::variant<LinearParams, GruParams, BiGruParams, Conv1dParams, LeakyRelu, Dropout, LogSoftmax>;

  StackSpec spec_;
  std::vector<Layer> layers_;
};

}  // namespace scc
