#include "scc/layers.hpp"

#include "scc/kernels.hpp"

#include <cmath>

namespace scc {

using detail::Node;

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::gru: return "gru";
    case LayerKind::bigru: return "bigru";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::dropout: return "dropout";
    case LayerKind::log_softmax: return "log_softmax";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (LayerKind k : {LayerKind::linear, LayerKind::gru, LayerKind::bigru, LayerKind::conv1d,
                      LayerKind::leaky_relu, LayerKind::dropout, LayerKind::log_softmax}) {
    if (to_string(k) == s) return k;
  }
  throw ParameterError("unknown layer kind '" + s + "'");
}

// ---------------------------------------------------------------------------
// Specs and counting

Index ArchitectureSpec::feature_dim() const {
  return ar_encoder.empty() ? obs_dim : ar_encoder.back().out_dim;
}

Index ArchitectureSpec::routing_dim() const {
  if (pre_net && !pre_net->empty()) return pre_net->front().in_dim;
  return expert_in_dim();
}

Index ArchitectureSpec::expert_in_dim() const {
  return small_net.empty() ? 0 : small_net.front().in_dim;
}

void validate_stack(const StackSpec& stack, const std::string& what) {
  for (std::size_t i = 0; i < stack.size(); ++i) {
    const LayerSpec& l = stack[i];
    const std::string where = what + " layer " + std::to_string(i) + " (" + to_string(l.kind) + ")";
    if (l.in_dim <= 0 || l.out_dim <= 0) throw ParameterError(where + ": dimensions must be positive");
    switch (l.kind) {
      case LayerKind::conv1d:
        if (l.kernel < 1 || l.kernel % 2 == 0) {
          throw ParameterError(where + ": kernel length must be odd, got " + std::to_string(l.kernel));
        }
        break;
      case LayerKind::bigru:
        if (l.out_dim % 2 != 0) throw ParameterError(where + ": output width must be even");
        break;
      case LayerKind::leaky_relu:
      case LayerKind::log_softmax:
        if (l.in_dim != l.out_dim) throw ParameterError(where + ": must preserve width");
        break;
      case LayerKind::dropout:
        if (l.in_dim != l.out_dim) throw ParameterError(where + ": must preserve width");
        if (!(l.dropout >= 0.0 && l.dropout < 1.0)) throw ParameterError(where + ": p must be in [0, 1)");
        break;
      default: break;
    }
    if (i > 0 && stack[i - 1].out_dim != l.in_dim) {
      throw ParameterError(where + ": input width " + std::to_string(l.in_dim) +
                           " does not match previous output " + std::to_string(stack[i - 1].out_dim));
    }
  }
}

void validate(const ArchitectureSpec& spec) {
  if (spec.obs_dim < 1) throw ParameterError("architecture: obs_dim must be positive");
  if (spec.label_count < 2) throw ParameterError("architecture: label_count must be at least 2");
  if (spec.small_net.empty() || spec.big_net.empty()) {
    throw ParameterError("architecture: small_net and big_net must be non-empty");
  }
  validate_stack(spec.ar_encoder, "ar_encoder");
  if (!spec.ar_encoder.empty() && spec.ar_encoder.front().in_dim != spec.obs_dim) {
    throw ParameterError("ar_encoder: input width must equal obs_dim");
  }
  for (const LayerSpec& l : spec.ar_encoder) {
    if (l.kind == LayerKind::bigru || l.kind == LayerKind::conv1d) {
      throw ParameterError("ar_encoder: " + to_string(l.kind) + " is not causal");
    }
  }
  if (spec.pre_net) validate_stack(*spec.pre_net, "pre_net");
  validate_stack(spec.small_net, "small_net");
  validate_stack(spec.big_net, "big_net");
  if (spec.post_net) validate_stack(*spec.post_net, "post_net");

  if (spec.small_net.front().in_dim != spec.big_net.front().in_dim) {
    throw ParameterError("small_net and big_net must share an input width");
  }
  if (spec.small_net.back().out_dim != spec.big_net.back().out_dim) {
    throw ParameterError("small_net and big_net must share an output width");
  }
  if (spec.pre_net && !spec.pre_net->empty() &&
      spec.pre_net->back().out_dim != spec.expert_in_dim()) {
    throw ParameterError("pre_net output width must equal the expert input width");
  }
  const Index expert_out = spec.small_net.back().out_dim;
  if (spec.post_net && !spec.post_net->empty()) {
    if (spec.post_net->front().in_dim != expert_out) {
      throw ParameterError("post_net input width must equal the expert output width");
    }
    if (spec.post_net->back().out_dim != spec.label_count) {
      throw ParameterError("post_net output width must equal label_count");
    }
  } else if (expert_out != spec.label_count) {
    throw ParameterError("expert output width must equal label_count when there is no post_net");
  }
  if (spec.gate_hidden < 1) throw ParameterError("gate_hidden must be positive");
}

std::int64_t count_params(const LayerSpec& l) {
  const std::int64_t in = l.in_dim;
  const std::int64_t out = l.out_dim;
  switch (l.kind) {
    case LayerKind::linear: return in * out + out;
    case LayerKind::gru: return 3 * (in * out + out * out + out);
    case LayerKind::bigru: {
      const std::int64_t h = out / 2;
      return 2 * 3 * (in * h + h * h + h);
    }
    case LayerKind::conv1d: return l.kernel * in * out + out;
    default: return 0;
  }
}

std::int64_t count_params(const StackSpec& stack) {
  std::int64_t n = 0;
  for (const LayerSpec& l : stack) n += count_params(l);
  return n;
}

std::int64_t flops_per_timestep(const StackSpec& stack) { return count_params(stack); }

std::int64_t ar_model_params(const ArchitectureSpec& spec) {
  const std::int64_t f = spec.feature_dim();
  return count_params(spec.ar_encoder) + f * spec.obs_dim + spec.obs_dim;
}

std::int64_t gate_params(const ArchitectureSpec& spec, Index input_dim) {
  const std::int64_t h = spec.gate_hidden;
  return static_cast<std::int64_t>(input_dim) * h + h + h + 1;
}

ParamCount count_params(const ArchitectureSpec& spec) {
  ParamCount c;
  c.ar_model = ar_model_params(spec);
  c.pre_net = spec.pre_net ? count_params(*spec.pre_net) : 0;
  c.small_net = count_params(spec.small_net);
  c.big_net = count_params(spec.big_net);
  c.post_net = spec.post_net ? count_params(*spec.post_net) : 0;
  c.controller = 2;
  return c;
}

namespace {

ArchitectureSpec main_preset() {
  ArchitectureSpec a;
  a.name = "main";
  a.obs_dim = 80;
  a.label_count = 40;
  a.ar_encoder = {LayerSpec::gru(80, 512),    LayerSpec::dropout_layer(512, 0.5),
                  LayerSpec::linear(512, 512), LayerSpec::gru(512, 512),
                  LayerSpec::dropout_layer(512, 0.5), LayerSpec::linear(512, 512)};
  a.pre_net = StackSpec{LayerSpec::bigru(512, 256), LayerSpec::dropout_layer(512, 0.5)};
  a.small_net = {LayerSpec::linear(512, 512), LayerSpec::leaky_relu(512)};
  a.big_net = {LayerSpec::linear(512, 2048), LayerSpec::leaky_relu(2048),
               LayerSpec::linear(2048, 512), LayerSpec::leaky_relu(512)};
  a.post_net = StackSpec{LayerSpec::bigru(512, 256), LayerSpec::dropout_layer(512, 0.5),
                         LayerSpec::linear(512, 40)};
  a.gate_hidden = 80;
  return a;
}

ArchitectureSpec model1_preset() {
  ArchitectureSpec a = main_preset();
  a.name = "model1";
  a.pre_net = StackSpec{LayerSpec::conv1d(11, 512, 512), LayerSpec::leaky_relu(512)};
  a.small_net = {LayerSpec::linear(512, 40), LayerSpec::log_softmax(40)};
  a.big_net = {LayerSpec::linear(512, 2048), LayerSpec::leaky_relu(2048),
               LayerSpec::linear(2048, 40), LayerSpec::log_softmax(40)};
  a.post_net.reset();
  return a;
}

ArchitectureSpec model2_preset() {
  ArchitectureSpec a = model1_preset();
  a.name = "model2";
  a.pre_net->push_back(LayerSpec::dropout_layer(512, 0.5));
  return a;
}

ArchitectureSpec model3_preset() {
  ArchitectureSpec a = main_preset();
  a.name = "model3";
  a.pre_net.reset();
  a.small_net = {LayerSpec::dropout_layer(512, 0.5), LayerSpec::conv1d(11, 512, 40),
                 LayerSpec::log_softmax(40)};
  a.big_net = {LayerSpec::dropout_layer(512, 0.5), LayerSpec::conv1d(11, 512, 512),
               LayerSpec::leaky_relu(512), LayerSpec::linear(512, 40), LayerSpec::log_softmax(40)};
  a.post_net.reset();
  return a;
}

// Scaled-down "model1" layout for the synthetic stream (8-dim observations,
// 6 labels plus blank): a GRU encoder, a conv pre-net, and pointwise experts.
ArchitectureSpec desk_preset() {
  ArchitectureSpec a;
  a.name = "desk";
  a.obs_dim = 8;
  a.label_count = 7;
  a.ar_encoder = {LayerSpec::gru(8, 32), LayerSpec::linear(32, 32), LayerSpec::gru(32, 32),
                  LayerSpec::linear(32, 32)};
  a.pre_net = StackSpec{LayerSpec::conv1d(11, 32, 32), LayerSpec::leaky_relu(32)};
  a.small_net = {LayerSpec::linear(32, 7), LayerSpec::log_softmax(7)};
  a.big_net = {LayerSpec::linear(32, 128), LayerSpec::leaky_relu(128), LayerSpec::linear(128, 128),
               LayerSpec::leaky_relu(128), LayerSpec::linear(128, 7), LayerSpec::log_softmax(7)};
  a.post_net.reset();
  a.gate_hidden = 8;
  return a;
}

}  // namespace

ArchitectureSpec preset(const std::string& name) {
  if (name == "main") return main_preset();
  if (name == "model1") return model1_preset();
  if (name == "model2") return model2_preset();
  if (name == "model3") return model3_preset();
  if (name == "desk") return desk_preset();
  throw ParameterError("unknown architecture preset '" + name + "'");
}

std::vector<std::string> preset_names() { return {"main", "model1", "model2", "model3", "desk"}; }

ArchitectureSpec without_ar_features(const ArchitectureSpec& spec) {
  ArchitectureSpec a = spec;
  StackSpec& first = (a.pre_net && !a.pre_net->empty()) ? *a.pre_net : a.small_net;
  first.front().in_dim = a.obs_dim;
  if (&first == &a.small_net) a.big_net.front().in_dim = a.obs_dim;
  // Width-preserving leading layers (dropout) carry the new width through.
  auto propagate = [&](StackSpec& s) {
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const LayerKind k = s[i].kind;
      if (k == LayerKind::dropout || k == LayerKind::leaky_relu || k == LayerKind::log_softmax) {
        s[i].out_dim = s[i].in_dim;
        s[i + 1].in_dim = s[i].out_dim;
      } else {
        break;
      }
    }
  };
  propagate(first);
  if (&first == &a.small_net) propagate(a.big_net);
  return a;
}

// ---------------------------------------------------------------------------
// JSON

void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = nlohmann::json{{"kind", to_string(l.kind)}, {"in", l.in_dim}, {"out", l.out_dim}};
  if (l.kind == LayerKind::conv1d) j["kernel"] = l.kernel;
  if (l.kind == LayerKind::dropout) j["p"] = l.dropout;
  if (l.kind == LayerKind::leaky_relu) j["alpha"] = l.alpha;
}

void from_json(const nlohmann::json& j, LayerSpec& l) {
  for (const auto& [key, _] : j.items()) {
    if (key != "kind" && key != "in" && key != "out" && key != "kernel" && key != "p" && key != "alpha") {
      throw ParameterError("layer spec: unknown field '" + key + "'");
    }
  }
  l = LayerSpec{};
  l.kind = layer_kind_from_string(j.at("kind").get<std::string>());
  l.in_dim = j.at("in").get<Index>();
  l.out_dim = j.at("out").get<Index>();
  l.kernel = j.value("kernel", Index{1});
  l.dropout = j.value("p", 0.0);
  l.alpha = j.value("alpha", 0.125);
}

void to_json(nlohmann::json& j, const ArchitectureSpec& a) {
  j = nlohmann::json{{"name", a.name},
                     {"obs_dim", a.obs_dim},
                     {"label_count", a.label_count},
                     {"ar_encoder", a.ar_encoder},
                     {"small_net", a.small_net},
                     {"big_net", a.big_net},
                     {"gate_hidden", a.gate_hidden}};
  j["pre_net"] = a.pre_net ? nlohmann::json(*a.pre_net) : nlohmann::json(nullptr);
  j["post_net"] = a.post_net ? nlohmann::json(*a.post_net) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, ArchitectureSpec& a) {
  static const std::vector<std::string> known = {"name",      "obs_dim",  "label_count", "ar_encoder",
                                                 "pre_net",   "small_net", "big_net",    "post_net",
                                                 "gate_hidden"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ParameterError("architecture: unknown field '" + key + "'");
    }
  }
  a = ArchitectureSpec{};
  a.name = j.value("name", std::string("custom"));
  a.obs_dim = j.at("obs_dim").get<Index>();
  a.label_count = j.at("label_count").get<Index>();
  a.ar_encoder = j.at("ar_encoder").get<StackSpec>();
  if (j.contains("pre_net") && !j.at("pre_net").is_null()) a.pre_net = j.at("pre_net").get<StackSpec>();
  a.small_net = j.at("small_net").get<StackSpec>();
  a.big_net = j.at("big_net").get<StackSpec>();
  if (j.contains("post_net") && !j.at("post_net").is_null()) a.post_net = j.at("post_net").get<StackSpec>();
  a.gate_hidden = j.value("gate_hidden", Index{80});
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Matrix uniform_init(Index rows, Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) m(i, j) = (2.0 * uniform01(rng) - 1.0) * bound;
  }
  return m;
}

}  // namespace

LinearParams make_linear(Index in, Index out, Rng& rng, const std::string& name) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {Tensor::parameter(uniform_init(in, out, bound, rng), name + ".weight"),
          Tensor::parameter(uniform_init(1, out, bound, rng), name + ".bias")};
}

GruParams make_gru(Index in, Index hidden, Rng& rng, const std::string& name) {
  const double bin = 1.0 / std::sqrt(static_cast<double>(in));
  const double bh = 1.0 / std::sqrt(static_cast<double>(hidden));
  return {Tensor::parameter(uniform_init(in, 3 * hidden, bin, rng), name + ".w_input"),
          Tensor::parameter(uniform_init(hidden, 3 * hidden, bh, rng), name + ".w_hidden"),
          Tensor::parameter(uniform_init(1, 3 * hidden, bh, rng), name + ".bias")};
}

Conv1dParams make_conv1d(Index length, Index in, Index out, Rng& rng, const std::string& name) {
  if (length < 1 || length % 2 == 0) {
    throw ParameterError("conv1d: kernel length must be odd, got " + std::to_string(length));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(length * in));
  return {Tensor::parameter(uniform_init(length * in, out, bound, rng), name + ".kernel"),
          Tensor::parameter(uniform_init(1, out, bound, rng), name + ".bias"), length};
}

// ---------------------------------------------------------------------------
// Forward functions

Tensor linear_forward(const Tensor& x, const LinearParams& p) {
  if (x.cols() != p.weight.rows()) {
    throw DimensionError("linear: input " + shape_string(x) + " does not fit weight " +
                         shape_string(p.weight));
  }
  return add_row_bias(matmul(x, p.weight), p.bias);
}

namespace {

void check_gru(const Tensor& seq_or_x, const GruParams& p, const char* op) {
  const Index h = p.hidden();
  if (p.w_hidden.cols() != 3 * h || p.w_input.cols() != 3 * h || p.bias.cols() != 3 * h ||
      p.bias.rows() != 1) {
    throw DimensionError(std::string(op) + ": inconsistent GRU parameter shapes");
  }
  if (seq_or_x.cols() != p.w_input.rows()) {
    throw DimensionError(std::string(op) + ": input " + shape_string(seq_or_x) +
                         " does not fit w_input " + shape_string(p.w_input));
  }
}

}  // namespace

Tensor gru_cell_step(const Tensor& x_t, const Tensor& h_prev, const GruParams& p) {
  check_gru(x_t, p, "gru_cell_step");
  const Index h = p.hidden();
  if (h_prev.rows() != x_t.rows() || h_prev.cols() != h) {
    throw DimensionError("gru_cell_step: state " + shape_string(h_prev) + " does not match hidden size " +
                         std::to_string(h));
  }
  const Tensor gx = matmul(x_t, p.w_input);
  const Tensor gh = matmul(h_prev, slice_cols(p.w_hidden, 0, 2 * h));
  const Tensor a_zr = add(add(slice_cols(gx, 0, 2 * h), gh), slice_cols(p.bias, 0, 2 * h));
  const Tensor z = sigmoid(slice_cols(a_zr, 0, h));
  const Tensor r = sigmoid(slice_cols(a_zr, h, h));
  const Tensor a_c = add(add(slice_cols(gx, 2 * h, h), matmul(mul(r, h_prev), slice_cols(p.w_hidden, 2 * h, h))),
                         slice_cols(p.bias, 2 * h, h));
  const Tensor cand = tanh(a_c);
  return add(mul(one_minus(z), cand), mul(z, h_prev));
}

Tensor gru_forward(const Tensor& seq, const GruParams& p) {
  check_gru(seq, p, "gru_forward");
  const Index steps = seq.rows();
  if (steps < 1) throw ContractError("gru_forward: empty sequence");
  const Index h = p.hidden();
  const Index in = seq.cols();

  // The arithmetic below mirrors gru_cell_step operation for operation, so
  // the fused and composed paths agree bit for bit.
  const Matrix& wx = p.w_input.value();
  const Matrix wh_zr = p.w_hidden.value().leftCols(2 * h);
  const Matrix wh_c = p.w_hidden.value().rightCols(h);
  const Matrix b_zr = p.bias.value().leftCols(2 * h);
  const Matrix b_c = p.bias.value().rightCols(h);

  Matrix out(steps, h);
  Matrix zs(steps, h), rs(steps, h), cs(steps, h), hprev(steps, h);
  Matrix state = Matrix::Zero(1, h);
  Matrix x(1, in);
  for (Index t = 0; t < steps; ++t) {
    x = seq.value().row(t);
    const Matrix gx = x * wx;
    const Matrix gh = state * wh_zr;
    Matrix a_zr = gx.leftCols(2 * h) + gh;
    a_zr = a_zr + b_zr;
    const Matrix z = a_zr.leftCols(h).unaryExpr([](double v) { return kernels::sigmoid(v); });
    const Matrix r = a_zr.rightCols(h).unaryExpr([](double v) { return kernels::sigmoid(v); });
    const Matrix rh = r.cwiseProduct(state);
    const Matrix rh_w = rh * wh_c;
    Matrix a_c = gx.rightCols(h) + rh_w;
    a_c = a_c + b_c;
    const Matrix c = a_c.unaryExpr([](double v) { return std::tanh(v); });
    const Matrix one_minus_z = 1.0 - z.array();
    const Matrix next = one_minus_z.cwiseProduct(c) + z.cwiseProduct(state);
    hprev.row(t) = state;
    zs.row(t) = z;
    rs.row(t) = r;
    cs.row(t) = c;
    state = next;
    out.row(t) = state;
  }

  return make_op(std::move(out), {seq, p.w_input, p.w_hidden, p.bias},
                 [zs = std::move(zs), rs = std::move(rs), cs = std::move(cs), hprev = std::move(hprev),
                  h](Node& n) {
                   const Index steps = n.value.rows();
                   const Matrix& xs = n.input_value(0);
                   const Matrix& wx = n.input_value(1);
                   const Matrix& whv = n.input_value(2);
                   const Matrix wh_zr = whv.leftCols(2 * h);
                   const Matrix wh_c = whv.rightCols(h);

                   Matrix dgx(steps, 3 * h);  // d(pre-activations) per step
                   Matrix rh_all(steps, h);
                   Eigen::RowVectorXd dnext = Eigen::RowVectorXd::Zero(h);
                   for (Index t = steps - 1; t >= 0; --t) {
                     const Eigen::RowVectorXd dh = n.grad.row(t) + dnext;
                     const auto z = zs.row(t).array();
                     const auto r = rs.row(t).array();
                     const auto c = cs.row(t).array();
                     const auto hp = hprev.row(t).array();
                     const Eigen::RowVectorXd dc = (dh.array() * (1.0 - z)).matrix();
                     const Eigen::RowVectorXd dz = (dh.array() * (hp - c)).matrix();
                     Eigen::RowVectorXd dhp = (dh.array() * z).matrix();
                     const Eigen::RowVectorXd da_c = (dc.array() * (1.0 - c.square())).matrix();
                     const Eigen::RowVectorXd da_z = (dz.array() * z * (1.0 - z)).matrix();
                     const Eigen::RowVectorXd drh = da_c * wh_c.transpose();
                     const Eigen::RowVectorXd da_r = (drh.array() * hp * r * (1.0 - r)).matrix();
                     dhp.array() += drh.array() * r;
                     dgx.row(t).segment(0, h) = da_z;
                     dgx.row(t).segment(h, h) = da_r;
                     dgx.row(t).segment(2 * h, h) = da_c;
                     dhp.noalias() += dgx.row(t).segment(0, 2 * h) * wh_zr.transpose();
                     rh_all.row(t) = (r * hp).matrix();
                     dnext = dhp;
                   }
                   if (n.input_wants_grad(0)) n.input_grad(0).noalias() += dgx * wx.transpose();
                   if (n.input_wants_grad(1)) n.input_grad(1).noalias() += xs.transpose() * dgx;
                   if (n.input_wants_grad(2)) {
                     n.input_grad(2).leftCols(2 * h).noalias() += hprev.transpose() * dgx.leftCols(2 * h);
                     n.input_grad(2).rightCols(h).noalias() += rh_all.transpose() * dgx.rightCols(h);
                   }
                   if (n.input_wants_grad(3)) n.input_grad(3) += dgx.colwise().sum();
                 });
}

Tensor bigru_forward(const Tensor& seq, const BiGruParams& p) {
  const Tensor fwd = gru_forward(seq, p.forward);
  const Tensor bwd = reverse_rows(gru_forward(reverse_rows(seq), p.backward));
  return concat_cols(fwd, bwd);
}

Tensor conv1d_forward(const Tensor& seq, const Conv1dParams& p) {
  const Index len = p.length;
  if (len < 1 || len % 2 == 0) {
    throw ParameterError("conv1d: kernel length must be odd, got " + std::to_string(len));
  }
  const Index in = seq.cols();
  if (p.kernel.rows() != len * in) {
    throw DimensionError("conv1d: input " + shape_string(seq) + " does not fit kernel " +
                         shape_string(p.kernel) + " with length " + std::to_string(len));
  }
  const Index steps = seq.rows();
  const Index pad = (len - 1) / 2;
  Matrix cols = Matrix::Zero(steps, len * in);
  for (Index t = 0; t < steps; ++t) {
    for (Index k = 0; k < len; ++k) {
      const Index src = t + k - pad;
      if (src >= 0 && src < steps) cols.row(t).segment(k * in, in) = seq.value().row(src);
    }
  }
  Matrix out = cols * p.kernel.value();
  out.rowwise() += p.bias.value().row(0);
  return make_op(std::move(out), {seq, p.kernel, p.bias}, [cols = std::move(cols), len, in, pad](Node& n) {
    const Index steps = n.value.rows();
    if (n.input_wants_grad(1)) n.input_grad(1).noalias() += cols.transpose() * n.grad;
    if (n.input_wants_grad(2)) n.input_grad(2) += n.grad.colwise().sum();
    if (n.input_wants_grad(0)) {
      const Matrix dcols = n.grad * n.input_value(1).transpose();
      Matrix& dx = n.input_grad(0);
      for (Index t = 0; t < steps; ++t) {
        for (Index k = 0; k < len; ++k) {
          const Index src = t + k - pad;
          if (src >= 0 && src < steps) dx.row(src) += dcols.row(t).segment(k * in, in);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Stack

Stack::Stack(StackSpec spec, Rng& init_rng, const std::string& prefix) : spec_(std::move(spec)) {
  validate_stack(spec_, prefix);
  for (std::size_t i = 0; i < spec_.size(); ++i) {
    const LayerSpec& l = spec_[i];
    const std::string name = prefix + "." + std::to_string(i) + "." + to_string(l.kind);
    switch (l.kind) {
      case LayerKind::linear: layers_.emplace_back(make_linear(l.in_dim, l.out_dim, init_rng, name)); break;
      case LayerKind::gru: layers_.emplace_back(make_gru(l.in_dim, l.out_dim, init_rng, name)); break;
      case LayerKind::bigru: {
        BiGruParams b{make_gru(l.in_dim, l.out_dim / 2, init_rng, name + ".fwd"),
                      make_gru(l.in_dim, l.out_dim / 2, init_rng, name + ".bwd")};
        layers_.emplace_back(std::move(b));
        break;
      }
      case LayerKind::conv1d:
        layers_.emplace_back(make_conv1d(l.kernel, l.in_dim, l.out_dim, init_rng, name));
        break;
      case LayerKind::leaky_relu: layers_.emplace_back(LeakyRelu{l.alpha}); break;
      case LayerKind::dropout: layers_.emplace_back(Dropout{l.dropout}); break;
      case LayerKind::log_softmax: layers_.emplace_back(LogSoftmax{}); break;
    }
  }
}

Tensor Stack::forward(const Tensor& x, ForwardContext ctx) const {
  Tensor y = x;
  for (const Layer& layer : layers_) {
    y = std::visit(
        [&](const auto& l) -> Tensor {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, LinearParams>) {
            return linear_forward(y, l);
          } else if constexpr (std::is_same_v<L, GruParams>) {
            return gru_forward(y, l);
          } else if constexpr (std::is_same_v<L, BiGruParams>) {
            return bigru_forward(y, l);
          } else if constexpr (std::is_same_v<L, Conv1dParams>) {
            return conv1d_forward(y, l);
          } else if constexpr (std::is_same_v<L, LeakyRelu>) {
            return leaky_relu(y, l.alpha);
          } else if constexpr (std::is_same_v<L, Dropout>) {
            if (!ctx.training || l.p == 0.0) return y;
            if (ctx.rng == nullptr) throw ContractError("stack: dropout in training needs an rng");
            return dropout(y, l.p, *ctx.rng, true);
          } else {
            return log_softmax(y);
          }
        },
        layer);
  }
  return y;
}

std::vector<Tensor> Stack::parameters() const {
  std::vector<Tensor> out;
  auto add_gru = [&](const GruParams& g) {
    out.push_back(g.w_input);
    out.push_back(g.w_hidden);
    out.push_back(g.bias);
  };
  for (const Layer& layer : layers_) {
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, LinearParams>) {
            out.push_back(l.weight);
            out.push_back(l.bias);
          } else if constexpr (std::is_same_v<L, GruParams>) {
            add_gru(l);
          } else if constexpr (std::is_same_v<L, BiGruParams>) {
            add_gru(l.forward);
            add_gru(l.backward);
          } else if constexpr (std::is_same_v<L, Conv1dParams>) {
            out.push_back(l.kernel);
            out.push_back(l.bias);
          }
        },
        layer);
  }
  return out;
}

bool Stack::pointwise() const {
  for (const LayerSpec& l : spec_) {
    if (l.kind == LayerKind::gru || l.kind == LayerKind::bigru || l.kind == LayerKind::conv1d) return false;
  }
  return true;
}

bool Stack::ends_with_log_softmax() const {
  return !spec_.empty() && spec_.back().kind == LayerKind::log_softmax;
}

Index Stack::in_dim() const { return spec_.empty() ? 0 : spec_.front().in_dim; }
Index Stack::out_dim() const { return spec_.empty() ? 0 : spec_.back().out_dim; }

}  // namespace scc
