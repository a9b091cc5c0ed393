#include "scc/cond_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace scc {

std::string to_string(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::surprisal: return "surprisal";
    case ControllerKind::random: return "random";
    case ControllerKind::learned: return "learned";
    case ControllerKind::fixed_small: return "fixed_small";
    case ControllerKind::fixed_big: return "fixed_big";
  }
  return "?";
}

ControllerKind controller_kind_from_string(const std::string& s) {
  for (ControllerKind k : {ControllerKind::surprisal, ControllerKind::random, ControllerKind::learned,
                           ControllerKind::fixed_small, ControllerKind::fixed_big}) {
    if (to_string(k) == s) return k;
  }
  throw ParameterError("unknown controller '" + s + "'");
}

// ---------------------------------------------------------------------------
// FLOP accounting

void FlopMeter::record(Branch b) {
  total_ += costs_.fixed() + costs_.branch(b);
  ++timesteps_;
  if (b == Branch::big) ++big_steps_;
}

void FlopMeter::record(const GateTrace& trace) {
  for (Branch b : trace.branch) record(b);
}

void FlopMeter::merge(const FlopMeter& other) {
  total_ += other.total_;
  timesteps_ += other.timesteps_;
  big_steps_ += other.big_steps_;
}

double FlopMeter::average() const {
  if (timesteps_ == 0) throw ContractError("FlopMeter: no timesteps recorded");
  return static_cast<double>(total_) / static_cast<double>(timesteps_);
}

double flop_report(std::span<const FlopMeter> meters) {
  std::int64_t total = 0, steps = 0;
  for (const FlopMeter& m : meters) {
    total += m.total();
    steps += m.timesteps();
  }
  if (steps == 0) throw ContractError("flop_report: no timesteps in the given traces");
  return static_cast<double>(total) / static_cast<double>(steps);
}

// ---------------------------------------------------------------------------
// Model

ConditionalModel::ConditionalModel(const ArchitectureSpec& spec, std::shared_ptr<const ARModel> ar,
                                   bool use_ar_features, Rng& init_rng)
    : spec_(use_ar_features ? spec : without_ar_features(spec)),
      ar_(std::move(ar)),
      use_ar_features_(use_ar_features) {
  validate(spec_);
  if (use_ar_features_ && !ar_) throw ConfigError("conditional model: AR features requested but no AR model given");
  if (ar_) {
    if (ar_->obs_dim() != spec_.obs_dim) {
      throw ConfigError("conditional model: AR model reads width " + std::to_string(ar_->obs_dim()) +
                        ", architecture expects " + std::to_string(spec_.obs_dim));
    }
    if (ar_->feature_dim() != spec.feature_dim()) {
      throw ConfigError("conditional model: AR feature width " + std::to_string(ar_->feature_dim()) +
                        " does not match architecture '" + spec.name + "' (" +
                        std::to_string(spec.feature_dim()) + ")");
    }
    if (!ar_->frozen()) throw ConfigError("conditional model: AR model must be frozen");
  }
  if (spec_.pre_net) pre_.emplace(*spec_.pre_net, init_rng, "pre");
  small_ = Stack(spec_.small_net, init_rng, "small");
  big_ = Stack(spec_.big_net, init_rng, "big");
  if (spec_.post_net) post_.emplace(*spec_.post_net, init_rng, "post");
  if (post_) {
    final_log_softmax_ = !post_->ends_with_log_softmax();
  } else {
    if (small_.ends_with_log_softmax() != big_.ends_with_log_softmax()) {
      throw ConfigError("conditional model: experts disagree on a final log_softmax and there is no post-net");
    }
    final_log_softmax_ = !small_.ends_with_log_softmax();
  }
}

void ConditionalModel::use_surprisal(SurprisalController ctrl) {
  if (!ar_) throw ConfigError("surprisal controller needs an AR model");
  surprisal_ = ctrl;
  kind_ = ControllerKind::surprisal;
}

void ConditionalModel::use_random(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("random controller: p must be in [0, 1]");
  p_random_ = p;
  kind_ = ControllerKind::random;
}

void ConditionalModel::use_learned(Rng& init_rng) {
  if (!gate_) gate_.emplace(spec_.routing_dim(), spec_.gate_hidden, init_rng);
  kind_ = ControllerKind::learned;
}

void ConditionalModel::use_fixed(Branch b) {
  kind_ = b == Branch::big ? ControllerKind::fixed_big : ControllerKind::fixed_small;
}

void ConditionalModel::set_controller_kind(ControllerKind kind) {
  if (kind == ControllerKind::surprisal && !ar_) throw ConfigError("surprisal controller needs an AR model");
  if (kind == ControllerKind::learned && !gate_) throw ConfigError("learned controller has no gate; call use_learned");
  kind_ = kind;
}

PreparedSequence ConditionalModel::prepare(const Matrix& observations) const {
  if (observations.rows() < 1) throw ContractError("prepare: empty sequence");
  if (observations.cols() != spec_.obs_dim) {
    throw DimensionError("prepare: observation width " + std::to_string(observations.cols()) +
                         " does not match architecture width " + std::to_string(spec_.obs_dim));
  }
  PreparedSequence out;
  if (ar_) {
    auto [features, trace] = ar_->features_and_surprisal(observations);
    out.routing_input = use_ar_features_ ? std::move(features) : observations;
    out.surprisal = std::move(trace);
  } else {
    out.routing_input = observations;
  }
  return out;
}

std::vector<PreparedSequence> ConditionalModel::prepare_all(std::span<const Matrix> observations) const {
  std::vector<PreparedSequence> out;
  out.reserve(observations.size());
  for (const Matrix& m : observations) out.push_back(prepare(m));
  return out;
}

bool ConditionalModel::ar_consulted() const { return use_ar_features_ || kind_ == ControllerKind::surprisal; }

FlopCosts ConditionalModel::flop_costs() const {
  FlopCosts c;
  c.ar = ar_consulted() ? ar_model_params(spec_) : 0;
  c.pre_net = spec_.pre_net ? flops_per_timestep(*spec_.pre_net) : 0;
  c.post_net = spec_.post_net ? flops_per_timestep(*spec_.post_net) : 0;
  c.small = flops_per_timestep(spec_.small_net);
  c.big = flops_per_timestep(spec_.big_net);
  switch (kind_) {
    case ControllerKind::surprisal: c.controller = SurprisalController::parameter_count; break;
    case ControllerKind::learned: c.controller = gate_->flops_per_timestep(); break;
    default: c.controller = 0;
  }
  return c;
}

namespace {

Tensor run_experts(const Stack& small, const Stack& big, const Tensor& h, const std::vector<Branch>& branch,
                   const ForwardContext& ctx) {
  std::vector<Index> small_rows, big_rows;
  for (std::size_t t = 0; t < branch.size(); ++t) {
    (branch[t] == Branch::big ? big_rows : small_rows).push_back(static_cast<Index>(t));
  }
  if (big_rows.empty()) return small.forward(h, ctx);
  if (small_rows.empty()) return big.forward(h, ctx);
  const Index steps = static_cast<Index>(branch.size());
  if (small.pointwise() && big.pointwise()) {
    Tensor ys = small.forward(gather_rows(h, small_rows), ctx);
    Tensor yb = big.forward(gather_rows(h, big_rows), ctx);
    return merge_rows(ys, small_rows, yb, big_rows, steps);
  }
  // Experts with temporal context see the whole sequence; only the selected rows are kept.
  Tensor ys = gather_rows(small.forward(h, ctx), small_rows);
  Tensor yb = gather_rows(big.forward(h, ctx), big_rows);
  return merge_rows(ys, small_rows, yb, big_rows, steps);
}

}  // namespace

ForwardResult ConditionalModel::forward(const PreparedSequence& seq, ExecMode mode, Rng& rng, bool training) const {
  const Index steps = seq.routing_input.rows();
  if (steps < 1) throw ContractError("forward: empty sequence");
  const ForwardContext ctx{&rng, training};
  const Tensor x = Tensor::constant(seq.routing_input);
  const Tensor h = pre_ ? pre_->forward(x, ctx) : x;

  ForwardResult out;
  GateTrace& trace = out.trace;
  trace.p_big.resize(static_cast<std::size_t>(steps));
  trace.branch.resize(static_cast<std::size_t>(steps));

  if (kind_ == ControllerKind::learned) {
    out.decisions = gate_->forward(x);
    for (Index t = 0; t < steps; ++t) {
      const double s = out.decisions.value()(t, 0);
      trace.p_big[static_cast<std::size_t>(t)] = s;
      trace.branch[static_cast<std::size_t>(t)] = s > 0.5 ? Branch::big : Branch::small;
    }
  } else {
    if (kind_ == ControllerKind::surprisal) {
      if (seq.surprisal.size() != static_cast<std::size_t>(steps)) {
        throw ContractError("forward: surprisal controller needs a surprisal trace of length " +
                            std::to_string(steps));
      }
      trace.surprisal = seq.surprisal;
    }
    for (std::size_t t = 0; t < trace.branch.size(); ++t) {
      double p = 0.0;
      switch (kind_) {
        case ControllerKind::surprisal: p = surprisal_.p_big(seq.surprisal[t]); break;
        case ControllerKind::random: p = p_random_; break;
        case ControllerKind::fixed_big: p = 1.0; break;
        default: p = 0.0;
      }
      trace.p_big[t] = p;
      if (kind_ == ControllerKind::fixed_small || kind_ == ControllerKind::fixed_big) {
        trace.branch[t] = p > 0.5 ? Branch::big : Branch::small;
      } else {
        trace.branch[t] = sample_branch(p, mode, rng);
      }
    }
  }

  Tensor y;
  if (kind_ == ControllerKind::learned && training) {
    // Both experts run so the gate receives a gradient through the mix.
    const Tensor s = out.decisions;
    y = add(mul_col_broadcast(big_.forward(h, ctx), s), mul_col_broadcast(small_.forward(h, ctx), one_minus(s)));
  } else {
    y = run_experts(small_, big_, h, trace.branch, ctx);
  }
  if (post_) y = post_->forward(y, ctx);
  out.log_probs = final_log_softmax_ ? log_softmax(y) : y;

  out.flops = FlopMeter(flop_costs());
  out.flops.record(trace);
  return out;
}

std::vector<Tensor> ConditionalModel::parameters() const {
  std::vector<Tensor> p;
  auto append = [&p](const std::vector<Tensor>& v) { p.insert(p.end(), v.begin(), v.end()); };
  if (pre_) append(pre_->parameters());
  append(small_.parameters());
  append(big_.parameters());
  if (post_) append(post_->parameters());
  if (kind_ == ControllerKind::learned) append(gate_->parameters());
  return p;
}

std::vector<Tensor> ConditionalModel::all_parameters() const {
  std::vector<Tensor> p;
  auto append = [&p](const std::vector<Tensor>& v) { p.insert(p.end(), v.begin(), v.end()); };
  if (pre_) append(pre_->parameters());
  append(small_.parameters());
  append(big_.parameters());
  if (post_) append(post_->parameters());
  if (gate_) append(gate_->parameters());
  return p;
}

std::vector<Matrix> ConditionalModel::snapshot() const {
  std::vector<Matrix> out;
  for (const Tensor& t : all_parameters()) out.push_back(t.value());
  return out;
}

void ConditionalModel::restore(const std::vector<Matrix>& values) {
  std::vector<Tensor> params = all_parameters();
  if (params.size() != values.size()) {
    throw DimensionError("restore: expected " + std::to_string(params.size()) + " tensors, got " +
                         std::to_string(values.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].rows() != values[i].rows() || params[i].cols() != values[i].cols()) {
      throw DimensionError("restore: parameter '" + params[i].name() + "' has shape " + shape_string(params[i]) +
                           ", snapshot has [" + std::to_string(values[i].rows()) + " x " +
                           std::to_string(values[i].cols()) + "]");
    }
    params[i].value_mut() = values[i];
  }
}

// ---------------------------------------------------------------------------
// Training and evaluation

TrainHistory train(ConditionalModel& model, const LabeledSet& train_set, const LabeledSet* validation,
                   const TrainOptions& options, Rng& rng) {
  if (train_set.size() == 0) throw ContractError("train: empty training set");
  if (train_set.labels.size() != train_set.inputs.size()) throw ContractError("train: inputs and labels differ in count");
  if (model.ar() && !model.ar()->frozen()) throw ContractError("train: AR model must be frozen");
  if (options.validation_period < 1) throw ParameterError("train: validation period must be at least 1");
  if (!(options.lr_decay > 0.0 && options.lr_decay <= 1.0)) throw ParameterError("train: lr_decay must be in (0, 1]");
  const bool learned = model.controller() == ControllerKind::learned;
  const std::vector<Tensor> params = model.parameters();

  TrainHistory history;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    const double lr = options.lr * std::pow(options.lr_decay, epoch - 1);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      ForwardResult fwd = model.forward(train_set.inputs[idx], options.mode, rng, true);
      if (!fwd.log_probs.value().allFinite()) {
        throw NonFiniteError("train: non-finite output on training sequence " + std::to_string(idx) + " in epoch " +
                             std::to_string(epoch));
      }
      Tensor loss = ctc_loss(fwd.log_probs, train_set.labels[idx]);
      if (learned) loss = add(loss, gate_regularizer(fwd.decisions, options.lambda));
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NonFiniteError("train: non-finite loss on training sequence " + std::to_string(idx) + " in epoch " +
                             std::to_string(epoch));
      }
      total += value;
      backward(loss);
      if (options.clip_norm > 0.0) clip_grad_norm(params, options.clip_norm);
      sgd_step(params, lr);
    }
    history.train_loss.push_back(total / static_cast<double>(train_set.size()));

    if (validation && validation->size() > 0 && epoch % options.validation_period == 0) {
      Rng eval_rng(rng());
      const EvalResult r = evaluate(model, *validation, options.mode, options.beam_width, eval_rng);
      history.validation_per.emplace_back(epoch, r.per);
      if (options.on_validation) options.on_validation(epoch, r.per);
    }
  }
  return history;
}

EvalResult evaluate(const ConditionalModel& model, const LabeledSet& data, ExecMode mode, int beam_width, Rng& rng) {
  if (data.size() == 0) throw ContractError("evaluate: empty data set");
  EvalResult r;
  r.flops = FlopMeter(model.flop_costs());
  std::vector<LabelSeq> hyps;
  hyps.reserve(data.size());
  double p_sum = 0.0, loss_sum = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ForwardResult fwd = model.forward(data.inputs[i], mode, rng, false);
    const Matrix& lp = fwd.log_probs.value();
    if (beam_width > 0) hyps.push_back(beam_search_decode(lp, beam_width).labels);
    loss_sum -= ctc_log_likelihood(lp, data.labels[i]);
    r.flops.merge(fwd.flops);
    p_sum += std::accumulate(fwd.trace.p_big.begin(), fwd.trace.p_big.end(), 0.0);
  }
  r.per = beam_width > 0 ? per(hyps, data.labels) : std::numeric_limits<double>::quiet_NaN();
  r.loss = loss_sum / static_cast<double>(data.size());
  r.avg_flops = r.flops.average();
  r.mean_p_big = p_sum / static_cast<double>(r.flops.timesteps());
  r.big_fraction = static_cast<double>(r.flops.big_steps()) / static_cast<double>(r.flops.timesteps());
  return r;
}

}  // namespace scc
