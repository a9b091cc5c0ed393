#include "doctest.h"
#include "support.hpp"

using namespace scc;
using scc::testing::random_matrix;

namespace {

std::shared_ptr<ARModel> frozen_ar(const ArchitectureSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  auto ar = std::make_shared<ARModel>(spec, rng);
  ar->freeze();
  return ar;
}

/// Pointwise experts and no post-net, so each output row depends on one
/// expert only.
ArchitectureSpec pointwise_spec() {
  ArchitectureSpec a = preset("desk");
  const Index f = a.feature_dim();
  a.pre_net = StackSpec{LayerSpec::linear(f, 6), LayerSpec::leaky_relu(6)};
  a.small_net = {LayerSpec::linear(6, a.label_count), LayerSpec::log_softmax(a.label_count)};
  a.big_net = {LayerSpec::linear(6, 10), LayerSpec::leaky_relu(10), LayerSpec::linear(10, a.label_count),
               LayerSpec::log_softmax(a.label_count)};
  a.post_net.reset();
  return a;
}

LabeledSet tiny_set(const ConditionalModel& m, std::size_t n, std::uint64_t seed) {
  GenParams g;
  g.seed = seed;
  g.unlabeled_count = 1;
  g.train_count = n;
  g.validation_count = g.test_count = 1;
  g.max_segments = 3;
  g.max_segment_len = 9;
  const Dataset ds = generate_dataset(g);
  LabeledSet s;
  for (const auto& e : ds.train) {
    s.inputs.push_back(m.prepare(e.observations));
    s.labels.push_back(e.labels);
  }
  return s;
}

}  // namespace

TEST_CASE("FLOP meter charges fixed costs every step and the chosen expert") {
  FlopCosts c{100, 10, 20, 2, 5, 50};
  CHECK(c.fixed() == 132);
  FlopMeter m(c);
  CHECK_THROWS_AS(m.average(), ContractError);
  m.record(Branch::small);
  m.record(Branch::big);
  m.record(Branch::big);
  CHECK(m.total() == 3 * 132 + 5 + 50 + 50);
  CHECK(m.big_steps() == 2);
  CHECK(m.average() == doctest::Approx((3 * 132 + 105) / 3.0));
  FlopMeter other(c);
  other.record(Branch::small);
  const FlopMeter both[] = {m, other};
  CHECK(flop_report(both) == doctest::Approx((m.total() + other.total()) / 4.0));
}

TEST_CASE("FLOP costs follow the parameter counts") {
  const ArchitectureSpec spec = preset("desk");
  const ParamCount pc = count_params(spec);
  Rng rng(61);
  ConditionalModel m(spec, frozen_ar(spec, 1), true, rng);
  m.use_fixed(Branch::small);
  FlopCosts c = m.flop_costs();
  CHECK(c.ar == pc.ar_model);
  CHECK(c.pre_net == pc.pre_net);
  CHECK(c.post_net == pc.post_net);
  CHECK(c.small == pc.small_net);
  CHECK(c.big == pc.big_net);
  CHECK(c.controller == 0);
  m.use_surprisal({});
  CHECK(m.flop_costs().controller == 2);

  ConditionalModel raw(spec, frozen_ar(spec, 1), false, rng);
  raw.use_random(0.5);
  CHECK_FALSE(raw.ar_consulted());
  CHECK(raw.flop_costs().ar == 0);
  raw.use_surprisal({});
  CHECK(raw.ar_consulted());
  CHECK(raw.flop_costs().ar == pc.ar_model);
}

TEST_CASE("routing with p of zero or one reproduces the fixed paths exactly") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(62);
  ConditionalModel m(spec, frozen_ar(spec, 2), true, rng);
  const PreparedSequence seq = m.prepare(random_matrix(15, 8, rng));
  for (Branch b : {Branch::small, Branch::big}) {
    Rng r1(5), r2(5);
    m.use_fixed(b);
    const ForwardResult fixed = m.forward(seq, ExecMode::stochastic, r1);
    m.use_random(b == Branch::big ? 1.0 : 0.0);
    const ForwardResult forced = m.forward(seq, ExecMode::stochastic, r2);
    CHECK(forced.log_probs.value() == fixed.log_probs.value());
    CHECK(forced.flops.total() == fixed.flops.total());
  }
}

TEST_CASE("each timestep's output comes from the expert that was chosen") {
  const ArchitectureSpec spec = pointwise_spec();
  Rng rng(63);
  ConditionalModel m(spec, frozen_ar(spec, 3), true, rng);
  const PreparedSequence seq = m.prepare(random_matrix(30, 8, rng));
  Rng r0(1), r1(1), r2(1);
  m.use_fixed(Branch::small);
  const Matrix small = m.forward(seq, ExecMode::stochastic, r0).log_probs.value();
  m.use_fixed(Branch::big);
  const Matrix big = m.forward(seq, ExecMode::stochastic, r1).log_probs.value();
  m.use_random(0.5);
  const ForwardResult mixed = m.forward(seq, ExecMode::stochastic, r2);
  REQUIRE(mixed.trace.big_count() > 0);
  REQUIRE(mixed.trace.big_count() < 30);
  for (Index t = 0; t < 30; ++t) {
    const Matrix& want = mixed.trace.branch[static_cast<std::size_t>(t)] == Branch::big ? big : small;
    CHECK(mixed.log_probs.value().row(t).isApprox(want.row(t), 1e-14));
  }
  const FlopCosts c = m.flop_costs();
  CHECK(mixed.flops.total() == 30 * c.fixed() + static_cast<std::int64_t>(mixed.trace.big_count()) * c.big +
                                   static_cast<std::int64_t>(30 - mixed.trace.big_count()) * c.small);
}

TEST_CASE("gradients reach only the expert that ran") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(64);
  ConditionalModel m(spec, frozen_ar(spec, 4), true, rng);
  m.use_fixed(Branch::small);
  const PreparedSequence seq = m.prepare(random_matrix(20, 8, rng));
  Rng r(3);
  const ForwardResult fwd = m.forward(seq, ExecMode::stochastic, r, true);
  const std::vector<Tensor> params = m.parameters();
  zero_grad(params);
  backward(ctc_loss(fwd.log_probs, LabelSeq{1, 2}));
  for (const Tensor& p : params) {
    if (p.name().rfind("big.", 0) == 0) {
      CHECK(p.grad().isZero());
    } else if (p.name().rfind("small.", 0) == 0) {
      CHECK_FALSE(p.grad().isZero());
    }
  }
}

TEST_CASE("learned gate mixes both experts in training and pays its own cost") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(65);
  ConditionalModel m(spec, frozen_ar(spec, 5), true, rng);
  m.use_learned(rng);
  CHECK(m.flop_costs().controller == gate_params(spec, spec.routing_dim()));
  const PreparedSequence seq = m.prepare(random_matrix(12, 8, rng));
  Rng r(4);
  const ForwardResult fwd = m.forward(seq, ExecMode::stochastic, r, true);
  REQUIRE(fwd.decisions.defined());
  backward(add(ctc_loss(fwd.log_probs, LabelSeq{0}), gate_regularizer(fwd.decisions, 0.01)));
  bool gate_grad = false;
  for (const Tensor& p : m.learned_gate()->parameters()) gate_grad |= !p.grad().isZero();
  CHECK(gate_grad);
  zero_grad(m.parameters());
}

TEST_CASE("deterministic surprisal routing thresholds p at one half") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(66);
  ConditionalModel m(spec, frozen_ar(spec, 6), true, rng);
  m.use_surprisal({1.0, -1.0});
  const PreparedSequence seq = m.prepare(random_matrix(25, 8, rng));
  Rng r(1);
  const ForwardResult fwd = m.forward(seq, ExecMode::deterministic, r);
  for (std::size_t t = 0; t < 25; ++t) {
    CHECK((fwd.trace.branch[t] == Branch::big) == (fwd.trace.p_big[t] > 0.5));
    CHECK(fwd.trace.p_big[t] == doctest::Approx(kernels::sigmoid(seq.surprisal[t] - 1.0)));
  }
}

TEST_CASE("construction checks the AR model") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(67);
  auto live = std::make_shared<ARModel>(spec, rng);
  CHECK_THROWS_AS(ConditionalModel(spec, live, true, rng), ConfigError);
  CHECK_THROWS_AS(ConditionalModel(spec, nullptr, true, rng), ConfigError);
  ConditionalModel no_ar(spec, nullptr, false, rng);
  CHECK_THROWS_AS(no_ar.use_surprisal({}), ConfigError);
  CHECK_THROWS_AS(no_ar.set_controller_kind(ControllerKind::learned), ConfigError);
}

TEST_CASE("training lowers the loss and snapshots restore parameters") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(68);
  ConditionalModel m(spec, frozen_ar(spec, 7), true, rng);
  m.use_random(0.5);
  const LabeledSet data = tiny_set(m, 12, 3);
  const auto before = m.snapshot();
  TrainOptions opts;
  opts.epochs = 4;
  std::vector<int> seen;
  opts.on_validation = [&](int epoch, double) { seen.push_back(epoch); };
  opts.validation_period = 2;
  Rng tr(9);
  const TrainHistory h = train(m, data, &data, opts, tr);
  CHECK(h.train_loss.size() == 4);
  CHECK(h.train_loss.back() < h.train_loss.front());
  CHECK(seen == std::vector<int>{2, 4});
  m.restore(before);
  CHECK(m.snapshot() == before);
  CHECK_THROWS_AS(m.restore({}), DimensionError);
}

TEST_CASE("a non-finite loss names the sequence") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(69);
  ConditionalModel m(spec, frozen_ar(spec, 8), true, rng);
  m.use_fixed(Branch::small);
  const LabeledSet data = tiny_set(m, 3, 4);
  m.parameters().front().value_mut()(0, 0) = std::nan("");
  TrainOptions opts;
  opts.epochs = 1;
  Rng tr(1);
  try {
    train(m, data, nullptr, opts, tr);
    FAIL("expected NonFiniteError");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("sequence") != std::string::npos);
  }
}

TEST_CASE("evaluation without decoding reports loss only") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(70);
  ConditionalModel m(spec, frozen_ar(spec, 9), true, rng);
  m.use_random(0.5);
  const LabeledSet data = tiny_set(m, 5, 5);
  Rng r1(2), r2(2);
  const EvalResult quick = evaluate(m, data, ExecMode::stochastic, 0, r1);
  const EvalResult full = evaluate(m, data, ExecMode::stochastic, 4, r2);
  CHECK(std::isnan(quick.per));
  CHECK(quick.loss == full.loss);
  CHECK(quick.avg_flops == full.avg_flops);
  CHECK(full.per >= 0.0);
  CHECK(full.mean_p_big == doctest::Approx(0.5));
}

TEST_CASE("learning-rate decay scales later epochs") {
  const ArchitectureSpec spec = preset("desk");
  Rng rng(71);
  ConditionalModel m(spec, frozen_ar(spec, 10), true, rng);
  m.use_fixed(Branch::small);
  const LabeledSet data = tiny_set(m, 4, 6);
  const auto start = m.snapshot();
  TrainOptions opts;
  opts.epochs = 1;
  Rng r1(5);
  train(m, data, nullptr, opts, r1);
  const auto one_epoch = m.snapshot();

  m.restore(start);
  opts.epochs = 2;
  opts.lr_decay = 1e-300;
  Rng r2(5);
  train(m, data, nullptr, opts, r2);
  CHECK(m.snapshot() == one_epoch);

  opts.lr_decay = 1.5;
  CHECK_THROWS_AS(train(m, data, nullptr, opts, r2), ParameterError);
}
