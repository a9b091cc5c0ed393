#include "doctest.h"
#include "support.hpp"

using namespace scc;
using scc::testing::gradient_error;
using scc::testing::random_matrix;

TEST_CASE("surprisal is half the squared prediction error") {
  const std::vector<double> x = {1.0, 2.0, -1.0}, x_hat = {0.0, 2.5, 1.0};
  CHECK(surprisal(x, x_hat) == doctest::Approx(0.5 * (1.0 + 0.25 + 4.0)));
  CHECK_THROWS_AS(surprisal(x, std::vector<double>{1.0}), DimensionError);
}

TEST_CASE("AR features are causal") {
  Rng rng(41);
  const ARModel ar(preset("desk"), rng);
  Matrix seq = random_matrix(12, 8, rng);
  const Matrix before = ar.encode(seq);
  seq.row(7).setConstant(5.0);
  const Matrix after = ar.encode(seq);
  CHECK(before.topRows(7) == after.topRows(7));
  CHECK_FALSE(before.row(7).isApprox(after.row(7)));
}

TEST_CASE("surprisal trace uses the previous feature row") {
  Rng rng(42);
  const ARModel ar(preset("desk"), rng);
  const Matrix seq = random_matrix(6, 8, rng);
  const auto [features, trace] = ar.features_and_surprisal(seq);
  CHECK(features == ar.encode(seq));
  CHECK(trace == ar.surprisal_trace(seq));
  const Matrix pred = ar.predict_all(features);
  CHECK(pred.row(0) == ar.predict_next(Matrix::Zero(1, ar.feature_dim())));
  for (Index t = 1; t < 6; ++t) {
    CHECK(pred.row(t).isApprox(ar.predict_next(features.row(t - 1)), 1e-12));
    CHECK(trace[static_cast<std::size_t>(t)] ==
          doctest::Approx(0.5 * (seq.row(t) - pred.row(t)).squaredNorm()).epsilon(1e-12));
  }
}

TEST_CASE("AR training lowers mean surprisal") {
  GenParams g;
  g.unlabeled_count = 60;
  g.train_count = g.validation_count = g.test_count = 1;
  const Dataset ds = generate_dataset(g);
  std::vector<Matrix> corpus;
  for (const auto& e : ds.unlabeled) corpus.push_back(e.observations);
  Rng rng(43);
  ARModel ar(preset("desk"), rng);
  const auto history = train_ar(ar, corpus, {4, 0.05, 5.0}, rng);
  REQUIRE(history.size() == 4);
  CHECK(history.back() < history.front());
  ar.freeze();
  CHECK(ar.frozen());
  CHECK_THROWS_AS(train_ar(ar, corpus, {1, 0.05, 5.0}, rng), ContractError);
}

TEST_CASE("controller maps surprisal through a sigmoid") {
  const SurprisalController c{2.0, -1.0};
  CHECK(c.p_big(0.5) == doctest::Approx(0.5));
  CHECK(c.p_big(10.0) > 0.99);
  CHECK(c.p_big(-10.0) < 0.01);
}

TEST_CASE("controller loss and its analytic gradient") {
  const std::vector<double> p = {0.2, 0.4, 0.9};
  const double mean = 0.5, var = (0.09 + 0.01 + 0.16) / 2.0;
  CHECK(controller_loss(p, {0.5, 0.04}) ==
        doctest::Approx(0.5 * (mean - 0.5) * (mean - 0.5) + 0.5 * (var - 0.04) * (var - 0.04)));
  CHECK_THROWS_AS(controller_loss(std::vector<double>{0.3}, {}), ContractError);

  Rng rng(44);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(8);
    for (double& v : s) v = std::exp(random_matrix(1, 1, rng)(0, 0));
    SurprisalController c{0.5 + uniform01(rng), -uniform01(rng)};
    const CalibrationTarget target{0.5, 0.04};
    const ControllerGradient g = controller_loss_gradient(c, s, target);
    auto loss_at = [&](double w, double b) {
      std::vector<double> p;
      for (double v : s) p.push_back(SurprisalController{w, b}.p_big(v));
      return controller_loss(p, target);
    };
    const double h = 1e-6;
    const double dw = (loss_at(c.w + h, c.b) - loss_at(c.w - h, c.b)) / (2 * h);
    const double db = (loss_at(c.w, c.b + h) - loss_at(c.w, c.b - h)) / (2 * h);
    CHECK(g.loss == doctest::Approx(loss_at(c.w, c.b)));
    CHECK(g.dw == doctest::Approx(dw).epsilon(1e-5));
    CHECK(g.db == doctest::Approx(db).epsilon(1e-5));
  }
}

TEST_CASE("calibration moves a poor start toward the targets") {
  Rng data_rng(45);
  std::lognormal_distribution<double> dist(0.0, 1.0);
  std::vector<std::vector<double>> stream(400, std::vector<double>(30));
  for (auto& seq : stream) {
    for (double& v : seq) v = dist(data_rng);
  }
  const CalibrationTarget target{0.5, 0.04};
  auto pooled = [&](const SurprisalController& c) {
    std::vector<double> p;
    for (const auto& seq : stream) {
      for (double v : seq) p.push_back(c.p_big(v));
    }
    return controller_loss(p, target);
  };
  Rng rng(46);
  const SurprisalController start{0.0, 2.0};
  const CalibrationResult r = calibrate_from(start, stream, target, 0.5, rng);
  CHECK(r.steps == 400);
  CHECK(pooled(r.controller) < 0.1 * pooled(start));

  Rng rng2(47);
  const CalibrationResult s = calibrate(stream, target, {}, rng2);
  CHECK(pooled(s.controller) < 1e-3);
}

TEST_CASE("calibration skips sequences too short for a variance") {
  std::vector<std::vector<double>> stream = {{1.0}, {0.5, 2.0, 1.0}, {}};
  Rng rng(48);
  const CalibrationResult r = calibrate(stream, {}, {}, rng);
  CHECK(r.steps == 1);
  CHECK(r.warnings.empty());

  const std::vector<std::vector<double>> flat = {{1.0, 1.0}, {1.0, 1.0, 1.0}};
  CHECK_FALSE(calibrate(flat, {}, {}, rng).warnings.empty());
}

TEST_CASE("deterministic routing picks big iff p exceeds one half") {
  Rng rng(49);
  CHECK(sample_branch(0.5, ExecMode::deterministic, rng) == Branch::small);
  CHECK(sample_branch(0.5000001, ExecMode::deterministic, rng) == Branch::big);
  CHECK(sample_branch(0.0, ExecMode::stochastic, rng) == Branch::small);
  CHECK(sample_branch(1.0, ExecMode::stochastic, rng) == Branch::big);
  CHECK_THROWS_AS(sample_branch(1.5, ExecMode::stochastic, rng), ParameterError);
}

TEST_CASE("stochastic routing frequency tracks p") {
  Rng rng(50);
  for (double p : {0.1, 0.5, 0.8}) {
    int big = 0;
    const int n = 40000;
    for (int i = 0; i < n; ++i) big += random_gate(p, rng) == Branch::big;
    // Five binomial standard deviations.
    CHECK(std::abs(big / static_cast<double>(n) - p) < 5.0 * std::sqrt(p * (1 - p) / n));
  }
}

TEST_CASE("straight-through threshold") {
  Tensor logits = Tensor::parameter((Matrix(3, 1) << -0.2, 0.0, 1.3).finished());
  const Tensor s = ste_threshold(logits);
  CHECK(s.value() == (Matrix(3, 1) << 0.0, 0.0, 1.0).finished());
  backward(sum(scale(s, 3.0)));
  CHECK(logits.grad() == Matrix::Constant(3, 1, 3.0));
}

TEST_CASE("gate regularizer penalizes distance from one half") {
  const std::vector<double> d = {0.0, 1.0, 1.0};
  CHECK(gate_regularizer(d, 0.1) == doctest::Approx(0.1 * 0.75));
  Tensor t = Tensor::parameter((Matrix(3, 1) << 0.0, 1.0, 1.0).finished());
  const Tensor r = gate_regularizer(t, 0.1);
  CHECK(r.item() == doctest::Approx(0.075));
  backward(r);
  CHECK(t.grad()(0, 0) == doctest::Approx(-0.1));
  CHECK(t.grad()(1, 0) == doctest::Approx(0.1));
}

TEST_CASE("learned gate gradients pass finite differences") {
  Rng rng(51);
  const LearnedGate gate(5, 4, rng);
  CHECK(gate.flops_per_timestep() == 5 * 4 + 4 + 4 + 1);
  Tensor x = Tensor::parameter(random_matrix(6, 5, rng));
  std::vector<Tensor> params = gate.parameters();
  params.push_back(x);
  const Matrix w = random_matrix(6, 1, rng);
  CHECK(gradient_error([&] { return sum(mul(gate.logits(x), Tensor::constant(w))); }, params) < 1e-4);

  // Through the hard threshold the gradient is the logit gradient.
  const Tensor s = gate.forward(x);
  backward(sum(mul(s, Tensor::constant(w))));
  std::vector<Matrix> ste;
  for (const Tensor& p : params) ste.push_back(p.grad());
  zero_grad(params);
  backward(sum(mul(gate.logits(x), Tensor::constant(w))));
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i].grad().isApprox(ste[i], 1e-12));
}

TEST_CASE("gate trace summaries") {
  GateTrace t;
  t.p_big = {0.2, 0.6, 0.7};
  t.branch = {Branch::small, Branch::big, Branch::big};
  CHECK(t.size() == 3);
  CHECK(t.big_count() == 2);
  CHECK(t.mean_p_big() == doctest::Approx(0.5));
}
