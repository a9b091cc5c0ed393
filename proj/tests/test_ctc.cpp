#include "doctest.h"
#include "support.hpp"

using namespace scc;
using scc::testing::gradient_error;
using scc::testing::path_marginals;
using scc::testing::random_log_probs;

namespace {

LabelSeq random_labels(Rng& rng, int n, int max_len) {
  LabelSeq l(rng() % static_cast<unsigned>(max_len + 1));
  for (Label& x : l) x = static_cast<Label>(rng() % static_cast<unsigned>(n));
  return l;
}

}  // namespace

TEST_CASE("extended sequence and minimum frames") {
  const LabelSeq l = {0, 0, 1};
  CHECK(ctc_extend(l, 2) == std::vector<Label>{2, 0, 2, 0, 2, 1, 2});
  CHECK(ctc_min_frames(l) == 4);
  CHECK(ctc_min_frames(LabelSeq{}) == 0);
  CHECK(ctc_min_frames(LabelSeq{1, 2, 1}) == 3);
}

TEST_CASE("collapse removes repeats before blanks") {
  CHECK(collapse(std::vector<Label>{0, 0, 3, 0, 1, 1, 3, 3}, 3) == LabelSeq{0, 0, 1});
  CHECK(collapse(std::vector<Label>{3, 3}, 3).empty());
}

TEST_CASE("likelihood equals brute-force path enumeration") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const Index steps = 1 + static_cast<Index>(rng() % 5);
    const int n = 1 + static_cast<int>(rng() % 3);
    const Matrix lp = random_log_probs(steps, n + 1, rng);
    const LabelSeq labels = random_labels(rng, n, 3);
    if (ctc_min_frames(labels) > steps) {
      CHECK_THROWS_AS(ctc_log_likelihood(lp, labels), InfeasibleAlignment);
      continue;
    }
    const auto marg = path_marginals(lp);
    const auto it = marg.find(labels);
    REQUIRE(it != marg.end());
    CHECK(std::exp(ctc_log_likelihood(lp, labels)) == doctest::Approx(it->second).epsilon(1e-10));
  }
}

TEST_CASE("the label distribution sums to one") {
  Rng rng(32);
  for (int trial = 0; trial < 10; ++trial) {
    const Matrix lp = random_log_probs(4, 3, rng);
    double total = 0.0;
    for (const auto& [labels, p] : path_marginals(lp)) total += std::exp(ctc_log_likelihood(lp, labels));
    CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("loss gradient matches finite differences") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const Index steps = 3 + static_cast<Index>(rng() % 4);
    Tensor logits = Tensor::parameter(scc::testing::random_matrix(steps, 4, rng));
    const LabelSeq labels = {static_cast<Label>(rng() % 3), static_cast<Label>(rng() % 3)};
    CHECK(gradient_error([&] { return ctc_loss(log_softmax(logits), labels); }, {logits}) < 1e-6);
  }
}

TEST_CASE("gradient with respect to log-probabilities is minus the occupancy") {
  Rng rng(34);
  const Matrix lp = random_log_probs(5, 3, rng);
  Tensor x = Tensor::parameter(lp);
  const LabelSeq labels = {0, 1};
  backward(ctc_loss(x, labels));
  // Each frame's occupancies sum to one.
  for (Index t = 0; t < 5; ++t) CHECK(-x.grad().row(t).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("long sequences stay finite") {
  Rng rng(35);
  const Matrix lp = random_log_probs(400, 7, rng, 4.0);
  LabelSeq labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 6);
  const double ll = ctc_log_likelihood(lp, labels);
  CHECK(std::isfinite(ll));
  CHECK(ll < 0.0);
}

TEST_CASE("beam search with full width equals exhaustive decoding") {
  Rng rng(36);
  for (int trial = 0; trial < 100; ++trial) {
    const Index steps = 1 + static_cast<Index>(rng() % 5);
    const Index classes = 2 + static_cast<Index>(rng() % 3);
    const Matrix lp = random_log_probs(steps, classes, rng);
    const auto marg = path_marginals(lp);
    const auto best = std::max_element(marg.begin(), marg.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    const DecodeResult got = beam_search_decode(lp, 10000);
    CHECK(got.labels == best->first);
    CHECK(got.score == doctest::Approx(std::log(best->second)).epsilon(1e-10));
  }
}

TEST_CASE("greedy decoding takes the per-frame argmax") {
  Matrix lp = Matrix::Constant(4, 3, std::log(0.1));
  lp(0, 0) = lp(1, 0) = lp(2, 2) = lp(3, 1) = std::log(0.8);
  CHECK(greedy_decode(lp).labels == LabelSeq{0, 1});
}

TEST_CASE("a pruned beam never beats the exhaustive one") {
  Rng rng(37);
  for (int trial = 0; trial < 30; ++trial) {
    const Matrix lp = random_log_probs(6, 4, rng);
    CHECK(beam_search_decode(lp, 1).score <= beam_search_decode(lp, 10000).score + 1e-12);
  }
  CHECK_THROWS_AS(beam_search_decode(random_log_probs(3, 3, rng), 0), ParameterError);
}

TEST_CASE("edit distance and corpus error rate") {
  CHECK(edit_distance(LabelSeq{1, 2, 3}, LabelSeq{1, 3}) == 1);
  CHECK(edit_distance(LabelSeq{}, LabelSeq{4, 4}) == 2);
  CHECK(edit_distance(LabelSeq{1, 2}, LabelSeq{2, 1}) == 2);
  const std::vector<LabelSeq> hyp = {{1, 2}, {}}, ref = {{1, 2, 3}, {5}};
  CHECK(per(hyp, ref) == doctest::Approx(50.0));
  CHECK_THROWS_AS(per(hyp, std::vector<LabelSeq>{{1}}), ContractError);
}
