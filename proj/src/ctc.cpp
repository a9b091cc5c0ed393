#include "scc/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace scc {

using detail::Node;

Index ctc_min_frames(std::span<const Label> labels) {
  Index n = static_cast<Index>(labels.size());
  for (std::size_t i = 1; i < labels.size(); ++i) {
    if (labels[i] == labels[i - 1]) ++n;
  }
  return n;
}

std::vector<Label> ctc_extend(std::span<const Label> labels, Label blank) {
  std::vector<Label> ext;
  ext.reserve(2 * labels.size() + 1);
  ext.push_back(blank);
  for (Label l : labels) {
    ext.push_back(l);
    ext.push_back(blank);
  }
  return ext;
}

namespace {

void check_labels(const Matrix& log_probs, std::span<const Label> labels) {
  if (log_probs.rows() < 1) throw ContractError("ctc: empty input");
  const Label blank = static_cast<Label>(log_probs.cols() - 1);
  for (Label l : labels) {
    if (l < 0 || l >= blank) {
      throw ContractError("ctc: label " + std::to_string(l) + " outside [0, " + std::to_string(blank) + ")");
    }
  }
  const Index need = ctc_min_frames(labels);
  if (log_probs.rows() < need) {
    throw InfeasibleAlignment("ctc: " + std::to_string(log_probs.rows()) + " frames cannot align " +
                              std::to_string(labels.size()) + " labels (need " + std::to_string(need) + ")");
  }
}

double total_from_alpha(const Matrix& alpha) {
  const Index last = alpha.rows() - 1;
  const Index s_len = alpha.cols();
  double total = alpha(last, s_len - 1);
  if (s_len > 1) total = kernels::log_add_exp(total, alpha(last, s_len - 2));
  return total;
}

}  // namespace

double ctc_log_likelihood(const Matrix& log_probs, std::span<const Label> labels) {
  check_labels(log_probs, labels);
  const auto ext = ctc_extend(labels, static_cast<Label>(log_probs.cols() - 1));
  return total_from_alpha(ctc_log_alpha(log_probs, ext));
}

Tensor ctc_loss(const Tensor& log_probs, std::span<const Label> labels) {
  const Matrix& lp = log_probs.value();
  check_labels(lp, labels);
  const Label blank = static_cast<Label>(lp.cols() - 1);
  std::vector<Label> ext = ctc_extend(labels, blank);
  Matrix alpha = ctc_log_alpha(lp, ext);
  const double log_like = total_from_alpha(alpha);
  if (!std::isfinite(log_like)) {
    throw InfeasibleAlignment("ctc: labels have zero probability under the given log-probs");
  }
  return make_op(Matrix::Constant(1, 1, -log_like), {log_probs},
                 [ext = std::move(ext), alpha = std::move(alpha), log_like](Node& n) {
                   const Matrix& lp = n.input_value(0);
                   const Matrix beta = ctc_log_beta(lp, ext);
                   const Index steps = lp.rows();
                   const Index classes = lp.cols();
                   Matrix& g = n.input_grad(0);
                   const double upstream = n.grad(0, 0);
                   Eigen::VectorXd occ(classes);
                   for (Index t = 0; t < steps; ++t) {
                     occ.setConstant(kernels::neg_inf<double>());
                     for (std::size_t s = 0; s < ext.size(); ++s) {
                       const double v = alpha(t, static_cast<Index>(s)) + beta(t, static_cast<Index>(s));
                       occ(ext[s]) = kernels::log_add_exp(occ(ext[s]), v);
                     }
                     for (Index k = 0; k < classes; ++k) {
                       if (occ(k) == kernels::neg_inf<double>()) continue;
                       // alpha and beta both include the emission at t.
                       g(t, k) -= upstream * std::exp(occ(k) - lp(t, k) - log_like);
                     }
                   }
                 });
}

LabelSeq collapse(std::span<const Label> path, Label blank) {
  LabelSeq out;
  Label prev = -1;
  for (Label p : path) {
    if (p != prev && p != blank) out.push_back(p);
    prev = p;
  }
  return out;
}

DecodeResult greedy_decode(const Matrix& log_probs) {
  const Label blank = static_cast<Label>(log_probs.cols() - 1);
  std::vector<Label> path(static_cast<std::size_t>(log_probs.rows()));
  double score = 0.0;
  for (Index t = 0; t < log_probs.rows(); ++t) {
    Index best = 0;
    score += log_probs.row(t).maxCoeff(&best);
    path[static_cast<std::size_t>(t)] = static_cast<Label>(best);
  }
  return {collapse(path, blank), score};
}

namespace {

struct BeamEntry {
  double blank = kernels::neg_inf<double>();
  double non_blank = kernels::neg_inf<double>();
  double total() const { return kernels::log_add_exp(blank, non_blank); }
};

}  // namespace

DecodeResult beam_search_decode(const Matrix& log_probs, int width) {
  if (width < 1) throw ParameterError("beam_search_decode: width must be at least 1");
  const Label blank = static_cast<Label>(log_probs.cols() - 1);
  const Label symbols = blank;
  // Ordered map keeps iteration (and hence tie-breaking) deterministic.
  std::map<LabelSeq, BeamEntry> beam;
  beam[LabelSeq{}].blank = 0.0;

  for (Index t = 0; t < log_probs.rows(); ++t) {
    std::map<LabelSeq, BeamEntry> next;
    for (const auto& [prefix, entry] : beam) {
      const double total = entry.total();
      // Extend with blank: prefix unchanged.
      BeamEntry& same = next[prefix];
      same.blank = kernels::log_add_exp(same.blank, total + log_probs(t, blank));
      // Repeat the last symbol without a separating blank: prefix unchanged.
      if (!prefix.empty()) {
        same.non_blank = kernels::log_add_exp(same.non_blank, entry.non_blank + log_probs(t, prefix.back()));
      }
      for (Label c = 0; c < symbols; ++c) {
        LabelSeq extended = prefix;
        extended.push_back(c);
        BeamEntry& ext = next[extended];
        // A repeated symbol only starts a new label after a blank.
        const double from = (!prefix.empty() && prefix.back() == c) ? entry.blank : total;
        ext.non_blank = kernels::log_add_exp(ext.non_blank, from + log_probs(t, c));
      }
    }
    std::vector<std::pair<double, const LabelSeq*>> ranked;
    ranked.reserve(next.size());
    for (const auto& [prefix, entry] : next) ranked.emplace_back(entry.total(), &prefix);
    const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(width), ranked.size());
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(keep), ranked.end(),
                      [](const auto& a, const auto& b) {
                        if (a.first != b.first) return a.first > b.first;
                        return *a.second < *b.second;
                      });
    std::map<LabelSeq, BeamEntry> pruned;
    for (std::size_t i = 0; i < keep; ++i) pruned.emplace(*ranked[i].second, next.at(*ranked[i].second));
    beam = std::move(pruned);
  }

  DecodeResult best;
  best.score = kernels::neg_inf<double>();
  for (const auto& [prefix, entry] : beam) {
    const double s = entry.total();
    if (s > best.score) {
      best.score = s;
      best.labels = prefix;
    }
  }
  best.score = std::min(best.score, 0.0);
  return best;
}

std::size_t edit_distance(std::span<const Label> a, std::span<const Label> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double per(std::span<const LabelSeq> hyps, std::span<const LabelSeq> refs) {
  if (hyps.size() != refs.size()) {
    throw ContractError("per: " + std::to_string(hyps.size()) + " hypotheses for " +
                        std::to_string(refs.size()) + " references");
  }
  std::size_t dist = 0;
  std::size_t len = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    dist += edit_distance(hyps[i], refs[i]);
    len += refs[i].size();
  }
  if (len == 0) throw ContractError("per: references are empty");
  return 100.0 * static_cast<double>(dist) / static_cast<double>(len);
}

}  // namespace scc
