#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "fsrc/numeric.hpp"
#include "fsrc/resemblance.hpp"

namespace fsrc {

enum class ReweightMode { ConstantOne };

struct RCLConfig {
  double temperature = 0.2;
  double iou_floor = 0.7;
  double balance = 0.5;
  ReweightMode reweight_mode = ReweightMode::ConstantOne;
  /// Keep background-labelled proposals in the batch as negatives.
  bool include_background = true;

  void validate() const {
    if (!(temperature > 0.0)) throw PreconditionError("RCLConfig: temperature must be > 0");
    if (!(iou_floor >= 0.0 && iou_floor <= 1.0)) throw PreconditionError("RCLConfig: iou_floor outside [0,1]");
    if (!(balance >= 0.0)) throw PreconditionError("RCLConfig: balance must be >= 0");
  }
};

/// Proposals entering the contrastive loss. Row r of raw_features is the
/// unnormalized contrastive-head output for proposal source_index[r].
struct ContrastiveBatch {
  Tensor2 raw_features;
  std::vector<ClassId> labels;
  std::vector<double> ious;
  std::vector<bool> in_group;
  std::vector<std::size_t> source_index;

  std::size_t size() const { return labels.size(); }

  void validate() const {
    const std::size_t n = labels.size();
    if (raw_features.rows() != n || ious.size() != n || in_group.size() != n) {
      throw PreconditionError("ContrastiveBatch: array lengths disagree");
    }
    for (double u : ious) {
      if (!(u >= 0.0 && u <= 1.0)) throw PreconditionError("ContrastiveBatch: iou outside [0,1]");
    }
  }
};

inline double anchor_weight(double u, const RCLConfig& config) {
  if (u < config.iou_floor) return 0.0;
  switch (config.reweight_mode) {
    case ReweightMode::ConstantOne:
      return 1.0;
  }
  return 1.0;
}

namespace detail {

inline Tensor2 normalized_rows(const Tensor2& raw) {
  Tensor2 z(raw.rows(), raw.cols());
  for (std::size_t i = 0; i < raw.rows(); ++i) {
    const auto n = l2_normalize(raw.row(i));
    std::copy(n.begin(), n.end(), z.row(i).begin());
  }
  return z;
}

/// Loss of anchor i given the (n x n) scaled-similarity matrix. Zero when the anchor has no positive.
inline double anchor_loss_from_logits(const Tensor2& logits, std::span<const ClassId> labels, std::size_t i,
                                      std::size_t* num_pos = nullptr, double* lse_out = nullptr) {
  const std::size_t n = labels.size();
  double m = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    if (k != i) m = std::max(m, logits(i, k));
  }
  double s = 0.0;
  double pos_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == i) continue;
    s += std::exp(logits(i, k) - m);
    if (labels[k] == labels[i]) {
      pos_sum += logits(i, k);
      ++pos;
    }
  }
  const double lse = m + std::log(s);
  if (num_pos) *num_pos = pos;
  if (lse_out) *lse_out = lse;
  if (pos == 0) return 0.0;
  // -(1/P) sum_j (s_ij - lse) is >= 0 mathematically; clamp the round-off.
  return std::max(0.0, lse - pos_sum / static_cast<double>(pos));
}

}  // namespace detail

/// Supervised contrastive loss of one anchor over the already-selected batch.
inline double per_anchor_loss(const ContrastiveBatch& batch, std::size_t i, double temperature) {
  if (batch.size() < 2) throw PreconditionError("per_anchor_loss: batch needs at least two proposals");
  if (i >= batch.size()) throw PreconditionError("per_anchor_loss: anchor index out of range");
  if (!(temperature > 0.0)) throw PreconditionError("per_anchor_loss: temperature must be > 0");
  const Tensor2 z = detail::normalized_rows(batch.raw_features);
  const std::size_t n = batch.size();
  Tensor2 logits(n, n);
  for (std::size_t k = 0; k < n; ++k) logits(i, k) = dot(z.row(i), z.row(k)) / temperature;
  return detail::anchor_loss_from_logits(logits, batch.labels, i);
}

struct RCLResult {
  double loss = 0.0;
  /// d loss / d raw_features, same shape as the batch features.
  Tensor2 grad;
  /// Unweighted per-anchor losses.
  std::vector<double> per_anchor;
};

/// Weighted mean of per-anchor losses over every proposal in the batch, with
/// the gradient taken through the row normalization.
inline RCLResult rcl_loss(const ContrastiveBatch& batch, const RCLConfig& config) {
  config.validate();
  batch.validate();
  const std::size_t n = batch.size();
  RCLResult out;
  out.grad = Tensor2(batch.raw_features.rows(), batch.raw_features.cols());
  out.per_anchor.assign(n, 0.0);
  if (n < 2) return out;

  const double tau = config.temperature;
  const Tensor2 z = detail::normalized_rows(batch.raw_features);
  Tensor2 logits = matmul_a_bt(z, z);
  for (double& v : logits.data()) v /= tau;

  Tensor2 dz(n, z.cols());
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> coeff(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t pos = 0;
    double lse = 0.0;
    out.per_anchor[i] = detail::anchor_loss_from_logits(logits, batch.labels, i, &pos, &lse);
    const double w = anchor_weight(batch.ious[i], config);
    if (w == 0.0 || pos == 0) continue;
    out.loss += w * out.per_anchor[i] * inv_n;

    const double scale = w * inv_n;
    const double inv_pos = 1.0 / static_cast<double>(pos);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) {
        coeff[k] = 0.0;
        continue;
      }
      const double p = std::exp(logits(i, k) - lse);
      coeff[k] = scale * (p - (batch.labels[k] == batch.labels[i] ? inv_pos : 0.0)) / tau;
    }
    auto dzi = dz.row(i);
    auto zi = z.row(i);
    for (std::size_t k = 0; k < n; ++k) {
      const double c = coeff[k];
      if (c == 0.0) continue;
      auto zk = z.row(k);
      auto dzk = dz.row(k);
      for (std::size_t d = 0; d < zi.size(); ++d) {
        dzi[d] += c * zk[d];
        dzk[d] += c * zi[d];
      }
    }
  }

  for (std::size_t r = 0; r < n; ++r) {
    const auto g = l2_normalize_backward(batch.raw_features.row(r), dz.row(r));
    std::copy(g.begin(), g.end(), out.grad.row(r).begin());
  }
  return out;
}

/// Contrastive batch selection. GCL keeps every proposal; RCL keeps a
/// foreground proposal iff its predicted or ground-truth label is in the group.
/// Background-labelled proposals are kept in both modes when include_background is set.
inline ContrastiveBatch select_contrastive_batch(const Tensor2& features, std::span<const ClassId> predicted,
                                                 std::span<const ClassId> labels, std::span<const double> ious,
                                                 const ResemblanceGroup& group, ContrastPhase phase,
                                                 ClassId background_id, bool include_background = true) {
  const std::size_t n = labels.size();
  if (features.rows() != n || predicted.size() != n || ious.size() != n) {
    throw PreconditionError("select_contrastive_batch: input lengths disagree");
  }
  std::vector<std::size_t> keep;
  std::vector<bool> gate;
  for (std::size_t i = 0; i < n; ++i) {
    const bool is_bg = labels[i] == background_id;
    const bool in_group = !is_bg && (group.contains(predicted[i]) || group.contains(labels[i]));
    bool take = false;
    if (is_bg) {
      take = include_background;
    } else {
      take = phase == ContrastPhase::GCL || in_group;
    }
    if (take) {
      keep.push_back(i);
      gate.push_back(in_group);
    }
  }
  ContrastiveBatch b;
  b.raw_features = Tensor2(keep.size(), features.cols());
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto src = features.row(keep[r]);
    std::copy(src.begin(), src.end(), b.raw_features.row(r).begin());
    b.labels.push_back(labels[keep[r]]);
    b.ious.push_back(ious[keep[r]]);
  }
  b.in_group = std::move(gate);
  b.source_index = std::move(keep);
  return b;
}

}  // namespace fsrc
