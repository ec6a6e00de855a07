#pragma once

#include <algorithm>
#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fsrc/contrastive.hpp"
#include "fsrc/detsim.hpp"
#include "fsrc/model.hpp"
#include "fsrc/resemblance.hpp"

namespace fsrc {

struct Detection {
  Box box;
  ClassId class_id = 0;
  double score = 0.0;
  /// Scene the detection belongs to when pooled over a test set.
  std::size_t scene = 0;

  bool operator==(const Detection&) const = default;
};

struct EvalConfig {
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  double match_iou = 0.5;
};

/// Score-then-box ordering used wherever detections must be ranked deterministically.
inline bool detection_rank_less(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.scene != b.scene) return a.scene < b.scene;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  return box_lex_less(a.box, b.box);
}

/// Greedy per-class NMS. Output is sorted by detection_rank_less.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0)) throw PreconditionError("nms: iou threshold outside (0,1)");
  std::sort(dets.begin(), dets.end(), detection_rank_less);
  std::vector<bool> dead(dets.size(), false);
  std::vector<Detection> kept;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dead[i]) continue;
    kept.push_back(dets[i]);
    for (std::size_t j = i + 1; j < dets.size(); ++j) {
      if (dead[j] || dets[j].class_id != dets[i].class_id || dets[j].scene != dets[i].scene) continue;
      if (iou(dets[i].box, dets[j].box) > iou_threshold) dead[j] = true;
    }
  }
  return kept;
}

/// Raw per-proposal detections: argmax class unless background, score from the
/// softmax over foreground logits, box refined by the predicted deltas.
inline std::vector<Detection> infer_scene(const DetectionModel& model, const SceneRecord& rec, std::size_t scene_index = 0) {
  std::vector<Detection> out;
  if (rec.proposals.empty()) return out;
  const std::size_t d = rec.proposals.front().feature.size();
  Tensor2 x(rec.proposals.size(), d);
  for (std::size_t r = 0; r < rec.proposals.size(); ++r) {
    std::copy(rec.proposals[r].feature.begin(), rec.proposals[r].feature.end(), x.row(r).begin());
  }
  const ForwardCache fw = model.forward_batch(x);
  const std::size_t bg = model.dims().num_classes;
  for (std::size_t r = 0; r < rec.proposals.size(); ++r) {
    const auto logits = fw.cls_logits.row(r);
    const std::size_t best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best == bg) continue;
    const auto fg = logits.subspan(0, bg);
    const double lse = log_sum_exp(fg);
    Detection det;
    det.class_id = static_cast<ClassId>(best);
    det.score = std::exp(logits[best] - lse);
    det.box = apply_box_deltas(rec.proposals[r].box, fw.box_deltas.row(r));
    det.scene = scene_index;
    out.push_back(det);
  }
  return out;
}

/// Inference with score threshold and NMS over a list of scenes.
inline std::vector<Detection> detect_all(const DetectionModel& model, std::span<const SceneRecord> scenes,
                                         const EvalConfig& cfg) {
  std::vector<Detection> all;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    auto raw = infer_scene(model, scenes[s], s);
    std::erase_if(raw, [&](const Detection& d) { return d.score < cfg.score_threshold; });
    auto kept = nms(std::move(raw), cfg.nms_iou);
    all.insert(all.end(), kept.begin(), kept.end());
  }
  return all;
}

/// Per-detection outcome in rank order (true = true positive).
inline std::vector<bool> match_detections(const std::vector<Detection>& detections, std::span<const Scene> gts,
                                          ClassId class_id, double match_iou = 0.5) {
  std::vector<Detection> dets;
  for (const auto& d : detections) {
    if (d.class_id == class_id) dets.push_back(d);
  }
  std::sort(dets.begin(), dets.end(), detection_rank_less);
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t s = 0; s < gts.size(); ++s) used[s].assign(gts[s].gt_boxes.size(), false);
  std::vector<bool> tp;
  tp.reserve(dets.size());
  for (const auto& d : dets) {
    if (d.scene >= gts.size()) throw PreconditionError("match_detections: scene index out of range");
    const Scene& sc = gts[d.scene];
    double best = -1.0;
    std::optional<std::size_t> best_g;
    for (std::size_t g = 0; g < sc.gt_boxes.size(); ++g) {
      if (sc.gt_labels[g] != class_id) continue;
      const double v = iou(d.box, sc.gt_boxes[g]);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    // A detection whose best ground truth is already taken is a duplicate.
    if (best_g && best >= match_iou && !used[d.scene][*best_g]) {
      used[d.scene][*best_g] = true;
      tp.push_back(true);
    } else {
      tp.push_back(false);
    }
  }
  return tp;
}

using Rational = boost::multiprecision::cpp_rational;

/// All-point interpolated AP as an exact fraction; nullopt when the class has no ground truth.
/// Precision and recall at each rank are ratios of counts, so the area is a finite sum of rationals.
inline std::optional<Rational> ap_exact_per_class(const std::vector<Detection>& detections, std::span<const Scene> gts,
                                                  ClassId class_id, double match_iou = 0.5) {
  std::size_t npos = 0;
  for (const auto& s : gts) npos += static_cast<std::size_t>(std::count(s.gt_labels.begin(), s.gt_labels.end(), class_id));
  if (npos == 0) return std::nullopt;
  const auto tp = match_detections(detections, gts, class_id, match_iou);
  // Interpolated precision at rank t is the best precision at any rank >= t.
  std::vector<Rational> envelope(tp.size());
  std::size_t ctp = 0;
  for (std::size_t t = 0; t < tp.size(); ++t) {
    if (tp[t]) ++ctp;
    envelope[t] = Rational(static_cast<long>(ctp), static_cast<long>(t + 1));
  }
  for (std::size_t t = envelope.size(); t-- > 1;) {
    if (envelope[t] > envelope[t - 1]) envelope[t - 1] = envelope[t];
  }
  // Recall rises by 1/npos exactly at true-positive ranks.
  Rational area = 0;
  for (std::size_t t = 0; t < tp.size(); ++t) {
    if (tp[t]) area += envelope[t];
  }
  return area / static_cast<long>(npos);
}

inline std::optional<double> ap50_per_class(const std::vector<Detection>& detections, std::span<const Scene> gts,
                                            ClassId class_id, double match_iou = 0.5) {
  const auto exact = ap_exact_per_class(detections, gts, class_id, match_iou);
  if (!exact) return std::nullopt;
  return exact->convert_to<double>();
}

struct APReport {
  std::map<ClassId, double> per_class_ap50;
  std::set<ClassId> absent;
  double map50_base = 0, map50_novel = 0, map50_all = 0;
  double std_novel = 0, std_all = 0;
};

namespace detail {

inline std::pair<double, double> mean_pstd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size()))};
}

}  // namespace detail

/// Split means and population standard deviations of per-class AP50.
inline APReport std_report(const std::map<ClassId, double>& per_class, const ClassCatalog& catalog) {
  APReport r;
  r.per_class_ap50 = per_class;
  std::vector<double> base, novel, all;
  for (const auto& [c, ap] : per_class) {
    all.push_back(ap);
    if (catalog.is_base(c)) base.push_back(ap);
    if (catalog.is_novel(c)) novel.push_back(ap);
  }
  r.map50_base = detail::mean_pstd(base).first;
  std::tie(r.map50_novel, r.std_novel) = detail::mean_pstd(novel);
  std::tie(r.map50_all, r.std_all) = detail::mean_pstd(all);
  return r;
}

inline APReport evaluate_ap(const DetectionModel& model, std::span<const SceneRecord> scenes, const ClassCatalog& catalog,
                            const EvalConfig& cfg = {}) {
  const auto dets = detect_all(model, scenes, cfg);
  std::vector<Scene> gts;
  gts.reserve(scenes.size());
  for (const auto& s : scenes) gts.push_back(s.scene);
  std::map<ClassId, double> per_class;
  std::set<ClassId> absent;
  for (ClassId c : catalog.all_classes()) {
    const auto ap = ap50_per_class(dets, gts, c, cfg.match_iou);
    if (ap) {
      per_class[c] = *ap;
    } else {
      absent.insert(c);
    }
  }
  APReport r = std_report(per_class, catalog);
  r.absent = std::move(absent);
  return r;
}

/// Fraction of foreground proposals whose argmax class equals the ground truth.
inline double classification_accuracy(const DetectionModel& model, std::span<const SceneRecord> scenes) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : scenes) {
    for (const auto& p : s.proposals) {
      if (!p.foreground) continue;
      const auto out = model.forward(p.feature);
      const auto best = std::max_element(out.cls_logits.begin(), out.cls_logits.end()) - out.cls_logits.begin();
      hit += best == p.gt_class ? 1 : 0;
      ++total;
    }
  }
  return total ? static_cast<double>(hit) / static_cast<double>(total) : 0.0;
}

struct DistanceReport {
  std::vector<ClassId> classes;
  std::map<ClassId, std::vector<double>> class_mean_embeddings;
  /// Indexed like `classes`.
  Tensor2 pairwise_cosine_distance;
  double mean_within_group = 0.0;
  double mean_outside_group = 0.0;
  std::vector<std::string> notes;
};

/// Cosine distances between unit class means. "Within" averages pairs whose
/// classes are both in the group; "outside" pairs with neither in it.
inline DistanceReport distance_report_from_embeddings(const std::map<ClassId, std::vector<double>>& means,
                                                      const ResemblanceGroup& group) {
  DistanceReport r;
  for (const auto& [c, v] : means) {
    r.classes.push_back(c);
    r.class_mean_embeddings[c] = l2_normalize(v);
  }
  const std::size_t n = r.classes.size();
  r.pairwise_cosine_distance = Tensor2(n, n);
  double win = 0.0, wout = 0.0;
  std::size_t nin = 0, nout = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dist = 1.0 - dot(r.class_mean_embeddings[r.classes[i]], r.class_mean_embeddings[r.classes[j]]);
      r.pairwise_cosine_distance(i, j) = dist;
      r.pairwise_cosine_distance(j, i) = dist;
      const bool gi = group.contains(r.classes[i]);
      const bool gj = group.contains(r.classes[j]);
      if (gi && gj) {
        win += dist;
        ++nin;
      } else if (!gi && !gj) {
        wout += dist;
        ++nout;
      }
    }
  }
  r.mean_within_group = nin ? win / static_cast<double>(nin) : 0.0;
  r.mean_outside_group = nout ? wout / static_cast<double>(nout) : 0.0;
  if (nin == 0) r.notes.push_back("fewer than two group classes present; within-group mean reported as 0");
  if (nout == 0) r.notes.push_back("fewer than two non-group classes present; outside-group mean reported as 0");
  return r;
}

/// Class means of normalized contrastive features over held-out foreground proposals.
inline DistanceReport distance_report(const DetectionModel& model, std::span<const SceneRecord> scenes,
                                      const ResemblanceGroup& group, const ClassCatalog& catalog) {
  std::map<ClassId, std::vector<double>> sums;
  std::map<ClassId, std::size_t> counts;
  for (const auto& s : scenes) {
    if (s.proposals.empty()) continue;
    Tensor2 x(s.proposals.size(), s.proposals.front().feature.size());
    for (std::size_t r = 0; r < s.proposals.size(); ++r) {
      std::copy(s.proposals[r].feature.begin(), s.proposals[r].feature.end(), x.row(r).begin());
    }
    const ForwardCache fw = model.forward_batch(x);
    for (std::size_t r = 0; r < s.proposals.size(); ++r) {
      const Proposal& p = s.proposals[r];
      if (!p.foreground) continue;
      const auto z = l2_normalize(fw.contrastive.row(r));
      auto& acc = sums[p.gt_class];
      if (acc.empty()) acc.assign(z.size(), 0.0);
      for (std::size_t k = 0; k < z.size(); ++k) acc[k] += z[k];
      ++counts[p.gt_class];
    }
  }
  std::map<ClassId, std::vector<double>> means;
  std::vector<std::string> notes;
  for (ClassId c : catalog.all_classes()) {
    auto it = sums.find(c);
    if (it == sums.end()) {
      notes.push_back("class " + std::to_string(c) + " has no held-out foreground proposals; excluded");
      continue;
    }
    std::vector<double> m = it->second;
    for (double& v : m) v /= static_cast<double>(counts[c]);
    if (norm2(m) <= kMinNorm) {
      notes.push_back("class " + std::to_string(c) + " has a zero mean embedding; excluded");
      continue;
    }
    means[c] = std::move(m);
  }
  DistanceReport r = distance_report_from_embeddings(means, group);
  r.notes.insert(r.notes.begin(), notes.begin(), notes.end());
  return r;
}

}  // namespace fsrc
