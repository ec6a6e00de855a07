#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "fsrc/numeric.hpp"

namespace fsrc {

using ClassId = int;

struct ClassCatalog {
  std::set<ClassId> base_classes;
  std::set<ClassId> novel_classes;
  ClassId background_id = -1;

  /// Base ids 0..num_base-1, novel ids after them, background last.
  static ClassCatalog contiguous(int num_base, int num_novel) {
    ClassCatalog c;
    for (int i = 0; i < num_base; ++i) c.base_classes.insert(i);
    for (int i = 0; i < num_novel; ++i) c.novel_classes.insert(num_base + i);
    c.background_id = num_base + num_novel;
    return c;
  }

  bool is_novel(ClassId c) const { return novel_classes.count(c) != 0; }
  bool is_base(ClassId c) const { return base_classes.count(c) != 0; }
  std::size_t num_classes() const { return base_classes.size() + novel_classes.size(); }

  std::vector<ClassId> all_classes() const {
    std::vector<ClassId> out(base_classes.begin(), base_classes.end());
    out.insert(out.end(), novel_classes.begin(), novel_classes.end());
    std::sort(out.begin(), out.end());
    return out;
  }

  void validate() const {
    for (ClassId c : base_classes) {
      if (novel_classes.count(c)) throw PreconditionError("class " + std::to_string(c) + " is both base and novel");
    }
    if (base_classes.count(background_id) || novel_classes.count(background_id)) {
      throw PreconditionError("background id collides with a class id");
    }
  }
};

/// Unordered class pair, stored canonically with class_a < class_b.
struct ResemblancePair {
  ClassId class_a = 0;
  ClassId class_b = 0;

  static ResemblancePair of(ClassId p, ClassId q) {
    if (p == q) throw PreconditionError("resemblance pair needs two distinct classes");
    return p < q ? ResemblancePair{p, q} : ResemblancePair{q, p};
  }

  auto operator<=>(const ResemblancePair&) const = default;
};

struct PairCounter {
  double iou_threshold = 0.5;
  std::map<ResemblancePair, long> counts;
};

struct ResemblanceGroup {
  std::set<ClassId> classes;

  bool contains(ClassId c) const { return classes.count(c) != 0; }
  bool empty() const { return classes.empty(); }
};

/// Records a confusion when a high-IoU proposal's prediction disagrees with its ground truth.
/// Background predictions are not confusions and are ignored.
inline void observe_proposal(PairCounter& counter, ClassId pred_class, ClassId gt_class, double iou,
                             ClassId background_id) {
  if (!(iou >= 0.0 && iou <= 1.0)) throw PreconditionError("observe_proposal: iou outside [0,1]");
  if (gt_class == background_id) throw PreconditionError("observe_proposal: ground truth is background");
  if (iou > counter.iou_threshold && pred_class != gt_class && pred_class != background_id) {
    ++counter.counts[ResemblancePair::of(pred_class, gt_class)];
  }
}

/// Union of classes over pairs with count > rep_threshold that contain a novel class.
inline ResemblanceGroup materialize_group(const PairCounter& counter, long rep_threshold,
                                          const ClassCatalog& catalog) {
  ResemblanceGroup g;
  for (const auto& [pair, count] : counter.counts) {
    if (count <= rep_threshold) continue;
    if (!catalog.is_novel(pair.class_a) && !catalog.is_novel(pair.class_b)) continue;
    g.classes.insert(pair.class_a);
    g.classes.insert(pair.class_b);
  }
  g.classes.erase(catalog.background_id);
  return g;
}

enum class ContrastPhase { GCL, RCL };

inline const char* to_string(ContrastPhase p) { return p == ContrastPhase::GCL ? "GCL" : "RCL"; }

struct MilestoneSchedule {
  double milestone_fraction = 0.75;
  std::size_t total_iterations = 1;

  /// First iteration index running in RCL mode. A value equal to total_iterations means never.
  std::size_t switch_index() const {
    if (total_iterations < 1) throw PreconditionError("MilestoneSchedule: total_iterations must be >= 1");
    if (!(milestone_fraction >= 0.0 && milestone_fraction <= 1.0)) {
      throw PreconditionError("MilestoneSchedule: milestone fraction outside [0,1]");
    }
    // 1e-9 absorbs products such as 0.29*100 = 28.999999999999996.
    const double raw = milestone_fraction * static_cast<double>(total_iterations);
    return static_cast<std::size_t>(std::floor(raw + 1e-9));
  }
};

inline ContrastPhase mode(const MilestoneSchedule& schedule, std::size_t current_iteration) {
  return current_iteration >= schedule.switch_index() ? ContrastPhase::RCL : ContrastPhase::GCL;
}

struct HistogramRow {
  ResemblancePair pair;
  long replications = 0;
  bool has_novel = false;

  bool operator==(const HistogramRow&) const = default;
};

/// Pairs sorted by descending count, ties by canonical pair order.
inline std::vector<HistogramRow> export_replication_histogram(const PairCounter& counter,
                                                              const ClassCatalog& catalog) {
  std::vector<HistogramRow> rows;
  rows.reserve(counter.counts.size());
  for (const auto& [pair, count] : counter.counts) {
    rows.push_back({pair, count, catalog.is_novel(pair.class_a) || catalog.is_novel(pair.class_b)});
  }
  std::stable_sort(rows.begin(), rows.end(), [](const HistogramRow& a, const HistogramRow& b) {
    if (a.replications != b.replications) return a.replications > b.replications;
    return a.pair < b.pair;
  });
  return rows;
}

}  // namespace fsrc
