#pragma once

#include <algorithm>
#include <array>
#include <span>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fsrc/numeric.hpp"
#include "fsrc/resemblance.hpp"

namespace fsrc {

using Rng = std::mt19937_64;

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x1 < x2 && y1 < y2; }

  bool operator==(const Box&) const = default;
};

inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline bool box_lex_less(const Box& a, const Box& b) {
  if (a.x1 != b.x1) return a.x1 < b.x1;
  if (a.y1 != b.y1) return a.y1 < b.y1;
  if (a.x2 != b.x2) return a.x2 < b.x2;
  return a.y2 < b.y2;
}

/// Normalized offsets from a proposal to a target box: center shifts over
/// proposal size, log size ratios.
inline std::array<double, 4> encode_box_deltas(const Box& proposal, const Box& target) {
  return {(target.cx() - proposal.cx()) / proposal.width(), (target.cy() - proposal.cy()) / proposal.height(),
          std::log(target.width() / proposal.width()), std::log(target.height() / proposal.height())};
}

/// Inverse of encode_box_deltas, clipped to the unit image.
inline Box apply_box_deltas(const Box& proposal, std::span<const double> d) {
  const double cx = proposal.cx() + d[0] * proposal.width();
  const double cy = proposal.cy() + d[1] * proposal.height();
  const double w = proposal.width() * std::exp(std::clamp(d[2], -4.0, 4.0));
  const double h = proposal.height() * std::exp(std::clamp(d[3], -4.0, 4.0));
  Box b{std::clamp(cx - 0.5 * w, 0.0, 1.0), std::clamp(cy - 0.5 * h, 0.0, 1.0), std::clamp(cx + 0.5 * w, 0.0, 1.0),
        std::clamp(cy + 0.5 * h, 0.0, 1.0)};
  if (!b.valid()) return proposal;
  return b;
}

struct ConfusablePair {
  ClassId class_a = 0;
  ClassId class_b = 0;
  double angle_deg = 15.0;

  bool operator==(const ConfusablePair&) const = default;
};

struct DatasetConfig {
  int num_base = 12;
  int num_novel = 4;
  int embed_dim = 32;
  std::vector<ConfusablePair> confusable_pairs{{12, 0, 15.0}, {13, 1, 15.0}};
  double noise_sigma = 0.05;
  /// Weight of the distractor prototype in a proposal feature, scaled by (1 - iou).
  double context_mix = 0.5;
  double background_sigma = 0.18;
  int proposals_per_gt = 8;
  int background_per_scene = 8;
  double fg_iou_threshold = 0.5;
  int min_gt_per_scene = 1;
  int max_gt_per_scene = 3;
  int base_train_scenes = 400;
  int base_val_scenes = 100;
  int finetune_pool_scenes = 300;
  int test_scenes = 300;
  std::uint64_t seed = 1;

  int num_classes() const { return num_base + num_novel; }
  ClassId background_id() const { return num_classes(); }
  ClassCatalog catalog() const { return ClassCatalog::contiguous(num_base, num_novel); }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw PreconditionError("dataset." + field + ": " + why);
    };
    if (num_base < 1) fail("num_base", "must be >= 1");
    if (num_novel < 0) fail("num_novel", "must be >= 0");
    if (embed_dim < num_classes()) fail("embed_dim", "must be >= number of classes");
    if (!(noise_sigma >= 0)) fail("noise_sigma", "must be >= 0");
    if (!(context_mix >= 0)) fail("context_mix", "must be >= 0");
    if (!(background_sigma > 0)) fail("background_sigma", "must be > 0");
    if (proposals_per_gt < 1) fail("proposals_per_gt", "must be >= 1");
    if (background_per_scene < 0) fail("background_per_scene", "must be >= 0");
    if (!(fg_iou_threshold > 0 && fg_iou_threshold < 1)) fail("fg_iou_threshold", "must be in (0,1)");
    if (min_gt_per_scene < 1 || max_gt_per_scene < min_gt_per_scene) fail("max_gt_per_scene", "need 1 <= min <= max");
    if (base_train_scenes < 0 || base_val_scenes < 0 || finetune_pool_scenes < 0 || test_scenes < 0) {
      fail("scenes", "counts must be >= 0");
    }
    const auto cat = catalog();
    for (const auto& p : confusable_pairs) {
      const std::string name = "confusable_pairs(" + std::to_string(p.class_a) + "," + std::to_string(p.class_b) + ")";
      if (p.class_a < 0 || p.class_a >= num_classes() || p.class_b < 0 || p.class_b >= num_classes()) {
        fail(name, "class id out of range");
      }
      if (p.class_a == p.class_b) fail(name, "classes must differ");
      if (!(p.angle_deg > 0.0 && p.angle_deg <= 90.0)) fail(name, "angle must be in (0, 90] degrees");
      if (!cat.is_novel(p.class_a) && !cat.is_novel(p.class_b)) fail(name, "must include a novel class");
    }
  }
};

struct ClassSpec {
  ClassId class_id = 0;
  std::vector<double> prototype;
  bool is_novel = false;
};

struct Scene {
  std::vector<Box> gt_boxes;
  std::vector<ClassId> gt_labels;
};

struct Proposal {
  Box box;
  std::vector<double> feature;
  std::optional<std::size_t> matched_gt_index;
  double iou = 0.0;
  /// Class of the matched ground truth; background id when unmatched.
  ClassId gt_class = 0;
  /// iou >= the dataset foreground threshold.
  bool foreground = false;

  ClassId training_label(ClassId background_id) const { return foreground ? gt_class : background_id; }
};

struct SceneRecord {
  Scene scene;
  std::vector<Proposal> proposals;
};

struct Dataset {
  DatasetConfig config;
  std::vector<ClassSpec> classes;
  std::vector<SceneRecord> base_train;
  std::vector<SceneRecord> base_val;
  std::vector<SceneRecord> finetune_pool;
  std::vector<SceneRecord> test;
};

inline double angle_deg(std::span<const double> a, std::span<const double> b) {
  const double c = std::clamp(dot(a, b) / (norm2(a) * norm2(b)), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

/// Class prototypes on the unit sphere. Every class owns one direction of a
/// random orthonormal frame; planted pairs rotate one member toward the other.
inline std::vector<ClassSpec> generate_prototypes(const DatasetConfig& config, Rng& rng) {
  config.validate();
  const int n = config.num_classes();
  const int d = config.embed_dim;
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::vector<std::vector<double>> frame;
  while (static_cast<int>(frame.size()) < n) {
    std::vector<double> v(d);
    for (double& x : v) x = gauss(rng);
    for (const auto& q : frame) {
      const double p = dot(v, q);
      for (int k = 0; k < d; ++k) v[k] -= p * q[k];
    }
    const double nv = norm2(v);
    if (nv < 1e-6) continue;
    for (double& x : v) x /= nv;
    frame.push_back(std::move(v));
  }

  std::vector<std::optional<std::vector<double>>> proto(n);
  auto pair_name = [](const ConfusablePair& p) {
    return "(" + std::to_string(p.class_a) + "," + std::to_string(p.class_b) + ")";
  };
  auto derive = [&](ClassId from, ClassId to, double deg) {
    const double th = deg * std::numbers::pi / 180.0;
    std::vector<double> v(d);
    for (int k = 0; k < d; ++k) v[k] = std::cos(th) * (*proto[from])[k] + std::sin(th) * frame[to][k];
    proto[to] = std::move(v);
  };
  for (const auto& p : config.confusable_pairs) {
    const bool has_a = proto[p.class_a].has_value();
    const bool has_b = proto[p.class_b].has_value();
    if (!has_a && !has_b) {
      proto[p.class_a] = frame[p.class_a];
      derive(p.class_a, p.class_b, p.angle_deg);
    } else if (has_a && !has_b) {
      derive(p.class_a, p.class_b, p.angle_deg);
    } else if (!has_a && has_b) {
      derive(p.class_b, p.class_a, p.angle_deg);
    }
  }
  for (int c = 0; c < n; ++c) {
    if (!proto[c]) proto[c] = frame[c];
  }

  std::set<std::pair<ClassId, ClassId>> planted;
  for (const auto& p : config.confusable_pairs) {
    const double got = angle_deg(*proto[p.class_a], *proto[p.class_b]);
    if (std::abs(got - p.angle_deg) > 1.0) {
      throw PreconditionError("infeasible confusable pair " + pair_name(p) + ": realised angle " +
                              std::to_string(got) + " deg, wanted " + std::to_string(p.angle_deg));
    }
    planted.insert({std::min(p.class_a, p.class_b), std::max(p.class_a, p.class_b)});
  }
  for (int a = 0; a < n; ++a) {
    for (int b = a + 1; b < n; ++b) {
      if (planted.count({a, b})) continue;
      const double got = angle_deg(*proto[a], *proto[b]);
      if (got < 60.0 - 1e-9) {
        throw PreconditionError("infeasible confusable pairs: unplanted pair (" + std::to_string(a) + "," +
                                std::to_string(b) + ") ends up " + std::to_string(got) + " deg apart");
      }
    }
  }

  const auto cat = config.catalog();
  std::vector<ClassSpec> out;
  for (int c = 0; c < n; ++c) out.push_back({c, *proto[c], cat.is_novel(c)});
  return out;
}

/// prototype(gt)*iou + prototype(other)*(1-iou)*mix + N(0, sigma)
inline std::vector<double> make_proposal_feature(std::span<const double> gt_proto, std::span<const double> other_proto,
                                                 double iou_value, double mix, double sigma, Rng& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> f(gt_proto.size());
  const double w_other = (1.0 - iou_value) * mix;
  for (std::size_t k = 0; k < f.size(); ++k) {
    f[k] = gt_proto[k] * iou_value + other_proto[k] * w_other;
    if (sigma > 0.0) f[k] += sigma * noise(rng);
  }
  return f;
}

namespace detail {

inline Box shift_box(const Box& gt, double target_iou, Rng& rng) {
  std::uniform_int_distribution<int> coin(0, 1);
  const int first_axis = coin(rng);
  const int first_sign = coin(rng) ? 1 : -1;
  for (int a = 0; a < 2; ++a) {
    const int axis = (first_axis + a) % 2;
    const double extent = axis == 0 ? gt.width() : gt.height();
    const double shift = extent * (1.0 - target_iou) / (1.0 + target_iou);
    for (int s = 0; s < 2; ++s) {
      const int sign = s == 0 ? first_sign : -first_sign;
      Box b = gt;
      if (axis == 0) {
        b.x1 += sign * shift;
        b.x2 += sign * shift;
      } else {
        b.y1 += sign * shift;
        b.y2 += sign * shift;
      }
      if (b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0) return b;
    }
  }
  // No in-image placement at this IoU: clip and let the caller measure the result.
  Box b = gt;
  const double shift = gt.width() * (1.0 - target_iou) / (1.0 + target_iou);
  b.x1 = std::clamp(b.x1 + shift, 0.0, 1.0);
  b.x2 = std::clamp(b.x2 + shift, 0.0, 1.0);
  if (!b.valid()) b = gt;
  return b;
}

inline void match(Proposal& p, const Scene& scene, double fg_threshold) {
  p.iou = 0.0;
  p.matched_gt_index.reset();
  for (std::size_t g = 0; g < scene.gt_boxes.size(); ++g) {
    const double v = iou(p.box, scene.gt_boxes[g]);
    if (v > p.iou) {
      p.iou = v;
      p.matched_gt_index = g;
    }
  }
  p.foreground = p.matched_gt_index.has_value() && p.iou >= fg_threshold;
}

}  // namespace detail

/// One scene with jittered foreground proposals and background proposals.
/// `allowed` lists the classes that may appear as ground truth and as distractor context.
inline SceneRecord generate_scene_with_proposals(const std::vector<ClassSpec>& prototypes,
                                                 const DatasetConfig& config, std::span<const ClassId> allowed,
                                                 Rng& rng) {
  if (allowed.empty()) throw PreconditionError("generate_scene_with_proposals: no allowed classes");
  const ClassId bg = config.background_id();
  std::uniform_int_distribution<int> count_dist(config.min_gt_per_scene, config.max_gt_per_scene);
  std::uniform_int_distribution<std::size_t> class_dist(0, allowed.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> size_dist(0.15, 0.4);

  SceneRecord rec;
  const int want = count_dist(rng);
  for (int g = 0; g < want; ++g) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const double w = size_dist(rng);
      const double h = size_dist(rng);
      const double x = unit(rng) * (1.0 - w);
      const double y = unit(rng) * (1.0 - h);
      const Box b{x, y, x + w, y + h};
      // Keep ground truths apart so every jittered proposal matches its source.
      const Box padded{b.x1 - 0.5 * w, b.y1 - 0.5 * h, b.x2 + 0.5 * w, b.y2 + 0.5 * h};
      bool clear = true;
      for (const auto& o : rec.scene.gt_boxes) {
        if (iou(padded, o) > 0.0) clear = false;
      }
      if (!clear) continue;
      rec.scene.gt_boxes.push_back(b);
      rec.scene.gt_labels.push_back(allowed[class_dist(rng)]);
      break;
    }
  }

  for (std::size_t g = 0; g < rec.scene.gt_boxes.size(); ++g) {
    for (int k = 0; k < config.proposals_per_gt; ++k) {
      const double t = unit(rng) < 0.5 ? 0.5 + 0.5 * unit(rng) : 0.1 + 0.9 * unit(rng);
      Proposal p;
      p.box = detail::shift_box(rec.scene.gt_boxes[g], std::min(t, 0.999), rng);
      detail::match(p, rec.scene, config.fg_iou_threshold);
      if (!p.matched_gt_index) {
        p.box = rec.scene.gt_boxes[g];
        detail::match(p, rec.scene, config.fg_iou_threshold);
      }
      p.gt_class = rec.scene.gt_labels[*p.matched_gt_index];
      ClassId other = p.gt_class;
      if (allowed.size() > 1) {
        while (other == p.gt_class) other = allowed[class_dist(rng)];
      }
      p.feature = make_proposal_feature(prototypes[p.gt_class].prototype, prototypes[other].prototype, p.iou,
                                        config.context_mix, config.noise_sigma, rng);
      rec.proposals.push_back(std::move(p));
    }
  }

  std::normal_distribution<double> bg_noise(0.0, config.background_sigma);
  for (int k = 0; k < config.background_per_scene; ++k) {
    Proposal p;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double w = 0.1 + 0.3 * unit(rng);
      const double h = 0.1 + 0.3 * unit(rng);
      const double x = unit(rng) * (1.0 - w);
      const double y = unit(rng) * (1.0 - h);
      p.box = Box{x, y, x + w, y + h};
      detail::match(p, rec.scene, config.fg_iou_threshold);
      if (p.iou < config.fg_iou_threshold) break;
    }
    if (p.iou >= config.fg_iou_threshold) continue;
    p.foreground = false;
    p.gt_class = p.matched_gt_index ? rec.scene.gt_labels[*p.matched_gt_index] : bg;
    p.feature.resize(config.embed_dim);
    for (double& v : p.feature) v = bg_noise(rng);
    rec.proposals.push_back(std::move(p));
  }
  return rec;
}

namespace detail {

inline Rng derived_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

}  // namespace detail

/// Full synthetic world; a pure function of the config (including its seed).
inline Dataset generate_dataset(const DatasetConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  Rng proto_rng = detail::derived_rng(config.seed, 0, 0);
  ds.classes = generate_prototypes(config, proto_rng);

  const auto cat = config.catalog();
  const std::vector<ClassId> base(cat.base_classes.begin(), cat.base_classes.end());
  const std::vector<ClassId> all = cat.all_classes();
  auto fill = [&](std::vector<SceneRecord>& out, int count, std::uint64_t stream, const std::vector<ClassId>& allowed) {
    out.reserve(count);
    for (int i = 0; i < count; ++i) {
      Rng rng = detail::derived_rng(config.seed, stream, static_cast<std::uint64_t>(i));
      out.push_back(generate_scene_with_proposals(ds.classes, config, allowed, rng));
    }
  };
  fill(ds.base_train, config.base_train_scenes, 1, base);
  fill(ds.base_val, config.base_val_scenes, 2, base);
  fill(ds.finetune_pool, config.finetune_pool_scenes, 3, all);
  fill(ds.test, config.test_scenes, 4, all);
  return ds;
}

/// Keeps the flagged ground truths; proposals matched to a dropped instance go with it.
inline SceneRecord keep_instances(const SceneRecord& rec, const std::vector<bool>& keep) {
  SceneRecord out;
  std::vector<std::optional<std::size_t>> remap(rec.scene.gt_boxes.size());
  for (std::size_t g = 0; g < rec.scene.gt_boxes.size(); ++g) {
    if (!keep[g]) continue;
    remap[g] = out.scene.gt_boxes.size();
    out.scene.gt_boxes.push_back(rec.scene.gt_boxes[g]);
    out.scene.gt_labels.push_back(rec.scene.gt_labels[g]);
  }
  for (const auto& p : rec.proposals) {
    Proposal q = p;
    if (q.matched_gt_index) {
      if (!remap[*q.matched_gt_index]) continue;
      q.matched_gt_index = remap[*q.matched_gt_index];
    }
    out.proposals.push_back(std::move(q));
  }
  return out;
}

/// Balanced fine-tuning subset with exactly K annotated instances per class.
/// Surplus instances in a chosen scene are dropped together with their proposals.
inline std::vector<SceneRecord> sample_kshot(const std::vector<SceneRecord>& pool, int k, const ClassCatalog& catalog,
                                             Rng& rng) {
  if (k < 1) throw PreconditionError("sample_kshot: K must be >= 1");
  const auto classes = catalog.all_classes();
  std::map<ClassId, int> have;
  for (ClassId c : classes) have[c] = 0;
  for (const auto& rec : pool) {
    for (ClassId c : rec.scene.gt_labels) {
      if (have.count(c)) ++have[c];
    }
  }
  for (ClassId c : classes) {
    if (have[c] < k) {
      throw PreconditionError("sample_kshot: class " + std::to_string(c) + " has only " + std::to_string(have[c]) +
                              " instances, need " + std::to_string(k));
    }
  }

  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);

  std::map<ClassId, int> taken;
  for (ClassId c : classes) taken[c] = 0;
  std::size_t satisfied = 0;
  std::vector<SceneRecord> out;
  for (std::size_t idx : order) {
    if (satisfied == classes.size()) break;
    const auto& rec = pool[idx];
    std::vector<bool> keep(rec.scene.gt_labels.size(), false);
    bool any = false;
    for (std::size_t g = 0; g < keep.size(); ++g) {
      const ClassId c = rec.scene.gt_labels[g];
      if (!taken.count(c) || taken[c] >= k) continue;
      keep[g] = true;
      any = true;
      if (++taken[c] == k) ++satisfied;
    }
    if (any) out.push_back(keep_instances(rec, keep));
  }
  return out;
}

}  // namespace fsrc
