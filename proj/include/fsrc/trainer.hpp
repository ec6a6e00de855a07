#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsrc/contrastive.hpp"
#include "fsrc/detsim.hpp"
#include "fsrc/model.hpp"
#include "fsrc/numeric.hpp"
#include "fsrc/resemblance.hpp"

namespace fsrc {

enum class ContrastiveMode { None, GclOnly, Fsrc };

inline const char* to_string(ContrastiveMode m) {
  switch (m) {
    case ContrastiveMode::None:
      return "none";
    case ContrastiveMode::GclOnly:
      return "gcl";
    case ContrastiveMode::Fsrc:
      return "fsrc";
  }
  return "?";
}

inline ContrastiveMode parse_contrastive_mode(const std::string& s) {
  if (s == "none") return ContrastiveMode::None;
  if (s == "gcl") return ContrastiveMode::GclOnly;
  if (s == "fsrc") return ContrastiveMode::Fsrc;
  throw PreconditionError("unknown contrastive mode '" + s + "' (expected none|gcl|fsrc)");
}

enum class GroupUpdate { Freeze, Continuous };

struct TrainConfig {
  double lr = 0.02;
  double pretrain_lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_scenes = 16;
  int pretrain_iterations = 800;
  int total_iterations = 800;
  double lambda = 0.5;
  double temperature = 0.2;
  double iou_floor = 0.7;
  double group_iou_threshold = 0.5;
  long rep_threshold = 0;
  double milestone = 0.75;
  /// Fraction of total iterations, ending at the milestone, during which pairs are counted.
  double mining_window = 0.125;
  ContrastiveMode contrastive_mode = ContrastiveMode::Fsrc;
  GroupUpdate group_update = GroupUpdate::Freeze;
  bool include_background = true;
  int k_shot = 5;
  std::uint64_t seed = 1;

  RCLConfig rcl() const {
    RCLConfig c;
    c.temperature = temperature;
    c.iou_floor = iou_floor;
    c.balance = lambda;
    c.include_background = include_background;
    return c;
  }

  MilestoneSchedule schedule() const {
    return {milestone, static_cast<std::size_t>(std::max(total_iterations, 1))};
  }

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw PreconditionError("train." + field + ": " + why);
    };
    if (!(lr > 0)) fail("lr", "must be > 0");
    if (!(pretrain_lr > 0)) fail("pretrain_lr", "must be > 0");
    if (!(momentum >= 0 && momentum < 1)) fail("momentum", "must be in [0,1)");
    if (!(weight_decay >= 0)) fail("weight_decay", "must be >= 0");
    if (batch_scenes < 1) fail("batch_scenes", "must be >= 1");
    if (pretrain_iterations < 0) fail("pretrain_iterations", "must be >= 0");
    if (total_iterations < 1) fail("total_iterations", "must be >= 1");
    if (!(lambda >= 0)) fail("lambda", "must be >= 0");
    if (!(temperature > 0)) fail("temperature", "must be > 0");
    if (!(iou_floor >= 0 && iou_floor <= 1)) fail("iou_floor", "must be in [0,1]");
    if (!(group_iou_threshold >= 0 && group_iou_threshold <= 1)) fail("group_iou_threshold", "must be in [0,1]");
    if (rep_threshold < 0) fail("rep_threshold", "must be >= 0");
    if (!(milestone >= 0 && milestone <= 1)) fail("milestone", "must be in [0,1]");
    if (!(mining_window > 0 && mining_window <= 1)) fail("mining_window", "must be in (0,1]");
    if (k_shot < 1) fail("k_shot", "must be >= 1");
  }
};

struct StepRecord {
  std::size_t iteration = 0;
  double cls = 0, box = 0, obj = 0, rcl = 0, total = 0;
  /// "none", "GCL" or "RCL".
  std::string mode;
  std::size_t contrastive_batch = 0;
};

struct TrainState {
  std::size_t current_iteration = 0;
  PairCounter pair_counter;
  std::optional<ResemblanceGroup> group;
  std::vector<StepRecord> loss_history;
  std::vector<std::string> warnings;
};

/// Flattened proposals of a set of scenes with every per-row loss input.
struct ProposalBatch {
  Tensor2 features;
  std::vector<ClassId> labels;
  std::vector<ClassId> gt_class;
  std::vector<double> ious;
  std::vector<bool> foreground;
  std::vector<Box> boxes;
  std::vector<std::array<double, 4>> box_targets;

  std::size_t size() const { return labels.size(); }

  static ProposalBatch gather(std::span<const SceneRecord* const> scenes, ClassId background_id) {
    ProposalBatch b;
    std::size_t n = 0;
    std::size_t d = 0;
    for (const SceneRecord* s : scenes) {
      n += s->proposals.size();
      if (!s->proposals.empty()) d = s->proposals.front().feature.size();
    }
    b.features = Tensor2(n, d);
    std::size_t r = 0;
    for (const SceneRecord* s : scenes) {
      for (const Proposal& p : s->proposals) {
        if (p.feature.size() != d) throw PreconditionError("ProposalBatch: inconsistent feature width");
        std::copy(p.feature.begin(), p.feature.end(), b.features.row(r).begin());
        b.labels.push_back(p.training_label(background_id));
        b.gt_class.push_back(p.matched_gt_index ? p.gt_class : background_id);
        b.ious.push_back(p.iou);
        b.foreground.push_back(p.foreground);
        b.boxes.push_back(p.box);
        if (p.foreground) {
          b.box_targets.push_back(encode_box_deltas(p.box, s->scene.gt_boxes[*p.matched_gt_index]));
        } else {
          b.box_targets.push_back({0, 0, 0, 0});
        }
        ++r;
      }
    }
    return b;
  }
};

struct CompositeOptions {
  ClassId background_id = 16;
  bool contrastive = false;
  ContrastPhase phase = ContrastPhase::GCL;
  const ResemblanceGroup* group = nullptr;
  RCLConfig rcl;
};

struct CompositeResult {
  double cls = 0, box = 0, obj = 0, rcl = 0;
  double total = 0;
  HeadGradients grads;
  std::vector<ClassId> predicted;
  std::size_t contrastive_batch = 0;
};

inline std::vector<ClassId> argmax_classes(const Tensor2& logits) {
  std::vector<ClassId> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const auto row = logits.row(r);
    out[r] = static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Cls + box + objectness + lambda * contrastive over one batch, with head gradients.
/// Classification and objectness average over all proposals, box regression over foreground ones.
inline CompositeResult composite_loss(const ForwardCache& fw, const ProposalBatch& batch, const CompositeOptions& opt) {
  const std::size_t n = batch.size();
  CompositeResult out;
  out.predicted = argmax_classes(fw.cls_logits);
  if (n == 0) return out;

  out.grads.cls = Tensor2(n, fw.cls_logits.cols());
  out.grads.box = Tensor2(n, 4);
  out.grads.obj = Tensor2(n, 1);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::size_t num_fg = 0;
  for (bool f : batch.foreground) num_fg += f ? 1 : 0;
  const double inv_fg = num_fg ? 1.0 / static_cast<double>(num_fg) : 0.0;

  for (std::size_t r = 0; r < n; ++r) {
    const auto ce = softmax_cross_entropy(fw.cls_logits.row(r), static_cast<std::size_t>(batch.labels[r]));
    out.cls += ce.loss * inv_n;
    auto gc = out.grads.cls.row(r);
    for (std::size_t c = 0; c < gc.size(); ++c) gc[c] = ce.grad[c] * inv_n;

    const auto bce = binary_cross_entropy(fw.objectness(r, 0), batch.foreground[r] ? 1 : 0);
    out.obj += bce.loss * inv_n;
    out.grads.obj(r, 0) = bce.grad * inv_n;

    if (batch.foreground[r]) {
      const auto sl = smooth_l1(fw.box_deltas.row(r), batch.box_targets[r]);
      out.box += sl.loss * inv_fg;
      for (std::size_t c = 0; c < 4; ++c) out.grads.box(r, c) = sl.grad[c] * inv_fg;
    }
  }

  if (opt.contrastive) {
    static const ResemblanceGroup kEmpty;
    const ResemblanceGroup& group = opt.group ? *opt.group : kEmpty;
    const ContrastiveBatch cb = select_contrastive_batch(fw.contrastive, out.predicted, batch.labels, batch.ious, group,
                                                         opt.phase, opt.background_id, opt.rcl.include_background);
    out.contrastive_batch = cb.size();
    const RCLResult res = rcl_loss(cb, opt.rcl);
    out.rcl = res.loss;
    if (opt.rcl.balance != 0.0) {
      out.grads.con = Tensor2(n, fw.contrastive.cols());
      for (std::size_t r = 0; r < cb.size(); ++r) {
        auto dst = out.grads.con.row(cb.source_index[r]);
        const auto src = res.grad.row(r);
        for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = opt.rcl.balance * src[c];
      }
    }
  }
  out.total = out.cls + out.box + out.obj + opt.rcl.balance * out.rcl;
  return out;
}

/// Epoch-wise shuffled cycling over scenes.
class SceneSampler {
 public:
  SceneSampler(std::span<const SceneRecord> scenes, std::uint64_t seed) : scenes_(scenes), rng_(seed) {
    order_.resize(scenes_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    reshuffle();
  }

  std::vector<const SceneRecord*> next(std::size_t count) {
    std::vector<const SceneRecord*> out;
    count = std::min(count, scenes_.size());
    while (out.size() < count) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(&scenes_[order_[pos_++]]);
    }
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::span<const SceneRecord> scenes_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

struct TrainContext {
  ClassCatalog catalog;
  Stage stage = Stage::Finetune;
  /// Mode override for base pre-training, which never uses the contrastive term.
  std::optional<ContrastiveMode> mode_override;
  double lr = 0.001;
};

/// Index of the first iteration whose predictions feed the pair counter.
inline std::size_t mining_start(const TrainConfig& config) {
  const std::size_t sw = config.schedule().switch_index();
  const auto window = static_cast<std::size_t>(
      std::floor(config.mining_window * static_cast<double>(config.total_iterations) + 1e-9));
  return sw > window ? sw - window : 0;
}

/// One optimizer step over the given scenes.
inline StepRecord train_step(TrainState& state, DetectionModel& model, std::span<const SceneRecord* const> scenes,
                             const TrainConfig& config, const TrainContext& ctx) {
  const ClassId bg = ctx.catalog.background_id;
  const ProposalBatch batch = ProposalBatch::gather(scenes, bg);
  if (batch.size() == 0) throw PreconditionError("train_step: empty batch");
  const ContrastiveMode cmode = ctx.mode_override.value_or(config.contrastive_mode);
  const std::size_t it = state.current_iteration;
  const bool finetune = ctx.stage == Stage::Finetune;
  const auto schedule = config.schedule();
  const std::size_t switch_at = schedule.switch_index();

  if (finetune && it >= switch_at && (!state.group || config.group_update == GroupUpdate::Continuous)) {
    const bool first = !state.group.has_value();
    state.group = materialize_group(state.pair_counter, config.rep_threshold, ctx.catalog);
    if (first && state.group->empty() && cmode == ContrastiveMode::Fsrc) {
      state.warnings.push_back("iteration " + std::to_string(it) +
                               ": resemblance group is empty at the milestone; continuing with GCL");
    }
  }

  ContrastPhase phase = ContrastPhase::GCL;
  if (cmode == ContrastiveMode::Fsrc && finetune && mode(schedule, it) == ContrastPhase::RCL && state.group &&
      !state.group->empty()) {
    phase = ContrastPhase::RCL;
  }

  const ForwardCache fw = model.forward_batch(batch.features);
  CompositeOptions opt;
  opt.background_id = bg;
  opt.contrastive = cmode != ContrastiveMode::None;
  opt.phase = phase;
  opt.group = state.group ? &*state.group : nullptr;
  opt.rcl = config.rcl();
  if (!opt.contrastive) opt.rcl.balance = 0.0;
  const CompositeResult res = composite_loss(fw, batch, opt);

  const std::pair<const char*, double> terms[] = {
      {"L_cls", res.cls}, {"L_Bbox", res.box}, {"L_objectness", res.obj}, {"L_RCL", res.rcl}};
  for (const auto& [name, v] : terms) {
    if (!std::isfinite(v)) {
      throw DivergenceError("non-finite loss term " + std::string(name) + " at iteration " + std::to_string(it));
    }
  }

  const bool mining = finetune && it < switch_at && it >= mining_start(config);
  const bool continuous = finetune && config.group_update == GroupUpdate::Continuous && it >= switch_at;
  if (mining || continuous) {
    for (std::size_t r = 0; r < batch.size(); ++r) {
      if (batch.gt_class[r] == bg) continue;
      observe_proposal(state.pair_counter, res.predicted[r], batch.gt_class[r], batch.ious[r], bg);
    }
  }

  model.backward(fw, res.grads, ctx.stage == Stage::BasePretrain);
  auto trainable = freeze_policy(model, ctx.stage);
  sgd_step(trainable, SgdOptions{ctx.lr, config.momentum, config.weight_decay});
  model.zero_grad();

  StepRecord rec;
  rec.iteration = it;
  rec.cls = res.cls;
  rec.box = res.box;
  rec.obj = res.obj;
  rec.rcl = res.rcl;
  rec.total = res.total;
  rec.mode = cmode == ContrastiveMode::None ? "none" : to_string(phase);
  rec.contrastive_batch = res.contrastive_batch;
  state.loss_history.push_back(rec);
  ++state.current_iteration;
  return rec;
}

/// Supervised training on base-only scenes with every block trainable.
inline TrainState run_base_pretrain(DetectionModel& model, std::span<const SceneRecord> scenes,
                                    const TrainConfig& config, const ClassCatalog& catalog) {
  config.validate();
  for (const auto& s : scenes) {
    for (ClassId c : s.scene.gt_labels) {
      if (!catalog.is_base(c)) {
        throw PreconditionError("run_base_pretrain: scene contains non-base class " + std::to_string(c));
      }
    }
  }
  TrainState state;
  if (config.pretrain_iterations == 0 || scenes.empty()) return state;
  model.reset_optimizer_state();
  TrainContext ctx{catalog, Stage::BasePretrain, ContrastiveMode::None, config.pretrain_lr};
  SceneSampler sampler(scenes, config.seed * 2654435761ULL + 17);
  for (int i = 0; i < config.pretrain_iterations; ++i) {
    const auto pick = sampler.next(static_cast<std::size_t>(config.batch_scenes));
    train_step(state, model, pick, config, ctx);
  }
  return state;
}

/// K-shot fine-tuning: GCL phase with pair mining, group materialized at the
/// milestone, RCL afterwards (for the fsrc mode). The encoder stays frozen.
/// `on_step` runs after every step; returning false ends training early.
inline TrainState run_finetune(DetectionModel& model, std::span<const SceneRecord> scenes, const TrainConfig& config,
                               const ClassCatalog& catalog,
                               const std::function<bool(const TrainState&)>& on_step = {}) {
  config.validate();
  if (scenes.empty()) throw PreconditionError("run_finetune: empty fine-tuning set");
  // A loaded checkpoint carries no momentum, so neither does a model handed over in memory.
  model.reset_optimizer_state();
  TrainState state;
  state.pair_counter.iou_threshold = config.group_iou_threshold;
  TrainContext ctx{catalog, Stage::Finetune, std::nullopt, config.lr};
  SceneSampler sampler(scenes, config.seed * 0x9E3779B97F4A7C15ULL + 3);
  for (int i = 0; i < config.total_iterations; ++i) {
    const auto pick = sampler.next(static_cast<std::size_t>(config.batch_scenes));
    train_step(state, model, pick, config, ctx);
    if (on_step && !on_step(state)) break;
  }
  return state;
}

}  // namespace fsrc
