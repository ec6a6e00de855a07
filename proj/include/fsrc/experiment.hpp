#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fsrc/detsim.hpp"
#include "fsrc/eval.hpp"
#include "fsrc/model.hpp"
#include "fsrc/trainer.hpp"

namespace fsrc {

struct ModelConfig {
  int hidden = 64;
  int contrastive_dim = 16;
};

struct AblationConfig {
  std::vector<double> milestones{0.05, 0.25, 0.5, 0.75, 1.0};
  std::vector<double> iou_thresholds{0.0, 0.25, 0.5, 0.75, 0.9};
  std::vector<long> rep_thresholds{0, 5, 10, 20};
  /// Values held fixed while the other axes sweep.
  double fixed_milestone = 0.75;
  double fixed_iou_threshold = 0.5;
  long fixed_rep_threshold = 0;
};

struct CompareConfig {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  AblationConfig ablation;
  CompareConfig compare;

  ModelDims dims() const {
    return {static_cast<std::size_t>(dataset.embed_dim), static_cast<std::size_t>(model.hidden),
            static_cast<std::size_t>(dataset.num_classes()), static_cast<std::size_t>(model.contrastive_dim)};
  }

  void validate() const {
    dataset.validate();
    train.validate();
    if (model.hidden < 1) throw PreconditionError("model.hidden: must be >= 1");
    if (model.contrastive_dim < 1) throw PreconditionError("model.contrastive_dim: must be >= 1");
    if (!(eval.score_threshold >= 0 && eval.score_threshold < 1)) {
      throw PreconditionError("eval.score_threshold: must be in [0,1)");
    }
    if (!(eval.nms_iou > 0 && eval.nms_iou < 1)) throw PreconditionError("eval.nms_iou: must be in (0,1)");
    if (!(eval.match_iou > 0 && eval.match_iou <= 1)) throw PreconditionError("eval.match_iou: must be in (0,1]");
  }

  /// Same experiment with the dataset and training seeds replaced.
  ExperimentConfig with_seed(std::uint64_t seed) const {
    ExperimentConfig c = *this;
    c.dataset.seed = seed;
    c.train.seed = seed;
    return c;
  }
};

/// Fresh small-uniform classifier columns for the novel classes, which base
/// pre-training only ever pushed down.
inline void reset_novel_logits(DetectionModel& model, const ClassCatalog& catalog, std::uint64_t seed) {
  Rng rng(seed * 31 + 5);
  Affine& cls = model.cls_head();
  const double bound = 1.0 / std::sqrt(static_cast<double>(cls.in()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (ClassId c : catalog.novel_classes) {
    const auto col = static_cast<std::size_t>(c);
    for (std::size_t r = 0; r < cls.in(); ++r) cls.weight.value(r, col) = u(rng);
    cls.bias.value(0, col) = 0.0;
  }
}

inline DetectionModel pretrain_model(const Dataset& ds, const ExperimentConfig& cfg, TrainState* state_out = nullptr) {
  DetectionModel model = DetectionModel::initialized(cfg.dims(), cfg.train.seed * 7919 + 11);
  TrainState st = run_base_pretrain(model, ds.base_train, cfg.train, ds.config.catalog());
  reset_novel_logits(model, ds.config.catalog(), cfg.train.seed);
  if (state_out) *state_out = std::move(st);
  return model;
}

inline std::vector<SceneRecord> kshot_split(const Dataset& ds, const ExperimentConfig& cfg) {
  Rng rng(cfg.train.seed * 1000003ULL + static_cast<std::uint64_t>(cfg.train.k_shot));
  return sample_kshot(ds.finetune_pool, cfg.train.k_shot, ds.config.catalog(), rng);
}

struct RunResult {
  DetectionModel model;
  TrainState state;
  APReport ap;
  DistanceReport distance;
};

/// Fine-tunes a copy of the pretrained model in the given mode and evaluates it on the test split.
inline RunResult finetune_and_evaluate(const DetectionModel& pretrained, const Dataset& ds,
                                       const std::vector<SceneRecord>& kshot, const ExperimentConfig& cfg,
                                       ContrastiveMode mode) {
  ExperimentConfig c = cfg;
  c.train.contrastive_mode = mode;
  RunResult r;
  r.model = pretrained;
  const auto catalog = ds.config.catalog();
  r.state = run_finetune(r.model, kshot, c.train, catalog);
  r.ap = evaluate_ap(r.model, ds.test, catalog, c.eval);
  const ResemblanceGroup group = r.state.group.value_or(ResemblanceGroup{});
  r.distance = distance_report(r.model, ds.test, group, catalog);
  return r;
}

}  // namespace fsrc
