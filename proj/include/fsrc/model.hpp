#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsrc/numeric.hpp"

namespace fsrc {

/// y = x W + b, W is (in x out), b is (1 x out).
struct Affine {
  Param weight;
  Param bias;

  Affine() = default;
  Affine(std::size_t in, std::size_t out) : weight(Tensor2(in, out)), bias(Tensor2(1, out)) {}

  std::size_t in() const { return weight.value.rows(); }
  std::size_t out() const { return weight.value.cols(); }

  Tensor2 forward(const Tensor2& x) const {
    Tensor2 y = matmul(x, weight.value);
    const auto b = bias.value.row(0);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      auto yr = y.row(r);
      for (std::size_t c = 0; c < yr.size(); ++c) yr[c] += b[c];
    }
    return y;
  }

  /// Accumulates parameter grads and returns d loss / d x.
  Tensor2 backward(const Tensor2& x, const Tensor2& dy, bool need_input_grad = true) {
    add_matmul_at_b(x, dy, weight.grad);
    auto db = bias.grad.row(0);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
      const auto d = dy.row(r);
      for (std::size_t c = 0; c < d.size(); ++c) db[c] += d[c];
    }
    if (!need_input_grad) return {};
    return matmul_a_bt(dy, weight.value);
  }

  void init_uniform(std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : weight.value.data()) v = u(rng);
    for (double& v : bias.value.data()) v = u(rng);
  }
};

struct ModelDims {
  std::size_t input = 32;
  std::size_t hidden = 64;
  /// Foreground classes; the classifier has one extra background logit.
  std::size_t num_classes = 16;
  std::size_t contrastive = 16;

  bool operator==(const ModelDims&) const = default;
};

struct ForwardOutput {
  std::vector<double> cls_logits;
  std::vector<double> box_deltas;
  double objectness_logit = 0.0;
  std::vector<double> contrastive_feature;
};

/// Activations of a batched forward pass, kept for backward.
struct ForwardCache {
  Tensor2 input;
  Tensor2 encoder_pre, encoder_act;
  Tensor2 roi_pre, roi_act;
  Tensor2 cls_logits;
  Tensor2 box_deltas;
  Tensor2 objectness;
  Tensor2 contrastive;

  ForwardOutput row(std::size_t r) const {
    ForwardOutput o;
    o.cls_logits.assign(cls_logits.row(r).begin(), cls_logits.row(r).end());
    o.box_deltas.assign(box_deltas.row(r).begin(), box_deltas.row(r).end());
    o.objectness_logit = objectness(r, 0);
    o.contrastive_feature.assign(contrastive.row(r).begin(), contrastive.row(r).end());
    return o;
  }
};

/// d loss / d head output. An empty tensor means the head receives no gradient.
struct HeadGradients {
  Tensor2 cls;
  Tensor2 box;
  Tensor2 obj;
  Tensor2 con;
};

enum class Stage { BasePretrain, Finetune };

/// Frozen-able encoder, a shared trainable RoI layer, and four heads.
class DetectionModel {
 public:
  DetectionModel() = default;

  explicit DetectionModel(const ModelDims& dims)
      : dims_(dims),
        encoder_(dims.input, dims.hidden),
        roi_(dims.hidden, dims.hidden),
        cls_(dims.hidden, dims.num_classes + 1),
        box_(dims.hidden, 4),
        obj_(dims.hidden, 1),
        con_(dims.hidden, dims.contrastive) {}

  static DetectionModel initialized(const ModelDims& dims, std::uint64_t seed) {
    DetectionModel m(dims);
    std::mt19937_64 rng(seed);
    for (Affine* a : m.layers()) a->init_uniform(rng);
    return m;
  }

  const ModelDims& dims() const { return dims_; }

  Affine& encoder() { return encoder_; }
  Affine& roi() { return roi_; }
  Affine& cls_head() { return cls_; }
  Affine& box_head() { return box_; }
  Affine& obj_head() { return obj_; }
  Affine& con_head() { return con_; }
  const Affine& encoder() const { return encoder_; }
  const Affine& roi() const { return roi_; }
  const Affine& cls_head() const { return cls_; }
  const Affine& box_head() const { return box_; }
  const Affine& obj_head() const { return obj_; }
  const Affine& con_head() const { return con_; }

  std::vector<Affine*> layers() { return {&encoder_, &roi_, &cls_, &box_, &obj_, &con_}; }
  std::vector<const Affine*> layers() const { return {&encoder_, &roi_, &cls_, &box_, &obj_, &con_}; }

  static const std::vector<std::string>& layer_names() {
    static const std::vector<std::string> names{"encoder", "roi", "cls_head", "box_head", "obj_head", "con_head"};
    return names;
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (Affine* a : layers()) {
      out.push_back(&a->weight);
      out.push_back(&a->bias);
    }
    return out;
  }

  ForwardCache forward_batch(const Tensor2& x) const {
    if (x.cols() != dims_.input) {
      throw PreconditionError("DetectionModel::forward: feature dimension " + std::to_string(x.cols()) +
                              " != encoder input " + std::to_string(dims_.input));
    }
    ForwardCache c;
    c.input = x;
    c.encoder_pre = encoder_.forward(x);
    c.encoder_act = relu(c.encoder_pre);
    c.roi_pre = roi_.forward(c.encoder_act);
    c.roi_act = relu(c.roi_pre);
    c.cls_logits = cls_.forward(c.roi_act);
    c.box_deltas = box_.forward(c.roi_act);
    c.objectness = obj_.forward(c.roi_act);
    c.contrastive = con_.forward(c.roi_act);
    return c;
  }

  ForwardOutput forward(std::span<const double> feature) const {
    Tensor2 x(1, feature.size(), std::vector<double>(feature.begin(), feature.end()));
    return forward_batch(x).row(0);
  }

  /// Accumulates gradients into every block; the shared layers receive the sum over heads.
  /// With through_encoder unset the encoder block is skipped (it is frozen).
  void backward(const ForwardCache& c, const HeadGradients& g, bool through_encoder = true) {
    Tensor2 d_roi(c.roi_act.rows(), c.roi_act.cols());
    auto add_head = [&](Affine& head, const Tensor2& dy) {
      if (dy.empty()) return;
      const Tensor2 dx = head.backward(c.roi_act, dy);
      auto dst = d_roi.data();
      auto src = dx.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };
    add_head(cls_, g.cls);
    add_head(box_, g.box);
    add_head(obj_, g.obj);
    add_head(con_, g.con);
    relu_backward_inplace(c.roi_pre, d_roi);
    Tensor2 d_enc = roi_.backward(c.encoder_act, d_roi, through_encoder);
    if (!through_encoder) return;
    relu_backward_inplace(c.encoder_pre, d_enc);
    encoder_.backward(c.input, d_enc, false);
  }

  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }

  /// Clears gradients and momentum so a new training stage starts from the weights alone.
  void reset_optimizer_state() {
    for (Param* p : params()) {
      p->zero_grad();
      p->momentum_buf.fill(0.0);
    }
  }

  bool operator==(const DetectionModel& o) const {
    if (!(dims_ == o.dims_)) return false;
    const auto a = layers();
    const auto b = o.layers();
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (!(a[i]->weight.value == b[i]->weight.value) || !(a[i]->bias.value == b[i]->bias.value)) return false;
    }
    return true;
  }

 private:
  static Tensor2 relu(const Tensor2& x) {
    Tensor2 y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
  }

  static void relu_backward_inplace(const Tensor2& pre, Tensor2& d) {
    auto p = pre.data();
    auto g = d.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!(p[i] > 0.0)) g[i] = 0.0;
    }
  }

  ModelDims dims_;
  Affine encoder_, roi_, cls_, box_, obj_, con_;
};

/// Base pre-training trains everything; fine-tuning freezes the encoder.
inline std::vector<Param*> freeze_policy(DetectionModel& model, Stage stage) {
  std::vector<Param*> out;
  for (Affine* a : model.layers()) {
    if (stage == Stage::Finetune && a == &model.encoder()) continue;
    out.push_back(&a->weight);
    out.push_back(&a->bias);
  }
  return out;
}

}  // namespace fsrc
