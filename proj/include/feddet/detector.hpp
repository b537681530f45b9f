#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "feddet/boxes.hpp"
#include "feddet/datagen.hpp"
#include "feddet/tensor.hpp"

namespace feddet {

// Tiny anchor-based single-stage detector. Two backbone stages produce
// feature maps at strides 4 and 8; each scale has a 1x1 classification head
// (anchors_per_cell * num_classes channels) and a 1x1 regression head
// (anchors_per_cell * 4 channels).
inline constexpr int kNumScales = 2;

struct DetectorConfig {
  int num_classes = 5;
  int anchors_per_cell = 3;
  int backbone_channels = 16;
  int input_channels = 3;
  // Square anchor side lengths (fractions of the image), one list per scale.
  std::vector<std::vector<double>> anchor_sizes{{0.10, 0.16, 0.24}, {0.32, 0.42, 0.55}};
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  // Anchors below pos_iou can still be matched when they are a ground-truth
  // box's best anchor, so every object has a training signal.
  bool force_match_best_anchor = true;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double smooth_l1_beta = 1.0;
  double cls_prior = 0.01;  // initial bias of the classification head

  bool operator==(const DetectorConfig&) const = default;
};

struct DetectorModel {
  DetectorConfig config;
  Parameter conv1_w, conv1_b, conv2_w, conv2_b;
  std::vector<Parameter> cls_w, cls_b, reg_w, reg_b;  // one per scale

  static DetectorModel random_init(const DetectorConfig& cfg, std::uint64_t seed);

  // Fixed traversal order; parameter averaging, SGD, serialization and
  // gradient buffers all rely on it.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t num_scalars() const;
  std::uint64_t checksum() const;
  bool same_architecture(const DetectorModel& o) const { return config == o.config; }
};

struct ModelOutput {
  std::vector<Tensor> features;  // post-relu backbone maps, one per scale
  std::vector<Tensor> cls_maps;
  std::vector<Tensor> reg_maps;
};

// Intermediates needed to backpropagate through a forward pass.
struct ForwardContext {
  Tensor input, pre1, f1, pre2, f2;
};

ModelOutput forward(const DetectorModel& model, const Tensor& image,
                    ForwardContext* ctx = nullptr);

// Gradients of some loss w.r.t. every output map; missing tensors mean zero.
struct MapGrads {
  std::vector<Tensor> d_features, d_cls, d_reg;
  static MapGrads zeros_like(const ModelOutput& out);
};

// One tensor per parameter, aligned with DetectorModel::parameters().
using Gradients = std::vector<Tensor>;
Gradients zero_gradients(const DetectorModel& model);

// Accumulates parameter gradients for the given map-level gradients.
void backward(const DetectorModel& model, const ForwardContext& ctx, const MapGrads& grads,
              Gradients& out);

struct Anchor {
  double cx, cy, w, h;
};

// Anchors for one scale's map extents; layout (y, x, a) row-major.
std::vector<Anchor> anchors_for(const DetectorConfig& cfg, int scale, int map_h, int map_w);

DetectionSet decode(const ModelOutput& out, const DetectorConfig& cfg, double score_threshold,
                    int max_boxes = 300);

struct DetLoss {
  double cls = 0, reg = 0;
  int num_pos = 0;
  double total() const { return cls + reg; }
};

// Focal classification loss plus smooth-L1 regression on matched anchors,
// both normalized by max(1, num positive anchors). When `grads` is non-null
// the map-level gradients are accumulated into it.
DetLoss detection_loss(const ModelOutput& out, const DetectionSet& ground_truth,
                       const DetectorConfig& cfg, MapGrads* grads = nullptr);

struct TrainConfig {
  int epochs = 12;
  double lr = 0.01;
  int batch_size = 8;
  int threads = 1;
};

// Loss components per image; distillation adds the three teacher terms.
struct StepStats {
  double l_det = 0, l_fea = 0, l_cls = 0, l_reg = 0;
  double total = 0;
  StepStats& operator+=(const StepStats& o);
  StepStats& operator/=(double d);
};

using ImageGradFn =
    std::function<StepStats(const DetectorModel& model, const Scene& scene, Gradients& grads)>;

// Minibatch SGD driver shared by local training and server distillation:
// per-epoch shuffle from `seed`, per-image gradients averaged over the batch
// in index order (bit-reproducible for any thread count).
void sgd_epochs(DetectorModel& model, const std::vector<Scene>& data, int epochs, int batch_size,
                double lr, int threads, std::uint64_t seed, const ImageGradFn& per_image,
                std::vector<StepStats>* epoch_log = nullptr);

// Returns a newly trained copy; the input model is not mutated.
DetectorModel train_local(const DetectorModel& model, const std::vector<Scene>& dataset,
                          const TrainConfig& cfg, std::uint64_t seed,
                          std::vector<double>* epoch_losses = nullptr);

DetectionSet predict(const DetectorModel& model, const Tensor& image, double score_threshold,
                     double nms_threshold);

}  // namespace feddet
