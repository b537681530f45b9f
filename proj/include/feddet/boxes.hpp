#pragma once

#include <vector>

namespace feddet {

// Axis-aligned box with normalized [0,1] coordinates. model_id identifies
// which model produced the box; fusion uses it only for bookkeeping.
struct BBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_id = 0;
  double confidence = 1.0;
  int model_id = 0;

  double area() const { return (x2 - x1) * (y2 - y1); }
};

using DetectionSet = std::vector<BBox>;

double iou(const BBox& a, const BBox& b);

// Canonical ordering: confidence descending, ties broken by
// (class_id, x1, y1, x2, y2) ascending so every algorithm is deterministic.
bool det_before(const BBox& a, const BBox& b);
void sort_detections(DetectionSet& boxes);

// Greedy per-class suppression. Boxes with IoU strictly above the threshold
// against an already-kept box of the same class are dropped.
DetectionSet nms(const DetectionSet& boxes, double iou_threshold);

// Gaussian score decay instead of removal: overlapping same-class boxes get
// confidence *= exp(-iou^2 / sigma); results under score_floor are dropped.
// Coordinates are never modified.
DetectionSet soft_nms(const DetectionSet& boxes, double sigma, double score_floor);

// NMS clusters, but the kept box's coordinates become the
// confidence*IoU-weighted mean over the cluster; confidence stays the max.
DetectionSet nwm(const DetectionSet& boxes, double iou_threshold);

// Cluster of same-class boxes plus the running fused representative.
struct BoxCluster {
  std::vector<BBox> members;
  BBox fused;
};

// Applies the fusion rule to a member list:
//   coords     = sum(C_i * b_i) / sum(C_i)
//   confidence = min(T, M) / (M * T) * sum(C_i)
BBox fuse_cluster(const std::vector<BBox>& members, int num_models);

// Weighted boxes fusion. Boxes are processed per class in descending
// confidence; each joins the first cluster whose fused box overlaps it with
// IoU strictly above the threshold, else starts a new cluster.
DetectionSet wbf(const DetectionSet& boxes, double iou_threshold, int num_models);

// Cluster assignment used by wbf(), exposed for inspection.
std::vector<BoxCluster> wbf_clusters(const DetectionSet& boxes, double iou_threshold,
                                     int num_models);

}  // namespace feddet
