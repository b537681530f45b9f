#include "feddet/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace feddet {

namespace {

void check_threshold(double t) {
  if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("iou_threshold must be in (0,1)");
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

bool det_before(const BBox& a, const BBox& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.class_id != b.class_id) return a.class_id < b.class_id;
  if (a.x1 != b.x1) return a.x1 < b.x1;
  if (a.y1 != b.y1) return a.y1 < b.y1;
  if (a.x2 != b.x2) return a.x2 < b.x2;
  return a.y2 < b.y2;
}

void sort_detections(DetectionSet& boxes) {
  std::sort(boxes.begin(), boxes.end(), det_before);
}

DetectionSet nms(const DetectionSet& boxes, double iou_threshold) {
  check_threshold(iou_threshold);
  DetectionSet sorted = boxes;
  sort_detections(sorted);
  std::vector<bool> suppressed(sorted.size(), false);
  DetectionSet out;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (suppressed[i]) continue;
    out.push_back(sorted[i]);
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      if (suppressed[j] || sorted[j].class_id != sorted[i].class_id) continue;
      if (iou(sorted[i], sorted[j]) > iou_threshold) suppressed[j] = true;
    }
  }
  return out;
}

DetectionSet soft_nms(const DetectionSet& boxes, double sigma, double score_floor) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (!(score_floor >= 0.0 && score_floor < 1.0))
    throw std::invalid_argument("score_floor must be in [0,1)");
  DetectionSet remaining = boxes;
  DetectionSet out;
  while (!remaining.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < remaining.size(); ++i) {
      if (det_before(remaining[i], remaining[best])) best = i;
    }
    const BBox kept = remaining[best];
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
    out.push_back(kept);
    DetectionSet next;
    next.reserve(remaining.size());
    for (BBox& r : remaining) {
      if (r.class_id == kept.class_id) {
        const double v = iou(kept, r);
        r.confidence *= std::exp(-(v * v) / sigma);
      }
      if (r.confidence >= score_floor) next.push_back(r);
    }
    remaining = std::move(next);
  }
  return out;
}

DetectionSet nwm(const DetectionSet& boxes, double iou_threshold) {
  check_threshold(iou_threshold);
  DetectionSet sorted = boxes;
  sort_detections(sorted);
  std::vector<bool> suppressed(sorted.size(), false);
  DetectionSet out;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    if (suppressed[i]) continue;
    const BBox& kept = sorted[i];
    double wsum = kept.confidence;  // iou with itself is 1
    double x1 = kept.confidence * kept.x1, y1 = kept.confidence * kept.y1;
    double x2 = kept.confidence * kept.x2, y2 = kept.confidence * kept.y2;
    for (std::size_t j = i + 1; j < sorted.size(); ++j) {
      if (suppressed[j] || sorted[j].class_id != kept.class_id) continue;
      const double v = iou(kept, sorted[j]);
      if (v > iou_threshold) {
        suppressed[j] = true;
        const double w = sorted[j].confidence * v;
        wsum += w;
        x1 += w * sorted[j].x1;
        y1 += w * sorted[j].y1;
        x2 += w * sorted[j].x2;
        y2 += w * sorted[j].y2;
      }
    }
    BBox fused = kept;
    fused.x1 = x1 / wsum;
    fused.y1 = y1 / wsum;
    fused.x2 = x2 / wsum;
    fused.y2 = y2 / wsum;
    out.push_back(fused);
  }
  return out;
}

BBox fuse_cluster(const std::vector<BBox>& members, int num_models) {
  if (num_models < 1) throw std::invalid_argument("num_models must be >= 1");
  if (members.empty()) throw std::invalid_argument("empty cluster");
  double csum = 0, x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  for (const BBox& m : members) {
    csum += m.confidence;
    x1 += m.confidence * m.x1;
    y1 += m.confidence * m.y1;
    x2 += m.confidence * m.x2;
    y2 += m.confidence * m.y2;
  }
  const double t = static_cast<double>(members.size());
  const double m = static_cast<double>(num_models);
  BBox fused;
  fused.class_id = members.front().class_id;
  fused.model_id = -1;
  fused.x1 = x1 / csum;
  fused.y1 = y1 / csum;
  fused.x2 = x2 / csum;
  fused.y2 = y2 / csum;
  fused.confidence = std::min(t, m) / (m * t) * csum;
  return fused;
}

std::vector<BoxCluster> wbf_clusters(const DetectionSet& boxes, double iou_threshold,
                                     int num_models) {
  check_threshold(iou_threshold);
  if (num_models < 1) throw std::invalid_argument("num_models must be >= 1");
  DetectionSet sorted = boxes;
  sort_detections(sorted);
  std::vector<BoxCluster> clusters;
  for (const BBox& box : sorted) {
    BoxCluster* target = nullptr;
    for (BoxCluster& c : clusters) {
      if (c.fused.class_id != box.class_id) continue;
      if (iou(c.fused, box) > iou_threshold) {
        target = &c;
        break;
      }
    }
    if (target == nullptr) {
      clusters.emplace_back();
      target = &clusters.back();
    }
    target->members.push_back(box);
    target->fused = fuse_cluster(target->members, num_models);
  }
  return clusters;
}

DetectionSet wbf(const DetectionSet& boxes, double iou_threshold, int num_models) {
  DetectionSet out;
  for (const BoxCluster& c : wbf_clusters(boxes, iou_threshold, num_models)) {
    out.push_back(c.fused);
  }
  sort_detections(out);
  return out;
}

}  // namespace feddet
