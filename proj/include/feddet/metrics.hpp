#pragma once

#include <functional>
#include <map>
#include <vector>

#include "feddet/boxes.hpp"
#include "feddet/datagen.hpp"

namespace feddet {

// Matched predictions and ground truth for one image.
struct ImageEval {
  int image_id = 0;
  DetectionSet predictions;
  DetectionSet ground_truth;
};

// All-point interpolated average precision for one class: predictions sorted
// by descending confidence, greedily matched to the unmatched ground-truth
// box with the highest IoU at or above the threshold.
double average_precision(const std::vector<ImageEval>& images, int class_id,
                         double iou_threshold);

struct EvalResult {
  std::map<int, double> per_class_ap;  // classes with ground-truth instances only
  double map_value = 0.0;
  int num_images = 0;
  double iou_threshold = 0.5;
};

EvalResult evaluate_detections(const std::vector<ImageEval>& images, double iou_threshold);

using Predictor = std::function<DetectionSet(const Scene&)>;

EvalResult evaluate_model(const Predictor& predictor, const std::vector<const Scene*>& testset,
                          double iou_threshold, int threads = 1);

// The four federated indicators. r_s/r_p/r_u hold the per-client values on
// the server, own and union testsets; the A_* fields are their means.
struct FedIndicators {
  double a_s = 0, a_p = 0, a_u = 0;
  std::map<double, double> a_com;  // alpha -> value
  std::vector<double> r_s, r_p, r_u;
};

FedIndicators combine_indicators(const std::vector<double>& r_s, const std::vector<double>& r_p,
                                 const std::vector<double>& r_u,
                                 const std::vector<double>& alphas);

// Evaluates one predictor per client on its own testset, the server testset
// and the union testset, then averages.
FedIndicators compute_indicators(const std::vector<Predictor>& per_client,
                                 const Benchmark& bench, const std::vector<double>& alphas,
                                 double iou_threshold, int threads = 1);

}  // namespace feddet
