#include "feddet/metrics.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include "feddet/parallel.hpp"

namespace feddet {

namespace {

struct Ranked {
  double confidence;
  int image_index;
  std::size_t det_index;
  bool tp = false;
};

}  // namespace

double average_precision(const std::vector<ImageEval>& images, int class_id,
                         double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
    throw std::invalid_argument("average_precision: iou_threshold must be in (0,1)");

  std::size_t num_gt = 0;
  for (const ImageEval& img : images) {
    for (const BBox& g : img.ground_truth) {
      if (g.class_id == class_id) ++num_gt;
    }
  }

  std::vector<Ranked> ranked;
  for (int i = 0; i < static_cast<int>(images.size()); ++i) {
    const ImageEval& img = images[static_cast<std::size_t>(i)];
    for (std::size_t d = 0; d < img.predictions.size(); ++d) {
      if (img.predictions[d].class_id == class_id) {
        ranked.push_back({img.predictions[d].confidence, i, d});
      }
    }
  }
  // Global ranking with a deterministic, order-independent tie rule.
  std::sort(ranked.begin(), ranked.end(), [&](const Ranked& a, const Ranked& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    const BBox& ba = images[static_cast<std::size_t>(a.image_index)].predictions[a.det_index];
    const BBox& bb = images[static_cast<std::size_t>(b.image_index)].predictions[b.det_index];
    if (ba.x1 != bb.x1) return ba.x1 < bb.x1;
    if (ba.y1 != bb.y1) return ba.y1 < bb.y1;
    if (ba.x2 != bb.x2) return ba.x2 < bb.x2;
    if (ba.y2 != bb.y2) return ba.y2 < bb.y2;
    const int ia = images[static_cast<std::size_t>(a.image_index)].image_id;
    const int ib = images[static_cast<std::size_t>(b.image_index)].image_id;
    return ia < ib;
  });

  std::map<int, std::vector<bool>> matched;  // image index -> gt matched flags
  for (int i = 0; i < static_cast<int>(images.size()); ++i) {
    matched[i].assign(images[static_cast<std::size_t>(i)].ground_truth.size(), false);
  }

  for (Ranked& r : ranked) {
    const ImageEval& img = images[static_cast<std::size_t>(r.image_index)];
    const BBox& pred = img.predictions[r.det_index];
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < img.ground_truth.size(); ++j) {
      const BBox& g = img.ground_truth[j];
      if (g.class_id != class_id || matched[r.image_index][j]) continue;
      const double v = iou(pred, g);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0) {
      r.tp = true;
      matched[r.image_index][static_cast<std::size_t>(best_j)] = true;
    }
  }

  if (num_gt == 0) return 0.0;

  std::vector<double> precision, recall;
  std::size_t tp = 0, fp = 0;
  for (const Ranked& r : ranked) {
    if (r.tp) ++tp; else ++fp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }

  // Area under the all-point interpolated precision-recall curve.
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i) {
    precision[static_cast<std::size_t>(i)] =
        std::max(precision[static_cast<std::size_t>(i)], precision[static_cast<std::size_t>(i) + 1]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

EvalResult evaluate_detections(const std::vector<ImageEval>& images, double iou_threshold) {
  std::set<int> classes;
  for (const ImageEval& img : images) {
    for (const BBox& g : img.ground_truth) classes.insert(g.class_id);
  }
  EvalResult res;
  res.iou_threshold = iou_threshold;
  res.num_images = static_cast<int>(images.size());
  double sum = 0.0;
  for (int c : classes) {
    const double ap = average_precision(images, c, iou_threshold);
    res.per_class_ap[c] = ap;
    sum += ap;
  }
  res.map_value = classes.empty() ? 0.0 : sum / static_cast<double>(classes.size());
  return res;
}

EvalResult evaluate_model(const Predictor& predictor, const std::vector<const Scene*>& testset,
                          double iou_threshold, int threads) {
  std::vector<ImageEval> images(testset.size());
  parallel_for(testset.size(), threads, [&](std::size_t i) {
    images[i].image_id = testset[i]->id;
    images[i].predictions = predictor(*testset[i]);
    images[i].ground_truth = testset[i]->ground_truth;
  });
  return evaluate_detections(images, iou_threshold);
}

FedIndicators combine_indicators(const std::vector<double>& r_s, const std::vector<double>& r_p,
                                 const std::vector<double>& r_u,
                                 const std::vector<double>& alphas) {
  if (r_s.size() != r_p.size() || r_s.size() != r_u.size() || r_s.empty())
    throw std::invalid_argument("combine_indicators: per-client vectors must align");
  FedIndicators ind;
  ind.r_s = r_s;
  ind.r_p = r_p;
  ind.r_u = r_u;
  const double n = static_cast<double>(r_s.size());
  for (std::size_t i = 0; i < r_s.size(); ++i) {
    ind.a_s += r_s[i] / n;
    ind.a_p += r_p[i] / n;
    ind.a_u += r_u[i] / n;
  }
  for (double alpha : alphas) {
    double acc = 0.0;
    for (std::size_t i = 0; i < r_s.size(); ++i) {
      acc += alpha * r_p[i] + (1.0 - alpha) * r_u[i];
    }
    ind.a_com[alpha] = acc / n;
  }
  return ind;
}

FedIndicators compute_indicators(const std::vector<Predictor>& per_client,
                                 const Benchmark& bench, const std::vector<double>& alphas,
                                 double iou_threshold, int threads) {
  const int n = bench.sizes.num_clients;
  if (static_cast<int>(per_client.size()) != n)
    throw std::invalid_argument("compute_indicators: one predictor per client required");
  const std::vector<const Scene*> server = bench.view(bench.server_test);
  const std::vector<const Scene*> uni = bench.union_test();
  std::vector<double> r_s, r_p, r_u;
  for (int i = 0; i < n; ++i) {
    const Predictor& model = per_client[static_cast<std::size_t>(i)];
    const std::vector<const Scene*> own = bench.view(bench.client_test[static_cast<std::size_t>(i)]);
    r_p.push_back(evaluate_model(model, own, iou_threshold, threads).map_value);
    r_s.push_back(evaluate_model(model, server, iou_threshold, threads).map_value);
    r_u.push_back(evaluate_model(model, uni, iou_threshold, threads).map_value);
  }
  return combine_indicators(r_s, r_p, r_u, alphas);
}

}  // namespace feddet
