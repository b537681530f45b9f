#include "feddet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "feddet/nn.hpp"
#include "feddet/parallel.hpp"
#include "feddet/rng.hpp"

namespace feddet {

namespace {

constexpr int kStage1Kernel = 5, kStage1Stride = 4, kStage1Pad = 2;
constexpr int kStage2Kernel = 3, kStage2Stride = 2, kStage2Pad = 1;

double xavier_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (double& v : t.data) v = rng.uniform(-bound, bound);
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

DetectorModel DetectorModel::random_init(const DetectorConfig& cfg, std::uint64_t seed) {
  if (static_cast<int>(cfg.anchor_sizes.size()) != kNumScales)
    throw std::invalid_argument("anchor_sizes must cover both scales");
  for (const auto& sizes : cfg.anchor_sizes) {
    if (static_cast<int>(sizes.size()) != cfg.anchors_per_cell)
      throw std::invalid_argument("anchor_sizes entries must match anchors_per_cell");
  }

  Rng rng(seed);
  DetectorModel m;
  m.config = cfg;
  const int ch = cfg.backbone_channels;
  const int in_ch = cfg.input_channels;
  const int cls_ch = cfg.anchors_per_cell * cfg.num_classes;
  const int reg_ch = cfg.anchors_per_cell * 4;

  m.conv1_w = Parameter("conv1.w", Tensor({ch, in_ch, kStage1Kernel, kStage1Kernel}));
  m.conv1_b = Parameter("conv1.b", Tensor({ch}));
  m.conv2_w = Parameter("conv2.w", Tensor({ch, ch, kStage2Kernel, kStage2Kernel}));
  m.conv2_b = Parameter("conv2.b", Tensor({ch}));
  fill_uniform(m.conv1_w.value, rng,
               xavier_bound(in_ch * kStage1Kernel * kStage1Kernel,
                            ch * kStage1Kernel * kStage1Kernel));
  fill_uniform(m.conv2_w.value, rng,
               xavier_bound(ch * kStage2Kernel * kStage2Kernel,
                            ch * kStage2Kernel * kStage2Kernel));

  // Classification biases start at the focal-loss prior so an untrained model
  // predicts background nearly everywhere.
  const double cls_bias = -std::log((1.0 - cfg.cls_prior) / cfg.cls_prior);
  for (int s = 0; s < kNumScales; ++s) {
    const std::string tag = std::to_string(s);
    Parameter cw("cls" + tag + ".w", Tensor({cls_ch, ch, 1, 1}));
    Parameter cb("cls" + tag + ".b", Tensor({cls_ch}));
    Parameter rw("reg" + tag + ".w", Tensor({reg_ch, ch, 1, 1}));
    Parameter rb("reg" + tag + ".b", Tensor({reg_ch}));
    fill_uniform(cw.value, rng, xavier_bound(ch, cls_ch));
    fill_uniform(rw.value, rng, xavier_bound(ch, reg_ch));
    for (double& v : cb.value.data) v = cls_bias;
    m.cls_w.push_back(std::move(cw));
    m.cls_b.push_back(std::move(cb));
    m.reg_w.push_back(std::move(rw));
    m.reg_b.push_back(std::move(rb));
  }
  return m;
}

std::vector<Parameter*> DetectorModel::parameters() {
  std::vector<Parameter*> p{&conv1_w, &conv1_b, &conv2_w, &conv2_b};
  for (int s = 0; s < kNumScales; ++s) {
    p.push_back(&cls_w[static_cast<std::size_t>(s)]);
    p.push_back(&cls_b[static_cast<std::size_t>(s)]);
    p.push_back(&reg_w[static_cast<std::size_t>(s)]);
    p.push_back(&reg_b[static_cast<std::size_t>(s)]);
  }
  return p;
}

std::vector<const Parameter*> DetectorModel::parameters() const {
  auto* self = const_cast<DetectorModel*>(this);
  std::vector<Parameter*> mut = self->parameters();
  return {mut.begin(), mut.end()};
}

std::size_t DetectorModel::num_scalars() const {
  std::size_t n = 0;
  for (const Parameter* p : parameters()) n += p->value.numel();
  return n;
}

std::uint64_t DetectorModel::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const Parameter* p : parameters()) {
    h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(double), h);
  }
  return h;
}

ModelOutput forward(const DetectorModel& model, const Tensor& image, ForwardContext* ctx) {
  const DetectorConfig& cfg = model.config;
  if (image.ndim() != 3 || image.size(0) != cfg.input_channels)
    throw std::invalid_argument("forward: image must be [C,H,W]");
  if (image.size(1) % 8 != 0 || image.size(2) % 8 != 0)
    throw std::invalid_argument("forward: image extents must be divisible by 8");

  Tensor pre1 = conv2d(image, model.conv1_w.value, model.conv1_b.value, kStage1Stride, kStage1Pad);
  Tensor f1 = relu(pre1);
  Tensor pre2 = conv2d(f1, model.conv2_w.value, model.conv2_b.value, kStage2Stride, kStage2Pad);
  Tensor f2 = relu(pre2);

  ModelOutput out;
  out.features = {f1, f2};
  for (int s = 0; s < kNumScales; ++s) {
    const Tensor& f = out.features[static_cast<std::size_t>(s)];
    out.cls_maps.push_back(conv2d(f, model.cls_w[static_cast<std::size_t>(s)].value,
                                  model.cls_b[static_cast<std::size_t>(s)].value, 1, 0));
    out.reg_maps.push_back(conv2d(f, model.reg_w[static_cast<std::size_t>(s)].value,
                                  model.reg_b[static_cast<std::size_t>(s)].value, 1, 0));
  }
  if (ctx) {
    ctx->input = image;
    ctx->pre1 = std::move(pre1);
    ctx->f1 = out.features[0];
    ctx->pre2 = std::move(pre2);
    ctx->f2 = out.features[1];
  }
  return out;
}

MapGrads MapGrads::zeros_like(const ModelOutput& out) {
  MapGrads g;
  for (const Tensor& t : out.features) g.d_features.push_back(Tensor::zeros(t.shape));
  for (const Tensor& t : out.cls_maps) g.d_cls.push_back(Tensor::zeros(t.shape));
  for (const Tensor& t : out.reg_maps) g.d_reg.push_back(Tensor::zeros(t.shape));
  return g;
}

Gradients zero_gradients(const DetectorModel& model) {
  Gradients g;
  for (const Parameter* p : model.parameters()) g.push_back(Tensor::zeros(p->value.shape));
  return g;
}

void backward(const DetectorModel& model, const ForwardContext& ctx, const MapGrads& grads,
              Gradients& out) {
  // Gradient slots follow DetectorModel::parameters():
  // conv1_w, conv1_b, conv2_w, conv2_b, then cls_w/cls_b/reg_w/reg_b per scale.
  Tensor df1 = grads.d_features[0];
  Tensor df2 = grads.d_features[1];

  const std::size_t s1 = 4;      // scale-0 head slots start here
  const std::size_t s2 = s1 + 4; // scale-1 head slots
  conv2d_backward(ctx.f2, model.cls_w[1].value, 1, 0, grads.d_cls[1], &df2, &out[s2 + 0],
                  &out[s2 + 1]);
  conv2d_backward(ctx.f2, model.reg_w[1].value, 1, 0, grads.d_reg[1], &df2, &out[s2 + 2],
                  &out[s2 + 3]);

  const Tensor dpre2 = relu_backward(ctx.pre2, df2);
  conv2d_backward(ctx.f1, model.conv2_w.value, kStage2Stride, kStage2Pad, dpre2, &df1, &out[2],
                  &out[3]);

  conv2d_backward(ctx.f1, model.cls_w[0].value, 1, 0, grads.d_cls[0], &df1, &out[s1 + 0],
                  &out[s1 + 1]);
  conv2d_backward(ctx.f1, model.reg_w[0].value, 1, 0, grads.d_reg[0], &df1, &out[s1 + 2],
                  &out[s1 + 3]);

  const Tensor dpre1 = relu_backward(ctx.pre1, df1);
  conv2d_backward(ctx.input, model.conv1_w.value, kStage1Stride, kStage1Pad, dpre1, nullptr,
                  &out[0], &out[1]);
}

std::vector<Anchor> anchors_for(const DetectorConfig& cfg, int scale, int map_h, int map_w) {
  const auto& sizes = cfg.anchor_sizes[static_cast<std::size_t>(scale)];
  std::vector<Anchor> anchors;
  anchors.reserve(static_cast<std::size_t>(map_h) * map_w * sizes.size());
  for (int y = 0; y < map_h; ++y) {
    for (int x = 0; x < map_w; ++x) {
      const double cy = (y + 0.5) / map_h;
      const double cx = (x + 0.5) / map_w;
      for (double s : sizes) anchors.push_back({cx, cy, s, s});
    }
  }
  return anchors;
}

namespace {

BBox anchor_to_box(const Anchor& a) {
  BBox b;
  b.x1 = a.cx - a.w / 2;
  b.y1 = a.cy - a.h / 2;
  b.x2 = a.cx + a.w / 2;
  b.y2 = a.cy + a.h / 2;
  return b;
}

struct FlatAnchors {
  std::vector<Anchor> anchors;     // all scales concatenated
  std::vector<int> scale_of;       // scale per anchor
  std::vector<int> cell_of;        // y * W + x per anchor
  std::vector<int> slot_of;        // anchor index within the cell
  std::vector<int> map_w;          // per scale
};

FlatAnchors flatten_anchors(const ModelOutput& out, const DetectorConfig& cfg) {
  FlatAnchors fa;
  for (int s = 0; s < kNumScales; ++s) {
    const Tensor& map = out.cls_maps[static_cast<std::size_t>(s)];
    const int h = map.size(1), w = map.size(2);
    fa.map_w.push_back(w);
    const std::vector<Anchor> scale_anchors = anchors_for(cfg, s, h, w);
    int idx = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int a = 0; a < cfg.anchors_per_cell; ++a, ++idx) {
          fa.anchors.push_back(scale_anchors[static_cast<std::size_t>(idx)]);
          fa.scale_of.push_back(s);
          fa.cell_of.push_back(y * w + x);
          fa.slot_of.push_back(a);
        }
      }
    }
  }
  return fa;
}

constexpr int kPositive = 1, kIgnore = 0, kNegative = -1;

// IoU-threshold assignment with optional best-anchor-per-ground-truth
// forcing (standard single-stage convention).
void match_anchors(const FlatAnchors& fa, const DetectionSet& gt, const DetectorConfig& cfg,
                   std::vector<int>& kind, std::vector<int>& matched_gt) {
  const std::size_t n = fa.anchors.size();
  kind.assign(n, kNegative);
  matched_gt.assign(n, -1);
  if (gt.empty()) return;

  std::vector<double> best_gt_iou(gt.size(), 0.0);
  std::vector<std::size_t> best_gt_anchor(gt.size(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const BBox abox = anchor_to_box(fa.anchors[i]);
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gt.size(); ++j) {
      const double v = iou(abox, gt[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
      if (v > best_gt_iou[j]) {
        best_gt_iou[j] = v;
        best_gt_anchor[j] = i;
      }
    }
    if (best >= cfg.pos_iou) {
      kind[i] = kPositive;
      matched_gt[i] = best_j;
    } else if (best >= cfg.neg_iou) {
      kind[i] = kIgnore;
    }
  }
  if (cfg.force_match_best_anchor) {
    for (std::size_t j = 0; j < gt.size(); ++j) {
      if (best_gt_iou[j] <= 0.0) continue;  // no overlap at all, nothing to force
      const std::size_t i = best_gt_anchor[j];
      if (kind[i] == kPositive) continue;
      kind[i] = kPositive;
      matched_gt[i] = static_cast<int>(j);
    }
  }
}

struct RegTarget {
  double t[4];
};

RegTarget regression_target(const Anchor& a, const BBox& g) {
  const double gcx = (g.x1 + g.x2) / 2, gcy = (g.y1 + g.y2) / 2;
  const double gw = g.x2 - g.x1, gh = g.y2 - g.y1;
  RegTarget r;
  r.t[0] = (gcx - a.cx) / a.w;
  r.t[1] = (gcy - a.cy) / a.h;
  r.t[2] = std::log(std::max(gw, 1e-9) / a.w);
  r.t[3] = std::log(std::max(gh, 1e-9) / a.h);
  return r;
}

}  // namespace

DetectionSet decode(const ModelOutput& out, const DetectorConfig& cfg, double score_threshold,
                    int max_boxes) {
  if (!(score_threshold >= 0.0 && score_threshold < 1.0))
    throw std::invalid_argument("decode: score_threshold must be in [0,1)");
  DetectionSet dets;
  for (int s = 0; s < kNumScales; ++s) {
    const Tensor& cls = out.cls_maps[static_cast<std::size_t>(s)];
    const Tensor& reg = out.reg_maps[static_cast<std::size_t>(s)];
    const int h = cls.size(1), w = cls.size(2);
    const std::vector<Anchor> anchors = anchors_for(cfg, s, h, w);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        for (int a = 0; a < cfg.anchors_per_cell; ++a) {
          double best = -1.0;
          int best_c = 0;
          for (int c = 0; c < cfg.num_classes; ++c) {
            const double p = sigmoid(cls.at(a * cfg.num_classes + c, y, x));
            if (p > best) {
              best = p;
              best_c = c;
            }
          }
          if (best <= score_threshold) continue;
          const Anchor& an = anchors[static_cast<std::size_t>((y * w + x) * cfg.anchors_per_cell + a)];
          const double tx = reg.at(a * 4 + 0, y, x);
          const double ty = reg.at(a * 4 + 1, y, x);
          const double tw = std::clamp(reg.at(a * 4 + 2, y, x), -6.0, 6.0);
          const double th = std::clamp(reg.at(a * 4 + 3, y, x), -6.0, 6.0);
          const double cx = an.cx + tx * an.w;
          const double cy = an.cy + ty * an.h;
          const double bw = an.w * std::exp(tw);
          const double bh = an.h * std::exp(th);
          BBox b;
          b.x1 = std::clamp(cx - bw / 2, 0.0, 1.0);
          b.y1 = std::clamp(cy - bh / 2, 0.0, 1.0);
          b.x2 = std::clamp(cx + bw / 2, 0.0, 1.0);
          b.y2 = std::clamp(cy + bh / 2, 0.0, 1.0);
          b.class_id = best_c;
          b.confidence = best;
          b.model_id = 0;
          dets.push_back(b);
        }
      }
    }
  }
  sort_detections(dets);
  if (max_boxes >= 0 && static_cast<int>(dets.size()) > max_boxes) {
    dets.resize(static_cast<std::size_t>(max_boxes));
  }
  return dets;
}

DetLoss detection_loss(const ModelOutput& out, const DetectionSet& ground_truth,
                       const DetectorConfig& cfg, MapGrads* grads) {
  const FlatAnchors fa = flatten_anchors(out, cfg);
  std::vector<int> kind, matched;
  match_anchors(fa, ground_truth, cfg, kind, matched);

  DetLoss loss;
  for (int k : kind) {
    if (k == kPositive) ++loss.num_pos;
  }
  const double norm = std::max(1, loss.num_pos);
  const double gamma = cfg.focal_gamma, alpha = cfg.focal_alpha;

  for (std::size_t i = 0; i < fa.anchors.size(); ++i) {
    if (kind[i] == kIgnore) continue;
    const int s = fa.scale_of[i];
    const Tensor& cls = out.cls_maps[static_cast<std::size_t>(s)];
    const int w = fa.map_w[static_cast<std::size_t>(s)];
    const int y = fa.cell_of[i] / w, x = fa.cell_of[i] % w;
    const int slot = fa.slot_of[i];
    const int gt_class = kind[i] == kPositive
                             ? ground_truth[static_cast<std::size_t>(matched[i])].class_id
                             : -1;

    for (int c = 0; c < cfg.num_classes; ++c) {
      const int ch = slot * cfg.num_classes + c;
      const double z = cls.at(ch, y, x);
      double p = sigmoid(z);
      p = std::clamp(p, 1e-12, 1.0 - 1e-12);
      const double q = 1.0 - p;
      double term, dterm_dp;
      if (c == gt_class) {
        term = -alpha * std::pow(q, gamma) * std::log(p);
        dterm_dp = -alpha * (-gamma * std::pow(q, gamma - 1) * std::log(p) + std::pow(q, gamma) / p);
      } else {
        term = -(1.0 - alpha) * std::pow(p, gamma) * std::log(q);
        dterm_dp =
            -(1.0 - alpha) * (gamma * std::pow(p, gamma - 1) * std::log(q) - std::pow(p, gamma) / q);
      }
      loss.cls += term / norm;
      if (grads) {
        grads->d_cls[static_cast<std::size_t>(s)].at(ch, y, x) += dterm_dp * p * q / norm;
      }
    }

    if (kind[i] == kPositive) {
      const Tensor& reg = out.reg_maps[static_cast<std::size_t>(s)];
      const RegTarget target =
          regression_target(fa.anchors[i], ground_truth[static_cast<std::size_t>(matched[i])]);
      for (int j = 0; j < 4; ++j) {
        const int ch = slot * 4 + j;
        const double d = reg.at(ch, y, x) - target.t[j];
        const double beta = cfg.smooth_l1_beta;
        double term, dterm;
        if (std::abs(d) < beta) {
          term = 0.5 * d * d / beta;
          dterm = d / beta;
        } else {
          term = std::abs(d) - 0.5 * beta;
          dterm = d > 0 ? 1.0 : -1.0;
        }
        loss.reg += term / norm;
        if (grads) {
          grads->d_reg[static_cast<std::size_t>(s)].at(ch, y, x) += dterm / norm;
        }
      }
    }
  }
  return loss;
}

StepStats& StepStats::operator+=(const StepStats& o) {
  l_det += o.l_det;
  l_fea += o.l_fea;
  l_cls += o.l_cls;
  l_reg += o.l_reg;
  total += o.total;
  return *this;
}

StepStats& StepStats::operator/=(double d) {
  l_det /= d;
  l_fea /= d;
  l_cls /= d;
  l_reg /= d;
  total /= d;
  return *this;
}

void sgd_epochs(DetectorModel& model, const std::vector<Scene>& data, int epochs, int batch_size,
                double lr, int threads, std::uint64_t seed, const ImageGradFn& per_image,
                std::vector<StepStats>* epoch_log) {
  if (data.empty()) throw std::invalid_argument("sgd_epochs: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("sgd_epochs: batch_size must be >= 1");

  Rng rng(seed);
  std::vector<Parameter*> params = model.parameters();

  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    StepStats epoch_stats;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t count = std::min<std::size_t>(batch_size, order.size() - start);
      std::vector<Gradients> per_grads(count);
      std::vector<StepStats> per_stats(count);
      parallel_for(count, threads, [&](std::size_t b) {
        per_grads[b] = zero_gradients(model);
        per_stats[b] = per_image(model, data[order[start + b]], per_grads[b]);
      });
      // Average gradients over the batch; summation order is fixed by image
      // index so results do not depend on the thread count.
      const double inv = 1.0 / static_cast<double>(count);
      for (std::size_t b = 0; b < count; ++b) {
        epoch_stats += per_stats[b];
        for (std::size_t p = 0; p < params.size(); ++p) {
          double* acc = params[p]->grad.data.data();
          const double* g = per_grads[b][p].data.data();
          const std::size_t len = per_grads[b][p].data.size();
          for (std::size_t k = 0; k < len; ++k) acc[k] += inv * g[k];
        }
      }
      sgd_step(params, lr);
    }
    if (epoch_log) {
      epoch_stats /= static_cast<double>(data.size());
      epoch_log->push_back(epoch_stats);
    }
  }
}

DetectorModel train_local(const DetectorModel& model, const std::vector<Scene>& dataset,
                          const TrainConfig& cfg, std::uint64_t seed,
                          std::vector<double>* epoch_losses) {
  if (dataset.empty()) throw std::invalid_argument("train_local: empty dataset");
  DetectorModel trained = model;
  std::vector<StepStats> log;
  sgd_epochs(
      trained, dataset, cfg.epochs, cfg.batch_size, cfg.lr, cfg.threads, seed,
      [](const DetectorModel& m, const Scene& scene, Gradients& grads) {
        ForwardContext ctx;
        const ModelOutput out = forward(m, scene.image.to_tensor(), &ctx);
        MapGrads mg = MapGrads::zeros_like(out);
        const DetLoss loss = detection_loss(out, scene.ground_truth, m.config, &mg);
        backward(m, ctx, mg, grads);
        StepStats st;
        st.l_det = loss.total();
        st.total = loss.total();
        return st;
      },
      epoch_losses ? &log : nullptr);
  if (epoch_losses) {
    for (const StepStats& s : log) epoch_losses->push_back(s.l_det);
  }
  return trained;
}

DetectionSet predict(const DetectorModel& model, const Tensor& image, double score_threshold,
                     double nms_threshold) {
  return nms(decode(forward(model, image), model.config, score_threshold), nms_threshold);
}

}  // namespace feddet
