#include <cmath>

#include <stdexcept>

#include <doctest.h>

#include "feddet/datagen.hpp"
#include "feddet/detector.hpp"
#include "feddet/nn.hpp"
#include "feddet/rng.hpp"
#include "testutil.hpp"

using namespace feddet;
using namespace feddet::test;

namespace {

DetectorConfig tiny_config() {
  DetectorConfig cfg;
  cfg.num_classes = 2;
  cfg.anchors_per_cell = 1;
  cfg.backbone_channels = 4;
  cfg.anchor_sizes = {{0.1}, {0.3}};
  return cfg;
}

DetectorModel zero_model(const DetectorConfig& cfg) {
  DetectorModel m = DetectorModel::random_init(cfg, 0);
  for (Parameter* p : m.parameters()) {
    for (double& v : p->value.data) v = 0.0;
  }
  return m;
}

ModelOutput zero_output_like(const DetectorModel& m, int img = 16) {
  Tensor image = Tensor::zeros({3, img, img});
  return forward(m, image);
}

}  // namespace

TEST_CASE("forward shapes and zero model") {
  DetectorModel m = zero_model(DetectorConfig{});
  Tensor image = Tensor::zeros({3, 32, 32});
  const ModelOutput out = forward(m, image);
  REQUIRE(out.features.size() == 2);
  CHECK(out.features[0].shape == std::vector<int>{16, 8, 8});
  CHECK(out.features[1].shape == std::vector<int>{16, 4, 4});
  CHECK(out.cls_maps[0].shape == std::vector<int>{15, 8, 8});
  CHECK(out.reg_maps[0].shape == std::vector<int>{12, 8, 8});
  for (const Tensor& t : out.features) {
    for (double v : t.data) CHECK(v == 0.0);
  }
  for (const Tensor& t : out.cls_maps) {
    for (double v : t.data) CHECK(v == 0.0);
  }

  CHECK_THROWS_AS(forward(m, Tensor::zeros({3, 30, 32})), std::invalid_argument);
}

TEST_CASE("forward is deterministic and depends only on parameters") {
  Rng rng(42);
  const Tensor image = random_tensor({3, 32, 32}, rng, 0, 1);
  const DetectorModel a = DetectorModel::random_init(DetectorConfig{}, 5);
  const DetectorModel b = DetectorModel::random_init(DetectorConfig{}, 5);
  const ModelOutput oa = forward(a, image);
  const ModelOutput ob = forward(b, image);
  for (int s = 0; s < 2; ++s) {
    CHECK(oa.features[static_cast<std::size_t>(s)].data ==
          ob.features[static_cast<std::size_t>(s)].data);
    CHECK(oa.cls_maps[static_cast<std::size_t>(s)].data ==
          ob.cls_maps[static_cast<std::size_t>(s)].data);
    CHECK(oa.reg_maps[static_cast<std::size_t>(s)].data ==
          ob.reg_maps[static_cast<std::size_t>(s)].data);
  }
}

TEST_CASE("decode basics") {
  const DetectorConfig cfg = tiny_config();
  DetectorModel m = zero_model(cfg);
  ModelOutput out = zero_output_like(m);

  // strongly negative logits: nothing survives
  for (Tensor& t : out.cls_maps) {
    for (double& v : t.data) v = -30.0;
  }
  CHECK(decode(out, cfg, 0.05).empty());

  // one hot cell with zero offsets reproduces the raw anchor
  out.cls_maps[0].at(0, 2, 1) = 2.0;  // anchor 0, class 0 at (y=2, x=1)
  DetectionSet dets = decode(out, cfg, 0.05);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 0);
  CHECK(dets[0].x1 == doctest::Approx(0.375 - 0.05).epsilon(1e-12));
  CHECK(dets[0].y1 == doctest::Approx(0.625 - 0.05).epsilon(1e-12));
  CHECK(dets[0].x2 == doctest::Approx(0.375 + 0.05).epsilon(1e-12));

  // offsets move the box exactly per the center/size parameterization
  out.cls_maps[0].at(1, 2, 1) = 3.0;  // class 1 beats class 0 now
  out.reg_maps[0].at(0, 2, 1) = 0.1;
  out.reg_maps[0].at(1, 2, 1) = -0.2;
  out.reg_maps[0].at(2, 2, 1) = std::log(1.5);
  out.reg_maps[0].at(3, 2, 1) = std::log(0.5);
  dets = decode(out, cfg, 0.05);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].class_id == 1);
  const double cx = 0.375 + 0.1 * 0.1, cy = 0.625 - 0.2 * 0.1;
  CHECK(dets[0].x1 == doctest::Approx(cx - 0.075).epsilon(1e-12));
  CHECK(dets[0].x2 == doctest::Approx(cx + 0.075).epsilon(1e-12));
  CHECK(dets[0].y1 == doctest::Approx(cy - 0.025).epsilon(1e-12));
  CHECK(dets[0].y2 == doctest::Approx(cy + 0.025).epsilon(1e-12));
  CHECK(dets[0].confidence == doctest::Approx(1.0 / (1.0 + std::exp(-3.0))).epsilon(1e-12));
}

TEST_CASE("detection_loss hand-computed focal case") {
  const DetectorConfig cfg = tiny_config();
  DetectorModel m = zero_model(cfg);
  ModelOutput out = zero_output_like(m);  // all logits zero

  // Ground truth equals the scale-0 anchor at cell (1,1): exactly one
  // positive anchor (IoU 1), every other anchor negative.
  BBox gt;
  gt.x1 = 0.375 - 0.05;
  gt.y1 = 0.375 - 0.05;
  gt.x2 = 0.375 + 0.05;
  gt.y2 = 0.375 + 0.05;
  gt.class_id = 1;
  const DetLoss loss = detection_loss(out, {gt}, cfg);
  CHECK(loss.num_pos == 1);

  const int total_anchors = 4 * 4 + 2 * 2;
  const double fl_pos = -0.25 * 0.25 * std::log(0.5);
  const double fl_neg = -0.75 * 0.25 * std::log(0.5);
  const double want = fl_pos + (total_anchors * 2 - 1) * fl_neg;
  CHECK(loss.cls == doctest::Approx(want).epsilon(1e-9));
  CHECK(loss.reg == doctest::Approx(0.0).epsilon(1e-12));  // exact anchor, zero offsets
}

TEST_CASE("detection_loss limit cases") {
  const DetectorConfig cfg = tiny_config();
  DetectorModel m = zero_model(cfg);
  ModelOutput out = zero_output_like(m);
  for (Tensor& t : out.cls_maps) {
    for (double& v : t.data) v = -20.0;
  }

  // empty ground truth, strongly negative logits
  CHECK(detection_loss(out, {}, cfg).total() < 1e-3);

  // perfect prediction: saturated correct logit, exact offsets
  BBox gt;
  gt.x1 = 0.375 - 0.05;
  gt.y1 = 0.375 - 0.05;
  gt.x2 = 0.375 + 0.05;
  gt.y2 = 0.375 + 0.05;
  gt.class_id = 1;
  out.cls_maps[0].at(1, 1, 1) = 20.0;  // class 1 at cell (y=1, x=1)
  const DetLoss loss = detection_loss(out, {gt}, cfg);
  CHECK(loss.num_pos == 1);
  CHECK(loss.total() < 1e-3);
}

TEST_CASE("detection_loss gradient matches finite differences for every parameter") {
  const DetectorConfig cfg = tiny_config();
  DetectorModel m = DetectorModel::random_init(cfg, 77);
  Rng rng(3);
  // Freshly initialized conv biases are zero, which parks dead activations
  // exactly on the relu kink where finite differences are undefined; nudge
  // them off it for the check.
  for (double& v : m.conv1_b.value.data) v = rng.uniform(0.01, 0.05);
  for (double& v : m.conv2_b.value.data) v = rng.uniform(0.01, 0.05);
  const Tensor image = random_tensor({3, 16, 16}, rng, 0, 1);
  DetectionSet gt;
  BBox g1;
  g1.x1 = 0.30;
  g1.y1 = 0.28;
  g1.x2 = 0.42;
  g1.y2 = 0.40;
  g1.class_id = 1;
  BBox g2;
  g2.x1 = 0.55;
  g2.y1 = 0.60;
  g2.x2 = 0.85;
  g2.y2 = 0.90;
  g2.class_id = 0;
  gt = {g1, g2};

  auto loss = [&]() {
    return detection_loss(forward(m, image), gt, cfg).total();
  };

  ForwardContext ctx;
  const ModelOutput out = forward(m, image, &ctx);
  MapGrads mg = MapGrads::zeros_like(out);
  detection_loss(out, gt, cfg, &mg);
  Gradients grads = zero_gradients(m);
  backward(m, ctx, mg, grads);

  std::vector<Parameter*> params = m.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    INFO("parameter ", params[p]->name);
    check_gradient(params[p]->value, grads[p], loss, 1e-6, 1e-3);
  }
}

TEST_CASE("train_local edge cases and one-step oracle") {
  const DetectorConfig cfg = tiny_config();
  const DetectorModel m = DetectorModel::random_init(cfg, 11);
  DomainSpec spec;
  spec.class_palette = {0, 1};
  spec.class_priors = {0.5, 0.5};
  Rng rng(8);
  std::vector<Scene> data{render_scene(spec, rng)};

  CHECK_THROWS_AS(train_local(m, {}, TrainConfig{}, 1), std::invalid_argument);

  TrainConfig tc;
  tc.epochs = 0;
  DetectorModel same = train_local(m, data, tc, 1);
  CHECK(same.checksum() == m.checksum());

  tc.epochs = 3;
  tc.lr = 0.0;
  same = train_local(m, data, tc, 1);
  CHECK(same.checksum() == m.checksum());

  // one epoch, batch 1, single sample: plain SGD step
  tc.epochs = 1;
  tc.lr = 0.01;
  tc.batch_size = 1;
  const DetectorModel stepped = train_local(m, data, tc, 123);

  DetectorModel expect = m;
  ForwardContext ctx;
  const ModelOutput out = forward(expect, data[0].image.to_tensor(), &ctx);
  MapGrads mg = MapGrads::zeros_like(out);
  detection_loss(out, data[0].ground_truth, cfg, &mg);
  Gradients grads = zero_gradients(expect);
  backward(expect, ctx, mg, grads);
  std::vector<Parameter*> params = expect.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p]->value.data.size(); ++i) {
      params[p]->value.data[i] -= 0.01 * grads[p].data[i];
    }
  }
  const std::vector<const Parameter*> got = stepped.parameters();
  const std::vector<const Parameter*> want =
      static_cast<const DetectorModel&>(expect).parameters();
  for (std::size_t p = 0; p < got.size(); ++p) {
    for (std::size_t i = 0; i < got[p]->value.data.size(); ++i) {
      CHECK(got[p]->value.data[i] == doctest::Approx(want[p]->value.data[i]).epsilon(1e-12));
    }
  }

  // the input model is never mutated
  CHECK(m.checksum() == DetectorModel::random_init(cfg, 11).checksum());
}

TEST_CASE("training loss decreases on a small fixture") {
  DomainSpec spec;
  spec.class_palette = {0, 1, 2};
  spec.class_priors = {1, 1, 1};
  Rng rng(4);
  std::vector<Scene> data;
  for (int i = 0; i < 16; ++i) data.push_back(render_scene(spec, rng));

  const DetectorModel m = DetectorModel::random_init(DetectorConfig{}, 2);
  TrainConfig tc;
  tc.epochs = 10;
  tc.lr = 0.01;
  tc.batch_size = 8;
  std::vector<double> losses;
  train_local(m, data, tc, 9, &losses);
  REQUIRE(losses.size() == 10);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("decode of forward output always yields valid boxes") {
  Rng rng(15);
  const DetectorModel m = DetectorModel::random_init(DetectorConfig{}, 33);
  for (int iter = 0; iter < 5; ++iter) {
    const Tensor image = random_tensor({3, 64, 64}, rng, 0, 1);
    for (const BBox& b : decode(forward(m, image), m.config, 0.01)) {
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= 1.0);
      CHECK(b.y2 <= 1.0);
      CHECK(b.x1 <= b.x2);
      CHECK(b.y1 <= b.y2);
      CHECK(b.confidence >= 0.0);
      CHECK(b.confidence <= 1.0);
    }
  }
}

TEST_CASE("predict is deterministic") {
  Rng rng(25);
  const DetectorModel m = DetectorModel::random_init(DetectorConfig{}, 1);
  const Tensor image = random_tensor({3, 64, 64}, rng, 0, 1);
  const DetectionSet a = predict(m, image, 0.05, 0.5);
  const DetectionSet b = predict(m, image, 0.05, 0.5);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].x1 == b[i].x1);
    CHECK(a[i].confidence == b[i].confidence);
  }
}
