#include <cmath>

#include <stdexcept>

#include <doctest.h>

#include "feddet/boxes.hpp"
#include "oracles.hpp"

using namespace feddet;
using namespace feddet::test;

namespace {

BBox box(double x1, double y1, double x2, double y2, double conf = 1.0, int cls = 0,
         int model = 0) {
  return BBox{x1, y1, x2, y2, cls, conf, model};
}

}  // namespace

TEST_CASE("iou basics") {
  const BBox a = box(0, 0, 0.2, 0.2);
  CHECK(iou(a, a) == doctest::Approx(1.0));
  CHECK(iou(box(0, 0, 0.1, 0.1), box(0.5, 0.5, 0.6, 0.6)) == 0.0);
  // overlap 0.1x0.2 = 0.02, union 0.04 + 0.04 - 0.02 = 0.06
  CHECK(iou(box(0, 0, 0.2, 0.2), box(0.1, 0, 0.3, 0.2)) == doctest::Approx(1.0 / 3).epsilon(1e-9));
  // degenerate boxes have zero area and zero iou
  CHECK(iou(box(0.1, 0.1, 0.1, 0.3), box(0.0, 0.0, 0.2, 0.4)) == 0.0);
}

TEST_CASE("nms duplicate suppression and disjoint passthrough") {
  DetectionSet two{box(0, 0, 0.2, 0.2, 0.9), box(0, 0, 0.2, 0.2, 0.8)};
  DetectionSet kept = nms(two, 0.5);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].confidence == 0.9);

  DetectionSet disjoint{box(0, 0, 0.1, 0.1, 0.3), box(0.5, 0.5, 0.7, 0.7, 0.9)};
  CHECK(nms(disjoint, 0.5).size() == 2);
  CHECK(nms({}, 0.5).empty());
}

TEST_CASE("nms ignores other classes") {
  DetectionSet two{box(0, 0, 0.2, 0.2, 0.9, 0), box(0, 0, 0.2, 0.2, 0.8, 1)};
  CHECK(nms(two, 0.5).size() == 2);
}

TEST_CASE("soft_nms decay and floor") {
  DetectionSet disjoint{box(0, 0, 0.1, 0.1, 0.3), box(0.5, 0.5, 0.7, 0.7, 0.9)};
  DetectionSet out = soft_nms(disjoint, 0.5, 0.001);
  REQUIRE(out.size() == 2);
  CHECK(out[0].confidence == 0.9);
  CHECK(out[1].confidence == 0.3);

  DetectionSet dup{box(0, 0, 0.2, 0.2, 0.9), box(0, 0, 0.2, 0.2, 0.8)};
  out = soft_nms(dup, 0.5, 0.001);
  REQUIRE(out.size() == 2);
  CHECK(out[1].confidence == doctest::Approx(0.8 * std::exp(-2.0)).epsilon(1e-12));
  // coordinates never move
  CHECK(out[1].x2 == 0.2);

  CHECK(soft_nms({}, 0.5, 0.001).empty());
  // floor drops the decayed box entirely
  CHECK(soft_nms(dup, 0.5, 0.2).size() == 1);
}

TEST_CASE("nwm weighted coordinates") {
  // singleton: unchanged
  DetectionSet one{box(0.1, 0.1, 0.3, 0.3, 0.7)};
  DetectionSet out = nwm(one, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0].x1 == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(out[0].confidence == 0.7);

  // identical pair: same coordinates, max confidence
  DetectionSet dup{box(0, 0, 0.2, 0.2, 0.9), box(0, 0, 0.2, 0.2, 0.8)};
  out = nwm(dup, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0].confidence == 0.9);
  CHECK(out[0].x2 == doctest::Approx(0.2).epsilon(1e-12));

  // 3-box cluster against the direct arithmetic
  const BBox a = box(0.10, 0.10, 0.30, 0.30, 0.9);
  const BBox b = box(0.12, 0.10, 0.30, 0.30, 0.6);
  const BBox c = box(0.10, 0.12, 0.32, 0.30, 0.5);
  const double wa = 0.9 * 1.0, wb = 0.6 * iou(a, b), wc = 0.5 * iou(a, c);
  const double x1 = (wa * 0.10 + wb * 0.12 + wc * 0.10) / (wa + wb + wc);
  out = nwm({a, b, c}, 0.5);
  REQUIRE(out.size() == 1);
  CHECK(out[0].x1 == doctest::Approx(x1).epsilon(1e-12));
  CHECK(out[0].confidence == 0.9);
}

TEST_CASE("wbf worked examples") {
  // singleton with M=2 halves the confidence and keeps coordinates
  DetectionSet one{box(0.2, 0.2, 0.4, 0.4, 0.8)};
  DetectionSet out = wbf(one, 0.55, 2);
  REQUIRE(out.size() == 1);
  CHECK(out[0].confidence == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(out[0].x1 == doctest::Approx(0.2).epsilon(1e-12));

  // coincident boxes, T = M = 2
  DetectionSet pair{box(0.2, 0.2, 0.4, 0.4, 0.6), box(0.2, 0.2, 0.4, 0.4, 0.8)};
  out = wbf(pair, 0.55, 2);
  REQUIRE(out.size() == 1);
  CHECK(out[0].confidence == doctest::Approx(0.7).epsilon(1e-12));

  // the two-box cluster with distinct extents (clustered at a low threshold)
  DetectionSet nested{box(0, 0, 0.10, 0.10, 1.0), box(0, 0, 0.20, 0.20, 0.5)};
  out = wbf(nested, 0.2, 2);
  REQUIRE(out.size() == 1);
  CHECK(out[0].confidence == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(out[0].x2 == doctest::Approx(0.2 / 1.5).epsilon(1e-12));
  CHECK(out[0].y2 == doctest::Approx(0.2 / 1.5).epsilon(1e-12));

  CHECK_THROWS_AS(wbf(one, 0.55, 0), std::invalid_argument);
}

TEST_CASE("wbf singleton identity with one model") {
  // disjoint boxes, M=1: identity on coordinates and confidences
  DetectionSet boxes;
  for (int i = 0; i < 4; ++i) {
    boxes.push_back(box(0.25 * i, 0.25 * i, 0.25 * i + 0.1, 0.25 * i + 0.1, 0.2 + 0.2 * i, 0));
  }
  DetectionSet out = wbf(boxes, 0.55, 1);
  sort_detections(boxes);
  REQUIRE(out.size() == boxes.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    CHECK(out[i].confidence == doctest::Approx(boxes[i].confidence).epsilon(1e-12));
    CHECK(out[i].x1 == doctest::Approx(boxes[i].x1).epsilon(1e-12));
  }
}

TEST_CASE("fusion methods match brute-force references on random sets") {
  Rng rng(1234);
  for (int iter = 0; iter < 1000; ++iter) {
    const DetectionSet boxes = random_boxes(rng);
    CHECK(boxes_close(nms(boxes, 0.5), ref_nms(boxes, 0.5)));
    CHECK(boxes_close(soft_nms(boxes, 0.5, 0.001), ref_soft_nms(boxes, 0.5, 0.001)));
    CHECK(boxes_close(nwm(boxes, 0.5), ref_nwm(boxes, 0.5)));
    CHECK(boxes_close(wbf(boxes, 0.55, 2), ref_wbf(boxes, 0.55, 2)));
  }
}

TEST_CASE("fusion invariants on random sets") {
  Rng rng(99);
  for (int iter = 0; iter < 300; ++iter) {
    const DetectionSet boxes = random_boxes(rng);
    const DetectionSet n = nms(boxes, 0.5);
    const DetectionSet s = soft_nms(boxes, 0.5, 0.001);
    const DetectionSet w = wbf(boxes, 0.55, 2);
    const DetectionSet m = nwm(boxes, 0.5);

    CHECK(n.size() <= boxes.size());
    CHECK(s.size() <= boxes.size());
    CHECK(m.size() <= boxes.size());
    CHECK(w.size() == wbf_clusters(boxes, 0.55, 2).size());

    // nms output is a subset of its input
    for (const BBox& kept : n) {
      bool found = false;
      for (const BBox& b : boxes) {
        if (b.x1 == kept.x1 && b.y1 == kept.y1 && b.x2 == kept.x2 && b.y2 == kept.y2 &&
            b.confidence == kept.confidence && b.class_id == kept.class_id) {
          found = true;
          break;
        }
      }
      CHECK(found);
    }

    // soft-nms preserves coordinates exactly
    for (const BBox& kept : s) {
      bool found = false;
      for (const BBox& b : boxes) {
        if (b.x1 == kept.x1 && b.y1 == kept.y1 && b.x2 == kept.x2 && b.y2 == kept.y2) {
          found = true;
          break;
        }
      }
      CHECK(found);
    }

    // wbf confidence bound and convex-hull containment per cluster
    for (const BoxCluster& c : wbf_clusters(boxes, 0.55, 2)) {
      CHECK(c.fused.confidence <= 1.0 + 1e-12);
      double lo_x1 = 1e9, hi_x1 = -1e9, lo_y2 = 1e9, hi_y2 = -1e9;
      for (const BBox& b : c.members) {
        lo_x1 = std::min(lo_x1, b.x1);
        hi_x1 = std::max(hi_x1, b.x1);
        lo_y2 = std::min(lo_y2, b.y2);
        hi_y2 = std::max(hi_y2, b.y2);
      }
      CHECK(c.fused.x1 >= lo_x1 - 1e-12);
      CHECK(c.fused.x1 <= hi_x1 + 1e-12);
      CHECK(c.fused.y2 >= lo_y2 - 1e-12);
      CHECK(c.fused.y2 <= hi_y2 + 1e-12);
    }

    // determinism
    CHECK(boxes_close(n, nms(boxes, 0.5), 0.0));
    CHECK(boxes_close(w, wbf(boxes, 0.55, 2), 0.0));
  }
}
