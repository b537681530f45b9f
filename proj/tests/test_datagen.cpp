#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include <doctest.h>

#include "feddet/datagen.hpp"

using namespace feddet;

namespace {

std::map<int, int> class_histogram(const std::vector<Scene>& split) {
  std::map<int, int> hist;
  for (const Scene& s : split) {
    for (const BBox& b : s.ground_truth) hist[b.class_id]++;
  }
  return hist;
}

double mean_intensity(const DomainSpec& spec) {
  return (spec.bg_mean[0] + spec.bg_mean[1] + spec.bg_mean[2]) / 3.0;
}

}  // namespace

TEST_CASE("render_scene basics") {
  DomainSpec spec;
  spec.class_palette = {0, 1};
  spec.class_priors = {0.5, 0.5};

  SUBCASE("zero objects means pure background") {
    spec.min_objects = 0;
    spec.max_objects = 0;
    Rng rng(1);
    const Scene s = render_scene(spec, rng);
    CHECK(s.ground_truth.empty());
    CHECK(s.image.pixels.size() == 3u * 64 * 64);
  }

  SUBCASE("deterministic given the rng seed") {
    Rng a(42), b(42);
    const Scene sa = render_scene(spec, a);
    const Scene sb = render_scene(spec, b);
    CHECK(sa.image.pixels == sb.image.pixels);
    REQUIRE(sa.ground_truth.size() == sb.ground_truth.size());
    for (std::size_t i = 0; i < sa.ground_truth.size(); ++i) {
      CHECK(sa.ground_truth[i].x1 == sb.ground_truth[i].x1);
      CHECK(sa.ground_truth[i].class_id == sb.ground_truth[i].class_id);
    }
  }

  SUBCASE("boxes are valid, pixel-aligned, and objects visible") {
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
      const Scene s = render_scene(spec, rng);
      const Tensor img = s.image.to_tensor();
      for (const BBox& b : s.ground_truth) {
        CHECK(b.x1 >= 0.0);
        CHECK(b.y1 >= 0.0);
        CHECK(b.x2 <= 1.0);
        CHECK(b.y2 <= 1.0);
        CHECK(b.confidence == 1.0);
        // rendered object differs from the background mean somewhere inside
        const int px = static_cast<int>(std::lround(b.x1 * 64));
        const int py = static_cast<int>(std::lround(b.y1 * 64));
        double contrast = 0.0;
        for (int c = 0; c < 3; ++c) {
          contrast = std::max(contrast,
                              std::abs(img.at(c, py, px) - spec.bg_mean[static_cast<std::size_t>(c)]));
        }
        CHECK(contrast > 0.15);
      }
      // pairwise overlap is capped by the placement sampler
      for (std::size_t a = 0; a < s.ground_truth.size(); ++a) {
        for (std::size_t b2 = a + 1; b2 < s.ground_truth.size(); ++b2) {
          CHECK(iou(s.ground_truth[a], s.ground_truth[b2]) <= 0.3 + 1e-12);
        }
      }
    }
  }
}

TEST_CASE("class frequencies follow the priors") {
  DomainSpec spec;
  spec.class_palette = {0, 1, 2, 3, 4};
  spec.class_priors = {0.2, 0.2, 0.2, 0.2, 0.2};
  spec.min_objects = 1;
  spec.max_objects = 1;
  Rng rng(123);
  std::map<int, int> hist;
  int total = 0;
  for (int i = 0; i < 1000; ++i) {
    const Scene s = render_scene(spec, rng);
    for (const BBox& b : s.ground_truth) {
      hist[b.class_id]++;
      ++total;
    }
  }
  REQUIRE(total > 900);  // nearly every scene places its object
  const double expected = total / 5.0;
  const double sigma = std::sqrt(total * 0.2 * 0.8);
  for (int c = 0; c < 5; ++c) {
    CHECK(std::abs(hist[c] - expected) <= 3.0 * sigma);
  }
}

TEST_CASE("benchmark structure and class exclusivity") {
  BenchmarkSizes sizes;
  sizes.server_train = 60;
  sizes.server_test = 20;
  sizes.client_train = 12;
  sizes.client_test = 8;
  const Benchmark b = build_benchmark(7, sizes);

  CHECK(b.server_train.size() == 60);
  CHECK(b.server_test.size() == 20);
  REQUIRE(b.client_train.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(b.client_train[static_cast<std::size_t>(i)].size() == 12);
    CHECK(b.client_test[static_cast<std::size_t>(i)].size() == 8);
  }
  CHECK(b.union_test().size() == 20u + 4 * 8);

  // classes 3 and 4 appear only on clients 3 and 4
  auto no_exclusive = [](const std::vector<Scene>& split) {
    for (const Scene& s : split) {
      for (const BBox& box : s.ground_truth) {
        if (box.class_id == kClassTruck || box.class_id == kClassMotorcycle) return false;
      }
    }
    return true;
  };
  CHECK(no_exclusive(b.server_train));
  CHECK(no_exclusive(b.server_test));
  CHECK(no_exclusive(b.client_train[0]));
  CHECK(no_exclusive(b.client_train[1]));
  CHECK(no_exclusive(b.client_test[0]));
  CHECK(no_exclusive(b.client_test[1]));

  // clients 1-2 share a domain spec, clients 3-4 share the other
  CHECK(b.client_specs[0].domain_id == b.client_specs[1].domain_id);
  CHECK(b.client_specs[2].domain_id == b.client_specs[3].domain_id);
  CHECK(b.client_specs[0].domain_id != b.client_specs[2].domain_id);
  CHECK(b.client_specs[0].bg_mean == b.client_specs[1].bg_mean);

  // distinct domains are far apart in background intensity
  const double server = mean_intensity(b.server_spec);
  const double city = mean_intensity(b.client_specs[0]);
  const double night = mean_intensity(b.client_specs[2]);
  CHECK(std::abs(server - city) >= 0.15);
  CHECK(std::abs(server - night) >= 0.15);
  CHECK(std::abs(city - night) >= 0.15);

  // scene ids are globally unique
  std::set<int> ids;
  auto collect = [&](const std::vector<Scene>& split) {
    for (const Scene& s : split) ids.insert(s.id);
  };
  collect(b.server_train);
  collect(b.server_test);
  for (const auto& c : b.client_train) collect(c);
  for (const auto& c : b.client_test) collect(c);
  CHECK(ids.size() == 60u + 20 + 4 * (12 + 8));
}

TEST_CASE("client 3 actually contains the exclusive classes") {
  BenchmarkSizes sizes;
  sizes.server_train = 10;
  sizes.server_test = 5;
  sizes.client_train = 40;
  sizes.client_test = 10;
  const Benchmark b = build_benchmark(7, sizes);
  const std::map<int, int> hist = class_histogram(b.client_train[2]);
  CHECK(hist.count(kClassTruck));
  CHECK(hist.count(kClassMotorcycle));
  CHECK(hist.at(kClassTruck) > 0);
  CHECK(hist.at(kClassMotorcycle) > 0);
}

TEST_CASE("benchmark builds are reproducible and round-trip through disk") {
  BenchmarkSizes sizes;
  sizes.server_train = 20;
  sizes.server_test = 8;
  sizes.client_train = 6;
  sizes.client_test = 4;
  const Benchmark a = build_benchmark(99, sizes);
  const Benchmark b = build_benchmark(99, sizes);
  CHECK(split_checksum(a.server_train) == split_checksum(b.server_train));
  CHECK(split_checksum(a.client_train[3]) == split_checksum(b.client_train[3]));

  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / "feddet_test_dataset";
  std::filesystem::remove_all(dir);
  save_benchmark(a, dir.string());
  const Benchmark loaded = load_benchmark(dir.string());
  CHECK(loaded.seed == a.seed);
  CHECK(split_checksum(loaded.server_train) == split_checksum(a.server_train));
  CHECK(split_checksum(loaded.server_test) == split_checksum(a.server_test));
  for (int i = 0; i < 4; ++i) {
    CHECK(split_checksum(loaded.client_train[static_cast<std::size_t>(i)]) ==
          split_checksum(a.client_train[static_cast<std::size_t>(i)]));
    CHECK(split_checksum(loaded.client_test[static_cast<std::size_t>(i)]) ==
          split_checksum(a.client_test[static_cast<std::size_t>(i)]));
  }
  // loaded pixels are bit-identical, so training on either is identical
  CHECK(loaded.server_train[0].image.pixels == a.server_train[0].image.pixels);
  std::filesystem::remove_all(dir);
}
