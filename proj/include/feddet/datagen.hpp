#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "feddet/boxes.hpp"
#include "feddet/rng.hpp"
#include "feddet/tensor.hpp"

namespace feddet {

inline constexpr int kImageSize = 64;

// Images are stored quantized to 1/255 steps. That keeps the benchmark in
// memory small and makes the on-disk form exactly equal to the in-memory
// one, so a regenerated split and a loaded split train identically.
struct ImageU8 {
  int channels = 3, height = kImageSize, width = kImageSize;
  std::vector<std::uint8_t> pixels;  // row-major [C,H,W]

  Tensor to_tensor() const;
  static ImageU8 quantize(const Tensor& t);
};

struct Scene {
  int id = 0;  // stable image id, unique within a benchmark
  int domain_id = 0;
  ImageU8 image;
  DetectionSet ground_truth;  // confidence fixed at 1
};

// Per-domain rendering parameters: background statistics, which classes may
// appear and with what priors, object counts and sizes.
struct DomainSpec {
  int domain_id = 0;
  std::array<double, 3> bg_mean{0.5, 0.5, 0.5};
  double bg_noise = 0.05;
  std::vector<int> class_palette{0};
  std::vector<double> class_priors{1.0};
  int min_objects = 1, max_objects = 3;
  double min_size = 0.15, max_size = 0.40;
  std::uint64_t texture_seed = 0;
};

// One synthetic scene: noisy background plus textured rectangles placed by
// rejection sampling (pairwise IoU <= 0.3, up to 100 attempts per object;
// on failure the scene simply has fewer objects).
Scene render_scene(const DomainSpec& spec, Rng& rng);

struct BenchmarkSizes {
  int server_train = 2000, server_test = 400;
  int client_train = 150, client_test = 100;
  int num_clients = 4;
};

// The default multi-domain benchmark: one large server domain and four small
// clients. Clients 1-2 share a domain spec, clients 3-4 share another, and
// only clients 3-4 ever contain classes 3 (truck) and 4 (motorcycle).
struct Benchmark {
  std::uint64_t seed = 0;
  BenchmarkSizes sizes;
  DomainSpec server_spec;
  std::vector<DomainSpec> client_specs;  // one per client, index 0 = client 1
  std::vector<Scene> server_train, server_test;
  std::vector<std::vector<Scene>> client_train, client_test;

  // Union testset view: server test plus every client test.
  std::vector<const Scene*> union_test() const;
  std::vector<const Scene*> view(const std::vector<Scene>& split) const;
};

inline constexpr int kNumClasses = 5;
inline constexpr int kClassTruck = 3;
inline constexpr int kClassMotorcycle = 4;

Benchmark build_benchmark(std::uint64_t seed, const BenchmarkSizes& sizes = {});

// Dataset directory: one binary file per split plus manifest.json with
// counts, specs, seed and per-file checksums.
void save_benchmark(const Benchmark& bench, const std::string& dir);
Benchmark load_benchmark(const std::string& dir);

std::uint64_t split_checksum(const std::vector<Scene>& split);

}  // namespace feddet
