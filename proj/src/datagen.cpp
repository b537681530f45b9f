#include "feddet/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "feddet/io.hpp"
#include "feddet/wire.hpp"

namespace feddet {

namespace fs = std::filesystem;
using nlohmann::json;

Tensor ImageU8::to_tensor() const {
  Tensor t({channels, height, width});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    t.data[i] = static_cast<double>(pixels[i]) / 255.0;
  }
  return t;
}

ImageU8 ImageU8::quantize(const Tensor& t) {
  ImageU8 img;
  img.channels = t.size(0);
  img.height = t.size(1);
  img.width = t.size(2);
  img.pixels.resize(t.numel());
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const double v = std::clamp(t.data[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

namespace {

struct Rgb {
  double r, g, b;
};

// Class appearance: a base color plus a simple fill pattern, so a small
// detector can tell classes apart in any domain.
Rgb class_color(int class_id, bool alt) {
  switch (class_id) {
    case 0:
      return {0.85, 0.15, 0.15};  // car: solid red
    case 1:
      return alt ? Rgb{0.88, 0.95, 0.88} : Rgb{0.10, 0.72, 0.20};  // pedestrian: green stripes
    case 2:
      return alt ? Rgb{0.90, 0.92, 0.97} : Rgb{0.15, 0.30, 0.90};  // rider: blue checker
    case 3:
      return alt ? Rgb{0.32, 0.27, 0.05} : Rgb{0.95, 0.85, 0.10};  // truck: yellow stripes
    case 4:
      return alt ? Rgb{0.25, 0.05, 0.25} : Rgb{0.85, 0.18, 0.85};  // motorcycle: magenta dots
    default:
      return {0.5, 0.5, 0.5};
  }
}

bool use_alt_color(int class_id, int dy, int dx) {
  switch (class_id) {
    case 1:
      return (dx / 2) % 2 == 1;  // vertical stripes
    case 2:
      return ((dx / 2) + (dy / 2)) % 2 == 1;  // checkerboard
    case 3:
      return (dy / 2) % 2 == 1;  // horizontal stripes
    case 4:
      return dy % 3 == 1 && dx % 3 == 1;  // sparse dots
    default:
      return false;
  }
}

int sample_class(const DomainSpec& spec, Rng& rng) {
  double u = rng.uniform();
  double total = 0.0;
  for (double p : spec.class_priors) total += p;
  u *= total;
  double acc = 0.0;
  for (std::size_t i = 0; i < spec.class_palette.size(); ++i) {
    acc += spec.class_priors[i];
    if (u < acc) return spec.class_palette[i];
  }
  return spec.class_palette.back();
}

}  // namespace

Scene render_scene(const DomainSpec& spec, Rng& rng) {
  if (spec.class_palette.empty() || spec.class_palette.size() != spec.class_priors.size())
    throw std::invalid_argument("render_scene: bad class palette");
  if (!(spec.min_size > 0.0 && spec.max_size <= 0.5 && spec.min_size <= spec.max_size))
    throw std::invalid_argument("render_scene: size_range must be within (0, 0.5]");

  const int n = kImageSize;
  Tensor img({3, n, n});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        img.at(c, y, x) = std::clamp(
            spec.bg_mean[static_cast<std::size_t>(c)] + rng.uniform(-spec.bg_noise, spec.bg_noise),
            0.0, 1.0);
      }
    }
  }

  const int target =
      spec.min_objects + rng.uniform_index(spec.max_objects - spec.min_objects + 1);
  Scene scene;
  scene.domain_id = spec.domain_id;

  for (int obj = 0; obj < target; ++obj) {
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const double w = rng.uniform(spec.min_size, spec.max_size);
      const double aspect = rng.uniform(0.75, 1.3333333333333333);
      const double h = std::clamp(w * aspect, spec.min_size, spec.max_size);
      // Snap to the pixel grid so the rendered extent equals the recorded box.
      const int pw = std::max(1, static_cast<int>(std::lround(w * n)));
      const int ph = std::max(1, static_cast<int>(std::lround(h * n)));
      if (pw >= n || ph >= n) continue;
      const int px = rng.uniform_index(n - pw + 1);
      const int py = rng.uniform_index(n - ph + 1);
      BBox box;
      box.x1 = static_cast<double>(px) / n;
      box.y1 = static_cast<double>(py) / n;
      box.x2 = static_cast<double>(px + pw) / n;
      box.y2 = static_cast<double>(py + ph) / n;
      box.class_id = sample_class(spec, rng);
      box.confidence = 1.0;
      bool overlaps = false;
      for (const BBox& other : scene.ground_truth) {
        if (iou(box, other) > 0.3) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;

      const double jr = rng.uniform(-0.04, 0.04);
      const double jg = rng.uniform(-0.04, 0.04);
      const double jb = rng.uniform(-0.04, 0.04);
      for (int dy = 0; dy < ph; ++dy) {
        for (int dx = 0; dx < pw; ++dx) {
          const Rgb c = class_color(box.class_id, use_alt_color(box.class_id, dy, dx));
          img.at(0, py + dy, px + dx) = std::clamp(c.r + jr, 0.0, 1.0);
          img.at(1, py + dy, px + dx) = std::clamp(c.g + jg, 0.0, 1.0);
          img.at(2, py + dy, px + dx) = std::clamp(c.b + jb, 0.0, 1.0);
        }
      }
      scene.ground_truth.push_back(box);
      placed = true;
    }
    // Placement failure after 100 rejections: emit the scene with fewer
    // objects rather than failing.
  }

  sort_detections(scene.ground_truth);
  scene.image = ImageU8::quantize(img);
  return scene;
}

namespace {

DomainSpec server_domain() {
  DomainSpec s;
  s.domain_id = 0;
  s.bg_mean = {0.42, 0.46, 0.52};
  s.bg_noise = 0.05;
  s.class_palette = {0, 1, 2};
  s.class_priors = {1.0, 1.0, 1.0};
  s.min_objects = 1;
  s.max_objects = 3;
  return s;
}

DomainSpec city_domain() {  // clients 1 and 2, iid pair
  DomainSpec s = server_domain();
  s.domain_id = 1;
  s.bg_mean = {0.68, 0.66, 0.62};
  return s;
}

DomainSpec night_domain() {  // clients 3 and 4, has the exclusive classes
  DomainSpec s = server_domain();
  s.domain_id = 2;
  s.bg_mean = {0.22, 0.25, 0.28};
  s.class_palette = {0, 1, 2, kClassTruck, kClassMotorcycle};
  s.class_priors = {0.15, 0.15, 0.20, 0.25, 0.25};
  return s;
}

std::vector<Scene> make_split(const DomainSpec& spec, int count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Scene> split;
  split.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) split.push_back(render_scene(spec, rng));
  return split;
}

void assign_ids(std::vector<Scene>& split, int& next_id) {
  for (Scene& s : split) s.id = next_id++;
}

}  // namespace

std::vector<const Scene*> Benchmark::view(const std::vector<Scene>& split) const {
  std::vector<const Scene*> v;
  v.reserve(split.size());
  for (const Scene& s : split) v.push_back(&s);
  return v;
}

std::vector<const Scene*> Benchmark::union_test() const {
  std::vector<const Scene*> v = view(server_test);
  for (const auto& ct : client_test) {
    for (const Scene& s : ct) v.push_back(&s);
  }
  return v;
}

Benchmark build_benchmark(std::uint64_t seed, const BenchmarkSizes& sizes) {
  Benchmark b;
  b.seed = seed;
  b.sizes = sizes;
  b.server_spec = server_domain();
  b.client_specs.clear();
  for (int i = 1; i <= sizes.num_clients; ++i) {
    DomainSpec s = (i <= 2) ? city_domain() : night_domain();
    b.client_specs.push_back(s);
  }

  b.server_train = make_split(b.server_spec, sizes.server_train, seed + 1);
  b.server_test = make_split(b.server_spec, sizes.server_test, seed + 2);
  b.client_train.clear();
  b.client_test.clear();
  for (int i = 0; i < sizes.num_clients; ++i) {
    const DomainSpec& spec = b.client_specs[static_cast<std::size_t>(i)];
    b.client_train.push_back(
        make_split(spec, sizes.client_train, seed + 10 + static_cast<std::uint64_t>(i)));
    b.client_test.push_back(
        make_split(spec, sizes.client_test, seed + 20 + static_cast<std::uint64_t>(i)));
  }

  int next_id = 0;
  assign_ids(b.server_train, next_id);
  assign_ids(b.server_test, next_id);
  for (auto& ct : b.client_train) assign_ids(ct, next_id);
  for (auto& ct : b.client_test) assign_ids(ct, next_id);
  return b;
}

namespace {

constexpr char kSplitMagic[8] = {'F', 'D', 'S', 'P', 'L', 'I', 'T', '1'};

wire::Buffer serialize_split(const std::vector<Scene>& split) {
  wire::Buffer buf;
  wire::put_bytes(buf, kSplitMagic, sizeof(kSplitMagic));
  wire::put_u32(buf, static_cast<std::uint32_t>(split.size()));
  for (const Scene& s : split) {
    wire::put_i32(buf, s.id);
    wire::put_i32(buf, s.domain_id);
    wire::put_i32(buf, s.image.channels);
    wire::put_i32(buf, s.image.height);
    wire::put_i32(buf, s.image.width);
    wire::put_bytes(buf, s.image.pixels.data(), s.image.pixels.size());
    wire::put_u32(buf, static_cast<std::uint32_t>(s.ground_truth.size()));
    for (const BBox& box : s.ground_truth) {
      wire::put_f64(buf, box.x1);
      wire::put_f64(buf, box.y1);
      wire::put_f64(buf, box.x2);
      wire::put_f64(buf, box.y2);
      wire::put_i32(buf, box.class_id);
      wire::put_f64(buf, box.confidence);
      wire::put_i32(buf, box.model_id);
    }
  }
  return buf;
}

std::vector<Scene> parse_split(const wire::Buffer& bytes) {
  wire::Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kSplitMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a dataset split file");
  const std::uint32_t count = r.u32();
  std::vector<Scene> split(count);
  for (Scene& s : split) {
    s.id = r.i32();
    s.domain_id = r.i32();
    s.image.channels = r.i32();
    s.image.height = r.i32();
    s.image.width = r.i32();
    s.image.pixels.resize(static_cast<std::size_t>(s.image.channels) * s.image.height *
                          s.image.width);
    r.bytes(s.image.pixels.data(), s.image.pixels.size());
    const std::uint32_t nboxes = r.u32();
    s.ground_truth.resize(nboxes);
    for (BBox& box : s.ground_truth) {
      box.x1 = r.f64();
      box.y1 = r.f64();
      box.x2 = r.f64();
      box.y2 = r.f64();
      box.class_id = r.i32();
      box.confidence = r.f64();
      box.model_id = r.i32();
    }
  }
  if (!r.done()) throw std::runtime_error("trailing bytes in dataset split file");
  return split;
}

json spec_to_json(const DomainSpec& s) {
  return json{{"domain_id", s.domain_id},
              {"bg_mean", s.bg_mean},
              {"bg_noise", s.bg_noise},
              {"class_palette", s.class_palette},
              {"class_priors", s.class_priors},
              {"min_objects", s.min_objects},
              {"max_objects", s.max_objects},
              {"min_size", s.min_size},
              {"max_size", s.max_size},
              {"texture_seed", s.texture_seed}};
}

DomainSpec spec_from_json(const json& j) {
  DomainSpec s;
  s.domain_id = j.at("domain_id").get<int>();
  s.bg_mean = j.at("bg_mean").get<std::array<double, 3>>();
  s.bg_noise = j.at("bg_noise").get<double>();
  s.class_palette = j.at("class_palette").get<std::vector<int>>();
  s.class_priors = j.at("class_priors").get<std::vector<double>>();
  s.min_objects = j.at("min_objects").get<int>();
  s.max_objects = j.at("max_objects").get<int>();
  s.min_size = j.at("min_size").get<double>();
  s.max_size = j.at("max_size").get<double>();
  s.texture_seed = j.at("texture_seed").get<std::uint64_t>();
  return s;
}

std::string split_file_name(const std::string& split) { return split + ".bin"; }

}  // namespace

std::uint64_t split_checksum(const std::vector<Scene>& split) {
  const wire::Buffer buf = serialize_split(split);
  return fnv1a(buf.data(), buf.size());
}

void save_benchmark(const Benchmark& bench, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["seed"] = bench.seed;
  manifest["sizes"] = {{"server_train", bench.sizes.server_train},
                       {"server_test", bench.sizes.server_test},
                       {"client_train", bench.sizes.client_train},
                       {"client_test", bench.sizes.client_test},
                       {"num_clients", bench.sizes.num_clients}};
  manifest["server_spec"] = spec_to_json(bench.server_spec);
  json client_specs = json::array();
  for (const DomainSpec& s : bench.client_specs) client_specs.push_back(spec_to_json(s));
  manifest["client_specs"] = client_specs;

  json files;
  auto dump = [&](const std::string& name, const std::vector<Scene>& split) {
    const wire::Buffer buf = serialize_split(split);
    atomic_write_file(fs::path(dir) / split_file_name(name), buf);
    files[name] = {{"count", split.size()}, {"checksum", fnv1a(buf.data(), buf.size())}};
  };
  dump("server_train", bench.server_train);
  dump("server_test", bench.server_test);
  for (int i = 0; i < bench.sizes.num_clients; ++i) {
    dump("client_" + std::to_string(i + 1) + "_train",
         bench.client_train[static_cast<std::size_t>(i)]);
    dump("client_" + std::to_string(i + 1) + "_test",
         bench.client_test[static_cast<std::size_t>(i)]);
  }
  manifest["files"] = files;
  atomic_write_text(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Benchmark load_benchmark(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("missing manifest.json in " + dir);
  json manifest = json::parse(in);

  Benchmark b;
  b.seed = manifest.at("seed").get<std::uint64_t>();
  const json& sz = manifest.at("sizes");
  b.sizes.server_train = sz.at("server_train").get<int>();
  b.sizes.server_test = sz.at("server_test").get<int>();
  b.sizes.client_train = sz.at("client_train").get<int>();
  b.sizes.client_test = sz.at("client_test").get<int>();
  b.sizes.num_clients = sz.at("num_clients").get<int>();
  b.server_spec = spec_from_json(manifest.at("server_spec"));
  for (const json& j : manifest.at("client_specs")) b.client_specs.push_back(spec_from_json(j));

  auto load_split = [&](const std::string& name) {
    const wire::Buffer buf = read_file_bytes(fs::path(dir) / split_file_name(name));
    const std::uint64_t want = manifest.at("files").at(name).at("checksum").get<std::uint64_t>();
    if (fnv1a(buf.data(), buf.size()) != want)
      throw std::runtime_error("checksum mismatch for split " + name);
    return parse_split(buf);
  };
  b.server_train = load_split("server_train");
  b.server_test = load_split("server_test");
  for (int i = 0; i < b.sizes.num_clients; ++i) {
    b.client_train.push_back(load_split("client_" + std::to_string(i + 1) + "_train"));
    b.client_test.push_back(load_split("client_" + std::to_string(i + 1) + "_test"));
  }
  return b;
}

}  // namespace feddet
