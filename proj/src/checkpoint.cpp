#include "feddet/checkpoint.hpp"

#include <cstring>
#include <stdexcept>

#include <json.hpp>

#include "feddet/io.hpp"
#include "feddet/wire.hpp"

namespace feddet {

using nlohmann::json;

namespace {

constexpr char kModelMagic[8] = {'F', 'D', 'C', 'K', 'P', 'T', '0', '1'};

}  // namespace

std::string config_to_json(const DetectorConfig& cfg) {
  json j{{"num_classes", cfg.num_classes},
         {"anchors_per_cell", cfg.anchors_per_cell},
         {"backbone_channels", cfg.backbone_channels},
         {"input_channels", cfg.input_channels},
         {"anchor_sizes", cfg.anchor_sizes},
         {"pos_iou", cfg.pos_iou},
         {"neg_iou", cfg.neg_iou},
         {"force_match_best_anchor", cfg.force_match_best_anchor},
         {"focal_gamma", cfg.focal_gamma},
         {"focal_alpha", cfg.focal_alpha},
         {"smooth_l1_beta", cfg.smooth_l1_beta},
         {"cls_prior", cfg.cls_prior}};
  return j.dump();
}

DetectorConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  DetectorConfig cfg;
  cfg.num_classes = j.at("num_classes").get<int>();
  cfg.anchors_per_cell = j.at("anchors_per_cell").get<int>();
  cfg.backbone_channels = j.at("backbone_channels").get<int>();
  cfg.input_channels = j.at("input_channels").get<int>();
  cfg.anchor_sizes = j.at("anchor_sizes").get<std::vector<std::vector<double>>>();
  cfg.pos_iou = j.at("pos_iou").get<double>();
  cfg.neg_iou = j.at("neg_iou").get<double>();
  cfg.force_match_best_anchor = j.at("force_match_best_anchor").get<bool>();
  cfg.focal_gamma = j.at("focal_gamma").get<double>();
  cfg.focal_alpha = j.at("focal_alpha").get<double>();
  cfg.smooth_l1_beta = j.at("smooth_l1_beta").get<double>();
  cfg.cls_prior = j.at("cls_prior").get<double>();
  return cfg;
}

std::vector<std::uint8_t> serialize_model(const DetectorModel& model) {
  wire::Buffer buf;
  wire::put_bytes(buf, kModelMagic, sizeof(kModelMagic));
  wire::put_string(buf, config_to_json(model.config));
  const std::vector<const Parameter*> params = model.parameters();
  wire::put_u32(buf, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    wire::put_string(buf, p->name);
    wire::put_u32(buf, static_cast<std::uint32_t>(p->value.shape.size()));
    for (int d : p->value.shape) wire::put_i32(buf, d);
    wire::put_bytes(buf, p->value.data.data(), p->value.data.size() * sizeof(double));
  }
  return buf;
}

DetectorModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
  wire::Reader r(bytes);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw std::runtime_error("not a model checkpoint (bad magic)");

  const DetectorConfig cfg = config_from_json(r.string());
  // Build the expected parameter set for this architecture, then overwrite
  // values so shapes are validated against the descriptor.
  DetectorModel model = DetectorModel::random_init(cfg, 0);
  std::vector<Parameter*> params = model.parameters();

  const std::uint32_t count = r.u32();
  if (count != params.size()) throw std::runtime_error("checkpoint parameter count mismatch");
  for (Parameter* p : params) {
    const std::string name = r.string();
    if (name != p->name) throw std::runtime_error("checkpoint parameter order mismatch: " + name);
    const std::uint32_t ndim = r.u32();
    std::vector<int> shape(ndim);
    for (std::uint32_t d = 0; d < ndim; ++d) shape[d] = r.i32();
    if (shape != p->value.shape)
      throw std::runtime_error("checkpoint shape mismatch for " + name);
    r.bytes(p->value.data.data(), p->value.data.size() * sizeof(double));
    p->zero_grad();
  }
  if (!r.done()) throw std::runtime_error("trailing bytes in checkpoint");
  return model;
}

void save_model(const std::filesystem::path& path, const DetectorModel& model) {
  atomic_write_file(path, serialize_model(model));
}

DetectorModel load_model(const std::filesystem::path& path) {
  try {
    return deserialize_model(read_file_bytes(path));
  } catch (const std::exception& e) {
    throw std::runtime_error("failed to load checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace feddet
