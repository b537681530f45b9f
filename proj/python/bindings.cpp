#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <memory>

#include "feddet/boxes.hpp"
#include "feddet/checkpoint.hpp"
#include "feddet/datagen.hpp"
#include "feddet/detector.hpp"
#include "feddet/distill.hpp"
#include "feddet/federation.hpp"
#include "feddet/metrics.hpp"
#include "feddet/nn.hpp"

namespace py = pybind11;
using namespace feddet;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  Tensor t;
  t.shape.assign(a.ndim(), 0);
  for (py::ssize_t d = 0; d < a.ndim(); ++d) t.shape[static_cast<std::size_t>(d)] = static_cast<int>(a.shape(d));
  t.data.assign(a.data(), a.data() + a.size());
  return t;
}

py::array_t<double> array_from_tensor(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
  py::array_t<double> a(shape);
  std::memcpy(a.mutable_data(), t.data.data(), t.data.size() * sizeof(double));
  return a;
}

TrainConfig train_config(int epochs, double lr, int batch_size, int threads) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.lr = lr;
  tc.batch_size = batch_size;
  tc.threads = threads;
  return tc;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "feddet: federated object detection simulator (C++ core)";

  py::class_<BBox>(m, "BBox")
      .def(py::init([](double x1, double y1, double x2, double y2, int class_id,
                       double confidence, int model_id) {
             return BBox{x1, y1, x2, y2, class_id, confidence, model_id};
           }),
           py::arg("x1"), py::arg("y1"), py::arg("x2"), py::arg("y2"), py::arg("class_id") = 0,
           py::arg("confidence") = 1.0, py::arg("model_id") = 0)
      .def_readwrite("x1", &BBox::x1)
      .def_readwrite("y1", &BBox::y1)
      .def_readwrite("x2", &BBox::x2)
      .def_readwrite("y2", &BBox::y2)
      .def_readwrite("class_id", &BBox::class_id)
      .def_readwrite("confidence", &BBox::confidence)
      .def_readwrite("model_id", &BBox::model_id)
      .def("__repr__", [](const BBox& b) {
        char buf[160];
        std::snprintf(buf, sizeof(buf),
                      "BBox(%.4f, %.4f, %.4f, %.4f, class=%d, conf=%.4f, model=%d)", b.x1, b.y1,
                      b.x2, b.y2, b.class_id, b.confidence, b.model_id);
        return std::string(buf);
      });

  m.def("iou", &iou, py::arg("a"), py::arg("b"));
  m.def("nms", &nms, py::arg("boxes"), py::arg("iou_threshold") = 0.5);
  m.def("soft_nms", &soft_nms, py::arg("boxes"), py::arg("sigma") = 0.5,
        py::arg("score_floor") = 0.001);
  m.def("nwm", &nwm, py::arg("boxes"), py::arg("iou_threshold") = 0.5);
  m.def("wbf", &wbf, py::arg("boxes"), py::arg("iou_threshold") = 0.55,
        py::arg("num_models") = 2);

  m.def(
      "spatial_softmax",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& x, double t) {
        return array_from_tensor(spatial_softmax(tensor_from_array(x), t));
      },
      py::arg("features"), py::arg("temperature") = 4.0);
  m.def(
      "kl_channelwise",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& s,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& t,
         double temp) { return kl_channelwise(tensor_from_array(s), tensor_from_array(t), temp); },
      py::arg("student"), py::arg("teacher"), py::arg("temperature") = 4.0);
  m.def(
      "l2_loss",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& a,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& b) {
        return l2_loss(tensor_from_array(a), tensor_from_array(b));
      },
      py::arg("a"), py::arg("b"));

  py::class_<Scene>(m, "Scene")
      .def_readonly("id", &Scene::id)
      .def_readonly("domain_id", &Scene::domain_id)
      .def_property_readonly("image",
                             [](const Scene& s) { return array_from_tensor(s.image.to_tensor()); })
      .def_readonly("ground_truth", &Scene::ground_truth);

  py::class_<Benchmark, std::shared_ptr<Benchmark>>(m, "Benchmark")
      .def_readonly("seed", &Benchmark::seed)
      .def_property_readonly("num_clients",
                             [](const Benchmark& b) { return b.sizes.num_clients; })
      .def_readonly("server_train", &Benchmark::server_train)
      .def_readonly("server_test", &Benchmark::server_test)
      .def_readonly("client_train", &Benchmark::client_train)
      .def_readonly("client_test", &Benchmark::client_test);

  m.def(
      "build_benchmark",
      [](std::uint64_t seed, int server_train, int server_test, int client_train,
         int client_test, int num_clients) {
        BenchmarkSizes sizes;
        sizes.server_train = server_train;
        sizes.server_test = server_test;
        sizes.client_train = client_train;
        sizes.client_test = client_test;
        sizes.num_clients = num_clients;
        return std::make_shared<Benchmark>(build_benchmark(seed, sizes));
      },
      py::arg("seed") = 7, py::arg("server_train") = 2000, py::arg("server_test") = 400,
      py::arg("client_train") = 150, py::arg("client_test") = 100, py::arg("num_clients") = 4);
  m.def("save_benchmark",
        [](const std::shared_ptr<Benchmark>& b, const std::string& dir) { save_benchmark(*b, dir); },
        py::arg("benchmark"), py::arg("dir"));
  m.def("load_benchmark",
        [](const std::string& dir) { return std::make_shared<Benchmark>(load_benchmark(dir)); },
        py::arg("dir"));

  py::class_<DetectorConfig>(m, "DetectorConfig")
      .def(py::init<>())
      .def_readwrite("num_classes", &DetectorConfig::num_classes)
      .def_readwrite("anchors_per_cell", &DetectorConfig::anchors_per_cell)
      .def_readwrite("backbone_channels", &DetectorConfig::backbone_channels)
      .def_readwrite("anchor_sizes", &DetectorConfig::anchor_sizes);

  py::class_<DetectorModel>(m, "DetectorModel")
      .def_static("random_init", &DetectorModel::random_init, py::arg("config") = DetectorConfig{},
                  py::arg("seed") = 0)
      .def_property_readonly("checksum", &DetectorModel::checksum)
      .def_property_readonly("num_parameters", &DetectorModel::num_scalars)
      .def(
          "forward",
          [](const DetectorModel& model,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
            const ModelOutput out = forward(model, tensor_from_array(image));
            py::dict d;
            py::list features, cls_maps, reg_maps;
            for (const Tensor& t : out.features) features.append(array_from_tensor(t));
            for (const Tensor& t : out.cls_maps) cls_maps.append(array_from_tensor(t));
            for (const Tensor& t : out.reg_maps) reg_maps.append(array_from_tensor(t));
            d["features"] = features;
            d["cls_maps"] = cls_maps;
            d["reg_maps"] = reg_maps;
            return d;
          },
          py::arg("image"))
      .def(
          "predict",
          [](const DetectorModel& model,
             const py::array_t<double, py::array::c_style | py::array::forcecast>& image,
             double score_threshold, double nms_threshold) {
            return predict(model, tensor_from_array(image), score_threshold, nms_threshold);
          },
          py::arg("image"), py::arg("score_threshold") = 0.05, py::arg("nms_threshold") = 0.5)
      .def(
          "train_local",
          [](const DetectorModel& model, const std::vector<Scene>& dataset, int epochs, double lr,
             int batch_size, std::uint64_t seed, int threads) {
            return train_local(model, dataset, train_config(epochs, lr, batch_size, threads), seed);
          },
          py::arg("dataset"), py::arg("epochs") = 12, py::arg("lr") = 0.01,
          py::arg("batch_size") = 8, py::arg("seed") = 0, py::arg("threads") = 1)
      .def("save", [](const DetectorModel& m2, const std::string& path) { save_model(path, m2); },
           py::arg("path"));
  m.def("load_model", [](const std::string& path) { return load_model(path); }, py::arg("path"));

  m.def("init_student", &init_student, py::arg("prev_global"), py::arg("teachers"));
  m.def("fedavg_aggregate", &fedavg_aggregate, py::arg("models"), py::arg("weights"));
  m.def(
      "distill_aggregate",
      [](const DetectorModel& prev_global, const std::vector<DetectorModel>& teachers,
         const std::vector<Scene>& server_data, double lambda_fea, double lambda_cls,
         double lambda_reg, double temperature, int epochs, double lr, int batch_size,
         std::uint64_t seed, int threads) {
        DistillConfig cfg;
        cfg.lambda_fea = lambda_fea;
        cfg.lambda_cls = lambda_cls;
        cfg.lambda_reg = lambda_reg;
        cfg.temperature = temperature;
        cfg.epochs = epochs;
        cfg.lr = lr;
        cfg.batch_size = batch_size;
        cfg.threads = threads;
        return distill_aggregate(prev_global, teachers, server_data, cfg, seed);
      },
      py::arg("prev_global"), py::arg("teachers"), py::arg("server_data"),
      py::arg("lambda_fea") = 1.0, py::arg("lambda_cls") = 1.0, py::arg("lambda_reg") = 1.0,
      py::arg("temperature") = 4.0, py::arg("epochs") = 5, py::arg("lr") = 0.01,
      py::arg("batch_size") = 8, py::arg("seed") = 0, py::arg("threads") = 1);

  py::class_<FederationState>(m, "FederationState")
      .def_readonly("round", &FederationState::round)
      .def_readonly("master_seed", &FederationState::master_seed)
      .def_readonly("global_model", &FederationState::global_model)
      .def_readonly("base_model", &FederationState::base_model)
      .def("client_model",
           [](const FederationState& st, int id) { return st.client_models.at(id); },
           py::arg("client_id"))
      .def_property_readonly("num_messages",
                             [](const FederationState& st) { return st.message_log.size(); });

  m.def("init_federation", &init_federation, py::arg("base"), py::arg("master_seed"));
  m.def(
      "run_round",
      [](const FederationState& state, const std::shared_ptr<Benchmark>& bench,
         int client_epochs, double client_lr, int distill_epochs, double distill_lr,
         double lambda_fea, double lambda_cls, double lambda_reg, double temperature,
         int batch_size, const std::string& aggregator, int threads) {
        RoundConfig rc;
        rc.client_train = train_config(client_epochs, client_lr, batch_size, threads);
        rc.distill.epochs = distill_epochs;
        rc.distill.lr = distill_lr;
        rc.distill.lambda_fea = lambda_fea;
        rc.distill.lambda_cls = lambda_cls;
        rc.distill.lambda_reg = lambda_reg;
        rc.distill.temperature = temperature;
        rc.distill.batch_size = batch_size;
        rc.distill.threads = threads;
        rc.aggregator = aggregator == "fedavg" ? Aggregator::kFedAvg : Aggregator::kDistill;
        return run_round(state, *bench, rc);
      },
      py::arg("state"), py::arg("benchmark"), py::arg("client_epochs") = 12,
      py::arg("client_lr") = 0.01, py::arg("distill_epochs") = 5, py::arg("distill_lr") = 0.01,
      py::arg("lambda_fea") = 1.0, py::arg("lambda_cls") = 1.0, py::arg("lambda_reg") = 1.0,
      py::arg("temperature") = 4.0, py::arg("batch_size") = 8, py::arg("aggregator") = "distill",
      py::arg("threads") = 1);

  py::class_<EnsembleModel>(m, "EnsembleModel")
      .def_readonly("global_model", &EnsembleModel::global)
      .def_readonly("personal_model", &EnsembleModel::personal);
  m.def(
      "make_ensemble",
      [](const DetectorModel& global, const DetectorModel& personal, double wbf_iou,
         double score_threshold, double nms_threshold) {
        FusionConfig f;
        f.wbf_iou = wbf_iou;
        f.score_threshold = score_threshold;
        f.nms_threshold = nms_threshold;
        return EnsembleModel{global, personal, f};
      },
      py::arg("global_model"), py::arg("personal_model"), py::arg("wbf_iou") = 0.55,
      py::arg("score_threshold") = 0.05, py::arg("nms_threshold") = 0.5);
  m.def(
      "ensemble_step",
      [](const FederationState& state, int client_id, const std::shared_ptr<Benchmark>& bench,
         int epochs, double lr, int batch_size, int threads) {
        return ensemble_step(state, client_id, *bench,
                             train_config(epochs, lr, batch_size, threads));
      },
      py::arg("state"), py::arg("client_id"), py::arg("benchmark"), py::arg("epochs") = 12,
      py::arg("lr") = 0.01, py::arg("batch_size") = 8, py::arg("threads") = 1);
  m.def(
      "ensemble_predict",
      [](const EnsembleModel& e,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& image) {
        return ensemble_predict(e, tensor_from_array(image));
      },
      py::arg("ensemble"), py::arg("image"));

  m.def(
      "evaluate_detections",
      [](const std::vector<std::tuple<int, DetectionSet, DetectionSet>>& images,
         double iou_threshold) {
        std::vector<ImageEval> evals;
        for (const auto& [id, preds, gt] : images) evals.push_back({id, preds, gt});
        const EvalResult r = evaluate_detections(evals, iou_threshold);
        py::dict d;
        d["map"] = r.map_value;
        py::dict per_class;
        for (const auto& [c, ap] : r.per_class_ap) per_class[py::int_(c)] = ap;
        d["per_class_ap"] = per_class;
        return d;
      },
      py::arg("images"), py::arg("iou_threshold") = 0.5);
  m.def(
      "evaluate_split",
      [](const DetectorModel& model, const std::vector<Scene>& split, double score_threshold,
         double nms_threshold, double iou_threshold, int threads) {
        std::vector<const Scene*> view;
        for (const Scene& s : split) view.push_back(&s);
        return evaluate_model(model_predictor(model, score_threshold, nms_threshold), view,
                              iou_threshold, threads)
            .map_value;
      },
      py::arg("model"), py::arg("split"), py::arg("score_threshold") = 0.05,
      py::arg("nms_threshold") = 0.5, py::arg("iou_threshold") = 0.5, py::arg("threads") = 1);
  m.def(
      "combine_indicators",
      [](const std::vector<double>& r_s, const std::vector<double>& r_p,
         const std::vector<double>& r_u, const std::vector<double>& alphas) {
        const FedIndicators ind = combine_indicators(r_s, r_p, r_u, alphas);
        py::dict d;
        d["A_s"] = ind.a_s;
        d["A_p"] = ind.a_p;
        d["A_u"] = ind.a_u;
        py::dict acom;
        for (const auto& [a, v] : ind.a_com) acom[py::float_(a)] = v;
        d["A_com"] = acom;
        return d;
      },
      py::arg("r_s"), py::arg("r_p"), py::arg("r_u"),
      py::arg("alphas") = std::vector<double>{0.1, 0.3, 0.5});
}
