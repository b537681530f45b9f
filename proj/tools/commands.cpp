#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "feddet/checkpoint.hpp"
#include "feddet/datagen.hpp"
#include "feddet/federation.hpp"
#include "feddet/io.hpp"
#include "feddet/metrics.hpp"
#include "feddet/svg.hpp"

namespace feddet::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json default_config() {
  return json{
      {"out", "out"},
      {"threads", 1},
      {"data",
       {{"dir", "data"},
        {"seed", 7},
        {"server_train", 2000},
        {"server_test", 400},
        {"client_train", 150},
        {"client_test", 100},
        {"num_clients", 4}}},
      {"base", {{"epochs", 8}, {"lr", 0.01}, {"batch_size", 8}, {"seed", 1}, {"resume", false}}},
      {"client_train", {{"epochs", 12}, {"lr", 0.01}, {"batch_size", 8}}},
      {"distill",
       {{"epochs", 5},
        {"lr", 0.01},
        {"batch_size", 8},
        {"lambda_fea", 1.0},
        {"lambda_cls", 1.0},
        {"lambda_reg", 1.0},
        {"temperature", 4.0}}},
      {"federation",
       {{"rounds", 3},
        {"master_seed", 1},
        {"aggregator", "distill"},
        {"client_fraction", 1.0},
        {"eval_each_round", true},
        {"resume", false}}},
      {"predict", {{"score_threshold", 0.05}, {"nms_threshold", 0.5}}},
      {"fusion",
       {{"wbf_iou", 0.55},
        {"num_models", 2},
        {"nms_iou", 0.5},
        {"soft_sigma", 0.5},
        {"soft_floor", 0.001}}},
      {"eval", {{"alphas", {0.1, 0.3, 0.5}}, {"map_iou", 0.5}}},
      {"run_dir", ""},
      {"base_ckpt", ""},
      {"fuse",
       {{"input", ""}, {"output", ""}, {"method", "wbf"}}},
  };
}

namespace {

fs::path resolve_out(const json& cfg, const std::string& key = "out") {
  fs::path p = cfg.at(key).get<std::string>();
  if (p.is_relative()) {
    if (const char* root = std::getenv("FEDDET_OUTPUT_ROOT")) p = fs::path(root) / p;
  }
  return p;
}

void write_resolved_config(const fs::path& dir, const json& cfg) {
  atomic_write_text(dir / "resolved_config.json", cfg.dump(2) + "\n");
}

BenchmarkSizes sizes_from(const json& d) {
  BenchmarkSizes s;
  s.server_train = d.at("server_train").get<int>();
  s.server_test = d.at("server_test").get<int>();
  s.client_train = d.at("client_train").get<int>();
  s.client_test = d.at("client_test").get<int>();
  s.num_clients = d.at("num_clients").get<int>();
  return s;
}

TrainConfig train_from(const json& t, int threads) {
  TrainConfig c;
  c.epochs = t.at("epochs").get<int>();
  c.lr = t.at("lr").get<double>();
  c.batch_size = t.at("batch_size").get<int>();
  c.threads = threads;
  return c;
}

DistillConfig distill_from(const json& d, int threads) {
  DistillConfig c;
  c.epochs = d.at("epochs").get<int>();
  c.lr = d.at("lr").get<double>();
  c.batch_size = d.at("batch_size").get<int>();
  c.lambda_fea = d.at("lambda_fea").get<double>();
  c.lambda_cls = d.at("lambda_cls").get<double>();
  c.lambda_reg = d.at("lambda_reg").get<double>();
  c.temperature = d.at("temperature").get<double>();
  c.threads = threads;
  return c;
}

FusionConfig fusion_from(const json& cfg) {
  FusionConfig f;
  f.wbf_iou = cfg.at("fusion").at("wbf_iou").get<double>();
  f.num_models = cfg.at("fusion").at("num_models").get<int>();
  f.score_threshold = cfg.at("predict").at("score_threshold").get<double>();
  f.nms_threshold = cfg.at("predict").at("nms_threshold").get<double>();
  return f;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string alpha_label(double a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "A_com@%g", a);
  return buf;
}

std::string indicators_csv_header(const std::vector<double>& alphas) {
  std::string h = "round,column,A_s,A_p,A_u";
  for (double a : alphas) h += "," + alpha_label(a);
  return h + "\n";
}

std::string indicators_csv_row(int round, const std::string& column, const FedIndicators& ind,
                               const std::vector<double>& alphas) {
  std::string r = std::to_string(round) + "," + column + "," + fmt(ind.a_s) + "," +
                  fmt(ind.a_p) + "," + fmt(ind.a_u);
  for (double a : alphas) r += "," + fmt(ind.a_com.at(a));
  return r + "\n";
}

json indicators_to_json(const FedIndicators& ind) {
  json j{{"A_s", ind.a_s}, {"A_p", ind.a_p}, {"A_u", ind.a_u},
         {"r_s", ind.r_s}, {"r_p", ind.r_p}, {"r_u", ind.r_u}};
  for (const auto& [a, v] : ind.a_com) j["A_com"][alpha_label(a).substr(6)] = v;
  return j;
}

}  // namespace

int cmd_gen_data(const json& cfg) {
  const json& d = cfg.at("data");
  const fs::path dir = d.at("dir").get<std::string>();
  DirLock lock(dir);
  const Benchmark bench =
      build_benchmark(d.at("seed").get<std::uint64_t>(), sizes_from(d));
  save_benchmark(bench, dir.string());
  write_resolved_config(dir, cfg);
  std::cout << "dataset written to " << dir.string() << "\n";
  return 0;
}

int cmd_train_base(const json& cfg) {
  const fs::path out = resolve_out(cfg);
  DirLock lock(out);
  const Benchmark bench = load_benchmark(cfg.at("data").at("dir").get<std::string>());
  const json& b = cfg.at("base");
  const std::uint64_t seed = b.at("seed").get<std::uint64_t>();
  TrainConfig tc = train_from(b, cfg.at("threads").get<int>());

  int start_epoch = 0;
  DetectorModel model = DetectorModel::random_init(DetectorConfig{}, seed);
  std::string log_csv = "epoch,loss\n";
  if (b.at("resume").get<bool>()) {
    for (int e = tc.epochs; e >= 1; --e) {
      const fs::path ck = out / ("epoch_" + std::to_string(e) + ".ckpt");
      if (fs::exists(ck)) {
        model = load_model(ck);
        start_epoch = e;
        break;
      }
    }
    if (fs::exists(out / "train_log.csv") && start_epoch > 0) {
      log_csv = read_file_text(out / "train_log.csv");
    }
  }

  // One-epoch steps with per-epoch derived seeds, so an interrupted run can
  // resume exactly.
  TrainConfig step = tc;
  step.epochs = 1;
  for (int e = start_epoch; e < tc.epochs; ++e) {
    std::vector<double> losses;
    model = train_local(model, bench.server_train, step, seed + 1 + static_cast<std::uint64_t>(e),
                        &losses);
    log_csv += std::to_string(e + 1) + "," + fmt(losses.at(0)) + "\n";
    save_model(out / ("epoch_" + std::to_string(e + 1) + ".ckpt"), model);
    atomic_write_text(out / "train_log.csv", log_csv);
    std::cout << "epoch " << (e + 1) << "/" << tc.epochs << " loss " << losses.at(0) << "\n";
  }
  save_model(out / "base.ckpt", model);
  write_resolved_config(out, cfg);
  std::cout << "base checkpoint written to " << (out / "base.ckpt").string() << "\n";
  return 0;
}

int cmd_fed_run(const json& cfg) {
  const fs::path out = resolve_out(cfg);
  DirLock lock(out);
  const Benchmark bench = load_benchmark(cfg.at("data").at("dir").get<std::string>());
  const std::string base_path = cfg.at("base_ckpt").get<std::string>();
  if (base_path.empty()) throw std::runtime_error("fed-run: --base checkpoint is required");
  const DetectorModel base = load_model(base_path);

  const json& f = cfg.at("federation");
  const int threads = cfg.at("threads").get<int>();
  FederationConfig fc;
  fc.rounds = f.at("rounds").get<int>();
  fc.master_seed = f.at("master_seed").get<std::uint64_t>();
  fc.round.client_train = train_from(cfg.at("client_train"), threads);
  fc.round.distill = distill_from(cfg.at("distill"), threads);
  fc.round.client_fraction = f.at("client_fraction").get<double>();
  const std::string agg = f.at("aggregator").get<std::string>();
  if (agg == "distill") {
    fc.round.aggregator = Aggregator::kDistill;
  } else if (agg == "fedavg") {
    fc.round.aggregator = Aggregator::kFedAvg;
  } else {
    throw std::runtime_error("unknown aggregator: " + agg);
  }
  fc.ensemble_train = fc.round.client_train;
  fc.fusion = fusion_from(cfg);
  fc.eval.alphas = cfg.at("eval").at("alphas").get<std::vector<double>>();
  fc.eval.map_iou = cfg.at("eval").at("map_iou").get<double>();
  fc.eval.threads = threads;
  fc.eval_each_round = f.at("eval_each_round").get<bool>();
  fc.out_dir = out;
  fc.resume = f.at("resume").get<bool>();

  const FederationResult result = run_federation(base, bench, fc);

  std::string dlog = "round,epoch,L_det,L_fea,L_cls,L_reg,total\n";
  for (const DistillEpochLog& row : result.distill_log) {
    dlog += std::to_string(row.round) + "," + std::to_string(row.epoch) + "," + fmt(row.l_det) +
            "," + fmt(row.l_fea) + "," + fmt(row.l_cls) + "," + fmt(row.l_reg) + "," +
            fmt(row.total) + "\n";
  }
  atomic_write_text(out / "distill_log.csv", dlog);

  std::string rlog = indicators_csv_header(fc.eval.alphas);
  for (const RoundIndicatorRow& row : result.round_log) {
    rlog += indicators_csv_row(row.round, row.column, row.indicators, fc.eval.alphas);
  }
  atomic_write_text(out / "rounds.csv", rlog);
  write_resolved_config(out, cfg);
  std::cout << "federation run (" << agg << ", " << fc.rounds << " rounds) written to "
            << out.string() << "\n";
  return 0;
}

namespace {

struct ReportColumn {
  std::string label;
  FedIndicators indicators;
};

int detect_rounds(const fs::path& run_dir) {
  int rounds = 0;
  while (fs::exists(run_dir / ("round_" + std::to_string(rounds + 1)) / "global.ckpt")) ++rounds;
  return rounds;
}

std::vector<DetectorModel> load_round_clients(const fs::path& run_dir, int round,
                                              int num_clients) {
  std::vector<DetectorModel> models;
  for (int i = 1; i <= num_clients; ++i) {
    models.push_back(load_model(run_dir / ("round_" + std::to_string(round)) /
                                ("client_" + std::to_string(i) + ".ckpt")));
  }
  return models;
}

std::vector<DetectorModel> load_ensemble_clients(const fs::path& run_dir, int num_clients) {
  std::vector<DetectorModel> models;
  for (int i = 1; i <= num_clients; ++i) {
    models.push_back(load_model(run_dir / "ensemble" / ("client_" + std::to_string(i) + ".ckpt")));
  }
  return models;
}

}  // namespace

int cmd_evaluate(const json& cfg) {
  const fs::path out = resolve_out(cfg);
  DirLock lock(out);
  const Benchmark bench = load_benchmark(cfg.at("data").at("dir").get<std::string>());
  const fs::path run_dir = cfg.at("run_dir").get<std::string>();
  if (run_dir.empty()) throw std::runtime_error("evaluate: --run directory is required");

  const std::vector<double> alphas = cfg.at("eval").at("alphas").get<std::vector<double>>();
  const double map_iou = cfg.at("eval").at("map_iou").get<double>();
  const int threads = cfg.at("threads").get<int>();
  const double score = cfg.at("predict").at("score_threshold").get<double>();
  const double nms_thr = cfg.at("predict").at("nms_threshold").get<double>();
  const FusionConfig fusion = fusion_from(cfg);
  const int n = bench.sizes.num_clients;

  auto shared = [&](const DetectorModel& m) {
    std::vector<Predictor> p(static_cast<std::size_t>(n), model_predictor(m, score, nms_thr));
    return compute_indicators(p, bench, alphas, map_iou, threads);
  };
  auto per_client = [&](const std::vector<DetectorModel>& models) {
    std::vector<Predictor> p;
    for (const DetectorModel& m : models) p.push_back(model_predictor(m, score, nms_thr));
    return compute_indicators(p, bench, alphas, map_iou, threads);
  };
  auto ensembles = [&](const DetectorModel& global, const std::vector<DetectorModel>& personals) {
    std::vector<Predictor> p;
    for (const DetectorModel& m : personals) {
      p.push_back(ensemble_predictor(EnsembleModel{global, m, fusion}));
    }
    return compute_indicators(p, bench, alphas, map_iou, threads);
  };

  const DetectorModel base = load_model(run_dir / "base.ckpt");
  const int rounds = detect_rounds(run_dir);
  std::vector<ReportColumn> columns;
  columns.push_back({"w_b", shared(base)});

  if (rounds >= 1) {
    const std::vector<DetectorModel> first = load_round_clients(run_dir, 1, n);
    columns.push_back({"w_i^1", per_client(first)});
    columns.push_back({"E(w_i^1|w_b)", ensembles(base, first)});
  }
  for (int t = 1; t <= rounds; ++t) {
    const DetectorModel global = load_model(run_dir / ("round_" + std::to_string(t)) / "global.ckpt");
    columns.push_back({"w_g^" + std::to_string(t), shared(global)});
    std::vector<DetectorModel> next;
    if (t < rounds) {
      next = load_round_clients(run_dir, t + 1, n);
    } else if (fs::exists(run_dir / "ensemble")) {
      next = load_ensemble_clients(run_dir, n);
    } else {
      continue;
    }
    const std::string next_tag = "w_i^" + std::to_string(t + 1);
    columns.push_back({next_tag, per_client(next)});
    columns.push_back(
        {"E(" + next_tag + "|w_g^" + std::to_string(t) + ")", ensembles(global, next)});
  }

  // CSV mirrors the indicator-per-row, model-per-column table layout.
  std::string csv = "indicator";
  for (const ReportColumn& c : columns) csv += "," + c.label;
  csv += "\n";
  std::vector<std::pair<std::string, std::function<double(const FedIndicators&)>>> rows;
  rows.emplace_back("A_s", [](const FedIndicators& i) { return i.a_s; });
  rows.emplace_back("A_p", [](const FedIndicators& i) { return i.a_p; });
  rows.emplace_back("A_u", [](const FedIndicators& i) { return i.a_u; });
  for (double a : alphas) {
    rows.emplace_back(alpha_label(a),
                      [a](const FedIndicators& i) { return i.a_com.at(a); });
  }
  json jreport;
  for (const auto& [label, get] : rows) {
    csv += label;
    for (const ReportColumn& c : columns) csv += "," + fmt(get(c.indicators));
    csv += "\n";
  }
  for (const ReportColumn& c : columns) jreport[c.label] = indicators_to_json(c.indicators);
  atomic_write_text(out / "report.csv", csv);
  atomic_write_text(out / "report.json", jreport.dump(2) + "\n");

  std::vector<std::string> labels;
  for (const ReportColumn& c : columns) labels.push_back(c.label);
  for (const auto& [label, get] : rows) {
    std::vector<double> values;
    for (const ReportColumn& c : columns) values.push_back(get(c.indicators));
    write_bar_chart(out / ("report_" + label + ".svg"), label, labels, values);
  }
  write_resolved_config(out, cfg);
  std::cout << "report written to " << (out / "report.csv").string() << "\n";
  return 0;
}

int cmd_fuse_compare(const json& cfg) {
  const fs::path out = resolve_out(cfg);
  DirLock lock(out);
  const Benchmark bench = load_benchmark(cfg.at("data").at("dir").get<std::string>());
  const fs::path run_dir = cfg.at("run_dir").get<std::string>();
  if (run_dir.empty()) throw std::runtime_error("fuse-compare: --run directory is required");

  const int rounds = detect_rounds(run_dir);
  if (rounds < 1) throw std::runtime_error("fuse-compare: run has no completed rounds");
  const int n = bench.sizes.num_clients;
  const DetectorModel global =
      load_model(run_dir / ("round_" + std::to_string(rounds)) / "global.ckpt");
  const std::vector<DetectorModel> personals = load_ensemble_clients(run_dir, n);

  const double score = cfg.at("predict").at("score_threshold").get<double>();
  const double nms_thr = cfg.at("predict").at("nms_threshold").get<double>();
  const double map_iou = cfg.at("eval").at("map_iou").get<double>();
  const int threads = cfg.at("threads").get<int>();
  const json& fu = cfg.at("fusion");
  const double wbf_iou = fu.at("wbf_iou").get<double>();
  const int num_models = fu.at("num_models").get<int>();
  const double nms_iou = fu.at("nms_iou").get<double>();
  const double sigma = fu.at("soft_sigma").get<double>();
  const double floor = fu.at("soft_floor").get<double>();

  const std::vector<std::string> methods{"NMS", "SoftNMS", "NWM", "WBF"};
  auto fuse_with = [&](const std::string& method, const DetectionSet& combined) {
    if (method == "NMS") return nms(combined, nms_iou);
    if (method == "SoftNMS") return soft_nms(combined, sigma, floor);
    if (method == "NWM") return nwm(combined, nms_iou);
    return wbf(combined, wbf_iou, num_models);
  };

  std::map<std::string, FedIndicators> results;
  for (const std::string& method : methods) {
    std::vector<Predictor> preds;
    for (int i = 0; i < n; ++i) {
      const DetectorModel& personal = personals[static_cast<std::size_t>(i)];
      preds.push_back([&, method, personal](const Scene& scene) {
        const Tensor image = scene.image.to_tensor();
        DetectionSet combined = predict(global, image, score, nms_thr);
        for (BBox& b : combined) b.model_id = 0;
        DetectionSet p = predict(personal, image, score, nms_thr);
        for (BBox& b : p) b.model_id = 1;
        combined.insert(combined.end(), p.begin(), p.end());
        return fuse_with(method, combined);
      });
    }
    results.emplace(method, compute_indicators(preds, bench, {0.5}, map_iou, threads));
  }

  std::string csv = "indicator";
  for (const std::string& m : methods) csv += "," + m;
  csv += "\n";
  json jreport;
  for (const std::string& row : {std::string("A_s"), std::string("A_p")}) {
    csv += row;
    for (const std::string& m : methods) {
      const FedIndicators& ind = results.at(m);
      const double v = row == "A_s" ? ind.a_s : ind.a_p;
      csv += "," + fmt(v);
      jreport[m][row] = v;
    }
    csv += "\n";
  }
  atomic_write_text(out / "fuse_compare.csv", csv);
  atomic_write_text(out / "fuse_compare.json", jreport.dump(2) + "\n");
  write_resolved_config(out, cfg);
  std::cout << "fusion comparison written to " << (out / "fuse_compare.csv").string() << "\n";
  return 0;
}

int cmd_fuse(const json& cfg) {
  const json& f = cfg.at("fuse");
  const std::string input = f.at("input").get<std::string>();
  const std::string output = f.at("output").get<std::string>();
  const std::string method = f.at("method").get<std::string>();
  if (input.empty() || output.empty())
    throw std::runtime_error("fuse: --input and --output are required");

  const json& fu = cfg.at("fusion");
  const DetectionFile in = read_detections(input);
  DetectionFile out_sets;
  for (const auto& [image_id, boxes] : in) {
    if (method == "nms") {
      out_sets[image_id] = nms(boxes, fu.at("nms_iou").get<double>());
    } else if (method == "soft-nms") {
      out_sets[image_id] =
          soft_nms(boxes, fu.at("soft_sigma").get<double>(), fu.at("soft_floor").get<double>());
    } else if (method == "nwm") {
      out_sets[image_id] = nwm(boxes, fu.at("nms_iou").get<double>());
    } else if (method == "wbf") {
      out_sets[image_id] =
          wbf(boxes, fu.at("wbf_iou").get<double>(), fu.at("num_models").get<int>());
    } else {
      throw std::runtime_error("fuse: unknown method " + method);
    }
  }
  write_detections(output, out_sets);
  std::cout << "fused detections written to " << output << "\n";
  return 0;
}

}  // namespace feddet::cli
