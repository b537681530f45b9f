#include "feddet/federation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "feddet/checkpoint.hpp"
#include "feddet/io.hpp"
#include "feddet/rng.hpp"

namespace feddet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kServerParty = 0;

DetectorModel receive_model(const Message& msg) {
  if (msg.kind != Message::PayloadKind::kModel)
    throw std::runtime_error("expected a model payload");
  return deserialize_model(msg.payload);
}

std::vector<int> select_clients(int num_clients, double fraction, std::uint64_t seed) {
  std::vector<int> ids(static_cast<std::size_t>(num_clients));
  for (int i = 0; i < num_clients; ++i) ids[static_cast<std::size_t>(i)] = i + 1;
  const int take = std::max(1, static_cast<int>(std::ceil(fraction * num_clients)));
  if (take >= num_clients) return ids;
  Rng rng(seed);
  rng.shuffle(ids);
  ids.resize(static_cast<std::size_t>(take));
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace

FederationState init_federation(const DetectorModel& base, std::uint64_t master_seed) {
  FederationState st;
  st.round = 0;
  st.master_seed = master_seed;
  st.base_model = base;
  st.global_model = base;
  return st;
}

FederationState run_round(const FederationState& state, const Benchmark& bench,
                          const RoundConfig& cfg, std::vector<DistillEpochLog>* distill_log,
                          const std::vector<int>* execution_order) {
  const int round = state.round + 1;
  const int num_clients = bench.sizes.num_clients;
  if (static_cast<int>(bench.client_train.size()) != num_clients)
    throw std::runtime_error("run_round: missing client datasets");
  if (bench.server_train.empty()) throw std::runtime_error("run_round: missing server dataset");

  FederationState next = state;
  next.round = round;

  const std::vector<int> selected =
      select_clients(num_clients, cfg.client_fraction, derive_seed(state.master_seed, round, 999));

  // Broadcast the current global model; the log is kept in canonical client
  // order regardless of how training is scheduled below.
  std::map<int, Message> broadcasts;
  for (int id : selected) {
    Message m;
    m.direction = Message::Direction::kServerToClient;
    m.round = round;
    m.kind = Message::PayloadKind::kModel;
    m.sender = kServerParty;
    m.receiver = id;
    m.payload = serialize_model(state.global_model);
    next.message_log.push_back(m);
    broadcasts[id] = std::move(m);
  }

  // Client training. Order of execution is irrelevant: each client depends
  // only on its received model, its dataset and its derived seed.
  std::vector<int> order = selected;
  if (execution_order) {
    order = *execution_order;
    if (order.size() != selected.size())
      throw std::invalid_argument("run_round: execution order must cover the selected clients");
  }
  std::map<int, DetectorModel> trained;
  for (int id : order) {
    const DetectorModel received = receive_model(broadcasts.at(id));
    const std::uint64_t seed = derive_seed(state.master_seed, round, id);
    trained.emplace(id, train_local(received, bench.client_train[static_cast<std::size_t>(id - 1)],
                                    cfg.client_train, seed));
  }

  // Uploads, again in canonical order.
  std::vector<DetectorModel> teachers;
  std::vector<double> weights;
  for (int id : selected) {
    Message m;
    m.direction = Message::Direction::kClientToServer;
    m.round = round;
    m.kind = Message::PayloadKind::kModel;
    m.sender = id;
    m.receiver = kServerParty;
    m.payload = serialize_model(trained.at(id));
    teachers.push_back(receive_model(m));
    weights.push_back(static_cast<double>(bench.client_train[static_cast<std::size_t>(id - 1)].size()));
    next.message_log.push_back(std::move(m));
    next.client_models.insert_or_assign(id, trained.at(id));
  }

  if (cfg.aggregator == Aggregator::kDistill) {
    std::vector<DistillEpochLog> log;
    next.global_model =
        distill_aggregate(state.global_model, teachers, bench.server_train, cfg.distill,
                          derive_seed(state.master_seed, round, kServerParty),
                          distill_log ? &log : nullptr);
    if (distill_log) {
      for (DistillEpochLog& row : log) {
        row.round = round;
        distill_log->push_back(row);
      }
    }
  } else {
    double total = 0.0;
    for (double w : weights) total += w;
    for (double& w : weights) w /= total;
    next.global_model = fedavg_aggregate(teachers, weights);
  }
  return next;
}

EnsembleModel ensemble_step(const FederationState& state, int client_id, const Benchmark& bench,
                            const TrainConfig& train_cfg, const FusionConfig& fusion) {
  if (client_id < 1 || client_id > bench.sizes.num_clients)
    throw std::invalid_argument("ensemble_step: unknown client id");
  EnsembleModel e;
  e.global = state.global_model;
  e.fusion = fusion;
  const std::uint64_t seed = derive_seed(state.master_seed, state.round + 1, client_id);
  e.personal = train_local(state.global_model,
                           bench.client_train[static_cast<std::size_t>(client_id - 1)], train_cfg,
                           seed);
  return e;
}

DetectionSet ensemble_predict(const EnsembleModel& ensemble, const Tensor& image) {
  DetectionSet combined =
      predict(ensemble.global, image, ensemble.fusion.score_threshold,
              ensemble.fusion.nms_threshold);
  for (BBox& b : combined) b.model_id = 0;
  DetectionSet personal = predict(ensemble.personal, image, ensemble.fusion.score_threshold,
                                  ensemble.fusion.nms_threshold);
  for (BBox& b : personal) b.model_id = 1;
  combined.insert(combined.end(), personal.begin(), personal.end());
  return wbf(combined, ensemble.fusion.wbf_iou, ensemble.fusion.num_models);
}

namespace {

std::string direction_tag(Message::Direction d) {
  return d == Message::Direction::kServerToClient ? "s2c" : "c2s";
}

Message::Direction parse_direction(const std::string& s) {
  if (s == "s2c") return Message::Direction::kServerToClient;
  if (s == "c2s") return Message::Direction::kClientToServer;
  throw std::runtime_error("bad message direction: " + s);
}

std::string kind_tag(Message::PayloadKind k) {
  return k == Message::PayloadKind::kModel ? "model" : "ack";
}

Message::PayloadKind parse_kind(const std::string& s) {
  if (s == "model") return Message::PayloadKind::kModel;
  if (s == "ack") return Message::PayloadKind::kAck;
  throw std::runtime_error("bad message kind: " + s);
}

}  // namespace

void save_state(const FederationState& state, const fs::path& dir) {
  fs::create_directories(dir);
  json meta{{"round", state.round},
            {"master_seed", state.master_seed},
            {"clients", json::array()}};
  for (const auto& kv : state.client_models) meta["clients"].push_back(kv.first);
  save_model(dir / "base.ckpt", state.base_model);

  const fs::path round_dir = dir / ("round_" + std::to_string(state.round));
  fs::create_directories(round_dir);
  save_model(round_dir / "global.ckpt", state.global_model);
  for (const auto& [id, model] : state.client_models) {
    save_model(round_dir / ("client_" + std::to_string(id) + ".ckpt"), model);
  }

  std::string log;
  for (const Message& m : state.message_log) {
    log += std::to_string(m.round) + " " + direction_tag(m.direction) + " " +
           std::to_string(m.sender) + " " + std::to_string(m.receiver) + " " +
           kind_tag(m.kind) + " " + std::to_string(m.payload.size()) + " " + to_hex(m.payload) +
           "\n";
  }
  atomic_write_text(dir / "messages.log", log);
  atomic_write_text(dir / "meta.json", meta.dump(2) + "\n");
}

FederationState load_state(const fs::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw std::runtime_error("missing meta.json in " + dir.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::exception& e) {
    throw std::runtime_error("corrupt meta.json in " + dir.string() + ": " + e.what());
  }

  FederationState st;
  st.round = meta.at("round").get<int>();
  st.master_seed = meta.at("master_seed").get<std::uint64_t>();
  st.base_model = load_model(dir / "base.ckpt");

  const fs::path round_dir = dir / ("round_" + std::to_string(st.round));
  st.global_model = st.round == 0 ? st.base_model : load_model(round_dir / "global.ckpt");
  if (st.round > 0) {
    for (int id : meta.at("clients").get<std::vector<int>>()) {
      st.client_models.emplace(id,
                               load_model(round_dir / ("client_" + std::to_string(id) + ".ckpt")));
    }
  }

  const fs::path log_path = dir / "messages.log";
  if (fs::exists(log_path)) {
    std::istringstream in(read_file_text(log_path));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string dir_tag, kind, hex;
      std::size_t nbytes = 0;
      Message m;
      if (!(ls >> m.round >> dir_tag >> m.sender >> m.receiver >> kind >> nbytes >> hex))
        throw std::runtime_error("corrupt messages.log at line " + std::to_string(lineno));
      m.direction = parse_direction(dir_tag);
      m.kind = parse_kind(kind);
      m.payload = from_hex(hex);
      if (m.payload.size() != nbytes)
        throw std::runtime_error("messages.log payload size mismatch at line " +
                                 std::to_string(lineno));
      st.message_log.push_back(std::move(m));
    }
  }
  return st;
}

Predictor model_predictor(const DetectorModel& model, double score_threshold,
                          double nms_threshold) {
  return [model, score_threshold, nms_threshold](const Scene& scene) {
    return predict(model, scene.image.to_tensor(), score_threshold, nms_threshold);
  };
}

Predictor ensemble_predictor(const EnsembleModel& ensemble) {
  return [ensemble](const Scene& scene) {
    return ensemble_predict(ensemble, scene.image.to_tensor());
  };
}

namespace {

// Indicator rows logged per round: one for the aggregated model (shared by
// every client) and one for the round's personalized models.
void log_round_indicators(const FederationState& st, const Benchmark& bench,
                          const FederationConfig& cfg, std::vector<RoundIndicatorRow>* rows) {
  const double score = cfg.fusion.score_threshold;
  const double nms_thr = cfg.fusion.nms_threshold;
  std::vector<Predictor> global_all;
  std::vector<Predictor> personal;
  for (int i = 1; i <= bench.sizes.num_clients; ++i) {
    global_all.push_back(model_predictor(st.global_model, score, nms_thr));
    personal.push_back(model_predictor(st.client_models.at(i), score, nms_thr));
  }
  rows->push_back({st.round, "w_g",
                   compute_indicators(global_all, bench, cfg.eval.alphas, cfg.eval.map_iou,
                                      cfg.eval.threads)});
  rows->push_back({st.round, "w_i",
                   compute_indicators(personal, bench, cfg.eval.alphas, cfg.eval.map_iou,
                                      cfg.eval.threads)});
}

}  // namespace

FederationResult run_federation(const DetectorModel& base, const Benchmark& bench,
                                const FederationConfig& cfg) {
  FederationResult result;
  bool resumed = false;
  if (cfg.resume && cfg.out_dir && fs::exists(*cfg.out_dir / "meta.json")) {
    result.state = load_state(*cfg.out_dir);
    if (result.state.master_seed != cfg.master_seed)
      throw std::runtime_error("run_federation: resume with a different master seed");
    resumed = true;
  } else {
    result.state = init_federation(base, cfg.master_seed);
  }

  if (cfg.out_dir && !resumed) {
    save_state(result.state, *cfg.out_dir);  // round_0 snapshot of the base
  }

  while (result.state.round < cfg.rounds) {
    result.state = run_round(result.state, bench, cfg.round, &result.distill_log);
    if (cfg.out_dir) save_state(result.state, *cfg.out_dir);
    if (cfg.eval_each_round) log_round_indicators(result.state, bench, cfg, &result.round_log);
  }

  for (int id = 1; id <= bench.sizes.num_clients; ++id) {
    result.ensembles.emplace(
        id, ensemble_step(result.state, id, bench, cfg.ensemble_train, cfg.fusion));
  }
  if (cfg.out_dir) {
    const fs::path edir = *cfg.out_dir / "ensemble";
    fs::create_directories(edir);
    for (const auto& [id, e] : result.ensembles) {
      save_model(edir / ("client_" + std::to_string(id) + ".ckpt"), e.personal);
    }
  }
  if (cfg.eval_each_round && !result.ensembles.empty()) {
    std::vector<Predictor> fused;
    for (int i = 1; i <= bench.sizes.num_clients; ++i) {
      fused.push_back(ensemble_predictor(result.ensembles.at(i)));
    }
    result.round_log.push_back(
        {result.state.round, "ensemble",
         compute_indicators(fused, bench, cfg.eval.alphas, cfg.eval.map_iou, cfg.eval.threads)});
  }
  return result;
}

}  // namespace feddet
