#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "feddet/datagen.hpp"
#include "feddet/detector.hpp"
#include "feddet/distill.hpp"
#include "feddet/metrics.hpp"

namespace feddet {

// Simulated transport record. Every model transfer is fully serialized and
// re-parsed on receipt, so the wire format is exercised on each hop. Party 0
// is the server; clients are 1..N.
struct Message {
  enum class Direction { kServerToClient, kClientToServer };
  enum class PayloadKind { kModel, kAck };

  Direction direction = Direction::kServerToClient;
  int round = 0;
  PayloadKind kind = PayloadKind::kModel;
  int sender = 0;
  int receiver = 0;
  std::vector<std::uint8_t> payload;
};

struct FederationState {
  int round = 0;
  std::uint64_t master_seed = 0;
  DetectorModel base_model;    // frozen after construction
  DetectorModel global_model;  // current aggregated model
  std::map<int, DetectorModel> client_models;  // client id -> personalized model
  std::vector<Message> message_log;
};

FederationState init_federation(const DetectorModel& base, std::uint64_t master_seed);

enum class Aggregator { kDistill, kFedAvg };

struct RoundConfig {
  TrainConfig client_train;
  DistillConfig distill;
  Aggregator aggregator = Aggregator::kDistill;
  double client_fraction = 1.0;  // fraction of clients selected per round
};

// One communication round: broadcast the global model, train every selected
// client on it, upload the results, aggregate. `execution_order`, when
// given, only changes the order client training runs in; results and the
// message log are identical for any permutation.
FederationState run_round(const FederationState& state, const Benchmark& bench,
                          const RoundConfig& cfg,
                          std::vector<DistillEpochLog>* distill_log = nullptr,
                          const std::vector<int>* execution_order = nullptr);

struct FusionConfig {
  double wbf_iou = 0.55;
  int num_models = 2;
  double score_threshold = 0.05;
  double nms_threshold = 0.5;
};

// A client's final pair: the latest global model plus a personalized model
// fine-tuned from it, combined at inference time by weighted boxes fusion.
struct EnsembleModel {
  DetectorModel global;
  DetectorModel personal;
  FusionConfig fusion;
};

EnsembleModel ensemble_step(const FederationState& state, int client_id, const Benchmark& bench,
                            const TrainConfig& train_cfg, const FusionConfig& fusion = {});

DetectionSet ensemble_predict(const EnsembleModel& ensemble, const Tensor& image);

// Full-state checkpointing under `dir`:
//   meta.json, base.ckpt, round_<t>/global.ckpt, round_<t>/client_<i>.ckpt,
//   messages.log
void save_state(const FederationState& state, const std::filesystem::path& dir);
FederationState load_state(const std::filesystem::path& dir);

struct EvalConfig {
  std::vector<double> alphas{0.1, 0.3, 0.5};
  double map_iou = 0.5;
  int threads = 1;
};

struct RoundIndicatorRow {
  int round = 0;
  std::string column;  // which model family the row describes
  FedIndicators indicators;
};

struct FederationConfig {
  int rounds = 3;
  std::uint64_t master_seed = 1;
  RoundConfig round;
  TrainConfig ensemble_train;  // fine-tuning config for the ensemble step
  FusionConfig fusion;
  EvalConfig eval;
  bool eval_each_round = true;
  std::optional<std::filesystem::path> out_dir;  // checkpoints per round when set
  bool resume = false;  // continue from the latest round checkpoint in out_dir
};

struct FederationResult {
  FederationState state;
  std::map<int, EnsembleModel> ensembles;  // client id -> final pair
  std::vector<DistillEpochLog> distill_log;
  std::vector<RoundIndicatorRow> round_log;
};

FederationResult run_federation(const DetectorModel& base, const Benchmark& bench,
                                const FederationConfig& cfg);

// Helpers shared with the CLI and tests.
Predictor model_predictor(const DetectorModel& model, double score_threshold,
                          double nms_threshold);
Predictor ensemble_predictor(const EnsembleModel& ensemble);

}  // namespace feddet
