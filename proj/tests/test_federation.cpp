#include <filesystem>
#include <fstream>

#include <stdexcept>

#include <doctest.h>

#include "feddet/checkpoint.hpp"
#include "feddet/federation.hpp"

using namespace feddet;

namespace fs = std::filesystem;

namespace {

Benchmark mini_benchmark(int clients = 4, std::uint64_t seed = 7) {
  BenchmarkSizes sizes;
  sizes.server_train = 12;
  sizes.server_test = 4;
  sizes.client_train = 6;
  sizes.client_test = 3;
  sizes.num_clients = clients;
  return build_benchmark(seed, sizes);
}

DetectorConfig small_config() {
  DetectorConfig cfg;
  cfg.num_classes = 5;
  cfg.anchors_per_cell = 1;
  cfg.backbone_channels = 4;
  cfg.anchor_sizes = {{0.16}, {0.36}};
  return cfg;
}

RoundConfig fast_round() {
  RoundConfig rc;
  rc.client_train.epochs = 1;
  rc.client_train.batch_size = 4;
  rc.distill.epochs = 1;
  rc.distill.batch_size = 4;
  return rc;
}

}  // namespace

TEST_CASE("degenerate rounds reduce to parameter averaging") {
  const Benchmark bench = mini_benchmark();
  const DetectorModel base = DetectorModel::random_init(small_config(), 1);
  FederationState st = init_federation(base, 5);

  RoundConfig rc = fast_round();
  rc.client_train.epochs = 0;
  rc.distill.epochs = 0;
  const FederationState next = run_round(st, bench, rc);
  CHECK(next.round == 1);
  // zero client epochs: every upload equals w_g, so the student init is the
  // mean of five copies of w_g
  const std::vector<DetectorModel> copies(4, st.global_model);
  CHECK(next.global_model.checksum() == init_student(st.global_model, copies).checksum());
}

TEST_CASE("single client equal to the global model leaves averaging unchanged") {
  const Benchmark bench = mini_benchmark(1);
  const DetectorModel base = DetectorModel::random_init(small_config(), 2);
  FederationState st = init_federation(base, 5);
  RoundConfig rc = fast_round();
  rc.client_train.epochs = 0;
  rc.distill.epochs = 0;
  const FederationState next = run_round(st, bench, rc);
  // mean of two identical models is exact in floating point
  CHECK(next.global_model.checksum() == st.global_model.checksum());
}

TEST_CASE("message log structure and payload fidelity") {
  const Benchmark bench = mini_benchmark();
  const DetectorModel base = DetectorModel::random_init(small_config(), 3);
  FederationState st = init_federation(base, 11);
  const RoundConfig rc = fast_round();
  st = run_round(st, bench, rc);
  st = run_round(st, bench, rc);

  // 2 messages per selected client per round
  CHECK(st.message_log.size() == 2u * 4 * 2);
  int broadcasts = 0, uploads = 0;
  for (const Message& m : st.message_log) {
    CHECK(m.kind == Message::PayloadKind::kModel);
    // payloads carry model parameters only: they parse as checkpoints
    const DetectorModel parsed = deserialize_model(m.payload);
    if (m.direction == Message::Direction::kServerToClient) {
      ++broadcasts;
      CHECK(m.sender == 0);
    } else {
      ++uploads;
      CHECK(m.receiver == 0);
      // an upload equals the client model kept in the state for that round
      if (m.round == st.round) {
        CHECK(parsed.checksum() == st.client_models.at(m.sender).checksum());
      }
    }
  }
  CHECK(broadcasts == 8);
  CHECK(uploads == 8);

  // the base model never changes
  CHECK(st.base_model.checksum() == base.checksum());
}

TEST_CASE("rounds are deterministic and independent of client execution order") {
  const Benchmark bench = mini_benchmark();
  const DetectorModel base = DetectorModel::random_init(small_config(), 4);
  const RoundConfig rc = fast_round();

  FederationState a = init_federation(base, 21);
  FederationState b = init_federation(base, 21);
  const std::vector<int> reversed{4, 3, 2, 1};
  for (int r = 0; r < 2; ++r) {
    a = run_round(a, bench, rc);
    b = run_round(b, bench, rc, nullptr, &reversed);
  }
  CHECK(a.global_model.checksum() == b.global_model.checksum());
  for (int i = 1; i <= 4; ++i) {
    CHECK(a.client_models.at(i).checksum() == b.client_models.at(i).checksum());
  }
  REQUIRE(a.message_log.size() == b.message_log.size());
  for (std::size_t i = 0; i < a.message_log.size(); ++i) {
    CHECK(a.message_log[i].sender == b.message_log[i].sender);
    CHECK(a.message_log[i].receiver == b.message_log[i].receiver);
    CHECK(a.message_log[i].payload == b.message_log[i].payload);
  }
}

TEST_CASE("state checkpoints round-trip and support exact resume") {
  const Benchmark bench = mini_benchmark();
  const DetectorModel base = DetectorModel::random_init(small_config(), 6);
  const fs::path dir_a = fs::temp_directory_path() / "feddet_state_a";
  const fs::path dir_b = fs::temp_directory_path() / "feddet_state_b";
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);

  FederationConfig fc;
  fc.rounds = 3;
  fc.master_seed = 33;
  fc.round = fast_round();
  fc.ensemble_train = fc.round.client_train;
  fc.eval_each_round = false;
  fc.out_dir = dir_a;
  const FederationResult straight = run_federation(base, bench, fc);

  // save -> load equality
  const FederationState loaded = load_state(dir_a);
  CHECK(loaded.round == straight.state.round);
  CHECK(loaded.global_model.checksum() == straight.state.global_model.checksum());
  CHECK(loaded.base_model.checksum() == straight.state.base_model.checksum());
  CHECK(loaded.message_log.size() == straight.state.message_log.size());
  for (std::size_t i = 0; i < loaded.message_log.size(); ++i) {
    CHECK(loaded.message_log[i].payload == straight.state.message_log[i].payload);
  }

  // run 2 rounds, then resume for the third
  FederationConfig fc_b = fc;
  fc_b.out_dir = dir_b;
  fc_b.rounds = 2;
  run_federation(base, bench, fc_b);
  fc_b.rounds = 3;
  fc_b.resume = true;
  const FederationResult resumed = run_federation(base, bench, fc_b);
  CHECK(resumed.state.global_model.checksum() == straight.state.global_model.checksum());
  for (int i = 1; i <= 4; ++i) {
    CHECK(resumed.state.client_models.at(i).checksum() ==
          straight.state.client_models.at(i).checksum());
    CHECK(resumed.ensembles.at(i).personal.checksum() ==
          straight.ensembles.at(i).personal.checksum());
  }

  // a truncated checkpoint is reported, not silently accepted
  const fs::path ck = dir_a / "round_3" / "global.ckpt";
  std::vector<std::uint8_t> bytes;
  {
    std::ifstream in(ck, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  bytes.resize(bytes.size() / 2);
  {
    std::ofstream out(ck, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_AS(load_model(ck), std::runtime_error);
  CHECK_THROWS_AS(load_state(dir_a), std::runtime_error);

  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("ensemble step basics") {
  const Benchmark bench = mini_benchmark();
  DetectorConfig cfg = small_config();
  const DetectorModel base = DetectorModel::random_init(cfg, 8);
  FederationState st = init_federation(base, 44);
  st = run_round(st, bench, fast_round());

  TrainConfig no_tune;
  no_tune.epochs = 0;
  const EnsembleModel frozen = ensemble_step(st, 1, bench, no_tune);
  CHECK(frozen.personal.checksum() == frozen.global.checksum());

  TrainConfig tune;
  tune.epochs = 1;
  tune.batch_size = 4;
  const EnsembleModel a = ensemble_step(st, 2, bench, tune);
  const EnsembleModel b = ensemble_step(st, 2, bench, tune);
  CHECK(a.personal.checksum() == b.personal.checksum());

  CHECK_THROWS_AS(ensemble_step(st, 9, bench, tune), std::invalid_argument);
}

TEST_CASE("ensemble_predict on silent models is empty") {
  DetectorConfig cfg = small_config();
  cfg.cls_prior = 1e-9;  // strongly negative classification bias
  const DetectorModel quiet = DetectorModel::random_init(cfg, 9);
  EnsembleModel e;
  e.global = quiet;
  e.personal = quiet;
  const Tensor image = Tensor::full({3, 64, 64}, 0.4);
  CHECK(ensemble_predict(e, image).empty());
}
