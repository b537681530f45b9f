#pragma once

#include <cstdint>
#include <vector>

#include "feddet/datagen.hpp"
#include "feddet/detector.hpp"

namespace feddet {

struct DistillConfig {
  double lambda_fea = 1.0;
  double lambda_cls = 1.0;
  double lambda_reg = 1.0;
  double temperature = 4.0;
  int epochs = 5;
  double lr = 0.01;
  int batch_size = 8;
  int threads = 1;
};

// Student initialization: elementwise mean over the previous global model
// and every teacher.
DetectorModel init_student(const DetectorModel& prev_global,
                           const std::vector<DetectorModel>& teachers);

// Feature loss: per-teacher channel-wise divergence summed over scales and
// averaged over teachers. Teachers are never averaged together first; each
// keeps its own term. Gradients (if requested) accumulate into the student's
// per-scale feature-map slots.
double loss_fea(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                double temperature, std::vector<Tensor>* grad_features = nullptr);

// Same structure over the classification-head maps.
double loss_cls(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                double temperature, std::vector<Tensor>* grad_cls = nullptr);

// L2 distance over the regression-head maps, same (1/N) sum_l sum_i shape.
double loss_reg(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                std::vector<Tensor>* grad_reg = nullptr);

struct DistillEpochLog {
  int round = 0;
  int epoch = 0;
  double l_det = 0, l_fea = 0, l_cls = 0, l_reg = 0, total = 0;
};

// Multi-teacher aggregation: initialize by parameter averaging, then train
// the student on server data with detection loss plus the weighted
// distillation terms. Teacher forward passes carry no gradients.
DetectorModel distill_aggregate(const DetectorModel& prev_global,
                                const std::vector<DetectorModel>& teachers,
                                const std::vector<Scene>& server_data, const DistillConfig& cfg,
                                std::uint64_t seed,
                                std::vector<DistillEpochLog>* epoch_log = nullptr);

// Baseline aggregator: elementwise weighted mean; weights must be
// nonnegative and sum to 1 (within 1e-9).
DetectorModel fedavg_aggregate(const std::vector<DetectorModel>& models,
                               const std::vector<double>& weights);

}  // namespace feddet
