#include "feddet/distill.hpp"

#include <cmath>
#include <stdexcept>

#include "feddet/nn.hpp"

namespace feddet {

namespace {

void check_teachers(const DetectorModel& prev_global, const std::vector<DetectorModel>& teachers) {
  if (teachers.empty()) throw std::invalid_argument("no teacher models");
  for (const DetectorModel& t : teachers) {
    if (!t.same_architecture(prev_global))
      throw std::invalid_argument("teacher architecture mismatch");
  }
}

enum class MapKind { kFeatures, kCls };

double kl_map_loss(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                   double temperature, MapKind which, std::vector<Tensor>* grad_maps) {
  if (teachers.empty()) throw std::invalid_argument("no teacher outputs");
  const auto& s_maps = which == MapKind::kFeatures ? student.features : student.cls_maps;
  const double inv_n = 1.0 / static_cast<double>(teachers.size());
  double total = 0.0;
  for (std::size_t l = 0; l < s_maps.size(); ++l) {
    for (const ModelOutput& t : teachers) {
      const auto& t_maps = which == MapKind::kFeatures ? t.features : t.cls_maps;
      if (t_maps.size() != s_maps.size()) throw std::invalid_argument("scale count mismatch");
      total += inv_n * kl_channelwise(s_maps[l], t_maps[l], temperature);
      if (grad_maps) {
        const Tensor g = kl_channelwise_backward(s_maps[l], t_maps[l], temperature);
        Tensor& acc = (*grad_maps)[l];
        for (std::size_t i = 0; i < g.data.size(); ++i) acc.data[i] += inv_n * g.data[i];
      }
    }
  }
  return total;
}

}  // namespace

DetectorModel init_student(const DetectorModel& prev_global,
                           const std::vector<DetectorModel>& teachers) {
  check_teachers(prev_global, teachers);
  DetectorModel student = prev_global;
  std::vector<Parameter*> out = student.parameters();
  const double inv = 1.0 / static_cast<double>(teachers.size() + 1);
  for (std::size_t p = 0; p < out.size(); ++p) {
    std::vector<double>& dst = out[p]->value.data;
    for (double& v : dst) v *= inv;
    for (const DetectorModel& t : teachers) {
      const std::vector<double>& src = t.parameters()[p]->value.data;
      if (src.size() != dst.size()) throw std::invalid_argument("parameter shape mismatch");
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += inv * src[i];
    }
  }
  return student;
}

double loss_fea(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                double temperature, std::vector<Tensor>* grad_features) {
  return kl_map_loss(student, teachers, temperature, MapKind::kFeatures, grad_features);
}

double loss_cls(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                double temperature, std::vector<Tensor>* grad_cls) {
  return kl_map_loss(student, teachers, temperature, MapKind::kCls, grad_cls);
}

double loss_reg(const ModelOutput& student, const std::vector<ModelOutput>& teachers,
                std::vector<Tensor>* grad_reg) {
  if (teachers.empty()) throw std::invalid_argument("no teacher outputs");
  const double inv_n = 1.0 / static_cast<double>(teachers.size());
  double total = 0.0;
  for (std::size_t l = 0; l < student.reg_maps.size(); ++l) {
    for (const ModelOutput& t : teachers) {
      if (t.reg_maps.size() != student.reg_maps.size())
        throw std::invalid_argument("scale count mismatch");
      total += inv_n * l2_loss(student.reg_maps[l], t.reg_maps[l]);
      if (grad_reg) {
        const Tensor g = l2_loss_backward(student.reg_maps[l], t.reg_maps[l]);
        Tensor& acc = (*grad_reg)[l];
        for (std::size_t i = 0; i < g.data.size(); ++i) acc.data[i] += inv_n * g.data[i];
      }
    }
  }
  return total;
}

DetectorModel distill_aggregate(const DetectorModel& prev_global,
                                const std::vector<DetectorModel>& teachers,
                                const std::vector<Scene>& server_data, const DistillConfig& cfg,
                                std::uint64_t seed, std::vector<DistillEpochLog>* epoch_log) {
  check_teachers(prev_global, teachers);
  if (server_data.empty()) throw std::invalid_argument("distill_aggregate: empty server data");

  DetectorModel student = init_student(prev_global, teachers);
  const bool any_distill = cfg.lambda_fea > 0 || cfg.lambda_cls > 0 || cfg.lambda_reg > 0;

  std::vector<StepStats> log;
  sgd_epochs(
      student, server_data, cfg.epochs, cfg.batch_size, cfg.lr, cfg.threads, seed,
      [&](const DetectorModel& m, const Scene& scene, Gradients& grads) {
        ForwardContext ctx;
        const Tensor image = scene.image.to_tensor();
        const ModelOutput out = forward(m, image, &ctx);
        MapGrads mg = MapGrads::zeros_like(out);
        const DetLoss det = detection_loss(out, scene.ground_truth, m.config, &mg);

        StepStats st;
        st.l_det = det.total();
        if (any_distill) {
          // Teachers are frozen: recompute their outputs, no gradient paths.
          std::vector<ModelOutput> t_outs;
          t_outs.reserve(teachers.size());
          for (const DetectorModel& t : teachers) t_outs.push_back(forward(t, image));

          if (cfg.lambda_fea > 0) {
            std::vector<Tensor> g(mg.d_features.size());
            for (std::size_t l = 0; l < g.size(); ++l)
              g[l] = Tensor::zeros(mg.d_features[l].shape);
            st.l_fea = loss_fea(out, t_outs, cfg.temperature, &g);
            for (std::size_t l = 0; l < g.size(); ++l) {
              for (std::size_t i = 0; i < g[l].data.size(); ++i)
                mg.d_features[l].data[i] += cfg.lambda_fea * g[l].data[i];
            }
          }
          if (cfg.lambda_cls > 0) {
            std::vector<Tensor> g(mg.d_cls.size());
            for (std::size_t l = 0; l < g.size(); ++l) g[l] = Tensor::zeros(mg.d_cls[l].shape);
            st.l_cls = loss_cls(out, t_outs, cfg.temperature, &g);
            for (std::size_t l = 0; l < g.size(); ++l) {
              for (std::size_t i = 0; i < g[l].data.size(); ++i)
                mg.d_cls[l].data[i] += cfg.lambda_cls * g[l].data[i];
            }
          }
          if (cfg.lambda_reg > 0) {
            std::vector<Tensor> g(mg.d_reg.size());
            for (std::size_t l = 0; l < g.size(); ++l) g[l] = Tensor::zeros(mg.d_reg[l].shape);
            st.l_reg = loss_reg(out, t_outs, &g);
            for (std::size_t l = 0; l < g.size(); ++l) {
              for (std::size_t i = 0; i < g[l].data.size(); ++i)
                mg.d_reg[l].data[i] += cfg.lambda_reg * g[l].data[i];
            }
          }
        }
        st.total = st.l_det + cfg.lambda_fea * st.l_fea + cfg.lambda_cls * st.l_cls +
                   cfg.lambda_reg * st.l_reg;
        backward(m, ctx, mg, grads);
        return st;
      },
      epoch_log ? &log : nullptr);

  if (epoch_log) {
    for (int e = 0; e < static_cast<int>(log.size()); ++e) {
      const StepStats& s = log[static_cast<std::size_t>(e)];
      epoch_log->push_back({0, e, s.l_det, s.l_fea, s.l_cls, s.l_reg, s.total});
    }
  }
  return student;
}

DetectorModel fedavg_aggregate(const std::vector<DetectorModel>& models,
                               const std::vector<double>& weights) {
  if (models.empty()) throw std::invalid_argument("fedavg_aggregate: no models");
  if (models.size() != weights.size())
    throw std::invalid_argument("fedavg_aggregate: weight count mismatch");
  double sum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("fedavg_aggregate: negative weight");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("fedavg_aggregate: weights must sum to 1");
  for (const DetectorModel& m : models) {
    if (!m.same_architecture(models.front()))
      throw std::invalid_argument("fedavg_aggregate: architecture mismatch");
  }

  DetectorModel out = models.front();
  std::vector<Parameter*> params = out.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<double>& dst = params[p]->value.data;
    for (double& v : dst) v *= weights[0];
    for (std::size_t m = 1; m < models.size(); ++m) {
      const std::vector<double>& src = models[m].parameters()[p]->value.data;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += weights[m] * src[i];
    }
  }
  return out;
}

}  // namespace feddet
