#include "xnnd/xnnd.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::xnnd {

void MixConfig::validate() const {
  if (alpha < 0.0) throw InvalidArgumentError("mix: alpha must be >= 0");
  if (beta <= 0.0) throw InvalidArgumentError("mix: beta must be > 0");
}

namespace {
constexpr double kNormFloor = 1e-12;
}

Mat mix_features(const Mat& clean, const Mat& noise, const MixConfig& cfg) {
  cfg.validate();
  if (clean.rows() != noise.rows() || clean.cols() != noise.cols())
    throw ShapeError("mix: clean and noise shapes differ");
  const double cap = cfg.beta * clean.norm();
  const double nn_ = noise.norm();
  if (nn_ <= cap || nn_ < kNormFloor) return clean + cfg.alpha * noise;
  return clean + (cfg.alpha * cap / nn_) * noise;
}

Mat mix_backward_noise(const Mat& clean, const Mat& noise, const MixConfig& cfg,
                       const Mat& d_mixed) {
  const double cap = cfg.beta * clean.norm();
  const double nn_ = noise.norm();
  if (nn_ <= cap || nn_ < kNormFloor) return cfg.alpha * d_mixed;
  // mixed = clean + alpha * (cap / ||n||) * n; the scale depends on n, so the
  // radial component of the gradient projects out.
  const double s = cap / nn_;
  const double radial = (d_mixed.array() * noise.array()).sum() / (nn_ * nn_);
  return cfg.alpha * s * (d_mixed - radial * noise);
}

Mat mix_features_stacked(const Mat& clean_stacked, const Mat& noise_stacked,
                         int rows_per_sample, const MixConfig& cfg) {
  if (clean_stacked.rows() % rows_per_sample != 0)
    throw ShapeError("mix: stacked rows not a multiple of rows_per_sample");
  Mat out(clean_stacked.rows(), clean_stacked.cols());
  for (Eigen::Index s = 0; s < clean_stacked.rows() / rows_per_sample; ++s) {
    out.middleRows(s * rows_per_sample, rows_per_sample) = mix_features(
        clean_stacked.middleRows(s * rows_per_sample, rows_per_sample),
        noise_stacked.middleRows(s * rows_per_sample, rows_per_sample), cfg);
  }
  return out;
}

// ------------------------------------------------------ plain recognizer

FeatureTrainResult train_feature_recnet(const std::vector<obf::FeatureMap>& fms,
                                        const std::vector<int>& labels,
                                        int num_classes,
                                        nn::RecNetConfig rec_cfg,
                                        const nn::TrainConfig& train_cfg) {
  if (fms.size() != labels.size() || fms.empty())
    throw InvalidArgumentError("feature recnet: bad corpus");
  const int P = static_cast<int>(fms[0].rows());
  const int D = static_cast<int>(fms[0].cols());
  rec_cfg.embed_dim = D;
  rec_cfg.num_classes = num_classes;
  if (rec_cfg.position_embedding) rec_cfg.patches = P;
  rec_cfg.validate();
  nn::RecNet net(rec_cfg);

  FeatureTrainResult res;
  res.model.cfg = rec_cfg;
  res.model.seed = Rng::derive(train_cfg.seed, 0xFEA7u);
  res.model.params.resize(net.layout().size());
  nn::init_params(net.layout(), res.model.params, res.model.seed);

  nn::SgdOptimizer opt(res.model.params.size(), train_cfg);
  std::vector<double> grads(res.model.params.size());
  res.run = nn::run_training(
      "feature-recnet", static_cast<int>(fms.size()), train_cfg,
      [&](int, int, std::span<const int> idx, double lr) {
        Mat x(static_cast<Eigen::Index>(idx.size()) * P, D);
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          x.middleRows(static_cast<Eigen::Index>(i) * P, P) = fms[idx[i]];
          y[i] = labels[idx[i]];
        }
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            net.forward(res.model.params.data(), x, P, &cache);
        nn::CeResult ce = nn::softmax_ce(out.logits, y);
        nn::BatchStats s{ce.loss * static_cast<double>(idx.size()), ce.correct,
                         static_cast<int>(idx.size())};
        if (!std::isfinite(ce.loss)) return s;
        std::fill(grads.begin(), grads.end(), 0.0);
        net.backward(res.model.params.data(), grads.data(), cache, ce.dlogits);
        opt.step(res.model.params, grads, lr);
        return s;
      });
  return res;
}

// -------------------------------------------------- generator (min-max)

void XnndGenConfig::validate() const {
  mix.validate();
  if (warmup_epochs < 0)
    throw InvalidArgumentError("xnnd: warmup_epochs must be >= 0");
  if (warmup_epochs >= train.epochs)
    throw InvalidArgumentError(
        "xnnd: warmup_epochs must leave adversarial epochs");
  if (gen_lr_scale <= 0.0)
    throw InvalidArgumentError("xnnd: gen_lr_scale must be > 0");
}

XnndGenResult train_noise_generator(const std::vector<obf::FeatureMap>& fms,
                                    const std::vector<int>& labels,
                                    int num_classes,
                                    const XnndGenConfig& cfg) {
  cfg.validate();
  if (fms.size() != labels.size() || fms.empty())
    throw InvalidArgumentError("xnnd: bad feature corpus");
  const int P = static_cast<int>(fms[0].rows());
  const int D = static_cast<int>(fms[0].cols());
  if (cfg.gen.dim != D)
    throw ShapeError("xnnd: generator dim does not match features");

  nn::NoiseEncoder gen_net(cfg.gen);
  nn::RecNetConfig adv_cfg = cfg.adv;
  adv_cfg.embed_dim = D;
  adv_cfg.num_classes = num_classes;
  if (adv_cfg.position_embedding) adv_cfg.patches = P;
  adv_cfg.validate();
  nn::RecNet adv_net(adv_cfg);

  XnndGenResult res;
  res.warmup_epochs = cfg.warmup_epochs;
  res.gen.cfg = cfg.gen;
  res.gen.seed = Rng::derive(cfg.train.seed, 0x6E4u);
  res.gen.params.resize(gen_net.layout().size());
  nn::init_params(gen_net.layout(), res.gen.params, res.gen.seed);
  res.adv.cfg = adv_cfg;
  res.adv.seed = Rng::derive(cfg.train.seed, 0xAD4u);
  res.adv.params.resize(adv_net.layout().size());
  nn::init_params(adv_net.layout(), res.adv.params, res.adv.seed);

  nn::SgdOptimizer adv_opt(res.adv.params.size(), cfg.train);
  nn::SgdOptimizer gen_opt(res.gen.params.size(), cfg.train);
  std::vector<double> adv_grads(res.adv.params.size());
  std::vector<double> gen_grads(res.gen.params.size());

  res.run = nn::run_training(
      "xnnd-gan", static_cast<int>(fms.size()), cfg.train,
      [&](int epoch, int, std::span<const int> idx, double lr) {
        const auto B = static_cast<Eigen::Index>(idx.size());
        Mat clean(B * P, D);
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          clean.middleRows(static_cast<Eigen::Index>(i) * P, P) = fms[idx[i]];
          y[i] = labels[idx[i]];
        }

        // Adversary minimization step on the current mixed features.
        nn::NoiseEncoder::Cache gen_cache;
        Mat noise =
            gen_net.forward(res.gen.params.data(), clean, P, &gen_cache);
        Mat mixed = mix_features_stacked(clean, noise, P, cfg.mix);
        nn::RecNet::Cache adv_cache;
        nn::RecNet::Output out =
            adv_net.forward(res.adv.params.data(), mixed, P, &adv_cache);
        nn::CeResult ce = nn::softmax_ce(out.logits, y);
        nn::BatchStats stats{ce.loss * static_cast<double>(idx.size()),
                             ce.correct, static_cast<int>(idx.size())};
        if (!std::isfinite(ce.loss)) return stats;
        std::fill(adv_grads.begin(), adv_grads.end(), 0.0);
        adv_net.backward(res.adv.params.data(), adv_grads.data(), adv_cache,
                         ce.dlogits);
        adv_opt.step(res.adv.params, adv_grads, lr);

        if (epoch < cfg.warmup_epochs) return stats;

        // Generator maximization step against the updated adversary.
        nn::NoiseEncoder::Cache gc2;
        Mat noise2 = gen_net.forward(res.gen.params.data(), clean, P, &gc2);
        Mat mixed2 = mix_features_stacked(clean, noise2, P, cfg.mix);
        nn::RecNet::Cache ac2;
        nn::RecNet::Output out2 =
            adv_net.forward(res.adv.params.data(), mixed2, P, &ac2);
        nn::CeResult ce2 = nn::softmax_ce(out2.logits, y);
        if (!std::isfinite(ce2.loss)) {
          stats.loss_sum = ce2.loss;
          return stats;
        }
        std::vector<double> adv_scratch(res.adv.params.size(), 0.0);
        Mat d_mixed = adv_net.backward(res.adv.params.data(),
                                       adv_scratch.data(), ac2, ce2.dlogits);
        // Ascent on the adversary's loss: flip the sign into the generator.
        Mat d_noise(B * P, D);
        for (Eigen::Index s = 0; s < B; ++s)
          d_noise.middleRows(s * P, P) = mix_backward_noise(
              clean.middleRows(s * P, P), noise2.middleRows(s * P, P), cfg.mix,
              Mat(-d_mixed.middleRows(s * P, P)));
        std::fill(gen_grads.begin(), gen_grads.end(), 0.0);
        gen_net.backward(res.gen.params.data(), gen_grads.data(), gc2,
                         d_noise);
        gen_opt.step(res.gen.params, gen_grads, lr * cfg.gen_lr_scale);
        return stats;
      });
  return res;
}

// -------------------------------------------------------- distillation

void DistillConfig::validate() const {
  if (temperature <= 0.0)
    throw InvalidArgumentError("distill: temperature must be > 0");
  if (lambda < 0.0 || lambda > 1.0)
    throw InvalidArgumentError("distill: lambda must be in [0, 1]");
}

DistillLoss distill_loss(const Mat& student_logits, const Mat& teacher_logits,
                         std::span<const int> labels, double temperature,
                         double lambda) {
  if (student_logits.rows() != teacher_logits.rows() ||
      student_logits.cols() != teacher_logits.cols())
    throw ShapeError("distill: student and teacher logit shapes differ");
  const auto B = student_logits.rows();
  const double T = temperature;

  nn::CeResult hard = nn::softmax_ce(student_logits, labels);

  Mat p = nn::softmax_rows(teacher_logits / T);  // fixed target
  Mat q = nn::softmax_rows(student_logits / T);
  double kl = 0.0;
  for (Eigen::Index i = 0; i < B; ++i)
    for (Eigen::Index c = 0; c < p.cols(); ++c)
      if (p(i, c) > 0.0)
        kl += p(i, c) * std::log(std::max(p(i, c), 1e-300) /
                                 std::max(q(i, c), 1e-300));
  kl /= static_cast<double>(B);

  DistillLoss out;
  out.loss = (1.0 - lambda) * T * T * kl + lambda * hard.loss;
  out.correct = hard.correct;
  // d/dz of T^2 * KL(p || q(z/T)) is T * (q - p); mean over the batch.
  out.dlogits_student =
      (1.0 - lambda) * T * (q - p) / static_cast<double>(B) +
      lambda * hard.dlogits;
  return out;
}

DistillResult distill_recnet(const nn::RecModel& teacher,
                             const nn::GenModel& gen, const MixConfig& mix,
                             const std::vector<obf::FeatureMap>& clean_fms,
                             const std::vector<int>& labels, int num_classes,
                             const DistillConfig& cfg) {
  cfg.validate();
  mix.validate();
  if (clean_fms.size() != labels.size() || clean_fms.empty())
    throw InvalidArgumentError("distill: bad corpus");
  const int P = static_cast<int>(clean_fms[0].rows());
  const int D = static_cast<int>(clean_fms[0].cols());
  if (teacher.cfg.embed_dim != D)
    throw ShapeError("distill: teacher dim mismatch");
  if (teacher.cfg.num_classes != num_classes)
    throw ShapeError("distill: teacher class count mismatch");
  if (gen.cfg.dim != D) throw ShapeError("distill: generator dim mismatch");

  nn::RecNetConfig student_cfg = cfg.student;
  student_cfg.embed_dim = D;
  student_cfg.num_classes = num_classes;
  if (student_cfg.position_embedding) student_cfg.patches = P;
  student_cfg.validate();
  nn::RecNet student_net(student_cfg);
  nn::RecNet teacher_net(teacher.cfg);
  nn::NoiseEncoder gen_net(gen.cfg);

  DistillResult res;
  res.student.cfg = student_cfg;
  res.student.seed = Rng::derive(cfg.train.seed, 0x57Du);
  res.student.params.resize(student_net.layout().size());
  nn::init_params(student_net.layout(), res.student.params, res.student.seed);

  nn::SgdOptimizer opt(res.student.params.size(), cfg.train);
  std::vector<double> grads(res.student.params.size());
  res.run = nn::run_training(
      "xnnd-distill", static_cast<int>(clean_fms.size()), cfg.train,
      [&](int, int, std::span<const int> idx, double lr) {
        const auto B = static_cast<Eigen::Index>(idx.size());
        Mat clean(B * P, D);
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          clean.middleRows(static_cast<Eigen::Index>(i) * P, P) =
              clean_fms[idx[i]];
          y[i] = labels[idx[i]];
        }
        Mat noise = gen_net.forward(gen.params.data(), clean, P, nullptr);
        Mat mixed = mix_features_stacked(clean, noise, P, mix);

        Mat teacher_logits =
            teacher_net.forward(teacher.params.data(), clean, P, nullptr)
                .logits;
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            student_net.forward(res.student.params.data(), mixed, P, &cache);
        DistillLoss dl = distill_loss(out.logits, teacher_logits, y,
                                      cfg.temperature, cfg.lambda);
        nn::BatchStats s{dl.loss * static_cast<double>(idx.size()), dl.correct,
                         static_cast<int>(idx.size())};
        if (!std::isfinite(dl.loss)) return s;
        std::fill(grads.begin(), grads.end(), 0.0);
        student_net.backward(res.student.params.data(), grads.data(), cache,
                             dl.dlogits_student);
        opt.step(res.student.params, grads, lr);
        return s;
      });
  return res;
}

Mat apply_noise(const nn::GenModel& gen, const MixConfig& mix, const Mat& fm) {
  nn::NoiseEncoder net(gen.cfg);
  Mat noise = net.forward(gen.params.data(), fm,
                          static_cast<int>(fm.rows()), nullptr);
  return mix_features(fm, noise, mix);
}

}  // namespace xnn::xnnd
