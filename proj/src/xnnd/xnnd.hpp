#pragma once

#include <json.hpp>
#include <vector>

#include "nn/model.hpp"
#include "nn/train.hpp"
#include "obf/key.hpp"

namespace xnn::xnnd {

using json = nlohmann::json;
using nn::Mat;
using nn::Vec;

// Additive noise with a norm cap: the injected perturbation never exceeds
// alpha * beta times the clean map's Frobenius norm.
struct MixConfig {
  double alpha = 1.0;
  double beta = 1.0;

  void validate() const;
};

// mixed = clean + alpha * capped(noise), capped = noise scaled down to
// beta * ||clean||_F when it is larger. Per feature map, not per batch.
Mat mix_features(const Mat& clean, const Mat& noise, const MixConfig& cfg);

// Gradient of the mix w.r.t. the raw noise, needed by the generator update.
Mat mix_backward_noise(const Mat& clean, const Mat& noise, const MixConfig& cfg,
                       const Mat& d_mixed);

// Batch helper over stacked maps: each rows_per_sample block is mixed with
// its own cap.
Mat mix_features_stacked(const Mat& clean_stacked, const Mat& noise_stacked,
                         int rows_per_sample, const MixConfig& cfg);

// Plain supervised recognizer on a feature corpus; the teacher and reference
// students come from here.
struct FeatureTrainResult {
  nn::RecModel model;
  nn::TrainRun run;
};

FeatureTrainResult train_feature_recnet(const std::vector<obf::FeatureMap>& fms,
                                        const std::vector<int>& labels,
                                        int num_classes,
                                        nn::RecNetConfig rec_cfg,
                                        const nn::TrainConfig& train_cfg);

// -------------------------------------------------- generator (min-max)

// The noise encoder plays against an adversary recognizer on mixed features.
// Warmup epochs train only the adversary (the generator starts at zero
// output, so mixed == clean there); afterwards every batch takes one
// minimization step on the adversary and one maximization step on the
// generator.
struct XnndGenConfig {
  nn::NoiseEncoderConfig gen;
  nn::RecNetConfig adv;
  nn::TrainConfig train;  // epochs counts warmup + adversarial epochs
  MixConfig mix;
  int warmup_epochs = 2;
  double gen_lr_scale = 1.0;

  void validate() const;
};

struct XnndGenResult {
  nn::GenModel gen;
  nn::RecModel adv;
  nn::TrainRun run;  // epoch_loss / epoch_acc are the adversary's on mixed
  int warmup_epochs = 0;
};

XnndGenResult train_noise_generator(const std::vector<obf::FeatureMap>& fms,
                                    const std::vector<int>& labels,
                                    int num_classes, const XnndGenConfig& cfg);

// -------------------------------------------------------- distillation

// Student learns on the noised uploads from the clean-feature teacher:
// (1 - lambda) * T^2 * KL(soften(teacher(clean)) || soften(student(mixed)))
//   + lambda * CE(student(mixed), labels).
struct DistillConfig {
  nn::RecNetConfig student;
  nn::TrainConfig train;
  double temperature = 4.0;
  double lambda = 0.5;

  void validate() const;
};

struct DistillResult {
  nn::RecModel student;
  nn::TrainRun run;
};

DistillResult distill_recnet(const nn::RecModel& teacher,
                             const nn::GenModel& gen, const MixConfig& mix,
                             const std::vector<obf::FeatureMap>& clean_fms,
                             const std::vector<int>& labels, int num_classes,
                             const DistillConfig& cfg);

// Distillation loss on one batch; exposed for the lambda = 1 reduction check.
struct DistillLoss {
  double loss = 0.0;
  int correct = 0;
  Mat dlogits_student;
};

DistillLoss distill_loss(const Mat& student_logits, const Mat& teacher_logits,
                         std::span<const int> labels, double temperature,
                         double lambda);

// Client-side inference transform: clean features -> noised upload.
Mat apply_noise(const nn::GenModel& gen, const MixConfig& mix, const Mat& fm);

}  // namespace xnn::xnnd
