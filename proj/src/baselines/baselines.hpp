#pragma once

#include <memory>
#include <vector>

#include "common/rng.hpp"
#include "data/dataset.hpp"
#include "pipeline/pipeline.hpp"

namespace xnn::baselines {

using nn::Mat;
using nn::Vec;

// Image-space mixing defense: each upload is a random convex combination of
// k images with a fresh pixelwise sign flip (a one-time key).
struct InstaHideConfig {
  int k = 2;
  double dominance_threshold = 0.65;

  void validate() const;
};

// k positive coefficients summing to one, resampled until every entry is at
// or below the threshold. The threshold must be reachable (> 1/k).
std::vector<double> instahide_coefficients(int k, double threshold, Rng& rng);

// out = signmask .* (lambda_0 * image + sum_i lambda_i * partners[i-1]).
// Coefficients and mask are drawn fresh from rng on every call; output pixels
// leave [0, 1] by design.
data::Image instahide_encode(const data::Image& image,
                             const std::vector<const data::Image*>& partners,
                             const InstaHideConfig& cfg, Rng& rng);

// Cloud-side training on encoded uploads: every batch re-encodes its images
// with fresh partners, coefficients and sign masks. With soft_labels the
// targets are the lambda-weighted label mixture; the attacker variant keeps
// the hard label of the dominant (own) image.
struct InstaHideTrainResult {
  nn::RecModel rec;
  nn::TrainRun run;
};

InstaHideTrainResult train_instahide_recnet(const data::IdentityDataset& ds,
                                            const nn::ExtModel& ext,
                                            const InstaHideConfig& cfg,
                                            nn::RecNetConfig rec_cfg,
                                            const nn::TrainConfig& tcfg,
                                            bool soft_labels = true);

// Inference-side embedder: each query is freshly encoded with partners drawn
// from the pool, then extracted and embedded; n_encodings > 1 averages that
// many independent encodings (the client may upload several). An internal
// call counter keeps whole-run evaluation reproducible from the seed.
pipeline::EmbedFn make_instahide_embedder(const nn::ExtModel& ext,
                                          const nn::RecModel& rec,
                                          const data::IdentityDataset& pool,
                                          const InstaHideConfig& cfg,
                                          uint64_t seed, int n_encodings = 1);

// No-defense condition: the keyed pipeline run with the identity key and the
// identity label map, bit for bit.
struct VanillaResult {
  pipeline::ObfuscatedDataset ds;
  nn::RecModel rec;
  nn::TrainRun run;
};

VanillaResult run_vanilla_pipeline(const data::IdentityDataset& train,
                                   const nn::ExtModel& ext,
                                   const nn::RecNetConfig& rec_cfg,
                                   const nn::TrainConfig& tcfg);

}  // namespace xnn::baselines
