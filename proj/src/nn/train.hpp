#pragma once

#include <functional>
#include <json.hpp>
#include <span>
#include <string>
#include <vector>

#include "nn/layout.hpp"

namespace xnn::nn {

using json = nlohmann::json;

struct TrainConfig {
  double lr = 0.05;
  double weight_decay = 4e-5;
  double momentum = 0.9;
  bool nesterov = true;
  bool cosine_schedule = true;
  double min_lr = 0.0;
  double clip_grad_norm = 0.0;  // 0 disables clipping
  int batch_size = 256;
  int epochs = 10;
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static TrainConfig from_json(const json& j);
};

// Everything a training call produces besides the weights. Curves are per
// epoch; a non-finite loss stops training and leaves the partial record with
// aborted set.
struct TrainRun {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_acc;
  std::vector<double> epoch_lr;
  json config_snapshot;
  uint64_t seed = 0;
  bool aborted = false;
  std::string abort_reason;
  std::vector<uint64_t> batch_key_fingerprints;
  double wall_time_sec = 0.0;

  json to_json() const;
};

// Cosine annealing over cfg.epochs; epoch 0 runs at the base rate.
double lr_for_epoch(const TrainConfig& cfg, int epoch);

// SGD with momentum, optional Nesterov lookahead, and decoupled-from-nothing
// L2 weight decay folded into the gradient (torch.optim.SGD semantics).
class SgdOptimizer {
 public:
  SgdOptimizer(size_t n_params, const TrainConfig& cfg);
  void step(std::span<double> params, std::span<double> grads, double lr);

 private:
  std::vector<double> velocity_;
  double momentum_;
  double weight_decay_;
  double clip_;
  bool nesterov_;
};

struct CeResult {
  double loss = 0.0;   // mean over the batch
  int correct = 0;     // top-1 hits against the target
  Mat dlogits;         // gradient of the mean loss
};

Mat softmax_rows(const Mat& logits);
CeResult softmax_ce(const Mat& logits, std::span<const int> labels);
// Soft targets; rows must be distributions. Accuracy counts argmax agreement.
CeResult softmax_ce_soft(const Mat& logits, const Mat& targets);

struct BatchStats {
  double loss_sum = 0.0;
  int correct = 0;
  int count = 0;
};

// One optimizer step over the given sample indices; the callee owns the
// forward/backward/step sequence and reports summed loss and hits.
using BatchStep = std::function<BatchStats(
    int epoch, int batch, std::span<const int> idx, double lr)>;

// Orchestrates seeded per-epoch shuffling, the lr schedule, curve recording
// and the NaN abort. Batch composition is reproducible from cfg.seed alone.
TrainRun run_training(const std::string& label, int n_samples,
                      const TrainConfig& cfg, const BatchStep& step);

std::vector<std::vector<int>> make_batches(int n_samples, int batch_size,
                                           uint64_t seed, int epoch);

}  // namespace xnn::nn
