#include "nn/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::nn {

namespace {

template <typename T>
T get_or(const json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  return j.at(key).get<T>();
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw InvalidArgumentError("lr must be > 0");
  if (weight_decay < 0.0) throw InvalidArgumentError("weight_decay must be >= 0");
  if (momentum < 0.0 || momentum >= 1.0)
    throw InvalidArgumentError("momentum must be in [0, 1)");
  if (min_lr < 0.0 || min_lr > lr)
    throw InvalidArgumentError("min_lr must be in [0, lr]");
  if (clip_grad_norm < 0.0)
    throw InvalidArgumentError("clip_grad_norm must be >= 0");
  if (batch_size < 1) throw InvalidArgumentError("batch_size must be >= 1");
  if (epochs < 1) throw InvalidArgumentError("epochs must be >= 1");
}

json TrainConfig::to_json() const {
  return json{{"lr", lr},
              {"weight_decay", weight_decay},
              {"momentum", momentum},
              {"nesterov", nesterov},
              {"cosine_schedule", cosine_schedule},
              {"min_lr", min_lr},
              {"clip_grad_norm", clip_grad_norm},
              {"batch_size", batch_size},
              {"epochs", epochs},
              {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object())
    throw ParseError(ParseError::Kind::Malformed,
                     "TrainConfig: expected object");
  static const char* allowed[] = {"lr",        "weight_decay",  "momentum",
                                  "nesterov",  "cosine_schedule", "min_lr",
                                  "clip_grad_norm", "batch_size", "epochs",
                                  "seed"};
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (std::find_if(std::begin(allowed), std::end(allowed),
                     [&](const char* a) { return k == a; }) ==
        std::end(allowed))
      throw ParseError(ParseError::Kind::Malformed,
                       "TrainConfig: unknown field \"" + k + "\"");
  }
  TrainConfig c;
  c.lr = get_or(j, "lr", c.lr);
  c.weight_decay = get_or(j, "weight_decay", c.weight_decay);
  c.momentum = get_or(j, "momentum", c.momentum);
  c.nesterov = get_or(j, "nesterov", c.nesterov);
  c.cosine_schedule = get_or(j, "cosine_schedule", c.cosine_schedule);
  c.min_lr = get_or(j, "min_lr", c.min_lr);
  c.clip_grad_norm = get_or(j, "clip_grad_norm", c.clip_grad_norm);
  c.batch_size = get_or(j, "batch_size", c.batch_size);
  c.epochs = get_or(j, "epochs", c.epochs);
  c.seed = get_or(j, "seed", c.seed);
  c.validate();
  return c;
}

json TrainRun::to_json() const {
  json j{{"epoch_loss", epoch_loss},
         {"epoch_acc", epoch_acc},
         {"epoch_lr", epoch_lr},
         {"config", config_snapshot},
         {"seed", seed},
         {"aborted", aborted},
         {"wall_time_sec", wall_time_sec}};
  if (aborted) j["abort_reason"] = abort_reason;
  if (!batch_key_fingerprints.empty()) {
    std::vector<std::string> hex;
    hex.reserve(batch_key_fingerprints.size());
    char buf[17];
    for (uint64_t f : batch_key_fingerprints) {
      std::snprintf(buf, sizeof buf, "%016llx",
                    static_cast<unsigned long long>(f));
      hex.emplace_back(buf);
    }
    j["batch_key_fingerprints"] = hex;
  }
  return j;
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
  if (!cfg.cosine_schedule) return cfg.lr;
  const double t = static_cast<double>(epoch) / cfg.epochs;
  return cfg.min_lr +
         0.5 * (cfg.lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

SgdOptimizer::SgdOptimizer(size_t n_params, const TrainConfig& cfg)
    : velocity_(n_params, 0.0),
      momentum_(cfg.momentum),
      weight_decay_(cfg.weight_decay),
      clip_(cfg.clip_grad_norm),
      nesterov_(cfg.nesterov) {}

void SgdOptimizer::step(std::span<double> params, std::span<double> grads,
                        double lr) {
  if (params.size() != velocity_.size() || grads.size() != velocity_.size())
    throw ShapeError("SgdOptimizer: buffer size mismatch");
  const size_t n = params.size();
  if (clip_ > 0.0) {
    double sq = 0.0;
    for (size_t i = 0; i < n; ++i) sq += grads[i] * grads[i];
    const double norm = std::sqrt(sq);
    if (norm > clip_) {
      const double s = clip_ / norm;
      for (size_t i = 0; i < n; ++i) grads[i] *= s;
    }
  }
  for (size_t i = 0; i < n; ++i) {
    double g = grads[i] + weight_decay_ * params[i];
    double v = momentum_ * velocity_[i] + g;
    velocity_[i] = v;
    const double d = nesterov_ ? g + momentum_ * v : v;
    params[i] -= lr * d;
  }
}

Mat softmax_rows(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - mx).exp();
    out.row(i) = e / e.sum();
  }
  return out;
}

CeResult softmax_ce(const Mat& logits, std::span<const int> labels) {
  if (static_cast<size_t>(logits.rows()) != labels.size())
    throw ShapeError("softmax_ce: label count mismatch");
  const auto B = logits.rows();
  const auto C = logits.cols();
  CeResult r;
  r.dlogits = softmax_rows(logits);
  for (Eigen::Index i = 0; i < B; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= C) throw InvalidArgumentError("softmax_ce: label out of range");
    r.loss += -std::log(std::max(r.dlogits(i, y), 1e-300));
    Eigen::Index am;
    logits.row(i).maxCoeff(&am);
    if (am == y) ++r.correct;
    r.dlogits(i, y) -= 1.0;
  }
  r.loss /= static_cast<double>(B);
  r.dlogits /= static_cast<double>(B);
  return r;
}

CeResult softmax_ce_soft(const Mat& logits, const Mat& targets) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols())
    throw ShapeError("softmax_ce_soft: target shape mismatch");
  const auto B = logits.rows();
  CeResult r;
  Mat probs = softmax_rows(logits);
  for (Eigen::Index i = 0; i < B; ++i) {
    for (Eigen::Index c = 0; c < logits.cols(); ++c)
      if (targets(i, c) > 0.0)
        r.loss += -targets(i, c) * std::log(std::max(probs(i, c), 1e-300));
    Eigen::Index am, at;
    logits.row(i).maxCoeff(&am);
    targets.row(i).maxCoeff(&at);
    if (am == at) ++r.correct;
  }
  r.loss /= static_cast<double>(B);
  r.dlogits = (probs - targets) / static_cast<double>(B);
  return r;
}

std::vector<std::vector<int>> make_batches(int n_samples, int batch_size,
                                           uint64_t seed, int epoch) {
  if (n_samples < 1) throw InvalidArgumentError("make_batches: empty dataset");
  std::vector<int> order(n_samples);
  for (int i = 0; i < n_samples; ++i) order[i] = i;
  Rng rng(Rng::derive(seed, 0xE50000u + static_cast<uint64_t>(epoch)));
  rng.shuffle(order);
  std::vector<std::vector<int>> batches;
  for (int start = 0; start < n_samples; start += batch_size) {
    const int end = std::min(n_samples, start + batch_size);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

TrainRun run_training(const std::string& label, int n_samples,
                      const TrainConfig& cfg, const BatchStep& step) {
  cfg.validate();
  if (n_samples < 1)
    throw InvalidArgumentError("run_training: empty dataset");
  TrainRun run;
  run.seed = cfg.seed;
  run.config_snapshot =
      json{{"label", label}, {"n_samples", n_samples}, {"train", cfg.to_json()}};
  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_for_epoch(cfg, epoch);
    auto batches = make_batches(n_samples, cfg.batch_size, cfg.seed, epoch);
    double loss_sum = 0.0;
    long correct = 0, count = 0;
    bool bad = false;
    for (size_t b = 0; b < batches.size(); ++b) {
      BatchStats s = step(epoch, static_cast<int>(b), batches[b], lr);
      if (!std::isfinite(s.loss_sum)) {
        run.aborted = true;
        run.abort_reason = label + ": non-finite loss at epoch " +
                           std::to_string(epoch) + " batch " +
                           std::to_string(b);
        bad = true;
        break;
      }
      loss_sum += s.loss_sum;
      correct += s.correct;
      count += s.count;
    }
    if (count > 0) {
      run.epoch_loss.push_back(loss_sum / static_cast<double>(count));
      run.epoch_acc.push_back(static_cast<double>(correct) /
                              static_cast<double>(count));
      run.epoch_lr.push_back(lr);
    }
    if (bad) break;
  }
  run.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return run;
}

}  // namespace xnn::nn
