#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>

#include "data/dataset.hpp"
#include "nn/model.hpp"
#include "nn/train.hpp"
#include "obf/key.hpp"

namespace xnn::report {

using json = nlohmann::json;

// Obfuscation choices for a run. kind "identity" is the vanilla condition.
struct ObfSection {
  std::string kind = "orthogonal";  // orthogonal | gaussian | identity
  uint64_t key_seed = 1;

  void validate() const;
  json to_json() const;
  static ObfSection from_json(const json& j);
  obf::ObfuscationKey make_key(uint32_t patches, uint32_t dim) const;
};

// Data corpus: one synthetic pool, per-identity held-out split, a slice of
// attacker reference images per training identity, and a disjoint public
// corpus for extractor pretraining.
struct DataSection {
  data::SynthConfig synth;  // covers owner train + attacker reference images
  int test_identities = 10;
  int test_images_per_identity = 20;
  int attacker_images_per_identity = 6;
  int public_identities = 30;
  int public_images_per_identity = 20;

  void validate() const;
  json to_json() const;
  static DataSection from_json(const json& j);
};

struct AttackSection {
  nn::TrainConfig train;
  int query_budget = 0;  // 0 = unlimited
  double temperature = 4.0;

  json to_json() const;
  static AttackSection from_json(const json& j);
};

struct XnndSection {
  nn::TrainConfig train_gen;
  nn::TrainConfig train_distill;
  int warmup_epochs = 2;
  double gen_lr_scale = 1.0;
  double alpha = 1.0;
  double beta = 1.0;
  double temperature = 4.0;
  double lambda = 0.5;

  json to_json() const;
  static XnndSection from_json(const json& j);
};

struct BaselinesSection {
  nn::TrainConfig train;
  double dominance_threshold = 0.65;
  int eval_encodings = 4;

  json to_json() const;
  static BaselinesSection from_json(const json& j);
};

// Whole-experiment document. Every field has a stated default; parsing
// rejects unknown fields at every level; to_json() always emits the fully
// materialized form so outputs are replayable.
struct ExperimentConfig {
  DataSection data;
  nn::ExtNetConfig extnet;
  nn::RecNetConfig recnet;
  ObfSection obf;
  nn::TrainConfig train_recnet;
  nn::TrainConfig train_pretrain;
  AttackSection attack;
  XnndSection xnnd;
  BaselinesSection baselines;
  std::string output_dir = "out";
  uint64_t master_seed = 0;
  int runs = 5;

  void validate() const;
  json to_json() const;
  static ExperimentConfig from_json(const json& j);
  static ExperimentConfig defaults();
  uint64_t hash() const;
};

ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& cfg,
                            const std::filesystem::path& path);

}  // namespace xnn::report
