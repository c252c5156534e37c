#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <json.hpp>
#include <vector>

#include "data/dataset.hpp"
#include "nn/model.hpp"
#include "nn/train.hpp"
#include "obf/key.hpp"

namespace xnn::pipeline {

using json = nlohmann::json;
using nn::Mat;
using nn::Vec;

// Owner identity -> anonymous training label, bijective. The cloud only ever
// sees the anonymous side.
struct AnonymousLabelMap {
  std::vector<int> to_anon;
  std::vector<int> to_identity;

  static AnonymousLabelMap shuffled(int n, uint64_t seed);
  static AnonymousLabelMap identity(int n);
  int size() const { return static_cast<int>(to_anon.size()); }
  int anon(int id) const;
  int identity_of(int a) const;
  void validate() const;
};

// Feature extraction through a frozen extractor.
Mat extract_features(const nn::ExtModel& ext, const data::Image& img);
Mat extract_features_stacked(const nn::ExtModel& ext,
                             const std::vector<data::Image>& images,
                             const std::vector<int>& idx);

// What the owner uploads: per-sample obfuscated feature maps in float32 plus
// anonymous labels. Binary format: magic "XNNO" | version u16 |
// ext_config_hash u64 | key_fingerprint u64 | num_classes u32 | patches u32 |
// dim u32 | count u32 | labels u32[count] | features f32 row-major | CRC32.
inline constexpr uint16_t kObfDatasetVersion = 1;

struct ObfuscatedDataset {
  uint32_t patches = 0, dim = 0, num_classes = 0;
  uint64_t ext_config_hash = 0;
  uint64_t key_fingerprint = 0;
  std::vector<Eigen::MatrixXf> features;
  std::vector<uint32_t> labels;

  size_t size() const { return features.size(); }
  // Double-precision stacked view of selected samples, gemm ready.
  Mat stack(const std::vector<int>& idx) const;
  Mat stack_span(std::span<const int> idx) const;
  void validate() const;
};

std::vector<uint8_t> obf_dataset_serialize(const ObfuscatedDataset& ds);
ObfuscatedDataset obf_dataset_deserialize(const std::vector<uint8_t>& bytes);
void obf_dataset_save(const ObfuscatedDataset& ds,
                      const std::filesystem::path& path);
ObfuscatedDataset obf_dataset_load(const std::filesystem::path& path);

ObfuscatedDataset build_obfuscated_dataset(const nn::ExtModel& ext,
                                           const obf::ObfuscationKey& key,
                                           const data::IdentityDataset& ds,
                                           const AnonymousLabelMap& labels);

// Cloud-side training on the uploaded features.
struct TrainResult {
  nn::RecModel model;
  nn::TrainRun run;
};

nn::RecNetConfig recnet_config_for(const ObfuscatedDataset& ds,
                                   nn::RecNetConfig base);
TrainResult train_recnet_obf(const ObfuscatedDataset& ds,
                             const nn::RecNetConfig& rec_cfg,
                             const nn::TrainConfig& train_cfg);

// Inference-side embedding of one feature map (normalized rows).
Vec infer_embedding(const nn::RecModel& rec, const Mat& feature_map);

// Identification protocol: per identity, a deterministic half/half
// gallery/probe split; probes match against renormalized gallery centroids by
// cosine. Identities with fewer than two images are skipped and reported.
using EmbedFn = std::function<Vec(const data::Image&)>;

struct UtilityReport {
  double accuracy = 0.0;
  int probes = 0;
  int hits = 0;
  std::vector<std::string> skipped;
  json to_json() const;
};

UtilityReport eval_utility(const EmbedFn& embed,
                           const data::IdentityDataset& test, uint64_t seed);

EmbedFn make_pipeline_embedder(const nn::ExtModel& ext,
                               const obf::ObfuscationKey& key,
                               const nn::RecModel& rec);

// Extractor pretraining: a throwaway recognition head is trained jointly on a
// public corpus, then discarded; only the extractor weights are kept.
struct ExtPretrainResult {
  nn::ExtModel ext;
  nn::TrainRun run;
  double head_train_acc = 0.0;
};

ExtPretrainResult pretrain_extnet(const data::IdentityDataset& public_ds,
                                  const nn::ExtNetConfig& ext_cfg,
                                  int head_blocks,
                                  const nn::TrainConfig& train_cfg);

}  // namespace xnn::pipeline
