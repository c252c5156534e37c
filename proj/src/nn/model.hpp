#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "nn/layers.hpp"

namespace xnn::nn {

using json = nlohmann::json;

// ---------------------------------------------------------------- configs

struct ExtNetConfig {
  int image_size = 32;
  int patch_size = 8;
  int channels = 1;
  int embed_dim = 64;
  int num_blocks = 2;
  int heads = 2;
  double mlp_ratio = 2.0;
  bool use_layer_norm_tail = false;
  bool position_embedding = true;

  int patches() const {
    const int side = image_size / patch_size;
    return side * side;
  }
  int patch_len() const { return patch_size * patch_size * channels; }
  void validate() const;
  json to_json() const;
  static ExtNetConfig from_json(const json& j);
};

struct RecNetConfig {
  int embed_dim = 64;
  int num_blocks = 2;
  int heads = 2;
  double mlp_ratio = 2.0;
  int num_classes = 2;
  int embedding_dim = 32;
  bool position_embedding = false;
  int patches = 16;  // used only when position_embedding is on

  void validate() const;
  json to_json() const;
  static RecNetConfig from_json(const json& j);
};

struct NoiseEncoderConfig {
  int dim = 64;
  int num_blocks = 2;
  int heads = 2;
  double mlp_ratio = 2.0;

  void validate() const;
  json to_json() const;
  static NoiseEncoderConfig from_json(const json& j);
};

// ----------------------------------------------------------------- networks

// Feature extractor: patch rows -> P x D feature map (stacked over batch).
class ExtNet {
 public:
  explicit ExtNet(const ExtNetConfig& cfg);

  const ExtNetConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }

  struct Cache {
    Mat patches, embedded;
    std::vector<TransformerBlock::Cache> blocks;
    LayerNorm::Cache tailc;
    Mat pre_tail;
  };

  // stacked_patches: (B*P) x patch_len, returns (B*P) x D.
  Mat forward(const double* p, const Mat& stacked_patches, Cache* c) const;
  void backward(const double* p, double* g, const Cache& c,
                const Mat& d_out) const;

 private:
  ExtNetConfig cfg_;
  ParamLayout layout_;
  Linear embed_;
  size_t pos_ = 0;
  bool has_pos_ = false;
  std::vector<TransformerBlock> blocks_;
  LayerNorm tail_;
};

// Recognition network: feature map rows -> (embedding, logits).
class RecNet {
 public:
  explicit RecNet(const RecNetConfig& cfg);

  const RecNetConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }

  struct Cache {
    int rows_per_sample = 0;
    Mat x;
    std::vector<TransformerBlock::Cache> blocks;
    LayerNorm::Cache lnc;
    Mat normed, pooled, eraw;
  };

  struct Output {
    Mat embeddings_raw;  // B x E, unnormalized
    Mat logits;          // B x C
  };

  Output forward(const double* p, const Mat& stacked_features,
                 int rows_per_sample, Cache* c) const;
  // Returns the gradient w.r.t. the stacked input features.
  Mat backward(const double* p, double* g, const Cache& c,
               const Mat& d_logits) const;

 private:
  RecNetConfig cfg_;
  ParamLayout layout_;
  size_t pos_ = 0;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_ln_;
  Linear embed_head_, logit_head_;
};

// XNN-d noise encoder: same block stack as the extractor, applied to the
// clean feature map; final projection starts at zero so the game opens with
// no noise.
class NoiseEncoder {
 public:
  explicit NoiseEncoder(const NoiseEncoderConfig& cfg);

  const NoiseEncoderConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }

  struct Cache {
    int rows_per_sample = 0;
    Mat x;
    std::vector<TransformerBlock::Cache> blocks;
    Mat pre_out;
  };

  Mat forward(const double* p, const Mat& stacked_features,
              int rows_per_sample, Cache* c) const;
  Mat backward(const double* p, double* g, const Cache& c,
               const Mat& d_noise) const;

 private:
  NoiseEncoderConfig cfg_;
  ParamLayout layout_;
  std::vector<TransformerBlock> blocks_;
  Linear out_;
};

Mat l2_normalize_rows(const Mat& m);

// ------------------------------------------------------------- persistence

// Named-parameter container with config snapshot and init seed.
// Binary format: magic "XNNM" | version u16 | kind str | config json str |
// seed u64 | tensor count u32 | per tensor: name str, rows u32, cols u32,
// f64 column-major data | CRC32.
inline constexpr uint16_t kModelFileVersion = 1;

struct ModelFile {
  std::string kind;
  json config;
  uint64_t seed = 0;
  std::vector<std::pair<std::string, Mat>> tensors;
};

std::vector<uint8_t> model_serialize(const ModelFile& m);
ModelFile model_deserialize(const std::vector<uint8_t>& bytes);
void model_save(const ModelFile& m, const std::filesystem::path& path);
ModelFile model_load(const std::filesystem::path& path);

ModelFile pack_params(const std::string& kind, const json& config,
                      uint64_t seed, const ParamLayout& layout,
                      std::span<const double> params);
std::vector<double> unpack_params(const ModelFile& m,
                                  const ParamLayout& layout);

// ------------------------------------------------------- runtime bundles

struct ExtModel {
  ExtNetConfig cfg;
  std::vector<double> params;
  uint64_t seed = 0;

  ModelFile to_file() const;
  static ExtModel from_file(const ModelFile& f);
  uint64_t config_hash() const;
};

struct RecModel {
  RecNetConfig cfg;
  std::vector<double> params;
  uint64_t seed = 0;

  ModelFile to_file() const;
  static RecModel from_file(const ModelFile& f);
};

struct GenModel {
  NoiseEncoderConfig cfg;
  std::vector<double> params;
  uint64_t seed = 0;

  ModelFile to_file() const;
  static GenModel from_file(const ModelFile& f);
};

}  // namespace xnn::nn
