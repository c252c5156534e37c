#include "nn/model.hpp"

#include <algorithm>
#include <cmath>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace xnn::nn {

namespace {

constexpr char kMagic[4] = {'X', 'N', 'N', 'M'};

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& what) {
  if (!j.is_object())
    throw ParseError(ParseError::Kind::Malformed, what + ": expected object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return k == a;
        }) == allowed.end())
      throw ParseError(ParseError::Kind::Malformed,
                       what + ": unknown field \"" + k + "\"");
  }
}

template <typename T>
T get_or(const json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  return j.at(key).get<T>();
}

void require_positive(int v, const char* name) {
  if (v < 1)
    throw InvalidArgumentError(std::string(name) + " must be positive, got " +
                               std::to_string(v));
}

}  // namespace

// ---------------------------------------------------------------- configs

void ExtNetConfig::validate() const {
  require_positive(image_size, "image_size");
  require_positive(patch_size, "patch_size");
  require_positive(channels, "channels");
  require_positive(embed_dim, "embed_dim");
  require_positive(num_blocks, "num_blocks");
  require_positive(heads, "heads");
  if (image_size % patch_size != 0)
    throw InvalidArgumentError("image_size must be divisible by patch_size");
  if (embed_dim % heads != 0)
    throw InvalidArgumentError("embed_dim must be divisible by heads");
  if (mlp_ratio <= 0.0) throw InvalidArgumentError("mlp_ratio must be > 0");
}

json ExtNetConfig::to_json() const {
  return json{{"image_size", image_size},
              {"patch_size", patch_size},
              {"channels", channels},
              {"embed_dim", embed_dim},
              {"num_blocks", num_blocks},
              {"heads", heads},
              {"mlp_ratio", mlp_ratio},
              {"use_layer_norm_tail", use_layer_norm_tail},
              {"position_embedding", position_embedding}};
}

ExtNetConfig ExtNetConfig::from_json(const json& j) {
  check_keys(j,
             {"image_size", "patch_size", "channels", "embed_dim", "num_blocks",
              "heads", "mlp_ratio", "use_layer_norm_tail",
              "position_embedding"},
             "ExtNetConfig");
  ExtNetConfig c;
  c.image_size = get_or(j, "image_size", c.image_size);
  c.patch_size = get_or(j, "patch_size", c.patch_size);
  c.channels = get_or(j, "channels", c.channels);
  c.embed_dim = get_or(j, "embed_dim", c.embed_dim);
  c.num_blocks = get_or(j, "num_blocks", c.num_blocks);
  c.heads = get_or(j, "heads", c.heads);
  c.mlp_ratio = get_or(j, "mlp_ratio", c.mlp_ratio);
  c.use_layer_norm_tail = get_or(j, "use_layer_norm_tail", c.use_layer_norm_tail);
  c.position_embedding = get_or(j, "position_embedding", c.position_embedding);
  c.validate();
  return c;
}

void RecNetConfig::validate() const {
  require_positive(embed_dim, "embed_dim");
  require_positive(num_blocks, "num_blocks");
  require_positive(heads, "heads");
  require_positive(embedding_dim, "embedding_dim");
  if (num_classes < 2)
    throw InvalidArgumentError("num_classes must be at least 2");
  if (embed_dim % heads != 0)
    throw InvalidArgumentError("embed_dim must be divisible by heads");
  if (mlp_ratio <= 0.0) throw InvalidArgumentError("mlp_ratio must be > 0");
  if (position_embedding) require_positive(patches, "patches");
}

json RecNetConfig::to_json() const {
  return json{{"embed_dim", embed_dim},
              {"num_blocks", num_blocks},
              {"heads", heads},
              {"mlp_ratio", mlp_ratio},
              {"num_classes", num_classes},
              {"embedding_dim", embedding_dim},
              {"position_embedding", position_embedding},
              {"patches", patches}};
}

RecNetConfig RecNetConfig::from_json(const json& j) {
  check_keys(j,
             {"embed_dim", "num_blocks", "heads", "mlp_ratio", "num_classes",
              "embedding_dim", "position_embedding", "patches"},
             "RecNetConfig");
  RecNetConfig c;
  c.embed_dim = get_or(j, "embed_dim", c.embed_dim);
  c.num_blocks = get_or(j, "num_blocks", c.num_blocks);
  c.heads = get_or(j, "heads", c.heads);
  c.mlp_ratio = get_or(j, "mlp_ratio", c.mlp_ratio);
  c.num_classes = get_or(j, "num_classes", c.num_classes);
  c.embedding_dim = get_or(j, "embedding_dim", c.embedding_dim);
  c.position_embedding = get_or(j, "position_embedding", c.position_embedding);
  c.patches = get_or(j, "patches", c.patches);
  c.validate();
  return c;
}

void NoiseEncoderConfig::validate() const {
  require_positive(dim, "dim");
  require_positive(num_blocks, "num_blocks");
  require_positive(heads, "heads");
  if (dim % heads != 0)
    throw InvalidArgumentError("dim must be divisible by heads");
  if (mlp_ratio <= 0.0) throw InvalidArgumentError("mlp_ratio must be > 0");
}

json NoiseEncoderConfig::to_json() const {
  return json{{"dim", dim},
              {"num_blocks", num_blocks},
              {"heads", heads},
              {"mlp_ratio", mlp_ratio}};
}

NoiseEncoderConfig NoiseEncoderConfig::from_json(const json& j) {
  check_keys(j, {"dim", "num_blocks", "heads", "mlp_ratio"},
             "NoiseEncoderConfig");
  NoiseEncoderConfig c;
  c.dim = get_or(j, "dim", c.dim);
  c.num_blocks = get_or(j, "num_blocks", c.num_blocks);
  c.heads = get_or(j, "heads", c.heads);
  c.mlp_ratio = get_or(j, "mlp_ratio", c.mlp_ratio);
  c.validate();
  return c;
}

// ----------------------------------------------------------------- ExtNet

ExtNet::ExtNet(const ExtNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.embed_dim;
  const int hidden = std::max(1, static_cast<int>(D * cfg_.mlp_ratio));
  embed_ = Linear(layout_, "embed", cfg_.patch_len(), D);
  if (cfg_.position_embedding) {
    pos_ = layout_.add("pos", cfg_.patches(), D, InitKind::SmallNormal, 0.02);
    has_pos_ = true;
  }
  for (int i = 0; i < cfg_.num_blocks; ++i)
    blocks_.emplace_back(layout_, "block" + std::to_string(i), D, cfg_.heads,
                         hidden);
  if (cfg_.use_layer_norm_tail) tail_ = LayerNorm(layout_, "tail", D);
}

Mat ExtNet::forward(const double* p, const Mat& stacked_patches,
                    Cache* c) const {
  const int P = cfg_.patches();
  if (stacked_patches.cols() != cfg_.patch_len())
    throw ShapeError("ExtNet: patch row length mismatch");
  if (stacked_patches.rows() % P != 0)
    throw ShapeError("ExtNet: row count not a multiple of the patch count");
  Mat x = embed_.forward(p, stacked_patches);
  if (has_pos_) {
    CMatMap pos(p + pos_, P, cfg_.embed_dim);
    const auto B = x.rows() / P;
    for (Eigen::Index s = 0; s < B; ++s) x.middleRows(s * P, P) += pos;
  }
  if (c) {
    c->patches = stacked_patches;
    c->embedded = x;
    c->blocks.resize(blocks_.size());
  }
  for (size_t i = 0; i < blocks_.size(); ++i)
    x = blocks_[i].forward(p, x, P, c ? &c->blocks[i] : nullptr);
  if (cfg_.use_layer_norm_tail) {
    if (c) c->pre_tail = x;
    x = tail_.forward(p, x, c ? &c->tailc : nullptr);
  }
  return x;
}

void ExtNet::backward(const double* p, double* g, const Cache& c,
                      const Mat& d_out) const {
  const int P = cfg_.patches();
  Mat dx = d_out;
  if (cfg_.use_layer_norm_tail) dx = tail_.backward(p, g, c.tailc, dx);
  for (size_t i = blocks_.size(); i-- > 0;)
    dx = blocks_[i].backward(p, g, P, c.blocks[i], dx);
  if (has_pos_) {
    MatMap dpos(g + pos_, P, cfg_.embed_dim);
    const auto B = dx.rows() / P;
    for (Eigen::Index s = 0; s < B; ++s) dpos += dx.middleRows(s * P, P);
  }
  embed_.backward(p, g, c.patches, dx);
}

// ----------------------------------------------------------------- RecNet

RecNet::RecNet(const RecNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.embed_dim;
  const int hidden = std::max(1, static_cast<int>(D * cfg_.mlp_ratio));
  if (cfg_.position_embedding)
    pos_ = layout_.add("pos", cfg_.patches, D, InitKind::SmallNormal, 0.02);
  for (int i = 0; i < cfg_.num_blocks; ++i)
    blocks_.emplace_back(layout_, "block" + std::to_string(i), D, cfg_.heads,
                         hidden);
  final_ln_ = LayerNorm(layout_, "final_ln", D);
  embed_head_ = Linear(layout_, "embed_head", D, cfg_.embedding_dim);
  logit_head_ = Linear(layout_, "logit_head", cfg_.embedding_dim,
                       cfg_.num_classes);
}

RecNet::Output RecNet::forward(const double* p, const Mat& stacked_features,
                               int rows_per_sample, Cache* c) const {
  if (stacked_features.cols() != cfg_.embed_dim)
    throw ShapeError("RecNet: feature dim mismatch");
  if (rows_per_sample < 1 ||
      stacked_features.rows() % rows_per_sample != 0)
    throw ShapeError("RecNet: row count not a multiple of rows_per_sample");
  if (cfg_.position_embedding && rows_per_sample != cfg_.patches)
    throw ShapeError("RecNet: rows_per_sample does not match patches");
  Mat x = stacked_features;
  if (cfg_.position_embedding) {
    CMatMap pos(p + pos_, cfg_.patches, cfg_.embed_dim);
    const auto B = x.rows() / rows_per_sample;
    for (Eigen::Index s = 0; s < B; ++s)
      x.middleRows(s * rows_per_sample, rows_per_sample) += pos;
  }
  if (c) {
    c->rows_per_sample = rows_per_sample;
    c->x = x;
    c->blocks.resize(blocks_.size());
  }
  for (size_t i = 0; i < blocks_.size(); ++i)
    x = blocks_[i].forward(p, x, rows_per_sample, c ? &c->blocks[i] : nullptr);
  Mat normed = final_ln_.forward(p, x, c ? &c->lnc : nullptr);
  Mat pooled = mean_pool(normed, rows_per_sample);
  Mat eraw = embed_head_.forward(p, pooled);
  Output out;
  out.logits = logit_head_.forward(p, eraw);
  out.embeddings_raw = eraw;
  if (c) {
    c->normed = std::move(normed);
    c->pooled = std::move(pooled);
    c->eraw = std::move(eraw);
  }
  return out;
}

Mat RecNet::backward(const double* p, double* g, const Cache& c,
                     const Mat& d_logits) const {
  Mat d_eraw = logit_head_.backward(p, g, c.eraw, d_logits);
  Mat d_pooled = embed_head_.backward(p, g, c.pooled, d_eraw);
  Mat d_normed = mean_pool_backward(d_pooled, c.rows_per_sample);
  Mat dx = final_ln_.backward(p, g, c.lnc, d_normed);
  for (size_t i = blocks_.size(); i-- > 0;)
    dx = blocks_[i].backward(p, g, c.rows_per_sample, c.blocks[i], dx);
  if (cfg_.position_embedding) {
    MatMap dpos(g + pos_, cfg_.patches, cfg_.embed_dim);
    const auto B = dx.rows() / c.rows_per_sample;
    for (Eigen::Index s = 0; s < B; ++s)
      dpos += dx.middleRows(s * c.rows_per_sample, c.rows_per_sample);
  }
  return dx;
}

// ----------------------------------------------------------- NoiseEncoder

NoiseEncoder::NoiseEncoder(const NoiseEncoderConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int D = cfg_.dim;
  const int hidden = std::max(1, static_cast<int>(D * cfg_.mlp_ratio));
  for (int i = 0; i < cfg_.num_blocks; ++i)
    blocks_.emplace_back(layout_, "block" + std::to_string(i), D, cfg_.heads,
                         hidden);
  out_ = Linear(layout_, "out", D, D, InitKind::Zeros, 0.0);
}

Mat NoiseEncoder::forward(const double* p, const Mat& stacked_features,
                          int rows_per_sample, Cache* c) const {
  if (stacked_features.cols() != cfg_.dim)
    throw ShapeError("NoiseEncoder: feature dim mismatch");
  if (rows_per_sample < 1 ||
      stacked_features.rows() % rows_per_sample != 0)
    throw ShapeError("NoiseEncoder: row count not a multiple of rows_per_sample");
  Mat x = stacked_features;
  if (c) {
    c->rows_per_sample = rows_per_sample;
    c->x = x;
    c->blocks.resize(blocks_.size());
  }
  for (size_t i = 0; i < blocks_.size(); ++i)
    x = blocks_[i].forward(p, x, rows_per_sample,
                           c ? &c->blocks[i] : nullptr);
  if (c) c->pre_out = x;
  return out_.forward(p, x);
}

Mat NoiseEncoder::backward(const double* p, double* g, const Cache& c,
                           const Mat& d_noise) const {
  Mat dx = out_.backward(p, g, c.pre_out, d_noise);
  for (size_t i = blocks_.size(); i-- > 0;)
    dx = blocks_[i].backward(p, g, c.rows_per_sample, c.blocks[i], dx);
  return dx;
}

Mat l2_normalize_rows(const Mat& m) {
  Mat out = m;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0.0) out.row(i) /= n;
  }
  return out;
}

// ------------------------------------------------------------- persistence

std::vector<uint8_t> model_serialize(const ModelFile& m) {
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kModelFileVersion);
  w.str(m.kind);
  w.str(m.config.dump());
  w.u64(m.seed);
  w.u32(static_cast<uint32_t>(m.tensors.size()));
  for (const auto& [name, t] : m.tensors) {
    w.str(name);
    w.u32(static_cast<uint32_t>(t.rows()));
    w.u32(static_cast<uint32_t>(t.cols()));
    for (Eigen::Index c = 0; c < t.cols(); ++c)
      for (Eigen::Index r = 0; r < t.rows(); ++r) w.f64(t(r, c));
  }
  w.u32(crc32_of(w.data().data(), w.data().size()));
  return w.take();
}

ModelFile model_deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8)
    throw ParseError(ParseError::Kind::Truncated, "model file too short");
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError(ParseError::Kind::BadMagic, "not a model file");
  const uint16_t ver = r.u16();
  if (ver != kModelFileVersion)
    throw ParseError(ParseError::Kind::BadVersion,
                     "unsupported model file version " + std::to_string(ver));
  ModelFile m;
  m.kind = r.str();
  const std::string cfg = r.str();
  try {
    m.config = json::parse(cfg);
  } catch (const json::exception& e) {
    throw ParseError(ParseError::Kind::Malformed,
                     std::string("model config: ") + e.what());
  }
  m.seed = r.u64();
  const uint32_t count = r.u32();
  m.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const uint32_t rows = r.u32();
    const uint32_t cols = r.u32();
    if (rows == 0 || cols == 0 ||
        static_cast<uint64_t>(rows) * cols > (1ull << 32))
      throw ParseError(ParseError::Kind::Invariant,
                       "model tensor " + name + " has invalid shape");
    Mat t(rows, cols);
    for (uint32_t c = 0; c < cols; ++c)
      for (uint32_t rr = 0; rr < rows; ++rr) t(rr, c) = r.f64();
    m.tensors.emplace_back(std::move(name), std::move(t));
  }
  const size_t body = r.pos();
  const uint32_t stored = r.u32();
  if (crc32_of(bytes.data(), body) != stored)
    throw ParseError(ParseError::Kind::BadCrc, "model file checksum mismatch");
  return m;
}

void model_save(const ModelFile& m, const std::filesystem::path& path) {
  atomic_write_file(path, model_serialize(m));
}

ModelFile model_load(const std::filesystem::path& path) {
  return model_deserialize(read_file_bytes(path));
}

ModelFile pack_params(const std::string& kind, const json& config,
                      uint64_t seed, const ParamLayout& layout,
                      std::span<const double> params) {
  if (params.size() != layout.size())
    throw ShapeError("pack_params: parameter buffer size mismatch");
  ModelFile m;
  m.kind = kind;
  m.config = config;
  m.seed = seed;
  for (const auto& t : layout.tensors())
    m.tensors.emplace_back(t.name, Mat(view(params.data(), t)));
  return m;
}

std::vector<double> unpack_params(const ModelFile& m,
                                  const ParamLayout& layout) {
  if (m.tensors.size() != layout.tensors().size())
    throw ParseError(ParseError::Kind::Invariant,
                     "model tensor count does not match layout");
  std::vector<double> params(layout.size());
  for (size_t i = 0; i < m.tensors.size(); ++i) {
    const auto& spec = layout.tensors()[i];
    const auto& [name, t] = m.tensors[i];
    if (name != spec.name || t.rows() != spec.rows || t.cols() != spec.cols)
      throw ParseError(ParseError::Kind::Invariant,
                       "model tensor " + name + " does not match layout " +
                           spec.name);
    view(params.data(), spec) = t;
  }
  return params;
}

// ------------------------------------------------------- runtime bundles

namespace {

template <typename Cfg, typename Net>
std::vector<double> unpack_for(const Cfg& cfg, const ModelFile& f) {
  Net net(cfg);
  return unpack_params(f, net.layout());
}

void expect_kind(const ModelFile& f, const std::string& kind) {
  if (f.kind != kind)
    throw ParseError(ParseError::Kind::Invariant,
                     "expected " + kind + " model, found " + f.kind);
}

}  // namespace

ModelFile ExtModel::to_file() const {
  ExtNet net(cfg);
  return pack_params("extnet", cfg.to_json(), seed, net.layout(), params);
}

ExtModel ExtModel::from_file(const ModelFile& f) {
  expect_kind(f, "extnet");
  ExtModel m;
  m.cfg = ExtNetConfig::from_json(f.config);
  m.seed = f.seed;
  m.params = unpack_for<ExtNetConfig, ExtNet>(m.cfg, f);
  return m;
}

uint64_t ExtModel::config_hash() const {
  return fnv1a64_str(cfg.to_json().dump());
}

ModelFile RecModel::to_file() const {
  RecNet net(cfg);
  return pack_params("recnet", cfg.to_json(), seed, net.layout(), params);
}

RecModel RecModel::from_file(const ModelFile& f) {
  expect_kind(f, "recnet");
  RecModel m;
  m.cfg = RecNetConfig::from_json(f.config);
  m.seed = f.seed;
  m.params = unpack_for<RecNetConfig, RecNet>(m.cfg, f);
  return m;
}

ModelFile GenModel::to_file() const {
  NoiseEncoder net(cfg);
  return pack_params("noisegen", cfg.to_json(), seed, net.layout(), params);
}

GenModel GenModel::from_file(const ModelFile& f) {
  expect_kind(f, "noisegen");
  GenModel m;
  m.cfg = NoiseEncoderConfig::from_json(f.config);
  m.seed = f.seed;
  m.params = unpack_for<NoiseEncoderConfig, NoiseEncoder>(m.cfg, f);
  return m;
}

}  // namespace xnn::nn
