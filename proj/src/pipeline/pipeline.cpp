#include "pipeline/pipeline.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <set>

#include "common/binio.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::pipeline {

// ------------------------------------------------------ anonymous labels

AnonymousLabelMap AnonymousLabelMap::shuffled(int n, uint64_t seed) {
  if (n < 1) throw InvalidArgumentError("label map: need at least one identity");
  AnonymousLabelMap m;
  m.to_anon.resize(n);
  std::iota(m.to_anon.begin(), m.to_anon.end(), 0);
  Rng rng(Rng::derive(seed, 0x1ABE1u));
  rng.shuffle(m.to_anon);
  m.to_identity.resize(n);
  for (int i = 0; i < n; ++i) m.to_identity[m.to_anon[i]] = i;
  return m;
}

AnonymousLabelMap AnonymousLabelMap::identity(int n) {
  if (n < 1) throw InvalidArgumentError("label map: need at least one identity");
  AnonymousLabelMap m;
  m.to_anon.resize(n);
  std::iota(m.to_anon.begin(), m.to_anon.end(), 0);
  m.to_identity = m.to_anon;
  return m;
}

int AnonymousLabelMap::anon(int id) const {
  if (id < 0 || id >= size())
    throw InvalidArgumentError("label map: identity out of range");
  return to_anon[id];
}

int AnonymousLabelMap::identity_of(int a) const {
  if (a < 0 || a >= size())
    throw InvalidArgumentError("label map: anonymous label out of range");
  return to_identity[a];
}

void AnonymousLabelMap::validate() const {
  if (to_anon.size() != to_identity.size())
    throw ShapeError("label map: side sizes differ");
  std::set<int> seen(to_anon.begin(), to_anon.end());
  if (seen.size() != to_anon.size() || *seen.begin() != 0 ||
      *seen.rbegin() != size() - 1)
    throw InvalidArgumentError("label map: not a bijection on 0..n-1");
  for (int i = 0; i < size(); ++i)
    if (to_identity[to_anon[i]] != i)
      throw InvalidArgumentError("label map: inverse mismatch");
}

// ---------------------------------------------------- feature extraction

Mat extract_features(const nn::ExtModel& ext, const data::Image& img) {
  nn::ExtNet net(ext.cfg);
  if (img.height != ext.cfg.image_size || img.width != ext.cfg.image_size ||
      img.channels != ext.cfg.channels)
    throw ShapeError("extract_features: image shape does not match extractor");
  Mat patches = data::patchify(img, ext.cfg.patch_size);
  return net.forward(ext.params.data(), patches, nullptr);
}

Mat extract_features_stacked(const nn::ExtModel& ext,
                             const std::vector<data::Image>& images,
                             const std::vector<int>& idx) {
  nn::ExtNet net(ext.cfg);
  const int P = ext.cfg.patches();
  Mat stacked(static_cast<Eigen::Index>(idx.size()) * P, ext.cfg.patch_len());
  for (size_t i = 0; i < idx.size(); ++i) {
    const data::Image& img = images.at(idx[i]);
    if (img.height != ext.cfg.image_size || img.width != ext.cfg.image_size ||
        img.channels != ext.cfg.channels)
      throw ShapeError("extract_features: image shape does not match extractor");
    stacked.middleRows(static_cast<Eigen::Index>(i) * P, P) =
        data::patchify(img, ext.cfg.patch_size);
  }
  return net.forward(ext.params.data(), stacked, nullptr);
}

// ---------------------------------------------------- obfuscated dataset

void ObfuscatedDataset::validate() const {
  if (features.size() != labels.size())
    throw ShapeError("obf dataset: feature and label counts differ");
  if (patches < 1 || dim < 1)
    throw ShapeError("obf dataset: empty feature shape");
  if (num_classes < 2)
    throw InvalidArgumentError("obf dataset: need at least two classes");
  for (const auto& f : features)
    if (f.rows() != static_cast<int>(patches) ||
        f.cols() != static_cast<int>(dim))
      throw ShapeError("obf dataset: feature map shape mismatch");
  for (uint32_t l : labels)
    if (l >= num_classes)
      throw InvalidArgumentError("obf dataset: label out of range");
}

Mat ObfuscatedDataset::stack(const std::vector<int>& idx) const {
  return stack_span(std::span<const int>(idx.data(), idx.size()));
}

Mat ObfuscatedDataset::stack_span(std::span<const int> idx) const {
  Mat out(static_cast<Eigen::Index>(idx.size()) * patches, dim);
  for (size_t i = 0; i < idx.size(); ++i)
    out.middleRows(static_cast<Eigen::Index>(i) * patches, patches) =
        features.at(idx[i]).cast<double>();
  return out;
}

namespace {
constexpr char kObfMagic[4] = {'X', 'N', 'N', 'O'};
}

std::vector<uint8_t> obf_dataset_serialize(const ObfuscatedDataset& ds) {
  ds.validate();
  ByteWriter w;
  w.bytes(kObfMagic, 4);
  w.u16(kObfDatasetVersion);
  w.u64(ds.ext_config_hash);
  w.u64(ds.key_fingerprint);
  w.u32(ds.num_classes);
  w.u32(ds.patches);
  w.u32(ds.dim);
  w.u32(static_cast<uint32_t>(ds.size()));
  for (uint32_t l : ds.labels) w.u32(l);
  for (const auto& f : ds.features)
    for (int r = 0; r < f.rows(); ++r)
      for (int c = 0; c < f.cols(); ++c) w.f32(f(r, c));
  w.u32(crc32_of(w.data().data(), w.data().size()));
  return w.take();
}

ObfuscatedDataset obf_dataset_deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 8)
    throw ParseError(ParseError::Kind::Truncated, "obf dataset too short");
  ByteReader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kObfMagic, 4) != 0)
    throw ParseError(ParseError::Kind::BadMagic, "not an obfuscated dataset");
  const uint16_t ver = r.u16();
  if (ver != kObfDatasetVersion)
    throw ParseError(ParseError::Kind::BadVersion,
                     "unsupported obf dataset version " + std::to_string(ver));
  ObfuscatedDataset ds;
  ds.ext_config_hash = r.u64();
  ds.key_fingerprint = r.u64();
  ds.num_classes = r.u32();
  ds.patches = r.u32();
  ds.dim = r.u32();
  const uint32_t count = r.u32();
  if (ds.patches < 1 || ds.dim < 1 ||
      static_cast<uint64_t>(ds.patches) * ds.dim > (1u << 24))
    throw ParseError(ParseError::Kind::Invariant, "obf dataset: bad shape");
  ds.labels.resize(count);
  for (uint32_t i = 0; i < count; ++i) ds.labels[i] = r.u32();
  ds.features.resize(count);
  for (uint32_t i = 0; i < count; ++i) {
    Eigen::MatrixXf f(ds.patches, ds.dim);
    for (uint32_t rr = 0; rr < ds.patches; ++rr)
      for (uint32_t c = 0; c < ds.dim; ++c) f(rr, c) = r.f32();
    ds.features[i] = std::move(f);
  }
  const size_t body = r.pos();
  const uint32_t stored = r.u32();
  if (crc32_of(bytes.data(), body) != stored)
    throw ParseError(ParseError::Kind::BadCrc,
                     "obf dataset checksum mismatch");
  try {
    ds.validate();
  } catch (const Error& e) {
    throw ParseError(ParseError::Kind::Invariant, e.what());
  }
  return ds;
}

void obf_dataset_save(const ObfuscatedDataset& ds,
                      const std::filesystem::path& path) {
  atomic_write_file(path, obf_dataset_serialize(ds));
}

ObfuscatedDataset obf_dataset_load(const std::filesystem::path& path) {
  return obf_dataset_deserialize(read_file_bytes(path));
}

ObfuscatedDataset build_obfuscated_dataset(const nn::ExtModel& ext,
                                           const obf::ObfuscationKey& key,
                                           const data::IdentityDataset& ds,
                                           const AnonymousLabelMap& labels) {
  ds.validate();
  labels.validate();
  obf::validate_key(key);
  if (static_cast<int>(key.patches) != ext.cfg.patches() ||
      static_cast<int>(key.dim) != ext.cfg.embed_dim)
    throw ShapeError("build_obf: key shape does not match extractor output");
  if (labels.size() != ds.num_identities())
    throw ShapeError("build_obf: label map size does not match identities");

  ObfuscatedDataset out;
  out.patches = key.patches;
  out.dim = key.dim;
  out.num_classes = static_cast<uint32_t>(labels.size());
  out.ext_config_hash = ext.config_hash();
  out.key_fingerprint = obf::key_fingerprint(key);

  nn::ExtNet net(ext.cfg);
  const int P = ext.cfg.patches();
  for (size_t i = 0; i < ds.size(); ++i) {
    Mat patches = data::patchify(ds.images[i], ext.cfg.patch_size);
    Mat fm = net.forward(ext.params.data(), patches, nullptr);
    Mat obf_fm = obf::obfuscate(fm, key);
    out.features.push_back(obf_fm.cast<float>());
    out.labels.push_back(
        static_cast<uint32_t>(labels.anon(ds.labels[i])));
    (void)P;
  }
  out.validate();
  return out;
}

// ------------------------------------------------------- cloud training

nn::RecNetConfig recnet_config_for(const ObfuscatedDataset& ds,
                                   nn::RecNetConfig base) {
  base.embed_dim = static_cast<int>(ds.dim);
  base.num_classes = static_cast<int>(ds.num_classes);
  if (base.position_embedding) base.patches = static_cast<int>(ds.patches);
  base.validate();
  return base;
}

TrainResult train_recnet_obf(const ObfuscatedDataset& ds,
                             const nn::RecNetConfig& rec_cfg,
                             const nn::TrainConfig& train_cfg) {
  ds.validate();
  if (rec_cfg.embed_dim != static_cast<int>(ds.dim))
    throw ShapeError("train_recnet_obf: recognizer dim mismatch");
  if (rec_cfg.num_classes != static_cast<int>(ds.num_classes))
    throw ShapeError("train_recnet_obf: class count mismatch");

  nn::RecNet net(rec_cfg);
  TrainResult res;
  res.model.cfg = rec_cfg;
  res.model.seed = Rng::derive(train_cfg.seed, 0x12EC0u);
  res.model.params.resize(net.layout().size());
  nn::init_params(net.layout(), res.model.params, res.model.seed);

  nn::SgdOptimizer opt(res.model.params.size(), train_cfg);
  std::vector<double> grads(res.model.params.size());
  const int P = static_cast<int>(ds.patches);

  res.run = nn::run_training(
      "recnet-obf", static_cast<int>(ds.size()), train_cfg,
      [&](int, int, std::span<const int> idx, double lr) {
        Mat x = ds.stack_span(idx);
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) y[i] = ds.labels[idx[i]];
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            net.forward(res.model.params.data(), x, P, &cache);
        nn::CeResult ce = nn::softmax_ce(out.logits, y);
        nn::BatchStats s;
        s.loss_sum = ce.loss * static_cast<double>(idx.size());
        s.correct = ce.correct;
        s.count = static_cast<int>(idx.size());
        if (!std::isfinite(ce.loss)) return s;  // surface the abort upstream
        std::fill(grads.begin(), grads.end(), 0.0);
        net.backward(res.model.params.data(), grads.data(), cache, ce.dlogits);
        opt.step(res.model.params, grads, lr);
        return s;
      });
  return res;
}

// ------------------------------------------------------------- inference

Vec infer_embedding(const nn::RecModel& rec, const Mat& feature_map) {
  nn::RecNet net(rec.cfg);
  nn::RecNet::Output out = net.forward(
      rec.params.data(), feature_map, static_cast<int>(feature_map.rows()),
      nullptr);
  Mat normed = nn::l2_normalize_rows(out.embeddings_raw);
  return normed.row(0).transpose();
}

UtilityReport eval_utility(const EmbedFn& embed,
                           const data::IdentityDataset& test, uint64_t seed) {
  test.validate();
  UtilityReport rep;
  struct IdentitySplit {
    int id;
    std::vector<int> gallery, probes;
  };
  std::vector<IdentitySplit> splits;
  for (int id = 0; id < test.num_identities(); ++id) {
    auto idx = test.indices_of(id);
    if (idx.size() < 2) {
      rep.skipped.push_back(test.identity_names[id]);
      continue;
    }
    Rng rng(Rng::derive(seed, 0x6A11E4u + static_cast<uint64_t>(id)));
    rng.shuffle(idx);
    const size_t g = (idx.size() + 1) / 2;
    IdentitySplit s;
    s.id = id;
    s.gallery.assign(idx.begin(), idx.begin() + g);
    s.probes.assign(idx.begin() + g, idx.end());
    splits.push_back(std::move(s));
  }
  if (splits.empty())
    throw InvalidArgumentError(
        "eval_utility: no identity has two or more images");

  // Renormalized gallery centroids; cosine scoring over unit embeddings.
  std::vector<Vec> centroids;
  for (const auto& s : splits) {
    Vec c;
    for (int i : s.gallery) {
      Vec e = embed(test.images[i]);
      c = c.size() == 0 ? e : Vec(c + e);
    }
    const double n = c.norm();
    if (n > 0.0) c /= n;
    centroids.push_back(std::move(c));
  }

  for (size_t si = 0; si < splits.size(); ++si) {
    for (int i : splits[si].probes) {
      Vec e = embed(test.images[i]);
      double best = -2.0;
      size_t best_j = 0;
      for (size_t j = 0; j < centroids.size(); ++j) {
        const double score = e.dot(centroids[j]);
        if (score > best) {
          best = score;
          best_j = j;
        }
      }
      ++rep.probes;
      if (best_j == si) ++rep.hits;
    }
  }
  rep.accuracy = rep.probes > 0
                     ? static_cast<double>(rep.hits) / rep.probes
                     : 0.0;
  return rep;
}

json UtilityReport::to_json() const {
  return json{{"accuracy", accuracy},
              {"probes", probes},
              {"hits", hits},
              {"skipped_identities", skipped}};
}

EmbedFn make_pipeline_embedder(const nn::ExtModel& ext,
                               const obf::ObfuscationKey& key,
                               const nn::RecModel& rec) {
  if (static_cast<int>(key.dim) != ext.cfg.embed_dim ||
      static_cast<int>(key.patches) != ext.cfg.patches())
    throw ShapeError("embedder: key does not match extractor");
  auto ext_copy = std::make_shared<nn::ExtModel>(ext);
  auto key_copy = std::make_shared<obf::ObfuscationKey>(key);
  auto rec_copy = std::make_shared<nn::RecModel>(rec);
  return [ext_copy, key_copy, rec_copy](const data::Image& img) {
    Mat fm = extract_features(*ext_copy, img);
    Mat obf_fm = obf::obfuscate(fm, *key_copy);
    // Match the storage path: uploads are float32, so inference quantizes the
    // same way before the recognizer sees the features.
    Mat quantized = obf_fm.cast<float>().cast<double>();
    return infer_embedding(*rec_copy, quantized);
  };
}

// ------------------------------------------------------- ext pretraining

ExtPretrainResult pretrain_extnet(const data::IdentityDataset& public_ds,
                                  const nn::ExtNetConfig& ext_cfg,
                                  int head_blocks,
                                  const nn::TrainConfig& train_cfg) {
  public_ds.validate();
  if (public_ds.num_identities() < 2)
    throw InvalidArgumentError("pretrain: need at least two identities");
  nn::ExtNet ext_net(ext_cfg);

  nn::RecNetConfig head_cfg;
  head_cfg.embed_dim = ext_cfg.embed_dim;
  head_cfg.heads = ext_cfg.heads;
  head_cfg.mlp_ratio = ext_cfg.mlp_ratio;
  head_cfg.num_blocks = std::max(1, head_blocks);
  head_cfg.num_classes = public_ds.num_identities();
  head_cfg.embedding_dim = std::max(8, ext_cfg.embed_dim / 2);
  nn::RecNet head(head_cfg);

  ExtPretrainResult res;
  res.ext.cfg = ext_cfg;
  res.ext.seed = Rng::derive(train_cfg.seed, 0xE87u);
  res.ext.params.resize(ext_net.layout().size());
  nn::init_params(ext_net.layout(), res.ext.params, res.ext.seed);

  std::vector<double> head_params(head.layout().size());
  nn::init_params(head.layout(), head_params,
                  Rng::derive(train_cfg.seed, 0xEAD0u));

  nn::SgdOptimizer ext_opt(res.ext.params.size(), train_cfg);
  nn::SgdOptimizer head_opt(head_params.size(), train_cfg);
  std::vector<double> ext_grads(res.ext.params.size());
  std::vector<double> head_grads(head_params.size());
  const int P = ext_cfg.patches();

  res.run = nn::run_training(
      "ext-pretrain", static_cast<int>(public_ds.size()), train_cfg,
      [&](int, int, std::span<const int> idx, double lr) {
        Mat patches(static_cast<Eigen::Index>(idx.size()) * P,
                    ext_cfg.patch_len());
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          patches.middleRows(static_cast<Eigen::Index>(i) * P, P) =
              data::patchify(public_ds.images[idx[i]], ext_cfg.patch_size);
          y[i] = public_ds.labels[idx[i]];
        }
        nn::ExtNet::Cache ext_cache;
        Mat feats = ext_net.forward(res.ext.params.data(), patches, &ext_cache);
        nn::RecNet::Cache head_cache;
        nn::RecNet::Output out =
            head.forward(head_params.data(), feats, P, &head_cache);
        nn::CeResult ce = nn::softmax_ce(out.logits, y);
        nn::BatchStats s;
        s.loss_sum = ce.loss * static_cast<double>(idx.size());
        s.correct = ce.correct;
        s.count = static_cast<int>(idx.size());
        if (!std::isfinite(ce.loss)) return s;
        std::fill(head_grads.begin(), head_grads.end(), 0.0);
        std::fill(ext_grads.begin(), ext_grads.end(), 0.0);
        Mat d_feats =
            head.backward(head_params.data(), head_grads.data(), head_cache,
                          ce.dlogits);
        ext_net.backward(res.ext.params.data(), ext_grads.data(), ext_cache,
                         d_feats);
        head_opt.step(head_params, head_grads, lr);
        ext_opt.step(res.ext.params, ext_grads, lr);
        return s;
      });
  if (!res.run.epoch_acc.empty()) res.head_train_acc = res.run.epoch_acc.back();
  return res;
}

}  // namespace xnn::pipeline
