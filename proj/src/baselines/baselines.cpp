#include "baselines/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::baselines {

void InstaHideConfig::validate() const {
  if (k < 2) throw InvalidArgumentError("instahide: k must be >= 2");
  if (dominance_threshold <= 0.0 || dominance_threshold > 1.0)
    throw InvalidArgumentError("instahide: threshold must be in (0, 1]");
  if (dominance_threshold * k <= 1.0)
    throw InvalidArgumentError(
        "instahide: threshold unreachable for this k (needs > 1/k)");
}

std::vector<double> instahide_coefficients(int k, double threshold, Rng& rng) {
  // Uniform on the simplex via normalized exponentials, rejected until the
  // dominance constraint holds.
  constexpr int kMaxAttempts = 100000;
  std::vector<double> lam(static_cast<size_t>(k));
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    double sum = 0.0;
    for (auto& v : lam) {
      v = -std::log(std::max(rng.uniform(), 1e-300));
      sum += v;
    }
    for (auto& v : lam) v /= sum;
    if (*std::max_element(lam.begin(), lam.end()) <= threshold) return lam;
  }
  throw Error(ErrorCode::Runtime,
              "instahide: coefficient resampling did not converge");
}

data::Image instahide_encode(const data::Image& image,
                             const std::vector<const data::Image*>& partners,
                             const InstaHideConfig& cfg, Rng& rng) {
  cfg.validate();
  if (static_cast<int>(partners.size()) != cfg.k - 1)
    throw InvalidArgumentError("instahide: need exactly k - 1 partners");
  for (const auto* p : partners) {
    if (p == nullptr) throw InvalidArgumentError("instahide: null partner");
    if (p->height != image.height || p->width != image.width ||
        p->channels != image.channels)
      throw ShapeError("instahide: partner shape mismatch");
  }
  std::vector<double> lam =
      instahide_coefficients(cfg.k, cfg.dominance_threshold, rng);

  data::Image out(image.height, image.width, image.channels);
  for (size_t i = 0; i < out.pixels.size(); ++i) {
    double v = lam[0] * image.pixels[i];
    for (size_t j = 0; j < partners.size(); ++j)
      v += lam[j + 1] * partners[j]->pixels[i];
    out.pixels[i] = rng.uniform() < 0.5 ? -v : v;
  }
  return out;
}

InstaHideTrainResult train_instahide_recnet(const data::IdentityDataset& ds,
                                            const nn::ExtModel& ext,
                                            const InstaHideConfig& cfg,
                                            nn::RecNetConfig rec_cfg,
                                            const nn::TrainConfig& tcfg,
                                            bool soft_labels) {
  cfg.validate();
  ds.validate();
  const int n = static_cast<int>(ds.images.size());
  if (n < cfg.k)
    throw InvalidArgumentError("instahide: dataset smaller than k");
  const int num_classes = static_cast<int>(ds.identity_names.size());
  const int P = ext.cfg.patches();
  const int D = ext.cfg.embed_dim;
  rec_cfg.embed_dim = D;
  rec_cfg.num_classes = num_classes;
  if (rec_cfg.position_embedding) rec_cfg.patches = P;
  rec_cfg.validate();
  nn::RecNet net(rec_cfg);

  InstaHideTrainResult res;
  res.rec.cfg = rec_cfg;
  res.rec.seed = Rng::derive(tcfg.seed, 0x1DEAu);
  res.rec.params.resize(net.layout().size());
  nn::init_params(net.layout(), res.rec.params, res.rec.seed);

  nn::SgdOptimizer opt(res.rec.params.size(), tcfg);
  std::vector<double> grads(res.rec.params.size());
  const std::string label =
      soft_labels ? "instahide-recnet" : "instahide-attack";
  res.run = nn::run_training(
      label, n, tcfg, [&](int epoch, int batch, std::span<const int> idx,
                          double lr) {
        // One fresh one-time key stream per batch; partner choice,
        // coefficients and sign masks all come from it.
        Rng enc(Rng::derive(tcfg.seed, 0x1DE000u +
                                           static_cast<uint64_t>(epoch) *
                                               1000003u +
                                           static_cast<uint64_t>(batch)));
        const auto B = static_cast<int>(idx.size());
        std::vector<data::Image> encoded;
        encoded.reserve(idx.size());
        Mat targets = Mat::Zero(B, num_classes);
        std::vector<int> hard(idx.size());
        std::vector<int> order(idx.size());
        for (int i = 0; i < B; ++i) {
          const int own = idx[i];
          std::vector<const data::Image*> partners;
          std::vector<int> partner_ids;
          while (static_cast<int>(partners.size()) < cfg.k - 1) {
            int j = static_cast<int>(enc.below(static_cast<uint64_t>(n)));
            if (j == own) continue;
            partners.push_back(&ds.images[j]);
            partner_ids.push_back(ds.labels[j]);
          }
          std::vector<double> lam =
              instahide_coefficients(cfg.k, cfg.dominance_threshold, enc);
          data::Image out(ds.images[own].height, ds.images[own].width,
                          ds.images[own].channels);
          for (size_t px = 0; px < out.pixels.size(); ++px) {
            double v = lam[0] * ds.images[own].pixels[px];
            for (size_t j = 0; j < partners.size(); ++j)
              v += lam[j + 1] * partners[j]->pixels[px];
            out.pixels[px] = enc.uniform() < 0.5 ? -v : v;
          }
          encoded.push_back(std::move(out));
          targets(i, ds.labels[own]) += lam[0];
          for (size_t j = 0; j < partner_ids.size(); ++j)
            targets(i, partner_ids[j]) += lam[j + 1];
          hard[i] = ds.labels[own];
          order[i] = i;
        }

        Mat x = pipeline::extract_features_stacked(ext, encoded, order);
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            net.forward(res.rec.params.data(), x, P, &cache);
        nn::CeResult ce = soft_labels
                              ? nn::softmax_ce_soft(out.logits, targets)
                              : nn::softmax_ce(out.logits, hard);
        nn::BatchStats s{ce.loss * B, ce.correct, B};
        if (!std::isfinite(ce.loss)) return s;
        std::fill(grads.begin(), grads.end(), 0.0);
        net.backward(res.rec.params.data(), grads.data(), cache, ce.dlogits);
        opt.step(res.rec.params, grads, lr);
        return s;
      });
  return res;
}

pipeline::EmbedFn make_instahide_embedder(const nn::ExtModel& ext,
                                          const nn::RecModel& rec,
                                          const data::IdentityDataset& pool,
                                          const InstaHideConfig& cfg,
                                          uint64_t seed, int n_encodings) {
  cfg.validate();
  if (n_encodings < 1)
    throw InvalidArgumentError("instahide: n_encodings must be >= 1");
  if (static_cast<int>(pool.images.size()) < cfg.k - 1)
    throw InvalidArgumentError("instahide: pool smaller than k - 1");
  auto shared_pool = std::make_shared<data::IdentityDataset>(pool);
  auto counter = std::make_shared<uint64_t>(0);
  return [ext, rec, shared_pool, cfg, seed, n_encodings,
          counter](const data::Image& img) -> Vec {
    Rng rng(Rng::derive(seed, 0xE9C0DEu + (*counter)++));
    Vec acc;
    for (int e = 0; e < n_encodings; ++e) {
      std::vector<const data::Image*> partners;
      while (static_cast<int>(partners.size()) < cfg.k - 1) {
        size_t j = rng.below(shared_pool->images.size());
        partners.push_back(&shared_pool->images[j]);
      }
      data::Image enc = instahide_encode(img, partners, cfg, rng);
      Mat fm = pipeline::extract_features(ext, enc);
      Vec emb = pipeline::infer_embedding(rec, fm);
      acc = e == 0 ? emb : Vec(acc + emb);
    }
    acc /= static_cast<double>(n_encodings);
    double norm = acc.norm();
    if (norm > 0.0) acc /= norm;
    return acc;
  };
}

VanillaResult run_vanilla_pipeline(const data::IdentityDataset& train,
                                   const nn::ExtModel& ext,
                                   const nn::RecNetConfig& rec_cfg,
                                   const nn::TrainConfig& tcfg) {
  train.validate();
  const auto P = static_cast<uint32_t>(ext.cfg.patches());
  const auto D = static_cast<uint32_t>(ext.cfg.embed_dim);
  obf::ObfuscationKey key = obf::identity_key(P, D);
  pipeline::AnonymousLabelMap labels = pipeline::AnonymousLabelMap::identity(
      static_cast<int>(train.identity_names.size()));
  VanillaResult res;
  res.ds = pipeline::build_obfuscated_dataset(ext, key, train, labels);
  pipeline::TrainResult tr = pipeline::train_recnet_obf(
      res.ds, pipeline::recnet_config_for(res.ds, rec_cfg), tcfg);
  res.rec = std::move(tr.model);
  res.run = std::move(tr.run);
  return res;
}

}  // namespace xnn::baselines
