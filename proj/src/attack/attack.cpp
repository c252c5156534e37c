#include "attack/attack.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::attack {

int Gallery::num_identities() const {
  std::set<int> ids;
  for (const auto& e : entries) ids.insert(e.identity);
  return static_cast<int>(ids.size());
}

void Gallery::validate() const {
  if (entries.empty()) throw InvalidArgumentError("gallery: empty");
  const auto dim = entries[0].embedding.size();
  for (const auto& e : entries) {
    if (e.identity < 0)
      throw InvalidArgumentError("gallery: negative identity");
    if (e.embedding.size() != dim)
      throw ShapeError("gallery: mixed embedding dimensions");
    if (!e.embedding.allFinite())
      throw NumericError("gallery: non-finite embedding");
  }
}

void ProbeSet::validate() const {
  if (fms.size() != ids.size())
    throw ShapeError("probe set: feature and identity counts differ");
  if (fms.empty()) throw InvalidArgumentError("probe set: empty");
  for (const auto& fm : fms)
    if (fm.rows() != fms[0].rows() || fm.cols() != fms[0].cols())
      throw ShapeError("probe set: mixed feature shapes");
  for (int id : ids)
    if (id < 0) throw InvalidArgumentError("probe set: negative identity");
}

json LeakageReport::to_json() const {
  json j{{"leakage", leakage},
         {"probes", probes},
         {"hits", hits},
         {"gallery_identities", gallery_identities},
         {"chance", chance},
         {"hit_flags", hit_flags},
         {"degenerate", degenerate}};
  if (oracle_queries >= 0) j["oracle_queries"] = oracle_queries;
  return j;
}

Gallery build_attack_gallery(const AttackEmbedFn& embed,
                             const ProbeSet& references) {
  references.validate();
  Gallery g;
  for (size_t i = 0; i < references.size(); ++i)
    g.entries.push_back({embed(references.fms[i]), references.ids[i]});
  g.validate();
  return g;
}

LeakageReport identity_leakage(const AttackEmbedFn& embed,
                               const ProbeSet& probes, const Gallery& gallery) {
  probes.validate();
  gallery.validate();
  LeakageReport rep;
  rep.gallery_identities = gallery.num_identities();
  rep.chance = 1.0 / rep.gallery_identities;
  for (size_t i = 0; i < probes.size(); ++i) {
    Vec e = embed(probes.fms[i]);
    const double en = e.norm();
    double best = -std::numeric_limits<double>::infinity();
    int best_id = -1;
    for (const auto& entry : gallery.entries) {
      const double gn = entry.embedding.norm();
      const double denom = std::max(en * gn, 1e-300);
      const double score = e.dot(entry.embedding) / denom;
      if (score > best) {  // strict: ties keep the earliest entry
        best = score;
        best_id = entry.identity;
      }
    }
    const bool hit = best_id == probes.ids[i];
    rep.hit_flags.push_back(hit ? 1 : 0);
    if (hit) ++rep.hits;
  }
  rep.probes = static_cast<int>(probes.size());
  rep.leakage = static_cast<double>(rep.hits) / rep.probes;
  return rep;
}

LeakageReport identity_leakage(const AttackEmbedFn& embed,
                               const ProbeSet& probes,
                               const ProbeSet& references) {
  return identity_leakage(embed, probes, build_attack_gallery(embed, references));
}

AttackEmbedFn make_recnet_attack_embedder(const nn::RecModel& model) {
  auto m = std::make_shared<nn::RecModel>(model);
  return [m](const obf::FeatureMap& fm) {
    nn::RecNet net(m->cfg);
    nn::RecNet::Output out = net.forward(
        m->params.data(), fm, static_cast<int>(fm.rows()), nullptr);
    Mat normed = nn::l2_normalize_rows(out.embeddings_raw);
    return Vec(normed.row(0).transpose());
  };
}

// ------------------------------------------------------ expectation attack

ExpectationTrainResult train_expectation_recnet(
    const std::vector<obf::FeatureMap>& shadow_fms,
    const std::vector<int>& shadow_labels, int num_classes,
    const ExpectationConfig& cfg) {
  if (shadow_fms.size() != shadow_labels.size() || shadow_fms.empty())
    throw InvalidArgumentError("expectation attack: bad shadow set");
  if (num_classes < 2)
    throw InvalidArgumentError("expectation attack: need two classes");
  const auto P = static_cast<uint32_t>(shadow_fms[0].rows());
  const auto D = static_cast<uint32_t>(shadow_fms[0].cols());
  for (const auto& fm : shadow_fms)
    if (fm.rows() != static_cast<int>(P) || fm.cols() != static_cast<int>(D))
      throw ShapeError("expectation attack: mixed feature shapes");
  for (int l : shadow_labels)
    if (l < 0 || l >= num_classes)
      throw InvalidArgumentError("expectation attack: label out of range");

  nn::RecNetConfig rec_cfg = cfg.rec;
  rec_cfg.embed_dim = static_cast<int>(D);
  rec_cfg.num_classes = num_classes;
  if (rec_cfg.position_embedding) rec_cfg.patches = static_cast<int>(P);
  rec_cfg.validate();
  nn::RecNet net(rec_cfg);

  ExpectationTrainResult res;
  res.model.cfg = rec_cfg;
  res.model.seed = Rng::derive(cfg.train.seed, 0xA77ACCu);
  res.model.params.resize(net.layout().size());
  nn::init_params(net.layout(), res.model.params, res.model.seed);

  nn::SgdOptimizer opt(res.model.params.size(), cfg.train);
  std::vector<double> grads(res.model.params.size());
  std::vector<uint64_t> fingerprints;
  const obf::ObfuscationKey ident = obf::identity_key(P, D);
  const uint64_t ident_fp = obf::key_fingerprint(ident);

  nn::TrainRun run = nn::run_training(
      "expectation-attack", static_cast<int>(shadow_fms.size()), cfg.train,
      [&](int epoch, int batch, std::span<const int> idx, double lr) {
        // The defining move: a brand new key for every single minibatch.
        obf::ObfuscationKey key;
        if (cfg.fresh_key_per_batch) {
          const uint64_t kseed = Rng::derive(
              cfg.train.seed,
              0xF4E5u + static_cast<uint64_t>(epoch) * 1000003u +
                  static_cast<uint64_t>(batch));
          key = obf::keygen(kseed, P, D, cfg.key_kind);
          fingerprints.push_back(obf::key_fingerprint(key));
        } else {
          fingerprints.push_back(ident_fp);
        }

        Mat x(static_cast<Eigen::Index>(idx.size()) * P, D);
        std::vector<int> y(idx.size());
        for (size_t i = 0; i < idx.size(); ++i) {
          const obf::FeatureMap& fm = shadow_fms[idx[i]];
          x.middleRows(static_cast<Eigen::Index>(i) * P, P) =
              cfg.fresh_key_per_batch ? obf::obfuscate(fm, key) : fm;
          y[i] = shadow_labels[idx[i]];
        }
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            net.forward(res.model.params.data(), x, static_cast<int>(P),
                        &cache);
        nn::CeResult ce = nn::softmax_ce(out.logits, y);
        nn::BatchStats s;
        s.loss_sum = ce.loss * static_cast<double>(idx.size());
        s.correct = ce.correct;
        s.count = static_cast<int>(idx.size());
        if (!std::isfinite(ce.loss)) return s;
        std::fill(grads.begin(), grads.end(), 0.0);
        net.backward(res.model.params.data(), grads.data(), cache, ce.dlogits);
        opt.step(res.model.params, grads, lr);
        return s;
      });
  run.batch_key_fingerprints = std::move(fingerprints);
  res.run = std::move(run);
  return res;
}

LeakageReport expectation_attack(const nn::RecModel& attack_model,
                                 const ProbeSet& probes,
                                 const ProbeSet& references) {
  return identity_leakage(make_recnet_attack_embedder(attack_model), probes,
                          references);
}

// -------------------------------------------------------- black-box attack

OracleFn make_recnet_oracle(const nn::RecModel& model) {
  auto m = std::make_shared<nn::RecModel>(model);
  return [m](const Mat& stacked, int rows_per_sample) {
    nn::RecNet net(m->cfg);
    return net.forward(m->params.data(), stacked, rows_per_sample, nullptr)
        .logits;
  };
}

BlackboxResult blackbox_surrogate_attack(
    const OracleFn& oracle, const std::vector<obf::FeatureMap>& shadow_fms,
    int num_classes, const BlackboxConfig& cfg, const ProbeSet& probes,
    const ProbeSet& references) {
  if (shadow_fms.empty())
    throw InvalidArgumentError("blackbox attack: empty shadow set");
  if (cfg.temperature <= 0.0)
    throw InvalidArgumentError("blackbox attack: temperature must be > 0");
  const auto P = static_cast<int>(shadow_fms[0].rows());
  const auto D = static_cast<int>(shadow_fms[0].cols());

  // Budget-capped query subset, chosen by seed so runs are reproducible.
  std::vector<int> order(shadow_fms.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng rng(Rng::derive(cfg.train.seed, 0xB1ACBu));
  rng.shuffle(order);
  const size_t n_query =
      cfg.query_budget > 0
          ? std::min(shadow_fms.size(), static_cast<size_t>(cfg.query_budget))
          : shadow_fms.size();
  order.resize(n_query);

  // One oracle round trip per queried sample.
  std::vector<Mat> soft_targets(n_query);
  long long queries = 0;
  for (size_t i = 0; i < n_query; ++i) {
    Mat logits = oracle(shadow_fms[order[i]], P);
    ++queries;
    if (logits.rows() != 1 || logits.cols() != num_classes)
      throw ShapeError("blackbox attack: oracle output shape mismatch");
    soft_targets[i] = nn::softmax_rows(logits / cfg.temperature);
  }

  nn::RecNetConfig rec_cfg = cfg.rec;
  rec_cfg.embed_dim = D;
  rec_cfg.num_classes = num_classes;
  if (rec_cfg.position_embedding) rec_cfg.patches = P;
  rec_cfg.validate();
  nn::RecNet net(rec_cfg);

  BlackboxResult res;
  res.surrogate.cfg = rec_cfg;
  res.surrogate.seed = Rng::derive(cfg.train.seed, 0x5A44u);
  res.surrogate.params.resize(net.layout().size());
  nn::init_params(net.layout(), res.surrogate.params, res.surrogate.seed);

  nn::SgdOptimizer opt(res.surrogate.params.size(), cfg.train);
  std::vector<double> grads(res.surrogate.params.size());

  res.run = nn::run_training(
      "blackbox-surrogate", static_cast<int>(n_query), cfg.train,
      [&](int, int, std::span<const int> idx, double lr) {
        Mat x(static_cast<Eigen::Index>(idx.size()) * P, D);
        Mat targets(idx.size(), num_classes);
        for (size_t i = 0; i < idx.size(); ++i) {
          x.middleRows(static_cast<Eigen::Index>(i) * P, P) =
              shadow_fms[order[idx[i]]];
          targets.row(i) = soft_targets[idx[i]].row(0);
        }
        nn::RecNet::Cache cache;
        nn::RecNet::Output out =
            net.forward(res.surrogate.params.data(), x, P, &cache);
        nn::CeResult ce = nn::softmax_ce_soft(out.logits, targets);
        nn::BatchStats s;
        s.loss_sum = ce.loss * static_cast<double>(idx.size());
        s.correct = ce.correct;
        s.count = static_cast<int>(idx.size());
        if (!std::isfinite(ce.loss)) return s;
        std::fill(grads.begin(), grads.end(), 0.0);
        net.backward(res.surrogate.params.data(), grads.data(), cache,
                     ce.dlogits);
        opt.step(res.surrogate.params, grads, lr);
        return s;
      });

  // Collapse check: fraction of shadow queries the surrogate now assigns to
  // its most common predicted class.
  std::vector<int> counts(num_classes, 0);
  for (size_t i = 0; i < n_query; ++i) {
    nn::RecNet::Output out = net.forward(res.surrogate.params.data(),
                                         shadow_fms[order[i]], P, nullptr);
    Eigen::Index am;
    out.logits.row(0).maxCoeff(&am);
    ++counts[static_cast<int>(am)];
  }
  const int top = *std::max_element(counts.begin(), counts.end());
  const bool collapsed =
      num_classes > 1 &&
      static_cast<double>(top) / static_cast<double>(n_query) >= 0.9;

  res.report = identity_leakage(make_recnet_attack_embedder(res.surrogate),
                                probes, references);
  res.report.oracle_queries = queries;
  res.report.degenerate = collapsed;
  return res;
}

}  // namespace xnn::attack
