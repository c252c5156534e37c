#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "attack/attack.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"

using namespace xnn;
using namespace xnn::attack;

namespace {

// Feature-space identity corpus: one P x D prototype per identity, samples
// are prototype plus isotropic noise. Identity information lives in the row
// directions, which keyed obfuscation scrambles.
struct FeatCorpus {
  std::vector<obf::FeatureMap> fms;
  std::vector<int> ids;
};

// proto_seed fixes the identities; noise_seed varies the samples, so two
// corpora with equal proto_seed and different noise_seed are disjoint draws
// of the same people.
FeatCorpus make_feat_corpus(int n_ids, int per_id, int P, int D, double sigma,
                            uint64_t proto_seed, uint64_t noise_seed) {
  FeatCorpus c;
  for (int id = 0; id < n_ids; ++id) {
    Rng proto_rng(Rng::derive(proto_seed, 0x9000u + id));
    obf::FeatureMap proto(P, D);
    for (int r = 0; r < P; ++r)
      for (int d = 0; d < D; ++d) proto(r, d) = proto_rng.normal();
    for (int j = 0; j < per_id; ++j) {
      Rng img_rng(Rng::derive(noise_seed, 0x8000u + id * 1009 + j));
      obf::FeatureMap fm = proto;
      for (int r = 0; r < P; ++r)
        for (int d = 0; d < D; ++d) fm(r, d) += sigma * img_rng.normal();
      c.fms.push_back(std::move(fm));
      c.ids.push_back(id);
    }
  }
  return c;
}

FeatCorpus obfuscate_all(const FeatCorpus& c, const obf::ObfuscationKey& key) {
  FeatCorpus out;
  out.ids = c.ids;
  for (const auto& fm : c.fms) out.fms.push_back(obf::obfuscate(fm, key));
  return out;
}

// Treats the first row of the feature map as the embedding itself.
AttackEmbedFn first_row_embedder() {
  return [](const obf::FeatureMap& fm) { return Vec(fm.row(0).transpose()); };
}

ProbeSet probe_set(const FeatCorpus& c) { return ProbeSet{c.fms, c.ids}; }

obf::FeatureMap row_fm(std::initializer_list<double> vals) {
  obf::FeatureMap fm(1, static_cast<Eigen::Index>(vals.size()));
  int i = 0;
  for (double v : vals) fm(0, i++) = v;
  return fm;
}

}  // namespace

TEST_CASE("hand-built gallery gives leakage 2/3") {
  // Gallery: unit axes for identities 0,1,2. Probes: (0.9,0.1,0) matches
  // identity 0 (cos against e0 = 0.994) and is labeled 0 -> hit;
  // (0.1,0.9,0) matches identity 1 but is labeled 2 -> miss;
  // (0,0.2,0.98) matches identity 2 (cos 0.98) and is labeled 2 -> hit.
  Gallery g;
  g.entries.push_back({Vec::Unit(3, 0), 0});
  g.entries.push_back({Vec::Unit(3, 1), 1});
  g.entries.push_back({Vec::Unit(3, 2), 2});

  ProbeSet probes;
  probes.fms = {row_fm({0.9, 0.1, 0.0}), row_fm({0.1, 0.9, 0.0}),
                row_fm({0.0, 0.2, 0.98})};
  probes.ids = {0, 2, 2};

  LeakageReport rep = identity_leakage(first_row_embedder(), probes, g);
  CHECK(rep.leakage == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(rep.hits == 2);
  CHECK(rep.probes == 3);
  CHECK(rep.gallery_identities == 3);
  CHECK(rep.chance == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(rep.hit_flags == std::vector<uint8_t>{1, 0, 1});
  CHECK(rep.to_json().at("probes").get<int>() == 3);
}

TEST_CASE("ties resolve to the earliest gallery entry") {
  Gallery g;
  g.entries.push_back({Vec::Unit(2, 0), 4});
  g.entries.push_back({Vec::Unit(2, 0), 9});  // identical embedding
  ProbeSet probes;
  probes.fms = {row_fm({1.0, 0.0})};
  probes.ids = {9};
  LeakageReport rep = identity_leakage(first_row_embedder(), probes, g);
  CHECK(rep.hits == 0);  // the tie goes to identity 4
  probes.ids = {4};
  CHECK(identity_leakage(first_row_embedder(), probes, g).hits == 1);
}

TEST_CASE("perfect and random embedders bracket the leakage range") {
  const int N = 10;
  FeatCorpus refs = make_feat_corpus(N, 1, 1, N, 0.0, 3, 30);
  FeatCorpus probes = make_feat_corpus(N, 100, 1, N, 0.01, 3, 31);

  LeakageReport perfect = identity_leakage(first_row_embedder(),
                                           probe_set(probes), probe_set(refs));
  CHECK(perfect.leakage > 0.99);
  CHECK(perfect.chance == doctest::Approx(0.1));

  auto rng = std::make_shared<Rng>(44);
  AttackEmbedFn random_embed = [rng](const obf::FeatureMap&) {
    Vec e(8);
    for (int i = 0; i < 8; ++i) e(i) = rng->normal();
    return e;
  };
  LeakageReport rnd = identity_leakage(random_embed, probe_set(probes),
                                       probe_set(refs));
  const double sigma = std::sqrt(0.1 * 0.9 / rnd.probes);
  CHECK(rnd.probes == 1000);
  CHECK(std::abs(rnd.leakage - 0.1) <= 3 * sigma);
  CHECK(rnd.leakage >= 0.0);
  CHECK(rnd.leakage <= 1.0);
}

TEST_CASE("probe and gallery validation") {
  ProbeSet empty;
  Gallery g;
  g.entries.push_back({Vec::Unit(2, 0), 0});
  CHECK_THROWS_AS(identity_leakage(first_row_embedder(), empty, g),
                  InvalidArgumentError);
  ProbeSet mixed;
  mixed.fms = {row_fm({1.0, 0.0}), row_fm({1.0, 0.0, 0.0})};
  mixed.ids = {0, 1};
  CHECK_THROWS_AS(mixed.validate(), ShapeError);
  Gallery bad;
  CHECK_THROWS_AS(bad.validate(), InvalidArgumentError);
}

TEST_CASE("fresh key per batch: every minibatch sees a new key") {
  FeatCorpus shadow = make_feat_corpus(4, 8, 4, 8, 0.1, 7, 70);  // 32 samples
  ExpectationConfig cfg;
  cfg.rec.num_blocks = 1;
  cfg.rec.heads = 2;
  cfg.rec.embedding_dim = 8;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 8;  // 4 batches per epoch
  cfg.train.seed = 5;
  ExpectationTrainResult res =
      train_expectation_recnet(shadow.fms, shadow.ids, 4, cfg);

  REQUIRE(res.run.batch_key_fingerprints.size() == 12);  // 3 epochs x 4
  std::set<uint64_t> distinct(res.run.batch_key_fingerprints.begin(),
                              res.run.batch_key_fingerprints.end());
  CHECK(distinct.size() == 12);  // all fresh, none reused

  cfg.fresh_key_per_batch = false;
  ExpectationTrainResult plain =
      train_expectation_recnet(shadow.fms, shadow.ids, 4, cfg);
  std::set<uint64_t> one(plain.run.batch_key_fingerprints.begin(),
                         plain.run.batch_key_fingerprints.end());
  CHECK(one.size() == 1);  // clean features, constant fingerprint
}

TEST_CASE("expectation recnet without obfuscation identifies held-out data") {
  // Positive control: trained and evaluated on clean features, the attacker's
  // recognizer should link probes to references easily.
  FeatCorpus shadow = make_feat_corpus(5, 16, 4, 16, 0.15, 11, 110);
  FeatCorpus held = make_feat_corpus(5, 4, 4, 16, 0.15, 11, 900);  // fresh noise

  ExpectationConfig cfg;
  cfg.rec.num_blocks = 1;
  cfg.rec.heads = 2;
  cfg.rec.embedding_dim = 8;
  cfg.train.epochs = 15;
  cfg.train.batch_size = 16;
  cfg.train.seed = 2;
  cfg.fresh_key_per_batch = false;
  ExpectationTrainResult res =
      train_expectation_recnet(shadow.fms, shadow.ids, 5, cfg);
  REQUIRE(!res.run.aborted);
  CHECK(res.run.epoch_acc.back() > 0.9);

  // Same-prototype references and probes, disjoint noise draws.
  FeatCorpus refs = make_feat_corpus(5, 2, 4, 16, 0.15, 11, 901);
  LeakageReport rep =
      expectation_attack(res.model, probe_set(held), probe_set(refs));
  CHECK(rep.leakage >= 0.8);
}

TEST_CASE("fresh-key training on keyed probes stays near chance") {
  // Probes are obfuscated with the owner's fixed secret key; the adversary's
  // gallery is clean public data of the same people. Linking the two requires
  // key-invariant structure, which for same-distribution prototypes is weak.
  const int N = 8;
  FeatCorpus shadow = make_feat_corpus(N, 12, 4, 16, 0.15, 21, 210);
  ExpectationConfig cfg;
  cfg.rec.num_blocks = 1;
  cfg.rec.heads = 2;
  cfg.rec.embedding_dim = 8;
  cfg.train.epochs = 8;
  cfg.train.batch_size = 16;
  cfg.train.seed = 6;
  ExpectationTrainResult res =
      train_expectation_recnet(shadow.fms, shadow.ids, N, cfg);

  auto owner_key = obf::keygen(1234, 4, 16, obf::MatrixKind::Orthogonal);
  FeatCorpus probes =
      obfuscate_all(make_feat_corpus(N, 5, 4, 16, 0.15, 21, 500), owner_key);
  FeatCorpus refs = make_feat_corpus(N, 2, 4, 16, 0.15, 21, 501);
  LeakageReport rep =
      expectation_attack(res.model, probe_set(probes), probe_set(refs));
  // Loose unit-scale bound; the benchmark pins the tight one.
  CHECK(rep.leakage <= rep.chance + 0.25);

  // Control for the protocol itself: if the references were obfuscated with
  // the same key as the probes, plain nearest neighbor would re-identify
  // everyone, because a fixed isometry preserves distances. The metric must
  // expose that, which is why the gallery above stays clean.
  FeatCorpus keyed_refs = obfuscate_all(refs, owner_key);
  LeakageReport same_key = identity_leakage(
      [](const obf::FeatureMap& fm) {
        return Vec(Eigen::Map<const Vec>(fm.data(), fm.size()));
      },
      probe_set(probes), probe_set(keyed_refs));
  CHECK(same_key.leakage > 0.9);
}

TEST_CASE("blackbox surrogate distills the oracle and reports queries") {
  FeatCorpus shadow = make_feat_corpus(4, 20, 4, 16, 0.15, 31, 310);

  // Teacher: a plain recognizer trained on the same distribution.
  ExpectationConfig tcfg;
  tcfg.rec.num_blocks = 1;
  tcfg.rec.heads = 2;
  tcfg.rec.embedding_dim = 8;
  tcfg.train.epochs = 15;
  tcfg.train.batch_size = 16;
  tcfg.train.seed = 3;
  tcfg.fresh_key_per_batch = false;
  ExpectationTrainResult teacher =
      train_expectation_recnet(shadow.fms, shadow.ids, 4, tcfg);
  REQUIRE(teacher.run.epoch_acc.back() > 0.9);

  BlackboxConfig bcfg;
  bcfg.rec.num_blocks = 1;
  bcfg.rec.heads = 2;
  bcfg.rec.embedding_dim = 8;
  bcfg.train.epochs = 20;
  bcfg.train.batch_size = 16;
  bcfg.train.seed = 9;

  FeatCorpus probes = make_feat_corpus(4, 6, 4, 16, 0.15, 31, 600);
  FeatCorpus refs = make_feat_corpus(4, 2, 4, 16, 0.15, 31, 601);
  BlackboxResult res = blackbox_surrogate_attack(
      make_recnet_oracle(teacher.model), shadow.fms, 4, bcfg,
      probe_set(probes), probe_set(refs));

  CHECK(res.report.oracle_queries == 80);  // one query per shadow sample
  CHECK(!res.report.degenerate);
  CHECK(res.report.leakage >= 0.7);  // positive control on clean features

  // Budget cap is honored exactly.
  bcfg.query_budget = 10;
  BlackboxResult capped = blackbox_surrogate_attack(
      make_recnet_oracle(teacher.model), shadow.fms, 4, bcfg,
      probe_set(probes), probe_set(refs));
  CHECK(capped.report.oracle_queries == 10);
}

TEST_CASE("constant oracle trips the degenerate flag") {
  FeatCorpus shadow = make_feat_corpus(3, 10, 4, 8, 0.1, 41, 410);
  OracleFn constant = [](const Mat& stacked, int rows) {
    Mat logits = Mat::Zero(stacked.rows() / rows, 3);
    logits.col(1).setConstant(9.0);  // always class 1, with high confidence
    return logits;
  };
  BlackboxConfig cfg;
  cfg.rec.num_blocks = 1;
  cfg.rec.heads = 2;
  cfg.rec.embedding_dim = 6;
  cfg.train.epochs = 12;
  cfg.train.batch_size = 10;
  cfg.train.seed = 4;
  FeatCorpus probes = make_feat_corpus(3, 4, 4, 8, 0.1, 41, 700);
  FeatCorpus refs = make_feat_corpus(3, 2, 4, 8, 0.1, 41, 701);
  BlackboxResult res = blackbox_surrogate_attack(
      constant, shadow.fms, 3, cfg, probe_set(probes), probe_set(refs));
  CHECK(res.report.degenerate);
  CHECK(res.report.oracle_queries == 30);
}

TEST_CASE("expectation attack input validation") {
  FeatCorpus shadow = make_feat_corpus(2, 2, 2, 4, 0.1, 51, 510);
  ExpectationConfig cfg;
  cfg.train.epochs = 1;
  std::vector<int> bad_labels = {0, 7, 0, 1};
  CHECK_THROWS_AS(
      train_expectation_recnet(shadow.fms, bad_labels, 2, cfg),
      InvalidArgumentError);
  CHECK_THROWS_AS(
      train_expectation_recnet({}, {}, 2, cfg), InvalidArgumentError);
}
