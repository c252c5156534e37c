#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "xnnd/xnnd.hpp"

using namespace xnn;
using namespace xnn::xnnd;

namespace {

// Feature-space identity corpus: one P x D prototype per identity, samples
// are prototype plus isotropic noise.
struct FeatCorpus {
  std::vector<obf::FeatureMap> fms;
  std::vector<int> ids;
};

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

Mat random_mat(int r, int cols, uint64_t seed) {
  Rng rng(seed);
  Mat m(r, cols);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
  return m;
}

nn::RecNetConfig tiny_rec(int D, int C) {
  nn::RecNetConfig r;
  r.embed_dim = D;
  r.num_blocks = 1;
  r.heads = 1;
  r.mlp_ratio = 1.0;
  r.num_classes = C;
  r.embedding_dim = 4;
  r.position_embedding = false;
  return r;
}

nn::NoiseEncoderConfig tiny_gen(int D) {
  nn::NoiseEncoderConfig g;
  g.dim = D;
  g.num_blocks = 1;
  g.heads = 1;
  g.mlp_ratio = 1.0;
  return g;
}

nn::TrainConfig quick_train(int epochs, int batch, uint64_t seed) {
  nn::TrainConfig t;
  t.lr = 0.05;
  t.epochs = epochs;
  t.batch_size = batch;
  t.seed = seed;
  return t;
}

// Top-1 accuracy of a recognizer over per-sample feature maps.
double eval_acc(const nn::RecModel& m, const std::vector<obf::FeatureMap>& fms,
                const std::vector<int>& ids,
                const nn::GenModel* gen = nullptr,
                const MixConfig* mix = nullptr) {
  nn::RecNet net(m.cfg);
  int hits = 0;
  for (size_t i = 0; i < fms.size(); ++i) {
    Mat x = fms[i];
    if (gen != nullptr) x = apply_noise(*gen, *mix, x);
    nn::RecNet::Output out = net.forward(
        m.params.data(), x, static_cast<int>(x.rows()), nullptr);
    Eigen::Index best;
    out.logits.row(0).maxCoeff(&best);
    if (static_cast<int>(best) == ids[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(fms.size());
}

}  // namespace

// ------------------------------------------------------------- mixing

TEST_CASE("mix below the cap is plain additive") {
  Mat clean = random_mat(3, 4, 1);
  Mat noise = 0.01 * random_mat(3, 4, 2);  // far below beta * ||clean||
  MixConfig cfg;
  cfg.alpha = 0.7;
  cfg.beta = 1.0;
  Mat mixed = mix_features(clean, noise, cfg);
  CHECK((mixed - (clean + 0.7 * noise)).norm() == doctest::Approx(0.0));
}

TEST_CASE("mix above the cap lands exactly on the cap sphere") {
  Mat clean = random_mat(3, 4, 3);
  Mat noise = 50.0 * random_mat(3, 4, 4);
  MixConfig cfg;
  cfg.alpha = 1.0;
  cfg.beta = 0.5;
  Mat mixed = mix_features(clean, noise, cfg);
  // Capped noise keeps its direction and takes norm beta * ||clean||.
  CHECK((mixed - clean).norm() ==
        doctest::Approx(0.5 * clean.norm()).epsilon(1e-12));
  double cosv = ((mixed - clean).reshaped().transpose() * noise.reshaped())(0) /
                ((mixed - clean).norm() * noise.norm());
  CHECK(cosv == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("mix hand oracle") {
  // clean = [3,4] has norm 5; beta 0.5 caps noise at 2.5. noise = [0,5]
  // scales to [0,2.5]; alpha 2 gives mixed = [3, 4 + 5] = [3, 9].
  Mat clean(1, 2), noise(1, 2);
  clean << 3.0, 4.0;
  noise << 0.0, 5.0;
  MixConfig cfg;
  cfg.alpha = 2.0;
  cfg.beta = 0.5;
  Mat mixed = mix_features(clean, noise, cfg);
  CHECK(mixed(0, 0) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(mixed(0, 1) == doctest::Approx(9.0).epsilon(1e-12));
}

TEST_CASE("perturbation norm never exceeds alpha * beta * clean norm") {
  for (int t = 0; t < 50; ++t) {
    Rng rng(1000 + t);
    Mat clean = random_mat(2, 5, 2000 + t);
    Mat noise = (0.1 + 5.0 * rng.uniform()) * random_mat(2, 5, 3000 + t);
    MixConfig cfg;
    cfg.alpha = 0.1 + rng.uniform();
    cfg.beta = 0.1 + rng.uniform();
    Mat mixed = mix_features(clean, noise, cfg);
    CHECK((mixed - clean).norm() <=
          cfg.alpha * cfg.beta * clean.norm() + 1e-9);
  }
}

TEST_CASE("zero noise passes clean through exactly") {
  Mat clean = random_mat(4, 3, 7);
  Mat zero = Mat::Zero(4, 3);
  MixConfig cfg;
  Mat mixed = mix_features(clean, zero, cfg);
  CHECK((mixed - clean).norm() == 0.0);
}

TEST_CASE("mix noise gradient matches finite differences") {
  MixConfig cfg;
  cfg.alpha = 0.8;
  cfg.beta = 0.6;
  Mat clean = random_mat(2, 3, 11);
  Mat w = random_mat(2, 3, 12);  // random linear functional of the mix
  // One noise well under the cap, one well over it.
  for (double scale : {0.05, 20.0}) {
    Mat noise = scale * random_mat(2, 3, 13);
    Mat analytic = mix_backward_noise(clean, noise, cfg, w);
    const double eps = 1e-6;
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 3; ++j) {
        Mat np = noise, nm = noise;
        np(i, j) += eps;
        nm(i, j) -= eps;
        double fp = (w.array() * mix_features(clean, np, cfg).array()).sum();
        double fm = (w.array() * mix_features(clean, nm, cfg).array()).sum();
        double numeric = (fp - fm) / (2.0 * eps);
        CHECK(analytic(i, j) ==
              doctest::Approx(numeric).epsilon(1e-6).scale(1.0));
      }
  }
}

TEST_CASE("stacked mix equals per-sample mix") {
  MixConfig cfg;
  cfg.beta = 0.4;
  Mat clean = random_mat(6, 4, 21);  // three samples of two rows each
  Mat noise = 3.0 * random_mat(6, 4, 22);
  Mat stacked = mix_features_stacked(clean, noise, 2, cfg);
  for (int s = 0; s < 3; ++s) {
    Mat one = mix_features(clean.middleRows(2 * s, 2),
                           noise.middleRows(2 * s, 2), cfg);
    CHECK((stacked.middleRows(2 * s, 2) - one).norm() == 0.0);
  }
}

TEST_CASE("mix validation rejects bad shapes and parameters") {
  Mat a = Mat::Zero(2, 2), b = Mat::Zero(3, 2);
  MixConfig cfg;
  CHECK_THROWS_AS(mix_features(a, b, cfg), ShapeError);
  MixConfig neg;
  neg.alpha = -1.0;
  CHECK_THROWS_AS(neg.validate(), InvalidArgumentError);
  MixConfig zb;
  zb.beta = 0.0;
  CHECK_THROWS_AS(zb.validate(), InvalidArgumentError);
  CHECK_THROWS_AS(mix_features_stacked(Mat::Zero(5, 2), Mat::Zero(5, 2), 2,
                                       MixConfig{}),
                  ShapeError);
}

// ------------------------------------------------------- distill loss

TEST_CASE("lambda = 1 reduces to plain cross-entropy") {
  Mat zs = random_mat(4, 3, 31);
  Mat zt = random_mat(4, 3, 32);
  std::vector<int> y{0, 2, 1, 2};
  DistillLoss d = distill_loss(zs, zt, y, 4.0, 1.0);
  nn::CeResult ce = nn::softmax_ce(zs, y);
  CHECK(std::abs(d.loss - ce.loss) <= 1e-6);
  CHECK((d.dlogits_student - ce.dlogits).cwiseAbs().maxCoeff() <= 1e-6);
  CHECK(d.correct == ce.correct);
}

TEST_CASE("lambda = 0 with matching logits gives zero loss and gradient") {
  Mat z = random_mat(3, 4, 33);
  std::vector<int> y{0, 1, 2};
  DistillLoss d = distill_loss(z, z, y, 2.0, 0.0);
  CHECK(std::abs(d.loss) <= 1e-12);
  CHECK(d.dlogits_student.cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("distill loss hand oracle") {
  // One sample, two classes, T = 1, lambda = 0. Teacher logits [ln 3, 0]
  // give p = [0.75, 0.25]; student [0, 0] gives q = [0.5, 0.5].
  // KL = 0.75 ln 1.5 + 0.25 ln 0.5, dlogits = q - p = [-0.25, 0.25].
  Mat zs = Mat::Zero(1, 2);
  Mat zt(1, 2);
  zt << std::log(3.0), 0.0;
  std::vector<int> y{0};
  DistillLoss d = distill_loss(zs, zt, y, 1.0, 0.0);
  double expect = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
  CHECK(d.loss == doctest::Approx(expect).epsilon(1e-12));
  CHECK(d.dlogits_student(0, 0) == doctest::Approx(-0.25).epsilon(1e-12));
  CHECK(d.dlogits_student(0, 1) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("distill loss gradient matches finite differences") {
  Mat zs = random_mat(3, 4, 41);
  Mat zt = random_mat(3, 4, 42);
  std::vector<int> y{1, 3, 0};
  const double T = 4.0, lam = 0.5, eps = 1e-6;
  DistillLoss d = distill_loss(zs, zt, y, T, lam);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      Mat zp = zs, zm = zs;
      zp(i, j) += eps;
      zm(i, j) -= eps;
      double numeric = (distill_loss(zp, zt, y, T, lam).loss -
                        distill_loss(zm, zt, y, T, lam).loss) /
                       (2.0 * eps);
      CHECK(d.dlogits_student(i, j) ==
            doctest::Approx(numeric).epsilon(1e-6).scale(1.0));
    }
}

TEST_CASE("distill config validation") {
  DistillConfig cfg;
  cfg.temperature = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgumentError);
  DistillConfig lam;
  lam.lambda = 1.5;
  CHECK_THROWS_AS(lam.validate(), InvalidArgumentError);
}

// --------------------------------------------------- feature recognizer

TEST_CASE("feature recnet learns a separable corpus and is deterministic") {
  FeatCorpus train = make_feat_corpus(4, 12, 4, 8, 0.15, 10, 20);
  auto a = train_feature_recnet(train.fms, train.ids, 4, tiny_rec(8, 4),
                                quick_train(12, 16, 5));
  CHECK_FALSE(a.run.aborted);
  CHECK(a.run.epoch_acc.back() >= 0.95);
  // Held-out draws of the same identities.
  FeatCorpus test = make_feat_corpus(4, 6, 4, 8, 0.15, 10, 21);
  CHECK(eval_acc(a.model, test.fms, test.ids) >= 0.9);

  auto b = train_feature_recnet(train.fms, train.ids, 4, tiny_rec(8, 4),
                                quick_train(12, 16, 5));
  CHECK(a.model.params == b.model.params);
  CHECK(a.run.epoch_loss == b.run.epoch_loss);
}

// ------------------------------------------------------------ generator

TEST_CASE("fresh generator emits exactly zero noise") {
  nn::NoiseEncoderConfig gc = tiny_gen(8);
  nn::NoiseEncoder net(gc);
  std::vector<double> params(net.layout().size());
  nn::init_params(net.layout(), params, 99);
  Mat x = random_mat(4, 8, 50);
  Mat noise = net.forward(params.data(), x, 4, nullptr);
  CHECK(noise.cwiseAbs().maxCoeff() == 0.0);

  nn::GenModel gm{gc, params, 99};
  MixConfig mix;
  CHECK((apply_noise(gm, mix, x) - x).norm() == 0.0);
}

TEST_CASE("adversarial training degrades the adversary after warmup") {
  FeatCorpus train = make_feat_corpus(4, 16, 4, 8, 0.1, 60, 61);
  XnndGenConfig cfg;
  cfg.gen = tiny_gen(8);
  cfg.adv = tiny_rec(8, 4);
  cfg.train = quick_train(14, 16, 7);
  cfg.train.cosine_schedule = false;  // keep both players at full strength
  cfg.warmup_epochs = 4;
  auto r = train_noise_generator(train.fms, train.ids, 4, cfg);
  CHECK_FALSE(r.run.aborted);
  CHECK(r.warmup_epochs == 4);
  CHECK(r.run.epoch_acc.size() == 14);
  // Warmup is plain supervised training on clean features: near-perfect.
  double warm_acc = r.run.epoch_acc[3];
  CHECK(warm_acc >= 0.9);
  // Once the generator fights back, the adversary loses ground.
  double final_acc = r.run.epoch_acc.back();
  CHECK(final_acc <= warm_acc - 0.15);

  // The trained noise still respects the mix cap.
  for (int i = 0; i < 4; ++i) {
    Mat mixed = apply_noise(r.gen, cfg.mix, train.fms[i]);
    CHECK((mixed - train.fms[i]).norm() <=
          cfg.mix.alpha * cfg.mix.beta * train.fms[i].norm() + 1e-9);
  }

  // A recognizer trained on clean features breaks on noised inputs.
  auto plain = train_feature_recnet(train.fms, train.ids, 4, tiny_rec(8, 4),
                                    quick_train(12, 16, 5));
  FeatCorpus test = make_feat_corpus(4, 8, 4, 8, 0.1, 60, 62);
  double clean_acc = eval_acc(plain.model, test.fms, test.ids);
  double noised_acc =
      eval_acc(plain.model, test.fms, test.ids, &r.gen, &cfg.mix);
  CHECK(clean_acc >= 0.9);
  CHECK(noised_acc <= clean_acc - 0.3);
}

TEST_CASE("generator training is deterministic") {
  FeatCorpus train = make_feat_corpus(3, 8, 4, 8, 0.1, 70, 71);
  XnndGenConfig cfg;
  cfg.gen = tiny_gen(8);
  cfg.adv = tiny_rec(8, 3);
  cfg.train = quick_train(5, 8, 9);
  cfg.warmup_epochs = 2;
  auto a = train_noise_generator(train.fms, train.ids, 3, cfg);
  auto b = train_noise_generator(train.fms, train.ids, 3, cfg);
  CHECK(a.gen.params == b.gen.params);
  CHECK(a.adv.params == b.adv.params);
  CHECK(a.run.epoch_loss == b.run.epoch_loss);
  CHECK(a.run.batch_key_fingerprints.empty());
}

TEST_CASE("generator config validation") {
  XnndGenConfig cfg;
  cfg.gen = tiny_gen(8);
  cfg.adv = tiny_rec(8, 3);
  cfg.train = quick_train(4, 8, 1);
  cfg.warmup_epochs = 4;  // no adversarial epochs left
  CHECK_THROWS_AS(cfg.validate(), InvalidArgumentError);
  cfg.warmup_epochs = 1;
  cfg.gen_lr_scale = 0.0;
  CHECK_THROWS_AS(cfg.validate(), InvalidArgumentError);

  FeatCorpus c = make_feat_corpus(2, 4, 4, 8, 0.1, 80, 81);
  XnndGenConfig bad;
  bad.gen = tiny_gen(6);  // dim mismatch vs D = 8
  bad.adv = tiny_rec(8, 2);
  bad.train = quick_train(4, 8, 1);
  bad.warmup_epochs = 1;
  CHECK_THROWS_AS(train_noise_generator(c.fms, c.ids, 2, bad), ShapeError);
}

// ---------------------------------------------------------- distillation

TEST_CASE("distilled student works on noised inputs") {
  FeatCorpus train = make_feat_corpus(4, 16, 4, 8, 0.1, 90, 91);

  auto teacher = train_feature_recnet(train.fms, train.ids, 4, tiny_rec(8, 4),
                                      quick_train(12, 16, 3));
  CHECK(teacher.run.epoch_acc.back() >= 0.95);

  XnndGenConfig gcfg;
  gcfg.gen = tiny_gen(8);
  gcfg.adv = tiny_rec(8, 4);
  gcfg.train = quick_train(10, 16, 4);
  gcfg.warmup_epochs = 3;
  auto gan = train_noise_generator(train.fms, train.ids, 4, gcfg);

  DistillConfig dcfg;
  dcfg.student = tiny_rec(8, 4);
  dcfg.train = quick_train(14, 16, 6);
  auto dist = distill_recnet(teacher.model, gan.gen, gcfg.mix, train.fms,
                             train.ids, 4, dcfg);
  CHECK_FALSE(dist.run.aborted);

  FeatCorpus test = make_feat_corpus(4, 8, 4, 8, 0.1, 90, 92);
  double teacher_on_noised =
      eval_acc(teacher.model, test.fms, test.ids, &gan.gen, &gcfg.mix);
  double student_on_noised =
      eval_acc(dist.student, test.fms, test.ids, &gan.gen, &gcfg.mix);
  // The student is trained for the noised inputs the service will see.
  CHECK(student_on_noised >= 0.8);
  CHECK(student_on_noised >= teacher_on_noised);

  auto again = distill_recnet(teacher.model, gan.gen, gcfg.mix, train.fms,
                              train.ids, 4, dcfg);
  CHECK(dist.student.params == again.student.params);
}

TEST_CASE("distillation rejects mismatched players") {
  FeatCorpus c = make_feat_corpus(2, 4, 4, 8, 0.1, 95, 96);
  auto teacher = train_feature_recnet(c.fms, c.ids, 2, tiny_rec(8, 2),
                                      quick_train(2, 8, 1));
  nn::GenModel gen;
  gen.cfg = tiny_gen(6);  // wrong dim
  nn::NoiseEncoder net(gen.cfg);
  gen.params.resize(net.layout().size());
  DistillConfig dcfg;
  dcfg.student = tiny_rec(8, 2);
  dcfg.train = quick_train(2, 8, 1);
  CHECK_THROWS_AS(distill_recnet(teacher.model, gen, MixConfig{}, c.fms,
                                 c.ids, 2, dcfg),
                  ShapeError);

  nn::RecModel wrong_teacher = teacher.model;
  wrong_teacher.cfg.num_classes = 5;
  nn::GenModel ok;
  ok.cfg = tiny_gen(8);
  nn::NoiseEncoder net2(ok.cfg);
  ok.params.resize(net2.layout().size());
  CHECK_THROWS_AS(distill_recnet(wrong_teacher, ok, MixConfig{}, c.fms, c.ids,
                                 2, dcfg),
                  ShapeError);
}
