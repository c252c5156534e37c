#include "report/config.hpp"

#include <algorithm>
#include <fstream>

#include "common/binio.hpp"
#include "common/error.hpp"

namespace xnn::report {

namespace {

template <typename T>
T get_or(const json& j, const char* key, T def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(ParseError::Kind::Malformed,
                     std::string("config: bad value for \"") + key + "\"");
  }
}

void check_allowed(const json& j, const char* where,
                   std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ParseError(ParseError::Kind::Malformed,
                     std::string(where) + ": expected object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) {
          return k == a;
        }) == allowed.end())
      throw ParseError(ParseError::Kind::Malformed,
                       std::string(where) + ": unknown field \"" + k + "\"");
  }
}

// Deep default-merge: objects recurse, everything else takes the override.
// Unknown override keys survive and are rejected by the section parsers.
json merge_defaults(json base, const json& over) {
  if (!base.is_object() || !over.is_object()) return over;
  for (const auto& [k, v] : over.items()) {
    if (base.contains(k) && base[k].is_object() && v.is_object())
      base[k] = merge_defaults(base[k], v);
    else
      base[k] = v;
  }
  return base;
}

}  // namespace

// ------------------------------------------------------------------ obf

void ObfSection::validate() const {
  if (kind != "orthogonal" && kind != "gaussian" && kind != "identity")
    throw InvalidArgumentError("obf: unknown kind \"" + kind + "\"");
}

json ObfSection::to_json() const {
  return json{{"kind", kind}, {"key_seed", key_seed}};
}

ObfSection ObfSection::from_json(const json& j) {
  check_allowed(j, "obf", {"kind", "key_seed"});
  ObfSection s;
  s.kind = get_or<std::string>(j, "kind", s.kind);
  s.key_seed = get_or<uint64_t>(j, "key_seed", s.key_seed);
  s.validate();
  return s;
}

obf::ObfuscationKey ObfSection::make_key(uint32_t patches,
                                         uint32_t dim) const {
  validate();
  if (kind == "identity") return obf::identity_key(patches, dim);
  return obf::keygen(key_seed, patches, dim,
                     kind == "orthogonal" ? obf::MatrixKind::Orthogonal
                                          : obf::MatrixKind::Gaussian);
}

// ----------------------------------------------------------------- data

void DataSection::validate() const {
  synth.validate();
  if (test_identities < 1 || test_identities >= synth.num_identities - 1)
    throw InvalidArgumentError("data: test_identities out of range");
  if (test_images_per_identity < 2 ||
      test_images_per_identity > synth.images_per_identity)
    throw InvalidArgumentError("data: test_images_per_identity out of range");
  if (attacker_images_per_identity < 1 ||
      attacker_images_per_identity >= synth.images_per_identity)
    throw InvalidArgumentError(
        "data: attacker_images_per_identity out of range");
  if (public_identities < 2 || public_images_per_identity < 1)
    throw InvalidArgumentError("data: public corpus too small");
}

json DataSection::to_json() const {
  return json{{"synth", synth.to_json()},
              {"test_identities", test_identities},
              {"test_images_per_identity", test_images_per_identity},
              {"attacker_images_per_identity", attacker_images_per_identity},
              {"public_identities", public_identities},
              {"public_images_per_identity", public_images_per_identity}};
}

DataSection DataSection::from_json(const json& j) {
  check_allowed(j, "data",
                {"synth", "test_identities", "test_images_per_identity",
                 "attacker_images_per_identity", "public_identities",
                 "public_images_per_identity"});
  DataSection s;
  if (j.contains("synth")) s.synth = data::SynthConfig::from_json(j["synth"]);
  s.test_identities = get_or(j, "test_identities", s.test_identities);
  s.test_images_per_identity =
      get_or(j, "test_images_per_identity", s.test_images_per_identity);
  s.attacker_images_per_identity = get_or(j, "attacker_images_per_identity",
                                          s.attacker_images_per_identity);
  s.public_identities = get_or(j, "public_identities", s.public_identities);
  s.public_images_per_identity =
      get_or(j, "public_images_per_identity", s.public_images_per_identity);
  s.validate();
  return s;
}

// --------------------------------------------------------------- attack

json AttackSection::to_json() const {
  return json{{"train", train.to_json()},
              {"query_budget", query_budget},
              {"temperature", temperature}};
}

AttackSection AttackSection::from_json(const json& j) {
  check_allowed(j, "attack", {"train", "query_budget", "temperature"});
  AttackSection s;
  if (j.contains("train")) s.train = nn::TrainConfig::from_json(j["train"]);
  s.query_budget = get_or(j, "query_budget", s.query_budget);
  s.temperature = get_or(j, "temperature", s.temperature);
  if (s.query_budget < 0)
    throw InvalidArgumentError("attack: query_budget must be >= 0");
  if (s.temperature <= 0.0)
    throw InvalidArgumentError("attack: temperature must be > 0");
  return s;
}

// ----------------------------------------------------------------- xnnd

json XnndSection::to_json() const {
  return json{{"train_gen", train_gen.to_json()},
              {"train_distill", train_distill.to_json()},
              {"warmup_epochs", warmup_epochs},
              {"gen_lr_scale", gen_lr_scale},
              {"alpha", alpha},
              {"beta", beta},
              {"temperature", temperature},
              {"lambda", lambda}};
}

XnndSection XnndSection::from_json(const json& j) {
  check_allowed(j, "xnnd",
                {"train_gen", "train_distill", "warmup_epochs",
                 "gen_lr_scale", "alpha", "beta", "temperature", "lambda"});
  XnndSection s;
  if (j.contains("train_gen"))
    s.train_gen = nn::TrainConfig::from_json(j["train_gen"]);
  if (j.contains("train_distill"))
    s.train_distill = nn::TrainConfig::from_json(j["train_distill"]);
  s.warmup_epochs = get_or(j, "warmup_epochs", s.warmup_epochs);
  s.gen_lr_scale = get_or(j, "gen_lr_scale", s.gen_lr_scale);
  s.alpha = get_or(j, "alpha", s.alpha);
  s.beta = get_or(j, "beta", s.beta);
  s.temperature = get_or(j, "temperature", s.temperature);
  s.lambda = get_or(j, "lambda", s.lambda);
  if (s.warmup_epochs < 0 || s.warmup_epochs >= s.train_gen.epochs)
    throw InvalidArgumentError("xnnd: warmup_epochs out of range");
  if (s.gen_lr_scale <= 0.0 || s.beta <= 0.0 || s.alpha < 0.0 ||
      s.temperature <= 0.0 || s.lambda < 0.0 || s.lambda > 1.0)
    throw InvalidArgumentError("xnnd: parameter out of range");
  return s;
}

// ------------------------------------------------------------ baselines

json BaselinesSection::to_json() const {
  return json{{"train", train.to_json()},
              {"dominance_threshold", dominance_threshold},
              {"eval_encodings", eval_encodings}};
}

BaselinesSection BaselinesSection::from_json(const json& j) {
  check_allowed(j, "baselines",
                {"train", "dominance_threshold", "eval_encodings"});
  BaselinesSection s;
  if (j.contains("train")) s.train = nn::TrainConfig::from_json(j["train"]);
  s.dominance_threshold =
      get_or(j, "dominance_threshold", s.dominance_threshold);
  s.eval_encodings = get_or(j, "eval_encodings", s.eval_encodings);
  if (s.dominance_threshold <= 0.0 || s.dominance_threshold > 1.0)
    throw InvalidArgumentError("baselines: threshold out of range");
  if (s.eval_encodings < 1)
    throw InvalidArgumentError("baselines: eval_encodings must be >= 1");
  return s;
}

// ----------------------------------------------------------- experiment

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.data.synth.num_identities = 50;
  c.data.synth.images_per_identity = 36;
  c.data.synth.image_size = 32;

  c.train_recnet.epochs = 30;
  c.train_pretrain.epochs = 20;
  c.attack.train.epochs = 30;
  c.xnnd.train_gen.epochs = 12;
  c.xnnd.warmup_epochs = 3;
  c.xnnd.train_distill.epochs = 20;
  c.baselines.train.epochs = 15;
  return c;
}

void ExperimentConfig::validate() const {
  data.validate();
  extnet.validate();
  recnet.validate();
  obf.validate();
  train_recnet.validate();
  train_pretrain.validate();
  if (output_dir.empty())
    throw InvalidArgumentError("output: dir must be nonempty");
  if (runs < 1) throw InvalidArgumentError("seed: runs must be >= 1");
}

json ExperimentConfig::to_json() const {
  return json{{"data", data.to_json()},
              {"extnet", extnet.to_json()},
              {"recnet", recnet.to_json()},
              {"obf", obf.to_json()},
              {"train",
               {{"recnet", train_recnet.to_json()},
                {"pretrain", train_pretrain.to_json()}}},
              {"attack", attack.to_json()},
              {"xnnd", xnnd.to_json()},
              {"baselines", baselines.to_json()},
              {"output", {{"dir", output_dir}}},
              {"seed", {{"master", master_seed}, {"runs", runs}}}};
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  check_allowed(j, "experiment",
                {"data", "extnet", "recnet", "obf", "train", "attack", "xnnd",
                 "baselines", "output", "seed"});
  if (j.contains("train"))
    check_allowed(j["train"], "train", {"recnet", "pretrain"});
  if (j.contains("output")) check_allowed(j["output"], "output", {"dir"});
  if (j.contains("seed"))
    check_allowed(j["seed"], "seed", {"master", "runs"});

  // Partial documents override the stated defaults field by field.
  json merged = merge_defaults(defaults().to_json(), j);

  ExperimentConfig c;
  c.data = DataSection::from_json(merged["data"]);
  c.extnet = nn::ExtNetConfig::from_json(merged["extnet"]);
  c.recnet = nn::RecNetConfig::from_json(merged["recnet"]);
  c.obf = ObfSection::from_json(merged["obf"]);
  c.train_recnet = nn::TrainConfig::from_json(merged["train"]["recnet"]);
  c.train_pretrain = nn::TrainConfig::from_json(merged["train"]["pretrain"]);
  c.attack = AttackSection::from_json(merged["attack"]);
  c.xnnd = XnndSection::from_json(merged["xnnd"]);
  c.baselines = BaselinesSection::from_json(merged["baselines"]);
  c.output_dir = merged["output"]["dir"].get<std::string>();
  c.master_seed = merged["seed"]["master"].get<uint64_t>();
  c.runs = merged["seed"]["runs"].get<int>();
  c.validate();
  return c;
}

uint64_t ExperimentConfig::hash() const {
  return fnv1a64_str(to_json().dump());
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(ParseError::Kind::Malformed,
                     "config: invalid JSON in " + path.string() + ": " +
                         e.what());
  }
  return ExperimentConfig::from_json(j);
}

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::filesystem::path& path) {
  atomic_write_text(path, cfg.to_json().dump(2) + "\n");
}

}  // namespace xnn::report
