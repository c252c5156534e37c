#pragma once

#include <functional>
#include <json.hpp>
#include <vector>

#include "nn/model.hpp"
#include "nn/train.hpp"
#include "obf/key.hpp"

namespace xnn::attack {

using json = nlohmann::json;
using nn::Mat;
using nn::Vec;

// Enrolled reference set the adversary matches probes against. Multiple
// entries may share an identity (multi-image enrollment); a probe scores a hit
// when the top-1 entry carries the probe's identity.
struct GalleryEntry {
  Vec embedding;
  int identity = -1;
};

struct Gallery {
  std::vector<GalleryEntry> entries;

  int num_identities() const;
  void validate() const;
};

// Maps one (possibly obfuscated) feature map to an attack embedding.
using AttackEmbedFn = std::function<Vec(const obf::FeatureMap&)>;

// Feature maps with ground-truth identities; the metric input.
struct ProbeSet {
  std::vector<obf::FeatureMap> fms;
  std::vector<int> ids;

  size_t size() const { return fms.size(); }
  void validate() const;
};

// Identity leakage: the fraction of probes whose top-1 gallery match (cosine
// over the attack embeddings, ties to the lowest entry index) has the probe's
// identity. Chance floor is 1/N for N gallery identities.
struct LeakageReport {
  double leakage = 0.0;
  int probes = 0;
  int hits = 0;
  int gallery_identities = 0;
  double chance = 0.0;
  std::vector<uint8_t> hit_flags;
  long long oracle_queries = -1;  // black-box attacks only
  bool degenerate = false;        // surrogate collapse flag

  json to_json() const;
};

Gallery build_attack_gallery(const AttackEmbedFn& embed,
                             const ProbeSet& references);

LeakageReport identity_leakage(const AttackEmbedFn& embed,
                               const ProbeSet& probes, const Gallery& gallery);
LeakageReport identity_leakage(const AttackEmbedFn& embed,
                               const ProbeSet& probes,
                               const ProbeSet& references);

// Attack embedding through a recognizer: normalized embedding head output.
AttackEmbedFn make_recnet_attack_embedder(const nn::RecModel& model);

// ------------------------------------------------------ expectation attack

// The adversary trains its own recognizer on shadow data, drawing a fresh
// obfuscation key for every minibatch so the network can only retain
// key-invariant structure. Fingerprints of every batch key are recorded in
// the run for auditability.
struct ExpectationConfig {
  nn::RecNetConfig rec;
  nn::TrainConfig train;
  obf::MatrixKind key_kind = obf::MatrixKind::Orthogonal;
  bool fresh_key_per_batch = true;
};

struct ExpectationTrainResult {
  nn::RecModel model;
  nn::TrainRun run;
};

ExpectationTrainResult train_expectation_recnet(
    const std::vector<obf::FeatureMap>& shadow_fms,
    const std::vector<int>& shadow_labels, int num_classes,
    const ExpectationConfig& cfg);

LeakageReport expectation_attack(const nn::RecModel& attack_model,
                                 const ProbeSet& probes,
                                 const ProbeSet& references);

// -------------------------------------------------------- black-box attack

// The owner-side feature generator as the adversary can query it: one image
// in, the transmitted feature map out. Opaque; only outputs are observable.
using FgOracleFn = std::function<obf::FeatureMap(const data::Image&)>;

struct BlackboxConfig {
  nn::RecNetConfig rec;
  nn::TrainConfig train;
  int query_budget = 0;  // 0 means one query per attacker image
};

struct BlackboxResult {
  nn::RecModel surrogate;
  nn::TrainRun run;
  LeakageReport report;
  int distinct_labels = 0;
};

// Queries the generator over (a budget-capped, seed-chosen subset of) the
// attacker's own labeled images, trains a surrogate recognizer on the
// (response feature, attacker label) pairs, then links the victim's
// transmitted features against the reference gallery with the surrogate's
// embeddings. Attacker identities must be disjoint from the victim's; the
// embedding transfers, the classifier head does not.
//
// The report carries the exact query count. degenerate is raised when fewer
// than two attacker identities were observed or when the trained surrogate
// collapses onto (almost) one predicted class; an oracle failure mid-stream
// aborts the attack and yields the partial report with the untrained
// surrogate.
BlackboxResult blackbox_surrogate_attack(const FgOracleFn& oracle,
                                         const data::IdentityDataset& attacker_ds,
                                         const BlackboxConfig& cfg,
                                         const ProbeSet& victim_probes,
                                         const ProbeSet& victim_references);

}  // namespace xnn::attack
