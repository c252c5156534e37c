#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace xnn::obf {

// A feature map is P patch rows by D channels. Producers validate shape and
// finiteness at module boundaries; inside the hot paths it is a plain matrix.
using FeatureMap = Eigen::MatrixXd;

void validate_feature_map(const FeatureMap& fm, const std::string& where);

enum class MatrixKind : uint8_t { Orthogonal = 0, Gaussian = 1 };

const char* matrix_kind_name(MatrixKind k);
MatrixKind matrix_kind_from_name(const std::string& name);

// Secret obfuscation transform: patch permutation pi plus one shared DxD
// mixing matrix. Known only to the dataset owner.
//
// Normative convention: obfuscate(fm)[i] = fm[perm[i]] * matrix (row vectors;
// permutation applied first, then the right-multiplication).
struct ObfuscationKey {
  uint64_t seed = 0;
  uint32_t patches = 0;
  uint32_t dim = 0;
  MatrixKind kind = MatrixKind::Orthogonal;
  std::vector<uint32_t> perm;  // length P, bijection on 0..P-1
  Eigen::MatrixXd matrix;      // DxD

  bool operator==(const ObfuscationKey& o) const;
};

inline constexpr double kOrthogonalityTol = 1e-6;
inline constexpr double kMaxGaussianCondition = 1e6;

// Deterministic function of (seed, patches, dim, kind). Orthogonal keys come
// from the sign-fixed QR factor of a seeded normal matrix; gaussian keys are
// the raw normal matrix, resampled while the condition number exceeds 1e6.
ObfuscationKey keygen(uint64_t seed, uint32_t patches, uint32_t dim,
                      MatrixKind kind);

// perm = id, matrix = I. Reduces the whole pipeline to the vanilla one.
ObfuscationKey identity_key(uint32_t patches, uint32_t dim);

// Throws if any ObfuscationKey invariant fails (bijection, orthogonality or
// condition bound, finiteness).
void validate_key(const ObfuscationKey& key);

FeatureMap obfuscate(const FeatureMap& fm, const ObfuscationKey& key);

// Test oracle: exact inverse of obfuscate for valid keys.
FeatureMap invert_obfuscation(const FeatureMap& fm_obf,
                              const ObfuscationKey& key);

// Binary key file, little-endian:
//   magic "XNNK" | version u16 | matrix_kind u8 | rng_id u8 | seed u64 |
//   P u32 | D u32 | perm u32[P] | matrix f64[D*D] row-major | CRC32
inline constexpr uint16_t kKeyFileVersion = 1;

std::vector<uint8_t> key_serialize(const ObfuscationKey& key);
ObfuscationKey key_deserialize(const std::vector<uint8_t>& bytes);
void key_save(const ObfuscationKey& key, const std::filesystem::path& path);
ObfuscationKey key_load(const std::filesystem::path& path);

// Provenance hash of the serialized key bytes; safe to store next to
// obfuscated data because it does not reveal the key.
uint64_t key_fingerprint(const ObfuscationKey& key);
std::string key_fingerprint_hex(const ObfuscationKey& key);

}  // namespace xnn::obf
