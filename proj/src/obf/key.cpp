#include "obf/key.hpp"

#include <Eigen/QR>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

#include "common/binio.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::obf {

void validate_feature_map(const FeatureMap& fm, const std::string& where) {
  if (fm.rows() < 1 || fm.cols() < 1)
    throw ShapeError(where + ": feature map must be non-empty");
  if (!fm.allFinite())
    throw NumericError(where + ": feature map contains NaN or Inf");
}

const char* matrix_kind_name(MatrixKind k) {
  return k == MatrixKind::Orthogonal ? "orthogonal" : "gaussian";
}

MatrixKind matrix_kind_from_name(const std::string& name) {
  if (name == "orthogonal") return MatrixKind::Orthogonal;
  if (name == "gaussian") return MatrixKind::Gaussian;
  throw InvalidArgumentError("unknown matrix kind: " + name);
}

bool ObfuscationKey::operator==(const ObfuscationKey& o) const {
  return seed == o.seed && patches == o.patches && dim == o.dim &&
         kind == o.kind && perm == o.perm && matrix.rows() == o.matrix.rows() &&
         matrix.cols() == o.matrix.cols() && matrix == o.matrix;
}

namespace {

Eigen::MatrixXd draw_normal_matrix(Rng& rng, uint32_t dim) {
  Eigen::MatrixXd m(dim, dim);
  // Row-major fill order so the draw sequence is part of the key contract.
  for (uint32_t r = 0; r < dim; ++r)
    for (uint32_t c = 0; c < dim; ++c) m(r, c) = rng.normal();
  return m;
}

double condition_number(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const double smin = svd.singularValues().minCoeff();
  const double smax = svd.singularValues().maxCoeff();
  if (smin <= 0.0) return std::numeric_limits<double>::infinity();
  return smax / smin;
}

}  // namespace

ObfuscationKey keygen(uint64_t seed, uint32_t patches, uint32_t dim,
                      MatrixKind kind) {
  if (patches < 1) throw InvalidArgumentError("keygen: patches must be >= 1");
  if (dim < 1) throw InvalidArgumentError("keygen: dim must be >= 1");

  Rng rng(seed);
  ObfuscationKey key;
  key.seed = seed;
  key.patches = patches;
  key.dim = dim;
  key.kind = kind;
  key.perm = rng.permutation(patches);

  if (kind == MatrixKind::Orthogonal) {
    // Unique orthogonal factor: QR of a normal matrix with Q's columns
    // scaled by the signs of R's diagonal.
    Eigen::MatrixXd a = draw_normal_matrix(rng, dim);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (uint32_t c = 0; c < dim; ++c)
      if (r(c, c) < 0.0) q.col(c) = -q.col(c);
    key.matrix = q;
  } else {
    Eigen::MatrixXd m = draw_normal_matrix(rng, dim);
    while (condition_number(m) > kMaxGaussianCondition)
      m = draw_normal_matrix(rng, dim);
    key.matrix = m;
  }

  validate_key(key);
  return key;
}

ObfuscationKey identity_key(uint32_t patches, uint32_t dim) {
  if (patches < 1 || dim < 1)
    throw InvalidArgumentError("identity_key: patches and dim must be >= 1");
  ObfuscationKey key;
  key.seed = 0;
  key.patches = patches;
  key.dim = dim;
  key.kind = MatrixKind::Orthogonal;
  key.perm.resize(patches);
  for (uint32_t i = 0; i < patches; ++i) key.perm[i] = i;
  key.matrix = Eigen::MatrixXd::Identity(dim, dim);
  return key;
}

void validate_key(const ObfuscationKey& key) {
  if (key.patches < 1 || key.dim < 1)
    throw InvalidArgumentError("key: patches and dim must be >= 1");
  if (key.perm.size() != key.patches)
    throw ShapeError("key: perm length != patches");
  if (key.matrix.rows() != key.dim || key.matrix.cols() != key.dim)
    throw ShapeError("key: matrix is not DxD");
  if (!key.matrix.allFinite())
    throw NumericError("key: matrix contains NaN or Inf");

  std::vector<uint32_t> sorted(key.perm);
  std::sort(sorted.begin(), sorted.end());
  for (uint32_t i = 0; i < key.patches; ++i)
    if (sorted[i] != i)
      throw InvalidArgumentError("key: perm is not a bijection on 0..P-1");

  if (key.kind == MatrixKind::Orthogonal) {
    const double err = (key.matrix.transpose() * key.matrix -
                        Eigen::MatrixXd::Identity(key.dim, key.dim))
                           .cwiseAbs()
                           .maxCoeff();
    if (err > kOrthogonalityTol)
      throw NumericError("key: matrix not orthogonal, |M'M - I|_max = " +
                         std::to_string(err));
  } else {
    const double cond = condition_number(key.matrix);
    if (!(cond <= kMaxGaussianCondition))
      throw NumericError("key: gaussian matrix condition number " +
                         std::to_string(cond) + " exceeds 1e6");
  }
}

FeatureMap obfuscate(const FeatureMap& fm, const ObfuscationKey& key) {
  validate_feature_map(fm, "obfuscate");
  if (fm.rows() != key.patches || fm.cols() != key.dim)
    throw ShapeError("obfuscate: feature map is " + std::to_string(fm.rows()) +
                     "x" + std::to_string(fm.cols()) + " but key expects " +
                     std::to_string(key.patches) + "x" +
                     std::to_string(key.dim));
  FeatureMap permuted(fm.rows(), fm.cols());
  for (uint32_t i = 0; i < key.patches; ++i)
    permuted.row(i) = fm.row(key.perm[i]);
  return permuted * key.matrix;
}

FeatureMap invert_obfuscation(const FeatureMap& fm_obf,
                              const ObfuscationKey& key) {
  validate_feature_map(fm_obf, "invert_obfuscation");
  if (fm_obf.rows() != key.patches || fm_obf.cols() != key.dim)
    throw ShapeError("invert_obfuscation: shape mismatch with key");

  FeatureMap unmixed;
  if (key.kind == MatrixKind::Orthogonal) {
    unmixed = fm_obf * key.matrix.transpose();
  } else {
    if (condition_number(key.matrix) > kMaxGaussianCondition)
      throw NumericError("invert_obfuscation: matrix is near-singular");
    // Solve X * M = Y row-wise via M' X' = Y'.
    unmixed = key.matrix.transpose()
                  .partialPivLu()
                  .solve(fm_obf.transpose())
                  .transpose();
  }
  FeatureMap out(fm_obf.rows(), fm_obf.cols());
  for (uint32_t i = 0; i < key.patches; ++i)
    out.row(key.perm[i]) = unmixed.row(i);
  return out;
}

std::vector<uint8_t> key_serialize(const ObfuscationKey& key) {
  ByteWriter w;
  w.bytes("XNNK", 4);
  w.u16(kKeyFileVersion);
  w.u8(static_cast<uint8_t>(key.kind));
  w.u8(kRngIdXoshiro256pp);
  w.u64(key.seed);
  w.u32(key.patches);
  w.u32(key.dim);
  for (uint32_t p : key.perm) w.u32(p);
  for (uint32_t r = 0; r < key.dim; ++r)
    for (uint32_t c = 0; c < key.dim; ++c) w.f64(key.matrix(r, c));
  const uint32_t crc = crc32_of(w.data().data(), w.data().size());
  w.u32(crc);
  return w.take();
}

ObfuscationKey key_deserialize(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "XNNK", 4) != 0)
    throw ParseError(ParseError::Kind::BadMagic, "key file: bad magic");
  if (bytes.size() < 4 + 2 + 1 + 1 + 8 + 4 + 4 + 4)
    throw ParseError(ParseError::Kind::Truncated, "key file: truncated");

  // CRC covers everything before the trailing 4 bytes.
  const size_t body = bytes.size() - 4;
  ByteReader tail(bytes.data() + body, 4);
  const uint32_t stored_crc = tail.u32();
  if (crc32_of(bytes.data(), body) != stored_crc)
    throw ParseError(ParseError::Kind::BadCrc, "key file: CRC mismatch");

  ByteReader r(bytes.data(), body);
  char magic[4];
  r.bytes(magic, 4);
  const uint16_t version = r.u16();
  if (version != kKeyFileVersion)
    throw ParseError(ParseError::Kind::BadVersion,
                     "key file: unsupported version " + std::to_string(version));
  const uint8_t kind_raw = r.u8();
  if (kind_raw > 1)
    throw ParseError(ParseError::Kind::Malformed, "key file: bad matrix kind");
  const uint8_t rng_id = r.u8();
  if (rng_id != kRngIdXoshiro256pp)
    throw ParseError(ParseError::Kind::BadVersion,
                     "key file: unknown rng id " + std::to_string(rng_id));

  ObfuscationKey key;
  key.kind = static_cast<MatrixKind>(kind_raw);
  key.seed = r.u64();
  key.patches = r.u32();
  key.dim = r.u32();
  if (key.patches < 1 || key.dim < 1)
    throw ParseError(ParseError::Kind::Malformed, "key file: zero P or D");
  const uint64_t expect =
      static_cast<uint64_t>(key.patches) * 4 +
      static_cast<uint64_t>(key.dim) * key.dim * 8;
  if (r.remaining() != expect)
    throw ParseError(ParseError::Kind::Truncated,
                     "key file: payload size mismatch");
  key.perm.resize(key.patches);
  for (uint32_t i = 0; i < key.patches; ++i) key.perm[i] = r.u32();
  key.matrix.resize(key.dim, key.dim);
  for (uint32_t rr = 0; rr < key.dim; ++rr)
    for (uint32_t c = 0; c < key.dim; ++c) key.matrix(rr, c) = r.f64();

  try {
    validate_key(key);
  } catch (const Error& e) {
    throw ParseError(ParseError::Kind::Invariant,
                     std::string("key file: ") + e.what());
  }
  return key;
}

void key_save(const ObfuscationKey& key, const std::filesystem::path& path) {
  atomic_write_file(path, key_serialize(key));
}

ObfuscationKey key_load(const std::filesystem::path& path) {
  return key_deserialize(read_file_bytes(path));
}

uint64_t key_fingerprint(const ObfuscationKey& key) {
  return fnv1a64(key_serialize(key));
}

std::string key_fingerprint_hex(const ObfuscationKey& key) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(key_fingerprint(key)));
  return std::string(buf);
}

}  // namespace xnn::obf
