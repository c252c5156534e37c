#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "common/binio.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"
#include "obf/key.hpp"

using namespace xnn;
using namespace xnn::obf;
namespace fs = std::filesystem;

namespace {

FeatureMap random_fm(Rng& rng, int p, int d) {
  FeatureMap fm(p, d);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < d; ++j) fm(i, j) = rng.normal();
  return fm;
}

fs::path temp_path(const char* name) {
  auto dir = fs::temp_directory_path() / "xnn_obf_tests";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("keygen smallest case P=1 D=1 orthogonal") {
  auto key = keygen(7, 1, 1, MatrixKind::Orthogonal);
  REQUIRE(key.perm.size() == 1);
  CHECK(key.perm[0] == 0);
  // The only 1x1 orthogonal matrices; sign is fixed by the QR sign rule.
  CHECK(std::abs(std::abs(key.matrix(0, 0)) - 1.0) < 1e-12);
  auto again = keygen(7, 1, 1, MatrixKind::Orthogonal);
  CHECK(key.matrix(0, 0) == again.matrix(0, 0));
}

TEST_CASE("keygen(42,16,64,orthogonal) satisfies invariants") {
  auto key = keygen(42, 16, 64, MatrixKind::Orthogonal);
  // Oracle: direct check of M'M and sorted(perm).
  Eigen::MatrixXd gram = key.matrix.transpose() * key.matrix;
  double err = (gram - Eigen::MatrixXd::Identity(64, 64)).cwiseAbs().maxCoeff();
  CHECK(err <= 1e-6);
  std::vector<uint32_t> sorted(key.perm);
  std::sort(sorted.begin(), sorted.end());
  for (uint32_t i = 0; i < 16; ++i) REQUIRE(sorted[i] == i);
}

TEST_CASE("keygen is deterministic (bit-identical)") {
  auto a = keygen(1234, 8, 16, MatrixKind::Orthogonal);
  auto b = keygen(1234, 8, 16, MatrixKind::Orthogonal);
  CHECK(a == b);
  auto g1 = keygen(1234, 8, 16, MatrixKind::Gaussian);
  auto g2 = keygen(1234, 8, 16, MatrixKind::Gaussian);
  CHECK(g1 == g2);
}

TEST_CASE("keygen rejects zero patches or dim") {
  CHECK_THROWS_AS(keygen(1, 0, 4, MatrixKind::Orthogonal),
                  InvalidArgumentError);
  CHECK_THROWS_AS(keygen(1, 4, 0, MatrixKind::Orthogonal),
                  InvalidArgumentError);
}

TEST_CASE("bijection and orthogonality over many seeds") {
  for (uint64_t seed = 0; seed < 50; ++seed) {
    auto key = keygen(seed, 12, 10, MatrixKind::Orthogonal);
    CHECK_NOTHROW(validate_key(key));
  }
}

TEST_CASE("key distinctness across 100 seed pairs") {
  for (uint64_t seed = 0; seed < 100; ++seed) {
    auto a = keygen(seed, 8, 8, MatrixKind::Orthogonal);
    auto b = keygen(seed + 1000, 8, 8, MatrixKind::Orthogonal);
    CHECK((a.perm != b.perm || a.matrix != b.matrix));
  }
}

TEST_CASE("obfuscate with identity key is the identity") {
  Rng rng(3);
  auto fm = random_fm(rng, 5, 7);
  auto key = identity_key(5, 7);
  FeatureMap out = obfuscate(fm, key);
  CHECK(out == fm);
}

TEST_CASE("obfuscate hand example P=2 D=2") {
  ObfuscationKey key;
  key.patches = 2;
  key.dim = 2;
  key.kind = MatrixKind::Orthogonal;
  key.perm = {1, 0};
  key.matrix.resize(2, 2);
  key.matrix << 0, 1, 1, 0;
  FeatureMap fm(2, 2);
  fm << 1, 2, 3, 4;
  FeatureMap out = obfuscate(fm, key);
  CHECK(out(0, 0) == 4);
  CHECK(out(0, 1) == 3);
  CHECK(out(1, 0) == 2);
  CHECK(out(1, 1) == 1);
}

TEST_CASE("orthogonal keys preserve per-row norms") {
  Rng rng(17);
  auto key = keygen(5, 6, 12, MatrixKind::Orthogonal);
  auto fm = random_fm(rng, 6, 12);
  auto out = obfuscate(fm, key);
  for (uint32_t i = 0; i < 6; ++i) {
    double in_norm = fm.row(key.perm[i]).norm();
    double out_norm = out.row(i).norm();
    CHECK(std::abs(in_norm - out_norm) <= 1e-5 * std::max(1.0, in_norm));
  }
}

TEST_CASE("obfuscate shape mismatch throws") {
  auto key = keygen(1, 4, 4, MatrixKind::Orthogonal);
  FeatureMap fm(3, 4);
  fm.setZero();
  CHECK_THROWS_AS(obfuscate(fm, key), ShapeError);
  FeatureMap fm2(4, 5);
  fm2.setZero();
  CHECK_THROWS_AS(obfuscate(fm2, key), ShapeError);
}

TEST_CASE("obfuscate rejects non-finite input") {
  auto key = keygen(1, 2, 2, MatrixKind::Orthogonal);
  FeatureMap fm(2, 2);
  fm.setZero();
  fm(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(obfuscate(fm, key), NumericError);
}

TEST_CASE("round trip: orthogonal within 1e-10, gaussian within 1e-6 rel") {
  Rng rng(99);
  for (int t = 0; t < 100; ++t) {
    const auto kind = (t % 2 == 0) ? MatrixKind::Orthogonal
                                   : MatrixKind::Gaussian;
    auto key = keygen(1000 + t, 7, 9, kind);
    auto fm = random_fm(rng, 7, 9);
    auto back = invert_obfuscation(obfuscate(fm, key), key);
    const double scale = fm.cwiseAbs().maxCoeff();
    const double err = (back - fm).cwiseAbs().maxCoeff();
    if (kind == MatrixKind::Orthogonal) {
      CHECK(err <= 1e-10);
    } else {
      CHECK(err <= 1e-6 * std::max(1.0, scale));
    }
  }
}

TEST_CASE("identity key round trip is bit-exact") {
  Rng rng(4);
  auto fm = random_fm(rng, 4, 6);
  auto key = identity_key(4, 6);
  auto back = invert_obfuscation(obfuscate(fm, key), key);
  CHECK(back == fm);
}

TEST_CASE("isometry: pairwise distances preserved by orthogonal keys") {
  Rng rng(23);
  auto key = keygen(77, 10, 16, MatrixKind::Orthogonal);
  for (int t = 0; t < 100; ++t) {
    auto a = random_fm(rng, 10, 16);
    auto b = random_fm(rng, 10, 16);
    const double before = (a - b).norm();
    const double after = (obfuscate(a, key) - obfuscate(b, key)).norm();
    CHECK(std::abs(after - before) <= 1e-5 * std::max(1.0, before));
  }
}

TEST_CASE("key file round trip is bit-exact") {
  auto key = keygen(31337, 16, 24, MatrixKind::Gaussian);
  auto path = temp_path("roundtrip.xnnk");
  key_save(key, path);
  auto loaded = key_load(path);
  CHECK(loaded == key);
  CHECK(key_fingerprint(loaded) == key_fingerprint(key));
}

TEST_CASE("key file tamper detection: corrupted checksum") {
  auto key = keygen(8, 4, 4, MatrixKind::Orthogonal);
  auto bytes = key_serialize(key);
  bytes[bytes.size() / 2] ^= 0xFF;
  try {
    key_deserialize(bytes);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::BadCrc);
  }
}

TEST_CASE("key file: perm not a bijection is rejected on load") {
  auto key = keygen(8, 4, 4, MatrixKind::Orthogonal);
  auto bytes = key_serialize(key);
  // perm starts after magic(4)+ver(2)+kind(1)+rng(1)+seed(8)+P(4)+D(4) = 24.
  // Overwrite perm[0] with perm[1] so two slots collide, then fix the CRC.
  std::memcpy(bytes.data() + 24, bytes.data() + 28, 4);
  const uint32_t crc = crc32_of(bytes.data(), bytes.size() - 4);
  for (int i = 0; i < 4; ++i)
    bytes[bytes.size() - 4 + i] = static_cast<uint8_t>(crc >> (8 * i));
  try {
    key_deserialize(bytes);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::Invariant);
  }
}

TEST_CASE("key file: bad magic, bad version, truncation") {
  auto key = keygen(8, 4, 4, MatrixKind::Orthogonal);
  auto bytes = key_serialize(key);

  auto bad_magic = bytes;
  bad_magic[0] = 'Y';
  CHECK_THROWS_AS(key_deserialize(bad_magic), ParseError);
  try {
    key_deserialize(bad_magic);
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::BadMagic);
  }

  auto bad_version = bytes;
  bad_version[4] = 0x7F;
  const uint32_t crc = crc32_of(bad_version.data(), bad_version.size() - 4);
  for (int i = 0; i < 4; ++i)
    bad_version[bad_version.size() - 4 + i] =
        static_cast<uint8_t>(crc >> (8 * i));
  try {
    key_deserialize(bad_version);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.kind() == ParseError::Kind::BadVersion);
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 9);
  try {
    key_deserialize(truncated);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    const bool truncation_kind = e.kind() == ParseError::Kind::Truncated ||
                                 e.kind() == ParseError::Kind::BadCrc;
    CHECK(truncation_kind);
  }
}

TEST_CASE("fingerprint differs across keys") {
  auto a = keygen(1, 4, 4, MatrixKind::Orthogonal);
  auto b = keygen(2, 4, 4, MatrixKind::Orthogonal);
  CHECK(key_fingerprint(a) != key_fingerprint(b));
  CHECK(key_fingerprint_hex(a).size() == 16);
}

TEST_CASE("gaussian invert rejects near-singular matrices") {
  ObfuscationKey key;
  key.patches = 2;
  key.dim = 2;
  key.kind = MatrixKind::Gaussian;
  key.perm = {0, 1};
  key.matrix.resize(2, 2);
  key.matrix << 1.0, 1.0, 1.0, 1.0 + 1e-13;
  FeatureMap fm(2, 2);
  fm << 1, 2, 3, 4;
  CHECK_THROWS_AS(invert_obfuscation(fm, key), NumericError);
}
