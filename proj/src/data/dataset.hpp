#pragma once

#include <filesystem>
#include <json.hpp>
#include <string>
#include <vector>

#include "data/image.hpp"

namespace xnn::data {

using json = nlohmann::json;

// Labeled identity corpus. Labels index identity_names; every image of one
// person carries the same label.
struct IdentityDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  std::vector<std::string> identity_names;

  size_t size() const { return images.size(); }
  int num_identities() const { return static_cast<int>(identity_names.size()); }
  std::vector<int> indices_of(int label) const;
  void validate() const;
  json manifest() const;
};

// Synthetic identities: one prototype image per person, samples are the
// prototype plus clipped Gaussian pixel noise. Every identity's prototype is
// drawn from the same distribution, so class information lives in the pixel
// directions rather than in any per-class intensity statistic.
struct SynthConfig {
  int num_identities = 10;
  int images_per_identity = 10;
  int image_size = 32;
  double intra_class_noise = 0.08;
  double inter_class_separation = 1.0;  // prototype contrast around mid gray
  uint64_t seed = 0;

  void validate() const;
  json to_json() const;
  static SynthConfig from_json(const json& j);
};

IdentityDataset generate_synthetic_identities(const SynthConfig& cfg);

// Loads root/<identity>/<image> with identities and files in lexicographic
// order. Unreadable files are skipped and reported, not fatal.
struct FolderLoadResult {
  IdentityDataset dataset;
  std::vector<std::string> warnings;
};

FolderLoadResult load_image_folder(const std::filesystem::path& root,
                                   int image_size);

void save_image_folder(const IdentityDataset& ds,
                       const std::filesystem::path& root);

// Identity-disjoint split: test identities are sampled by seed, contribute
// exactly test_images_per_identity images each (surplus dropped), and never
// appear in the train side. Labels are re-indexed per side.
struct SplitConfig {
  int num_test_identities = 2;
  int test_images_per_identity = 2;
  uint64_t seed = 0;
};

struct DatasetSplit {
  IdentityDataset train;
  IdentityDataset test;
};

DatasetSplit split_by_identity(const IdentityDataset& ds,
                               const SplitConfig& cfg);

}  // namespace xnn::data
