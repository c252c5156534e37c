#include "data/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

#include "common/error.hpp"
#include "common/rng.hpp"

namespace xnn::data {

std::vector<int> IdentityDataset::indices_of(int label) const {
  std::vector<int> out;
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) out.push_back(static_cast<int>(i));
  return out;
}

void IdentityDataset::validate() const {
  if (images.size() != labels.size())
    throw ShapeError("dataset: image and label counts differ");
  for (int l : labels)
    if (l < 0 || l >= num_identities())
      throw InvalidArgumentError("dataset: label out of range");
  for (const auto& img : images) {
    if (img.height < 1 || img.width < 1)
      throw ShapeError("dataset: empty image");
    if (!images.empty() && (img.height != images[0].height ||
                            img.width != images[0].width ||
                            img.channels != images[0].channels))
      throw ShapeError("dataset: images have mixed shapes");
  }
}

json IdentityDataset::manifest() const {
  std::vector<int> counts(identity_names.size(), 0);
  for (int l : labels) ++counts[l];
  json ids = json::array();
  for (size_t i = 0; i < identity_names.size(); ++i)
    ids.push_back({{"name", identity_names[i]}, {"images", counts[i]}});
  return json{{"total_images", images.size()},
              {"num_identities", identity_names.size()},
              {"image_height", images.empty() ? 0 : images[0].height},
              {"image_width", images.empty() ? 0 : images[0].width},
              {"channels", images.empty() ? 0 : images[0].channels},
              {"identities", ids}};
}

void SynthConfig::validate() const {
  if (num_identities < 2)
    throw InvalidArgumentError("synth: need at least two identities");
  if (images_per_identity < 1)
    throw InvalidArgumentError("synth: images_per_identity must be positive");
  if (image_size < 1)
    throw InvalidArgumentError("synth: image_size must be positive");
  if (intra_class_noise < 0.0)
    throw InvalidArgumentError("synth: intra_class_noise must be >= 0");
  if (inter_class_separation < 0.0 || inter_class_separation > 1.0)
    throw InvalidArgumentError("synth: inter_class_separation must be in [0,1]");
}

json SynthConfig::to_json() const {
  return json{{"num_identities", num_identities},
              {"images_per_identity", images_per_identity},
              {"image_size", image_size},
              {"intra_class_noise", intra_class_noise},
              {"inter_class_separation", inter_class_separation},
              {"seed", seed}};
}

SynthConfig SynthConfig::from_json(const json& j) {
  if (!j.is_object())
    throw ParseError(ParseError::Kind::Malformed, "SynthConfig: expected object");
  static const std::set<std::string> allowed = {
      "num_identities", "images_per_identity", "image_size",
      "intra_class_noise", "inter_class_separation", "seed"};
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (!allowed.contains(k))
      throw ParseError(ParseError::Kind::Malformed,
                       "SynthConfig: unknown field \"" + k + "\"");
  }
  SynthConfig c;
  if (j.contains("num_identities")) c.num_identities = j.at("num_identities");
  if (j.contains("images_per_identity"))
    c.images_per_identity = j.at("images_per_identity");
  if (j.contains("image_size")) c.image_size = j.at("image_size");
  if (j.contains("intra_class_noise"))
    c.intra_class_noise = j.at("intra_class_noise");
  if (j.contains("inter_class_separation"))
    c.inter_class_separation = j.at("inter_class_separation");
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  c.validate();
  return c;
}

IdentityDataset generate_synthetic_identities(const SynthConfig& cfg) {
  cfg.validate();
  IdentityDataset ds;
  const int S = cfg.image_size;
  for (int id = 0; id < cfg.num_identities; ++id) {
    ds.identity_names.push_back("synth_" + std::to_string(id));
    Rng proto_rng(Rng::derive(cfg.seed, 0xA0000u + static_cast<uint64_t>(id)));
    Image proto(S, S, 1);
    for (double& px : proto.pixels)
      px = 0.5 + cfg.inter_class_separation * (proto_rng.uniform() - 0.5);
    for (int j = 0; j < cfg.images_per_identity; ++j) {
      Rng img_rng(Rng::derive(
          cfg.seed, 0xB0000u + static_cast<uint64_t>(id) * 100003u +
                        static_cast<uint64_t>(j)));
      Image img = proto;
      for (double& px : img.pixels)
        px = std::clamp(px + cfg.intra_class_noise * img_rng.normal(), 0.0,
                        1.0);
      ds.images.push_back(std::move(img));
      ds.labels.push_back(id);
    }
  }
  ds.validate();
  return ds;
}

FolderLoadResult load_image_folder(const std::filesystem::path& root,
                                   int image_size) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root))
    throw IoError("load_image_folder: not a directory: " + root.string());
  FolderLoadResult res;
  std::vector<fs::path> id_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) id_dirs.push_back(e.path());
  std::sort(id_dirs.begin(), id_dirs.end());

  for (const auto& dir : id_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    int loaded = 0;
    const int label = res.dataset.num_identities();
    for (const auto& f : files) {
      try {
        Image img = to_gray(read_image(f));
        img = resize_bilinear(img, image_size, image_size);
        res.dataset.images.push_back(std::move(img));
        res.dataset.labels.push_back(label);
        ++loaded;
      } catch (const Error& e) {
        res.warnings.push_back("skipped " + f.string() + ": " + e.what());
      }
    }
    if (loaded > 0) {
      res.dataset.identity_names.push_back(dir.filename().string());
    } else {
      // Unwind the label we reserved; nothing was added under it.
      res.warnings.push_back("identity folder " + dir.string() +
                             " had no readable images");
    }
  }
  if (res.dataset.num_identities() < 2)
    throw InvalidArgumentError(
        "load_image_folder: need at least two identities with readable images");
  res.dataset.validate();
  return res;
}

void save_image_folder(const IdentityDataset& ds,
                       const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  ds.validate();
  fs::create_directories(root);
  std::vector<int> counter(ds.identity_names.size(), 0);
  for (size_t i = 0; i < ds.images.size(); ++i) {
    const int label = ds.labels[i];
    fs::path dir = root / ds.identity_names[label];
    fs::create_directories(dir);
    char name[32];
    std::snprintf(name, sizeof name, "img_%04d.pgm", counter[label]++);
    write_image(ds.images[i], dir / name);
  }
}

DatasetSplit split_by_identity(const IdentityDataset& ds,
                               const SplitConfig& cfg) {
  ds.validate();
  if (cfg.num_test_identities < 1 ||
      cfg.num_test_identities >= ds.num_identities())
    throw InvalidArgumentError(
        "split: num_test_identities must leave at least one train identity");
  if (cfg.test_images_per_identity < 1)
    throw InvalidArgumentError("split: test_images_per_identity must be >= 1");

  std::vector<int> ids(ds.num_identities());
  for (int i = 0; i < ds.num_identities(); ++i) ids[i] = i;
  Rng rng(Rng::derive(cfg.seed, 0x511700u));
  rng.shuffle(ids);
  std::set<int> test_ids(ids.begin(), ids.begin() + cfg.num_test_identities);

  for (int id : test_ids) {
    const auto idx = ds.indices_of(id);
    if (static_cast<int>(idx.size()) < cfg.test_images_per_identity)
      throw InvalidArgumentError("split: identity " + ds.identity_names[id] +
                                 " has only " + std::to_string(idx.size()) +
                                 " images, need " +
                                 std::to_string(cfg.test_images_per_identity));
  }

  DatasetSplit out;
  std::vector<int> new_label(ds.num_identities(), -1);
  // Keep original identity order within each side.
  for (int id = 0; id < ds.num_identities(); ++id) {
    if (test_ids.contains(id)) {
      new_label[id] = out.test.num_identities();
      out.test.identity_names.push_back(ds.identity_names[id]);
    } else {
      new_label[id] = out.train.num_identities();
      out.train.identity_names.push_back(ds.identity_names[id]);
    }
  }
  std::vector<int> taken(ds.num_identities(), 0);
  for (size_t i = 0; i < ds.images.size(); ++i) {
    const int id = ds.labels[i];
    if (test_ids.contains(id)) {
      if (taken[id] >= cfg.test_images_per_identity) continue;  // surplus
      ++taken[id];
      out.test.images.push_back(ds.images[i]);
      out.test.labels.push_back(new_label[id]);
    } else {
      out.train.images.push_back(ds.images[i]);
      out.train.labels.push_back(new_label[id]);
    }
  }
  out.train.validate();
  out.test.validate();
  return out;
}

}  // namespace xnn::data
