#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "nn/model.hpp"

namespace xnn::viz {

using nn::Mat;
using nn::Vec;

// 2-D projection of per-sample feature vectors for the before/after scatter
// figures. Exact O(n^2) t-SNE when the sample count permits, PCA below that.
struct ProjectionConfig {
  double perplexity = 10.0;
  int iterations = 400;
  double learning_rate = 100.0;
  uint64_t seed = 0;
  int tsne_min_samples = 50;  // below this: PCA fallback with a warning
};

struct ProjectionResult {
  Mat coords;          // n x 2
  std::string method;  // "tsne" or "pca"
  std::vector<std::string> warnings;
};

// PCA scores on the top two principal axes. Sign convention: each axis is
// flipped so its largest-magnitude loading is positive, making the output
// independent of eigensolver sign choices.
Mat pca_2d(const Mat& features);

ProjectionResult project_2d(const Mat& features, const ProjectionConfig& cfg);

// Identity color shared across panels: evenly spaced hues.
std::array<double, 3> identity_color(int id, int num_ids);

// Side-by-side scatter panels (left = before, right = after), one color per
// identity, written as a binary PPM.
void render_scatter(const Mat& before2d, const Mat& after2d,
                    const std::vector<int>& labels,
                    const std::filesystem::path& out_path,
                    int panel_size = 360);

struct ProjectionPlot {
  ProjectionResult before;
  ProjectionResult after;
};

// Full figure path: validates the corpus (>= 2 identities, >= 5 samples
// each), projects both feature sets with the same config, renders the
// two-panel scatter.
ProjectionPlot emit_projection_plot(const Mat& features_before,
                                    const Mat& features_after,
                                    const std::vector<int>& labels,
                                    const std::filesystem::path& out_path,
                                    const ProjectionConfig& cfg);

}  // namespace xnn::viz
