#include "viz/viz.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "data/image.hpp"

namespace xnn::viz {

namespace {

Mat pairwise_sq_dist(const Mat& x) {
  Vec sq = x.rowwise().squaredNorm();
  Mat d = (-2.0 * x * x.transpose()).colwise() + sq;
  d.rowwise() += sq.transpose();
  return d.cwiseMax(0.0);
}

// Conditional affinities with per-point precision tuned to the target
// perplexity by bisection on the entropy.
Mat tsne_affinities(const Mat& sqd, double perplexity) {
  const auto n = sqd.rows();
  const double target = std::log(perplexity);
  Mat p = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
    Vec row;
    for (int it = 0; it < 64; ++it) {
      row = (-beta * sqd.row(i).transpose().array()).exp();
      row(i) = 0.0;
      double sum = std::max(row.sum(), 1e-300);
      // H = log(sum) + beta * E[d]; E[d] under the row distribution.
      double h = std::log(sum) +
                 beta * (sqd.row(i).transpose().dot(row)) / sum;
      row /= sum;
      if (std::abs(h - target) < 1e-5) break;
      if (h > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    p.row(i) = row.transpose();
  }
  Mat sym = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  return sym.cwiseMax(1e-12);
}

Mat tsne_2d(const Mat& x, const ProjectionConfig& cfg, double perplexity) {
  const auto n = x.rows();
  Mat p = tsne_affinities(pairwise_sq_dist(x), perplexity);

  Rng rng(Rng::derive(cfg.seed, 0x75BEu));
  Mat y(n, 2);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int d = 0; d < 2; ++d) y(i, d) = 1e-4 * rng.normal();
  Mat inc = Mat::Zero(n, 2);

  const int exaggerate_until = std::min(100, cfg.iterations / 4);
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    Mat q = (1.0 + pairwise_sq_dist(y).array()).inverse();
    for (Eigen::Index i = 0; i < n; ++i) q(i, i) = 0.0;
    double qsum = std::max(q.sum(), 1e-300);

    const double ex = iter < exaggerate_until ? 4.0 : 1.0;
    Mat grad = Mat::Zero(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j) continue;
        double coeff = (ex * p(i, j) - q(i, j) / qsum) * q(i, j);
        grad.row(i) += 4.0 * coeff * (y.row(i) - y.row(j));
      }
    }
    const double momentum = iter < 250 ? 0.5 : 0.8;
    inc = momentum * inc - cfg.learning_rate * grad;
    y += inc;
    y.rowwise() -= y.colwise().mean();
  }
  return y;
}

}  // namespace

Mat pca_2d(const Mat& features) {
  if (features.rows() < 2)
    throw InvalidArgumentError("pca: need at least two samples");
  Mat centered = features.rowwise() - features.colwise().mean();
  Eigen::BDCSVD<Mat> svd(centered, Eigen::ComputeThinV);
  const int comps = std::min<int>(2, static_cast<int>(svd.matrixV().cols()));
  Mat v = svd.matrixV().leftCols(comps);
  for (int c = 0; c < comps; ++c) {
    Eigen::Index arg;
    v.col(c).cwiseAbs().maxCoeff(&arg);
    if (v(arg, c) < 0.0) v.col(c) = -v.col(c);
  }
  Mat out = Mat::Zero(features.rows(), 2);
  out.leftCols(comps) = centered * v;
  return out;
}

ProjectionResult project_2d(const Mat& features, const ProjectionConfig& cfg) {
  if (features.rows() < 2)
    throw InvalidArgumentError("projection: need at least two samples");
  ProjectionResult res;
  if (features.rows() < cfg.tsne_min_samples) {
    res.method = "pca";
    res.warnings.push_back("sample count below t-SNE threshold, PCA fallback");
    res.coords = pca_2d(features);
    return res;
  }
  double perplexity = cfg.perplexity;
  double cap = static_cast<double>(features.rows() - 1) / 3.0;
  if (perplexity > cap) {
    perplexity = cap;
    res.warnings.push_back("perplexity reduced to fit the sample count");
  }
  res.method = "tsne";
  res.coords = tsne_2d(features, cfg, perplexity);
  return res;
}

std::array<double, 3> identity_color(int id, int num_ids) {
  // Evenly spaced hues, fixed saturation/value; plain HSV -> RGB.
  double h = 360.0 * static_cast<double>(id % std::max(num_ids, 1)) /
             std::max(num_ids, 1);
  double s = 0.85, v = 0.85;
  double c = v * s;
  double hp = h / 60.0;
  double xx = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) r = c, g = xx;
  else if (hp < 2) r = xx, g = c;
  else if (hp < 3) g = c, b = xx;
  else if (hp < 4) g = xx, b = c;
  else if (hp < 5) r = xx, b = c;
  else r = c, b = xx;
  double m = v - c;
  return {r + m, g + m, b + m};
}

namespace {

void draw_disc(data::Image& img, int cy, int cx,
               const std::array<double, 3>& rgb, int radius) {
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dy * dy + dx * dx > radius * radius) continue;
      int y = cy + dy, x = cx + dx;
      if (y < 0 || y >= img.height || x < 0 || x >= img.width) continue;
      for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = rgb[ch];
    }
}

void draw_panel(data::Image& img, const Mat& coords,
                const std::vector<int>& labels, int num_ids, int x0,
                int size) {
  double xmin = coords.col(0).minCoeff(), xmax = coords.col(0).maxCoeff();
  double ymin = coords.col(1).minCoeff(), ymax = coords.col(1).maxCoeff();
  double xr = std::max(xmax - xmin, 1e-12);
  double yr = std::max(ymax - ymin, 1e-12);
  const int margin = std::max(size / 12, 4);
  const int span = size - 2 * margin;
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    int px = x0 + margin +
             static_cast<int>(std::lround((coords(i, 0) - xmin) / xr * span));
    int py = margin + static_cast<int>(
                          std::lround((1.0 - (coords(i, 1) - ymin) / yr) *
                                      span));
    draw_disc(img, py, px, identity_color(labels[i], num_ids), size / 120 + 2);
  }
}

}  // namespace

void render_scatter(const Mat& before2d, const Mat& after2d,
                    const std::vector<int>& labels,
                    const std::filesystem::path& out_path, int panel_size) {
  if (before2d.rows() != after2d.rows() ||
      before2d.rows() != static_cast<Eigen::Index>(labels.size()))
    throw ShapeError("scatter: panel row counts disagree");
  if (before2d.cols() != 2 || after2d.cols() != 2)
    throw ShapeError("scatter: coordinates must be two-dimensional");
  if (panel_size < 64)
    throw InvalidArgumentError("scatter: panel size too small");

  int num_ids = 0;
  for (int l : labels) {
    if (l < 0) throw InvalidArgumentError("scatter: negative label");
    num_ids = std::max(num_ids, l + 1);
  }

  data::Image img(panel_size, 2 * panel_size + 1, 3);
  std::fill(img.pixels.begin(), img.pixels.end(), 1.0);
  for (int y = 0; y < panel_size; ++y)  // divider
    for (int ch = 0; ch < 3; ++ch) img.at(y, panel_size, ch) = 0.5;
  draw_panel(img, before2d, labels, num_ids, 0, panel_size);
  draw_panel(img, after2d, labels, num_ids, panel_size + 1, panel_size);
  data::write_image(img, out_path);
}

ProjectionPlot emit_projection_plot(const Mat& features_before,
                                    const Mat& features_after,
                                    const std::vector<int>& labels,
                                    const std::filesystem::path& out_path,
                                    const ProjectionConfig& cfg) {
  if (features_before.rows() != features_after.rows() ||
      features_before.rows() != static_cast<Eigen::Index>(labels.size()))
    throw ShapeError("projection plot: row counts disagree");
  std::map<int, int> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2)
    throw InvalidArgumentError("projection plot: need at least 2 identities");
  for (const auto& [id, c] : counts)
    if (c < 5)
      throw InvalidArgumentError(
          "projection plot: every identity needs at least 5 samples");

  ProjectionPlot plot;
  plot.before = project_2d(features_before, cfg);
  plot.after = project_2d(features_after, cfg);
  render_scatter(plot.before.coords, plot.after.coords, labels, out_path);
  return plot;
}

}  // namespace xnn::viz
