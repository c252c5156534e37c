#include "nn/layers.hpp"

#include <cmath>

#include "common/error.hpp"

namespace xnn::nn {

Linear::Linear(ParamLayout& l, const std::string& prefix, int in_, int out_)
    : Linear(l, prefix, in_, out_, InitKind::ScaledNormal,
             std::sqrt(2.0 / (in_ + out_))) {}

Linear::Linear(ParamLayout& l, const std::string& prefix, int in_, int out_,
               InitKind weight_init, double scale)
    : in(in_), out(out_) {
  w = l.add(prefix + ".w", in_, out_, weight_init, scale);
  b = l.add(prefix + ".b", 1, out_, InitKind::Zeros);
}

Mat Linear::forward(const double* p, const Mat& x) const {
  CMatMap W(p + w, in, out);
  CMatMap B(p + b, 1, out);
  Mat y = x * W;
  y.rowwise() += B.row(0);
  return y;
}

Mat Linear::backward(const double* p, double* g, const Mat& x,
                     const Mat& dy) const {
  CMatMap W(p + w, in, out);
  MatMap dW(g + w, in, out);
  MatMap dB(g + b, 1, out);
  dW.noalias() += x.transpose() * dy;
  dB.row(0) += dy.colwise().sum();
  return dy * W.transpose();
}

LayerNorm::LayerNorm(ParamLayout& l, const std::string& prefix, int dim_)
    : dim(dim_) {
  gamma = l.add(prefix + ".gamma", 1, dim_, InitKind::Ones);
  beta = l.add(prefix + ".beta", 1, dim_, InitKind::Zeros);
}

Mat LayerNorm::forward(const double* p, const Mat& x, Cache* c) const {
  CMatMap G(p + gamma, 1, dim);
  CMatMap B(p + beta, 1, dim);
  const auto n = x.rows();
  Mat xhat(n, dim);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std(i) = is;
    xhat.row(i) = (x.row(i).array() - mu) * is;
  }
  Mat y = xhat.array().rowwise() * G.row(0).array();
  y.rowwise() += B.row(0);
  if (c) {
    c->xhat = std::move(xhat);
    c->inv_std = std::move(inv_std);
  }
  return y;
}

Mat LayerNorm::backward(const double* p, double* g, const Cache& c,
                        const Mat& dy) const {
  CMatMap G(p + gamma, 1, dim);
  MatMap dG(g + gamma, 1, dim);
  MatMap dB(g + beta, 1, dim);
  dG.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dB.row(0) += dy.colwise().sum();

  const auto n = dy.rows();
  Mat dx(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::RowVectorXd dxhat =
        (dy.row(i).array() * G.row(0).array()).matrix();
    const double m1 = dxhat.mean();
    const double m2 = (dxhat.array() * c.xhat.row(i).array()).mean();
    dx.row(i) = ((dxhat.array() - m1 - c.xhat.row(i).array() * m2) *
                 c.inv_std(i))
                    .matrix();
  }
  return dx;
}

Mat gelu_forward(const Mat& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  Eigen::ArrayXXd cdf = (x.array() * inv_sqrt2)
                            .unaryExpr([](double v) { return std::erf(v); });
  return (x.array() * 0.5 * (1.0 + cdf)).matrix();
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  Eigen::ArrayXXd phi = (x.array() * x.array() * -0.5).exp() * inv_sqrt2pi;
  Eigen::ArrayXXd cdf =
      0.5 * (1.0 + (x.array() * inv_sqrt2)
                       .unaryExpr([](double v) { return std::erf(v); }));
  return (dy.array() * (cdf + x.array() * phi)).matrix();
}

Attention::Attention(ParamLayout& l, const std::string& prefix, int dim_,
                     int heads_)
    : dim(dim_), heads(heads_) {
  if (dim_ % heads_ != 0)
    throw InvalidArgumentError("attention: dim must be divisible by heads");
  wq = Linear(l, prefix + ".q", dim_, dim_);
  wk = Linear(l, prefix + ".k", dim_, dim_);
  wv = Linear(l, prefix + ".v", dim_, dim_);
  wo = Linear(l, prefix + ".o", dim_, dim_);
}

Mat Attention::forward(const double* p, const Mat& x, int rows_per_sample,
                       Cache* c) const {
  const int P = rows_per_sample;
  if (x.rows() % P != 0)
    throw ShapeError("attention: stacked rows not divisible by P");
  const int batch = static_cast<int>(x.rows()) / P;
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat q = wq.forward(p, x);
  Mat k = wk.forward(p, x);
  Mat v = wv.forward(p, x);
  Mat o(x.rows(), dim);
  std::vector<Mat> attn;
  attn.reserve(static_cast<size_t>(batch) * heads);

  for (int s = 0; s < batch; ++s) {
    for (int j = 0; j < heads; ++j) {
      auto qs = q.block(s * P, j * dh, P, dh);
      auto ks = k.block(s * P, j * dh, P, dh);
      auto vs = v.block(s * P, j * dh, P, dh);
      Mat scores = (qs * ks.transpose()) * scale;
      // Row-wise softmax with max subtraction.
      for (int r = 0; r < P; ++r) {
        const double mx = scores.row(r).maxCoeff();
        scores.row(r) = (scores.row(r).array() - mx).exp();
        scores.row(r) /= scores.row(r).sum();
      }
      o.block(s * P, j * dh, P, dh).noalias() = scores * vs;
      attn.push_back(std::move(scores));
    }
  }
  Mat y = wo.forward(p, o);
  if (c) {
    c->x = x;
    c->q = std::move(q);
    c->k = std::move(k);
    c->v = std::move(v);
    c->o = std::move(o);
    c->attn = std::move(attn);
  }
  return y;
}

Mat Attention::backward(const double* p, double* g, int rows_per_sample,
                        const Cache& c, const Mat& dy) const {
  const int P = rows_per_sample;
  const int batch = static_cast<int>(dy.rows()) / P;
  const int dh = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat d_o = wo.backward(p, g, c.o, dy);
  Mat dq(dy.rows(), dim), dk(dy.rows(), dim), dv(dy.rows(), dim);

  for (int s = 0; s < batch; ++s) {
    for (int j = 0; j < heads; ++j) {
      const Mat& a = c.attn[static_cast<size_t>(s) * heads + j];
      auto qs = c.q.block(s * P, j * dh, P, dh);
      auto ks = c.k.block(s * P, j * dh, P, dh);
      auto vs = c.v.block(s * P, j * dh, P, dh);
      auto dos = d_o.block(s * P, j * dh, P, dh);

      Mat da = dos * vs.transpose();
      dv.block(s * P, j * dh, P, dh).noalias() = a.transpose() * dos;
      // softmax backward: dS = A .* (dA - rowsum(dA .* A))
      Mat ds(P, P);
      for (int r = 0; r < P; ++r) {
        const double dot = da.row(r).dot(a.row(r));
        ds.row(r) = (a.row(r).array() * (da.row(r).array() - dot)).matrix();
      }
      dq.block(s * P, j * dh, P, dh).noalias() = (ds * ks) * scale;
      dk.block(s * P, j * dh, P, dh).noalias() =
          (ds.transpose() * qs) * scale;
    }
  }
  Mat dx = wq.backward(p, g, c.x, dq);
  dx += wk.backward(p, g, c.x, dk);
  dx += wv.backward(p, g, c.x, dv);
  return dx;
}

Mlp::Mlp(ParamLayout& l, const std::string& prefix, int dim, int hidden) {
  fc1 = Linear(l, prefix + ".fc1", dim, hidden);
  fc2 = Linear(l, prefix + ".fc2", hidden, dim);
}

Mat Mlp::forward(const double* p, const Mat& x, Cache* c) const {
  Mat pre = fc1.forward(p, x);
  Mat act = gelu_forward(pre);
  Mat y = fc2.forward(p, act);
  if (c) {
    c->x = x;
    c->pre = std::move(pre);
    c->act = std::move(act);
  }
  return y;
}

Mat Mlp::backward(const double* p, double* g, const Cache& c,
               const Mat& dy) const {
  Mat dact = fc2.backward(p, g, c.act, dy);
  Mat dpre = gelu_backward(c.pre, dact);
  return fc1.backward(p, g, c.x, dpre);
}

TransformerBlock::TransformerBlock(ParamLayout& l, const std::string& prefix,
                                   int dim, int heads, int mlp_hidden) {
  ln1 = LayerNorm(l, prefix + ".ln1", dim);
  attn = Attention(l, prefix + ".attn", dim, heads);
  ln2 = LayerNorm(l, prefix + ".ln2", dim);
  mlp = Mlp(l, prefix + ".mlp", dim, mlp_hidden);
}

Mat TransformerBlock::forward(const double* p, const Mat& x,
                              int rows_per_sample, Cache* c) const {
  Cache local;
  Cache* cc = c ? c : &local;
  cc->x = x;
  cc->h1 = ln1.forward(p, x, &cc->ln1c);
  Mat a = attn.forward(p, cc->h1, rows_per_sample, c ? &cc->attnc : nullptr);
  cc->x2 = x + a;
  cc->h2 = ln2.forward(p, cc->x2, &cc->ln2c);
  Mat m = mlp.forward(p, cc->h2, c ? &cc->mlpc : nullptr);
  return cc->x2 + m;
}

Mat TransformerBlock::backward(const double* p, double* g, int rows_per_sample,
                               const Cache& c, const Mat& dy) const {
  Mat dh2 = mlp.backward(p, g, c.mlpc, dy);
  Mat dx2 = dy + ln2.backward(p, g, c.ln2c, dh2);
  Mat dh1 = attn.backward(p, g, rows_per_sample, c.attnc, dx2);
  return dx2 + ln1.backward(p, g, c.ln1c, dh1);
}

Mat mean_pool(const Mat& stacked, int rows_per_sample) {
  const int P = rows_per_sample;
  if (stacked.rows() % P != 0)
    throw ShapeError("mean_pool: stacked rows not divisible by P");
  const int batch = static_cast<int>(stacked.rows()) / P;
  Mat pooled(batch, stacked.cols());
  for (int s = 0; s < batch; ++s)
    pooled.row(s) = stacked.middleRows(s * P, P).colwise().mean();
  return pooled;
}

Mat mean_pool_backward(const Mat& d_pooled, int rows_per_sample) {
  const int P = rows_per_sample;
  Mat d(d_pooled.rows() * P, d_pooled.cols());
  const double inv = 1.0 / P;
  for (Eigen::Index s = 0; s < d_pooled.rows(); ++s)
    for (int r = 0; r < P; ++r) d.row(s * P + r) = d_pooled.row(s) * inv;
  return d;
}

}  // namespace xnn::nn
