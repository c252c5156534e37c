#pragma once

#include <string>
#include <vector>

#include "nn/layout.hpp"

namespace xnn::nn {

// Layers operate on stacked batches: a batch of B samples with P rows each is
// one (B*P) x D matrix, so the projections run as single gemms. Attention is
// the only layer that looks at per-sample row blocks.

struct Linear {
  int in = 0, out = 0;
  size_t w = 0, b = 0;

  Linear() = default;
  Linear(ParamLayout& l, const std::string& prefix, int in, int out);
  // Last layer of the noise encoder starts at zero output.
  Linear(ParamLayout& l, const std::string& prefix, int in, int out,
         InitKind weight_init, double scale);

  Mat forward(const double* p, const Mat& x) const;
  // Accumulates dW/db into g, returns dX.
  Mat backward(const double* p, double* g, const Mat& x, const Mat& dy) const;
};

struct LayerNorm {
  int dim = 0;
  size_t gamma = 0, beta = 0;
  static constexpr double kEps = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParamLayout& l, const std::string& prefix, int dim);

  struct Cache {
    Mat xhat;
    Vec inv_std;
  };
  Mat forward(const double* p, const Mat& x, Cache* c) const;
  Mat backward(const double* p, double* g, const Cache& c, const Mat& dy) const;
};

Mat gelu_forward(const Mat& x);
Mat gelu_backward(const Mat& x, const Mat& dy);

struct Attention {
  int dim = 0, heads = 0;
  Linear wq, wk, wv, wo;

  Attention() = default;
  Attention(ParamLayout& l, const std::string& prefix, int dim, int heads);

  struct Cache {
    Mat x, q, k, v, o;
    std::vector<Mat> attn;  // one P x P softmax per (sample, head)
  };
  Mat forward(const double* p, const Mat& x, int rows_per_sample,
              Cache* c) const;
  Mat backward(const double* p, double* g, int rows_per_sample, const Cache& c,
               const Mat& dy) const;
};

struct Mlp {
  Linear fc1, fc2;

  Mlp() = default;
  Mlp(ParamLayout& l, const std::string& prefix, int dim, int hidden);

  struct Cache {
    Mat x, pre, act;
  };
  Mat forward(const double* p, const Mat& x, Cache* c) const;
  Mat backward(const double* p, double* g, const Cache& c, const Mat& dy) const;
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
struct TransformerBlock {
  LayerNorm ln1, ln2;
  Attention attn;
  Mlp mlp;

  TransformerBlock() = default;
  TransformerBlock(ParamLayout& l, const std::string& prefix, int dim,
                   int heads, int mlp_hidden);

  struct Cache {
    Mat x, h1, x2, h2;
    LayerNorm::Cache ln1c, ln2c;
    Attention::Cache attnc;
    Mlp::Cache mlpc;
  };
  Mat forward(const double* p, const Mat& x, int rows_per_sample,
              Cache* c) const;
  Mat backward(const double* p, double* g, int rows_per_sample, const Cache& c,
               const Mat& dy) const;
};

// Per-sample mean over each P-row block: (B*P) x D -> B x D.
Mat mean_pool(const Mat& stacked, int rows_per_sample);
Mat mean_pool_backward(const Mat& d_pooled, int rows_per_sample);

}  // namespace xnn::nn
