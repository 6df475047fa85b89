#pragma once

// Dense layer primitives with explicit backward passes. Activations are
// row-major matrices; token activations are (tokens x features), image
// activations are (channels x pixels).

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include <Eigen/Core>

namespace radepth::nn {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <typename T>
using RowVecMap = Eigen::Map<RowVec<T>>;
template <typename T>
using ConstRowVecMap = Eigen::Map<const RowVec<T>>;

// ---------------------------------------------------------------------------
// Linear: y = x W^T + b, W is (out x in).

template <typename T>
Mat<T> linear_forward(const Mat<T>& x, const ConstMatMap<T>& weight,
                      const ConstRowVecMap<T>& bias) {
  Mat<T> y = x * weight.transpose();
  y.rowwise() += bias;
  return y;
}

template <typename T>
Mat<T> linear_backward(const Mat<T>& x, const Mat<T>& dy,
                       const ConstMatMap<T>& weight, MatMap<T> dweight,
                       RowVecMap<T> dbias) {
  dweight.noalias() += dy.transpose() * x;
  dbias += dy.colwise().sum();
  return dy * weight;
}

// ---------------------------------------------------------------------------
// LayerNorm over rows.

template <typename T>
struct LayerNormCache {
  Mat<T> normalized;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
};

template <typename T>
Mat<T> layer_norm_forward(const Mat<T>& x, const ConstRowVecMap<T>& gamma,
                          const ConstRowVecMap<T>& beta, LayerNormCache<T>* cache,
                          T eps = T(1e-5)) {
  const auto n = x.cols();
  Mat<T> xhat(x.rows(), n);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const T mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).eval();
    const T var = centered.square().sum() / T(n);
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = centered * inv_std(r);
  }
  Mat<T> y = (xhat.array().rowwise() * gamma.array()).matrix();
  y.rowwise() += beta;
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
  }
  return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const LayerNormCache<T>& cache,
                           const ConstRowVecMap<T>& gamma, RowVecMap<T> dgamma,
                           RowVecMap<T> dbeta) {
  const auto& xhat = cache.normalized;
  const T n = T(xhat.cols());
  dgamma += (dy.array() * xhat.array()).colwise().sum().matrix();
  dbeta += dy.colwise().sum();
  const Mat<T> dxhat = (dy.array().rowwise() * gamma.array()).matrix();
  Mat<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const T sum_d = dxhat.row(r).sum();
    const T sum_dx = dxhat.row(r).dot(xhat.row(r));
    dx.row(r) = (cache.inv_std(r) / n) *
                (n * dxhat.row(r).array() - sum_d - xhat.row(r).array() * sum_dx)
                    .matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GELU, tanh approximation.

template <typename T>
Mat<T> gelu_forward(const Mat<T>& x) {
  const T k = T(std::sqrt(2.0 / std::numbers::pi));
  return x.unaryExpr([k](T v) {
    return T(0.5) * v * (T(1) + std::tanh(k * (v + T(0.044715) * v * v * v)));
  });
}

template <typename T>
Mat<T> gelu_backward(const Mat<T>& x, const Mat<T>& dy) {
  const T k = T(std::sqrt(2.0 / std::numbers::pi));
  const Mat<T> deriv = x.unaryExpr([k](T v) {
    const T th = std::tanh(k * (v + T(0.044715) * v * v * v));
    return T(0.5) * (T(1) + th) +
           T(0.5) * v * (T(1) - th * th) * k * (T(1) + T(3 * 0.044715) * v * v);
  });
  return dy.cwiseProduct(deriv);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention core on a (batch * tokens) x (3 * dim) qkv matrix.

template <typename T>
struct AttentionCache {
  std::vector<Mat<T>> probs;  // per (image, head): tokens x tokens
};

template <typename T>
Mat<T> attention_forward(const Mat<T>& qkv, int batch, int tokens, int heads,
                         AttentionCache<T>* cache) {
  const int dim = static_cast<int>(qkv.cols() / 3);
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  Mat<T> out(qkv.rows(), dim);
  if (cache) cache->probs.assign(static_cast<size_t>(batch) * heads, Mat<T>());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(b * tokens, h * hd, tokens, hd);
      const auto k = qkv.block(b * tokens, dim + h * hd, tokens, hd);
      const auto v = qkv.block(b * tokens, 2 * dim + h * hd, tokens, hd);
      Mat<T> s = (q * k.transpose()) * scale;
      for (int r = 0; r < tokens; ++r) {
        const T m = s.row(r).maxCoeff();
        s.row(r) = (s.row(r).array() - m).exp();
        s.row(r) /= s.row(r).sum();
      }
      out.block(b * tokens, h * hd, tokens, hd).noalias() = s * v;
      if (cache) cache->probs[static_cast<size_t>(b) * heads + h] = std::move(s);
    }
  }
  return out;
}

template <typename T>
Mat<T> attention_backward(const Mat<T>& qkv, const Mat<T>& dout, int batch,
                          int tokens, int heads, const AttentionCache<T>& cache) {
  const int dim = static_cast<int>(qkv.cols() / 3);
  const int hd = dim / heads;
  const T scale = T(1) / std::sqrt(T(hd));
  Mat<T> dqkv(qkv.rows(), qkv.cols());
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const auto q = qkv.block(b * tokens, h * hd, tokens, hd);
      const auto k = qkv.block(b * tokens, dim + h * hd, tokens, hd);
      const auto v = qkv.block(b * tokens, 2 * dim + h * hd, tokens, hd);
      const auto dO = dout.block(b * tokens, h * hd, tokens, hd);
      const Mat<T>& p = cache.probs[static_cast<size_t>(b) * heads + h];
      dqkv.block(b * tokens, 2 * dim + h * hd, tokens, hd).noalias() =
          p.transpose() * dO;
      const Mat<T> dp = dO * v.transpose();
      Mat<T> ds = p.cwiseProduct(dp);
      const Eigen::Matrix<T, Eigen::Dynamic, 1> row_dot = ds.rowwise().sum();
      ds -= (p.array().colwise() * row_dot.array()).matrix();
      ds *= scale;
      dqkv.block(b * tokens, h * hd, tokens, hd).noalias() = ds * k;
      dqkv.block(b * tokens, dim + h * hd, tokens, hd).noalias() = ds.transpose() * q;
    }
  }
  return dqkv;
}

// ---------------------------------------------------------------------------
// 3x3 convolution, zero padding, via im2col. Input is (channels x h*w); the
// column matrix is (channels*9 x h*w) with row index c*9 + ky*3 + kx.

template <typename T>
Mat<T> im2col3x3(const Mat<T>& x, int h, int w) {
  const int c_in = static_cast<int>(x.rows());
  Mat<T> cols = Mat<T>::Zero(c_in * 9, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        auto dst = cols.row(c * 9 + ky * 3 + kx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = x0; xx < x1; ++xx) {
            dst(y * w + xx) = x(c, sy * w + xx + kx - 1);
          }
        }
      }
    }
  }
  return cols;
}

template <typename T>
Mat<T> col2im3x3(const Mat<T>& cols, int c_in, int h, int w) {
  Mat<T> x = Mat<T>::Zero(c_in, static_cast<Eigen::Index>(h) * w);
  for (int c = 0; c < c_in; ++c) {
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const auto src = cols.row(c * 9 + ky * 3 + kx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const int x0 = std::max(0, 1 - kx);
          const int x1 = std::min(w, w + 1 - kx);
          for (int xx = x0; xx < x1; ++xx) {
            x(c, sy * w + xx + kx - 1) += src(y * w + xx);
          }
        }
      }
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Bilinear upsampling weights (half-pixel centers, edge clamped): maps a
// coarse axis of length n to a fine axis of length n * factor.

template <typename T>
Mat<T> bilinear_matrix(int n, int factor) {
  const int m = n * factor;
  Mat<T> u = Mat<T>::Zero(m, n);
  for (int i = 0; i < m; ++i) {
    double src = (i + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(n - 1));
    const int i0 = std::min(static_cast<int>(src), n - 1);
    const int i1 = std::min(i0 + 1, n - 1);
    const double t = src - i0;
    u(i, i0) += T(1.0 - t);
    u(i, i1) += T(t);
  }
  return u;
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace radepth::nn
