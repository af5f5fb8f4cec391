#include "nbisect/tensornet/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>

#include "nbisect/error.hpp"

namespace nbisect::tn::kernels {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using CMapVec = Eigen::Map<const Eigen::VectorXd>;
using MapVec = Eigen::Map<Eigen::VectorXd>;

CMapMat as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapMat(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
MapMat as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapMat(t.ptr(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

// Backward outputs accumulate; an empty tensor is first sized and zeroed.
Tensor& prepare(Tensor* out, const Shape& shape) {
  if (out->size() == 0 && numel(shape) != 0) *out = Tensor(shape);
  if (out->shape() != shape)
    throw ShapeMismatch("gradient buffer " + to_string(out->shape()) + " does not match " + to_string(shape));
  return *out;
}

std::size_t last_dim(const Tensor& t, const char* what) {
  if (t.rank() < 1) throw ShapeMismatch(std::string(what) + ": scalar input");
  return t.shape().back();
}

// Output columns ox in [lo, hi) read input column ox*stride + kx - padding
// inside [0, W); everything else is padding.
struct ColRange {
  std::size_t lo, hi;
};

ColRange valid_columns(std::size_t kx, std::size_t W, std::size_t Wo, Conv2dParams p) {
  auto first = [&](std::size_t ox) { return static_cast<long>(ox * p.stride + kx) - static_cast<long>(p.padding); };
  std::size_t lo = 0;
  while (lo < Wo && first(lo) < 0) ++lo;
  std::size_t hi = lo;
  while (hi < Wo && first(hi) < static_cast<long>(W)) ++hi;
  return {lo, hi};
}

// Rows of `cols` are (c, ky, kx), `ld` apart; each row holds Ho*Wo entries.
void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, Conv2dParams p,
            std::size_t Ho, std::size_t Wo, double* cols, std::size_t ld) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        double* row = cols + ((c * k + ky) * k + kx) * ld;
        const ColRange r = valid_columns(kx, W, Wo, p);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          double* out = row + oy * Wo;
          const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
          if (iy < 0 || iy >= static_cast<long>(H)) {
            std::fill_n(out, Wo, 0.0);
            continue;
          }
          const double* in = img + (c * H + static_cast<std::size_t>(iy)) * W + kx - p.padding;
          std::fill_n(out, r.lo, 0.0);
          if (p.stride == 1)
            std::copy(in + r.lo, in + r.hi, out + r.lo);
          else
            for (std::size_t ox = r.lo; ox < r.hi; ++ox) out[ox] = in[ox * p.stride];
          std::fill(out + r.hi, out + Wo, 0.0);
        }
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, Conv2dParams p,
                std::size_t Ho, std::size_t Wo, double* img, std::size_t ld) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const double* row = cols + ((c * k + ky) * k + kx) * ld;
        const ColRange r = valid_columns(kx, W, Wo, p);
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const long iy = static_cast<long>(oy * p.stride + ky) - static_cast<long>(p.padding);
          if (iy < 0 || iy >= static_cast<long>(H)) continue;
          double* out = img + (c * H + static_cast<std::size_t>(iy)) * W + kx - p.padding;
          const double* in = row + oy * Wo;
          if (p.stride == 1) {
            double* __restrict o = out;
            const double* __restrict i = in;
            for (std::size_t ox = r.lo; ox < r.hi; ++ox) o[ox] += i[ox];
          } else {
            for (std::size_t ox = r.lo; ox < r.hi; ++ox) out[ox * p.stride] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

// --- dense -------------------------------------------------------------------

Tensor dense_forward(const Tensor& x, const Tensor& W, const Tensor& b) {
  require_rank(W, 2, "dense weight");
  const std::size_t in = last_dim(x, "dense input");
  const std::size_t out = W.dim(1);
  if (W.dim(0) != in)
    throw ShapeMismatch("dense: input width " + std::to_string(in) + " vs weight " + to_string(W.shape()));
  require_shape(b, {out}, "dense bias");
  const std::size_t rows = x.size() / in;
  Shape ys = x.shape();
  ys.back() = out;
  Tensor y(ys);
  auto Y = as_matrix(y, rows, out);
  Y.noalias() = as_matrix(x, rows, in) * as_matrix(W, in, out);
  Y.rowwise() += CMapVec(b.ptr(), static_cast<Eigen::Index>(out)).transpose();
  return y;
}

void dense_backward(const Tensor& x, const Tensor& W, const Tensor& dy, Tensor* dx, Tensor* dW,
                    Tensor* db) {
  const std::size_t in = W.dim(0);
  const std::size_t out = W.dim(1);
  const std::size_t rows = x.size() / in;
  const auto DY = as_matrix(dy, rows, out);
  if (dW) as_matrix(prepare(dW, W.shape()), in, out).noalias() += as_matrix(x, rows, in).transpose() * DY;
  if (db) MapVec(prepare(db, {out}).ptr(), static_cast<Eigen::Index>(out)) += DY.colwise().sum().transpose();
  if (dx) as_matrix(prepare(dx, x.shape()), rows, in).noalias() += DY * as_matrix(W, in, out).transpose();
}

// --- conv2d ------------------------------------------------------------------

std::size_t conv_output_size(std::size_t in, std::size_t kernel, Conv2dParams p) {
  if (p.stride == 0) throw ShapeMismatch("conv2d: stride must be positive");
  if (in + 2 * p.padding < kernel)
    throw ShapeMismatch("conv2d: kernel " + std::to_string(kernel) + " does not fit padded input " +
                        std::to_string(in + 2 * p.padding));
  return (in + 2 * p.padding - kernel) / p.stride + 1;
}

// Images are unfolded a few at a time into one [C*k*k, n*Ho*Wo] matrix so
// each product is a reasonably large GEMM while the unfolded block still
// fits in cache.
namespace {

constexpr std::size_t kUnfoldBudget = 1 << 16;  // doubles

std::size_t images_per_chunk(std::size_t B, std::size_t per_image) {
  return std::clamp<std::size_t>(kUnfoldBudget / std::max<std::size_t>(per_image, 1), 1, std::max<std::size_t>(B, 1));
}

// Scratch without value-initialisation; every element is written before use.
struct Scratch {
  explicit Scratch(std::size_t n) : data(n ? static_cast<double*>(::operator new(n * sizeof(double), std::align_val_t{64})) : nullptr) {}
  ~Scratch() {
    if (data) ::operator delete(data, std::align_val_t{64});
  }
  Scratch(const Scratch&) = delete;
  Scratch& operator=(const Scratch&) = delete;
  double* data;
};

}  // namespace

Tensor conv2d_forward(const Tensor& x, const Tensor& kernels, const Tensor& bias, Conv2dParams p) {
  require_rank(x, 4, "conv2d input");
  require_rank(kernels, 4, "conv2d kernels");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != C || kernels.dim(3) != k)
    throw ShapeMismatch("conv2d: kernels " + to_string(kernels.shape()) + " vs input " + to_string(x.shape()));
  require_shape(bias, {O}, "conv2d bias");
  const std::size_t Ho = conv_output_size(H, k, p), Wo = conv_output_size(W, k, p);
  const std::size_t ckk = C * k * k, hw = Ho * Wo;
  Tensor y({B, O, Ho, Wo});
  const std::size_t chunk = images_per_chunk(B, ckk * hw);
  Scratch cols(ckk * hw * chunk);
  Scratch out(O * hw * chunk);
  const auto K = as_matrix(kernels, O, ckk);
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0), m = nb * hw;
    for (std::size_t b = 0; b < nb; ++b)
      im2col(x.ptr() + (b0 + b) * C * H * W, C, H, W, k, p, Ho, Wo, cols.data + b * hw, m);
    MapMat Y(out.data, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(m));
    Y.noalias() = K * CMapMat(cols.data, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(m));
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < O; ++o) {
        const double* src = out.data + o * m + b * hw;
        double* dst = y.ptr() + ((b0 + b) * O + o) * hw;
        const double bo = bias[o];
        for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bo;
      }
  }
  return y;
}

void conv2d_backward(const Tensor& x, const Tensor& kernels, const Tensor& dy, Conv2dParams p,
                     Tensor* dx, Tensor* dkernels, Tensor* dbias) {
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = kernels.dim(0), k = kernels.dim(2);
  const std::size_t Ho = conv_output_size(H, k, p), Wo = conv_output_size(W, k, p);
  require_shape(dy, {B, O, Ho, Wo}, "conv2d upstream gradient");
  const std::size_t ckk = C * k * k, hw = Ho * Wo;
  const std::size_t chunk = images_per_chunk(B, ckk * hw);
  const auto K = as_matrix(kernels, O, ckk);
  double* dbp = dbias ? prepare(dbias, {O}).ptr() : nullptr;
  std::optional<MapMat> dK;
  if (dkernels) dK.emplace(as_matrix(prepare(dkernels, kernels.shape()), O, ckk));
  double* dxp = dx ? prepare(dx, x.shape()).ptr() : nullptr;
  Scratch dyc(O * hw * chunk);
  Scratch cols(dK ? ckk * hw * chunk : 0);
  Scratch dcols(dxp ? ckk * hw * chunk : 0);
  for (std::size_t b0 = 0; b0 < B; b0 += chunk) {
    const std::size_t nb = std::min(chunk, B - b0), m = nb * hw;
    // dy regrouped as [O, nb*hw] to match the unfolded input.
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t o = 0; o < O; ++o) std::copy_n(dy.ptr() + ((b0 + b) * O + o) * hw, hw, dyc.data + o * m + b * hw);
    const CMapMat DY(dyc.data, static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(m));
    if (dbp) MapVec(dbp, static_cast<Eigen::Index>(O)) += DY.rowwise().sum();
    if (dK) {
      for (std::size_t b = 0; b < nb; ++b)
        im2col(x.ptr() + (b0 + b) * C * H * W, C, H, W, k, p, Ho, Wo, cols.data + b * hw, m);
      dK->noalias() += DY * CMapMat(cols.data, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(m)).transpose();
    }
    if (dxp) {
      MapMat DC(dcols.data, static_cast<Eigen::Index>(ckk), static_cast<Eigen::Index>(m));
      DC.noalias() = K.transpose() * DY;
      for (std::size_t b = 0; b < nb; ++b)
        col2im_add(dcols.data + b * hw, C, H, W, k, p, Ho, Wo, dxp + (b0 + b) * C * H * W, m);
    }
  }
}

// --- elementwise -------------------------------------------------------------

Tensor relu_forward(const Tensor& x) {
  Tensor y = x;
  for (double& v : y.data()) v = v > 0 ? v : 0.0;
  return y;
}

Tensor relu_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0 ? dy[i] : 0.0;
  return dx;
}

// --- softmax / loss ----------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t c = last_dim(logits, "softmax");
  const std::size_t rows = logits.size() / c;
  Tensor p(logits.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = logits.ptr() + r * c;
    double* out = p.ptr() + r * c;
    const double m = *std::max_element(z, z + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += out[j] = std::exp(z[j] - m);
    for (std::size_t j = 0; j < c; ++j) out[j] /= s;
  }
  return p;
}

CrossEntropy softmax_cross_entropy(const Tensor& logits, const Tensor& targets) {
  require_rank(logits, 2, "cross-entropy logits");
  require_shape(targets, logits.shape(), "cross-entropy targets");
  const std::size_t B = logits.dim(0), c = logits.dim(1);
  CrossEntropy ce;
  ce.grad = Tensor(logits.shape());
  for (std::size_t r = 0; r < B; ++r) {
    const double* z = logits.ptr() + r * c;
    const double* t = targets.ptr() + r * c;
    double* g = ce.grad.ptr() + r * c;
    const double m = *std::max_element(z, z + c);
    double s = 0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
    const double log_s = std::log(s);
    for (std::size_t j = 0; j < c; ++j) {
      const double log_p = z[j] - m - log_s;
      ce.loss -= t[j] * log_p;
      g[j] = (std::exp(log_p) - t[j]) / static_cast<double>(B);
    }
  }
  ce.loss /= static_cast<double>(B);
  return ce;
}

// --- attention ---------------------------------------------------------------

Tensor attention_forward(const Tensor& x, const Tensor& Wq, const Tensor& Wk, const Tensor& Wv,
                         const Tensor& Wo, std::size_t heads, AttentionCache* cache) {
  require_rank(x, 3, "attention input");
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  if (heads == 0 || d % heads != 0)
    throw ShapeMismatch("attention: width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  for (const Tensor* w : {&Wq, &Wk, &Wv, &Wo}) require_shape(*w, {d, d}, "attention projection");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const Tensor zero_bias({d});

  AttentionCache local;
  AttentionCache& c = cache ? *cache : local;
  c.q = dense_forward(x, Wq, zero_bias);
  c.k = dense_forward(x, Wk, zero_bias);
  c.v = dense_forward(x, Wv, zero_bias);
  c.weights = Tensor({B, heads, T, T});
  c.mixed = Tensor({B, T, d});
  const auto Q = as_matrix(c.q, B * T, d);
  const auto K = as_matrix(c.k, B * T, d);
  const auto V = as_matrix(c.v, B * T, d);
  auto M = as_matrix(c.mixed, B * T, d);
  const auto ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  for (std::size_t b = 0; b < B; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * T);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      MapMat A(c.weights.ptr() + (b * heads + h) * T * T, ti, ti);
      A.noalias() = scale * Q.block(r0, c0, ti, dhi) * K.block(r0, c0, ti, dhi).transpose();
      for (Eigen::Index i = 0; i < ti; ++i) {
        auto row = A.row(i);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      M.block(r0, c0, ti, dhi).noalias() = A * V.block(r0, c0, ti, dhi);
    }
  }
  return dense_forward(c.mixed, Wo, zero_bias);
}

void attention_backward(const Tensor& x, const Tensor& Wq, const Tensor& Wk, const Tensor& Wv,
                        const Tensor& Wo, std::size_t heads, const AttentionCache& c,
                        const Tensor& dy, Tensor* dx, Tensor* dWq, Tensor* dWk, Tensor* dWv,
                        Tensor* dWo) {
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  require_shape(dy, x.shape(), "attention upstream gradient");

  Tensor dmixed(c.mixed.shape());
  dense_backward(c.mixed, Wo, dy, &dmixed, dWo, nullptr);

  Tensor dq(x.shape()), dk(x.shape()), dv(x.shape());
  const auto Q = as_matrix(c.q, B * T, d);
  const auto K = as_matrix(c.k, B * T, d);
  const auto V = as_matrix(c.v, B * T, d);
  const auto DM = as_matrix(dmixed, B * T, d);
  auto DQ = as_matrix(dq, B * T, d);
  auto DK = as_matrix(dk, B * T, d);
  auto DV = as_matrix(dv, B * T, d);
  const auto ti = static_cast<Eigen::Index>(T);
  const auto dhi = static_cast<Eigen::Index>(dh);
  RowMat dA(ti, ti), dS(ti, ti);
  for (std::size_t b = 0; b < B; ++b) {
    const auto r0 = static_cast<Eigen::Index>(b * T);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const CMapMat A(c.weights.ptr() + (b * heads + h) * T * T, ti, ti);
      const auto dO = DM.block(r0, c0, ti, dhi);
      DV.block(r0, c0, ti, dhi).noalias() = A.transpose() * dO;
      dA.noalias() = dO * V.block(r0, c0, ti, dhi).transpose();
      // Softmax Jacobian per row: dS = A * (dA - <dA, A>).
      const Eigen::VectorXd inner = (dA.array() * A.array()).rowwise().sum();
      dS = A.array() * (dA.array().colwise() - inner.array());
      DQ.block(r0, c0, ti, dhi).noalias() = scale * dS * K.block(r0, c0, ti, dhi);
      DK.block(r0, c0, ti, dhi).noalias() = scale * dS.transpose() * Q.block(r0, c0, ti, dhi);
    }
  }
  dense_backward(x, Wq, dq, dx, dWq, nullptr);
  dense_backward(x, Wk, dk, dx, dWk, nullptr);
  dense_backward(x, Wv, dv, dx, dWv, nullptr);
}

// --- layer norm --------------------------------------------------------------

Tensor layer_norm_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                          Tensor* normalized, Tensor* inv_std) {
  const std::size_t d = last_dim(x, "layer_norm");
  require_shape(gamma, {d}, "layer_norm gamma");
  require_shape(beta, {d}, "layer_norm beta");
  const std::size_t rows = x.size() / d;
  Tensor xhat(x.shape()), istd({rows}), y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.ptr() + r * d;
    double mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    istd[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (in[j] - mean) * is;
      xhat[r * d + j] = n;
      y[r * d + j] = n * gamma[j] + beta[j];
    }
  }
  if (normalized) *normalized = std::move(xhat);
  if (inv_std) *inv_std = std::move(istd);
  return y;
}

void layer_norm_backward(const Tensor& normalized, const Tensor& inv_std, const Tensor& gamma,
                         const Tensor& dy, Tensor* dx, Tensor* dgamma, Tensor* dbeta) {
  const std::size_t d = gamma.size();
  const std::size_t rows = normalized.size() / d;
  double* dg = dgamma ? prepare(dgamma, gamma.shape()).ptr() : nullptr;
  double* db = dbeta ? prepare(dbeta, gamma.shape()).ptr() : nullptr;
  double* dxp = dx ? prepare(dx, normalized.shape()).ptr() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* n = normalized.ptr() + r * d;
    const double* g = dy.ptr() + r * d;
    double sum_dn = 0, sum_dn_n = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (dg) dg[j] += g[j] * n[j];
      if (db) db[j] += g[j];
      const double dn = g[j] * gamma[j];
      sum_dn += dn;
      sum_dn_n += dn * n[j];
    }
    if (!dxp) continue;
    const double inv_d = 1.0 / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double dn = g[j] * gamma[j];
      dxp[r * d + j] += inv_std[r] * (dn - inv_d * sum_dn - n[j] * inv_d * sum_dn_n);
    }
  }
}

// --- token / pooling plumbing ---------------------------------------------

Tensor patchify_forward(const Tensor& x, std::size_t patch) {
  require_rank(x, 4, "patchify input");
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (patch == 0 || H % patch || W % patch)
    throw ShapeMismatch("patchify: patch " + std::to_string(patch) + " does not divide " + to_string(x.shape()));
  const std::size_t gh = H / patch, gw = W / patch, f = C * patch * patch;
  Tensor y({B, gh * gw, f});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx) {
        double* out = y.ptr() + (b * gh * gw + ty * gw + tx) * f;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
              *out++ = x[((b * C + c) * H + ty * patch + py) * W + tx * patch + px];
      }
  return y;
}

Tensor patchify_backward(const Shape& x_shape, const Tensor& dy, std::size_t patch) {
  const std::size_t B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3];
  const std::size_t gh = H / patch, gw = W / patch, f = C * patch * patch;
  Tensor dx(x_shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t ty = 0; ty < gh; ++ty)
      for (std::size_t tx = 0; tx < gw; ++tx) {
        const double* in = dy.ptr() + (b * gh * gw + ty * gw + tx) * f;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t py = 0; py < patch; ++py)
            for (std::size_t px = 0; px < patch; ++px)
              dx[((b * C + c) * H + ty * patch + py) * W + tx * patch + px] = *in++;
      }
  return dx;
}

namespace {

std::size_t merge_grid(std::size_t tokens) {
  const auto g = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(tokens))));
  if (g * g != tokens || g % 2 != 0)
    throw ShapeMismatch("patch_merge: " + std::to_string(tokens) + " tokens do not form an even square grid");
  return g;
}

template <typename Copy>
void for_each_merge(std::size_t B, std::size_t g, std::size_t d, Copy&& copy) {
  const std::size_t h = g / 2;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < h; ++j) {
        const std::size_t out_tok = b * h * h + i * h + j;
        const std::size_t src[4] = {(2 * i) * g + 2 * j, (2 * i) * g + 2 * j + 1, (2 * i + 1) * g + 2 * j,
                                    (2 * i + 1) * g + 2 * j + 1};
        for (std::size_t q = 0; q < 4; ++q) copy((b * g * g + src[q]) * d, out_tok * 4 * d + q * d);
      }
}

}  // namespace

Tensor patch_merge_forward(const Tensor& x) {
  require_rank(x, 3, "patch_merge input");
  const std::size_t B = x.dim(0), d = x.dim(2), g = merge_grid(x.dim(1));
  Tensor y({B, x.dim(1) / 4, 4 * d});
  for_each_merge(B, g, d, [&](std::size_t from, std::size_t to) {
    std::copy_n(x.ptr() + from, d, y.ptr() + to);
  });
  return y;
}

Tensor patch_merge_backward(const Tensor& dy) {
  require_rank(dy, 3, "patch_merge gradient");
  const std::size_t B = dy.dim(0), d = dy.dim(2) / 4, T = dy.dim(1) * 4;
  const std::size_t g = merge_grid(T);
  Tensor dx({B, T, d});
  for_each_merge(B, g, d, [&](std::size_t from, std::size_t to) {
    std::copy_n(dy.ptr() + to, d, dx.ptr() + from);
  });
  return dx;
}

Tensor global_avg_pool_forward(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool input");
  const std::size_t B = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor y({B, C});
  for (std::size_t i = 0; i < B * C; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < hw; ++j) s += x[i * hw + j];
    y[i] = s / static_cast<double>(hw);
  }
  return y;
}

Tensor global_avg_pool_backward(const Shape& x_shape, const Tensor& dy) {
  Tensor dx(x_shape);
  const std::size_t hw = x_shape[2] * x_shape[3];
  for (std::size_t i = 0; i < dy.size(); ++i) {
    const double g = dy[i] / static_cast<double>(hw);
    std::fill_n(dx.ptr() + i * hw, hw, g);
  }
  return dx;
}

Tensor mean_tokens_forward(const Tensor& x) {
  require_rank(x, 3, "mean_tokens input");
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  Tensor y({B, d});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) y[b * d + j] += x[(b * T + t) * d + j];
  for (double& v : y.data()) v /= static_cast<double>(T);
  return y;
}

Tensor mean_tokens_backward(const Shape& x_shape, const Tensor& dy) {
  const std::size_t B = x_shape[0], T = x_shape[1], d = x_shape[2];
  Tensor dx(x_shape);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < d; ++j) dx[(b * T + t) * d + j] = dy[b * d + j] / static_cast<double>(T);
  return dx;
}

}  // namespace nbisect::tn::kernels
