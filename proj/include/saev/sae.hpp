#pragma once

// ReLU sparse autoencoder.
//
//   h     = W_enc (x - b_dec) + b_enc
//   f(x)  = ReLU(h)
//   x_hat = W_dec f(x) + b_dec
//   L     = ||x - x_hat||^2 + lambda * ||f(x)||_1      (mean over batch rows)
//
// The SAE operates on normalized activations (see Normalizer).

#include "saev/activation_store.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

namespace saev {

template <typename T>
struct BasicSaeParams {
  MatrixT<T> w_enc;  // n x d
  VectorT<T> b_enc;  // n
  MatrixT<T> w_dec;  // d x n, columns are feature directions
  VectorT<T> b_dec;  // d

  int d() const { return static_cast<int>(w_dec.rows()); }
  int n() const { return static_cast<int>(w_dec.cols()); }

  template <typename U>
  BasicSaeParams<U> cast() const {
    return {w_enc.template cast<U>(), b_enc.template cast<U>(), w_dec.template cast<U>(), b_dec.template cast<U>()};
  }

  bool all_finite() const { return w_enc.allFinite() && b_enc.allFinite() && w_dec.allFinite() && b_dec.allFinite(); }
};

using SaeParams = BasicSaeParams<float>;

// Nonnegative code f(x); one entry per feature.
using SparseCode = Eigen::VectorXf;

struct FeatureValue {
  std::uint32_t feature = 0;
  float value = 0.0f;
  friend bool operator==(const FeatureValue&, const FeatureValue&) = default;
};

std::vector<FeatureValue> nonzeros(const Eigen::Ref<const Eigen::VectorXf>& code);

struct LossBreakdown {
  double total = 0.0;
  double mse = 0.0;
  double l1 = 0.0;
  double l0 = 0.0;
  double lambda = 0.0;
};

template <typename T>
struct SaeGrads {
  MatrixT<T> w_enc;
  VectorT<T> b_enc;
  MatrixT<T> w_dec;
  VectorT<T> b_dec;
};

// W_enc ~ U[-1/sqrt(d), 1/sqrt(d)], W_dec ~ U[-1/sqrt(n), 1/sqrt(n)] then
// unit-norm columns, b_enc = 0, b_dec = normalizer mean.
SaeParams init_params(int d, int n, const Normalizer& normalizer, std::uint64_t seed);

namespace detail {
template <typename T>
void check_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want)
    throw ArgumentError(std::string(what) + ": dimension mismatch (" + std::to_string(got) + " vs " +
                        std::to_string(want) + ")");
}
}  // namespace detail

template <typename T>
VectorT<T> encode(const BasicSaeParams<T>& p, const Eigen::Ref<const VectorT<T>>& x) {
  detail::check_dim<T>(x.size(), p.d(), "encode");
  VectorT<T> h = p.w_enc * (x - p.b_dec) + p.b_enc;
  return h.cwiseMax(T(0));
}

template <typename T>
VectorT<T> decode(const BasicSaeParams<T>& p, const Eigen::Ref<const VectorT<T>>& f) {
  detail::check_dim<T>(f.size(), p.n(), "decode");
  return p.w_dec * f + p.b_dec;
}

// Row-by-row encode; each row goes through the same code path as encode(),
// so results are independent of how rows are batched.
template <typename T>
RowMatrixT<T> encode_rows(const BasicSaeParams<T>& p, const RowMatrixT<T>& x) {
  detail::check_dim<T>(x.cols(), p.d(), "encode_rows");
  RowMatrixT<T> out(x.rows(), p.n());
  VectorT<T> row(p.d());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    row = x.row(i).transpose();
    out.row(i) = encode<T>(p, row).transpose();
  }
  return out;
}

// Batched forward pass. Returns mean loss over rows; optionally exposes the
// codes (B x n) and reconstructions (B x d).
template <typename T>
LossBreakdown forward(const BasicSaeParams<T>& p, const RowMatrixT<T>& x, double lambda, RowMatrixT<T>* codes = nullptr,
                      RowMatrixT<T>* recon = nullptr) {
  detail::check_dim<T>(x.cols(), p.d(), "forward");
  if (x.rows() == 0) throw ArgumentError("forward: empty batch");
  RowMatrixT<T> centered = x.rowwise() - p.b_dec.transpose();
  RowMatrixT<T> f = (centered * p.w_enc.transpose()).rowwise() + p.b_enc.transpose();
  f = f.cwiseMax(T(0));
  RowMatrixT<T> xh = (f * p.w_dec.transpose()).rowwise() + p.b_dec.transpose();
  const double b = static_cast<double>(x.rows());
  LossBreakdown out;
  out.lambda = lambda;
  out.mse = (xh - x).template cast<double>().squaredNorm() / b;
  out.l1 = f.template cast<double>().sum() / b;
  out.l0 = static_cast<double>((f.array() > T(0)).count()) / b;
  out.total = out.mse + lambda * out.l1;
  if (codes) *codes = std::move(f);
  if (recon) *recon = std::move(xh);
  return out;
}

template <typename T>
LossBreakdown loss(const BasicSaeParams<T>& p, const Eigen::Ref<const VectorT<T>>& x, double lambda) {
  if (lambda < 0) throw ArgumentError("loss: lambda must be >= 0");
  RowMatrixT<T> row = x.transpose();
  return forward(p, row, lambda);
}

// Closed-form gradient of the mean batch loss. ReLU subgradient at 0 is 0.
template <typename T>
SaeGrads<T> loss_grad(const BasicSaeParams<T>& p, const RowMatrixT<T>& x, double lambda, LossBreakdown* breakdown = nullptr,
                      RowMatrixT<T>* codes_out = nullptr) {
  if (x.rows() == 0) throw ArgumentError("loss_grad: empty batch");
  detail::check_dim<T>(x.cols(), p.d(), "loss_grad");
  const T inv_b = T(1) / static_cast<T>(x.rows());

  RowMatrixT<T> centered = x.rowwise() - p.b_dec.transpose();
  RowMatrixT<T> f = (centered * p.w_enc.transpose()).rowwise() + p.b_enc.transpose();
  f = f.cwiseMax(T(0));
  RowMatrixT<T> resid = ((f * p.w_dec.transpose()).rowwise() + p.b_dec.transpose()) - x;  // x_hat - x

  if (breakdown) {
    const double b = static_cast<double>(x.rows());
    breakdown->lambda = lambda;
    breakdown->mse = resid.template cast<double>().squaredNorm() / b;
    breakdown->l1 = f.template cast<double>().sum() / b;
    breakdown->l0 = static_cast<double>((f.array() > T(0)).count()) / b;
    breakdown->total = breakdown->mse + lambda * breakdown->l1;
  }

  // dL/dx_hat = 2 (x_hat - x) / B
  RowMatrixT<T> d_xhat = resid * (T(2) * inv_b);
  // dL/dh = mask * (dL/dx_hat W_dec + lambda / B)
  RowMatrixT<T> d_h = d_xhat * p.w_dec;
  d_h.array() += static_cast<T>(lambda) * inv_b;
  d_h = (f.array() > T(0)).select(d_h, T(0));

  SaeGrads<T> g;
  g.w_dec = d_xhat.transpose() * f;
  g.w_enc = d_h.transpose() * centered;
  g.b_enc = d_h.colwise().sum().transpose();
  g.b_dec = d_xhat.colwise().sum().transpose() - p.w_enc.transpose() * g.b_enc;
  if (codes_out) *codes_out = std::move(f);
  return g;
}

// ---------------------------------------------------------------------------
// Checkpoint: magic "SAEVSAE1", version u32, d u32, n u32, then float32 LE
// W_enc (n x d, row-major), b_enc, W_dec (d x n, row-major), b_dec, mu,
// followed by a JSON trailer (training config) running to end of file.

inline constexpr char kSaeMagic[8] = {'S', 'A', 'E', 'V', 'S', 'A', 'E', '1'};
inline constexpr std::uint32_t kSaeVersion = 1;

struct SaeCheckpoint {
  SaeParams params;
  Normalizer normalizer;
  nlohmann::json config = nlohmann::json::object();
};

std::string serialize_checkpoint(const SaeCheckpoint& ckpt);
SaeCheckpoint parse_checkpoint(std::span<const char> bytes, const std::string& context = "sae checkpoint");
void save_checkpoint(const fs::path& path, const SaeCheckpoint& ckpt);
SaeCheckpoint load_checkpoint(const fs::path& path);

}  // namespace saev
