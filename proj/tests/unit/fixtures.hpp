#pragma once

#include "saev/sae.hpp"

namespace fixtures {

// d=2, n=3 instance with hand-computed encode/decode values.
template <typename T = float>
saev::BasicSaeParams<T> worked() {
  saev::BasicSaeParams<T> p;
  p.w_enc.resize(3, 2);
  p.w_enc << 1, 0, 0, 1, 1, 1;
  p.b_enc.resize(3);
  p.b_enc << 0, -0.25, 0;
  const T r = static_cast<T>(0.70710678118654752);
  p.w_dec.resize(2, 3);
  p.w_dec << 1, 0, r, 0, 1, r;
  p.b_dec.resize(2);
  p.b_dec << 0.5, 0.5;
  return p;
}

// Plain-loop loss, independent of the library's Eigen path.
inline double oracle_loss(const saev::BasicSaeParams<double>& p, const saev::RowMatrixT<double>& x, double lambda) {
  const int d = p.d(), n = p.n();
  double total = 0;
  for (int b = 0; b < x.rows(); ++b) {
    std::vector<double> f(n);
    for (int i = 0; i < n; ++i) {
      double h = p.b_enc[i];
      for (int j = 0; j < d; ++j) h += p.w_enc(i, j) * (x(b, j) - p.b_dec[j]);
      f[i] = h > 0 ? h : 0;
    }
    for (int j = 0; j < d; ++j) {
      double xh = p.b_dec[j];
      for (int i = 0; i < n; ++i) xh += p.w_dec(j, i) * f[i];
      total += (xh - x(b, j)) * (xh - x(b, j));
    }
    for (int i = 0; i < n; ++i) total += lambda * f[i];
  }
  return total / static_cast<double>(x.rows());
}

}  // namespace fixtures
