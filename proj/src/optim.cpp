#include "saev/optim.hpp"

#include <cmath>

namespace saev {

Adam::Adam(AdamOptions opts, const std::vector<std::size_t>& sizes) : opts_(opts) {
  for (auto n : sizes) {
    m_.emplace_back(n, 0.0f);
    v_.emplace_back(n, 0.0f);
  }
}

void Adam::step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw ArgumentError("adam: tensor count mismatch");
  for (std::size_t i = 0; i < m_.size(); ++i) {
    if (params[i].size() != m_[i].size() || grads[i].size() != m_[i].size())
      throw ArgumentError("adam: tensor " + std::to_string(i) + " size mismatch");
    for (std::size_t j = 0; j < grads[i].size(); ++j)
      if (!std::isfinite(grads[i][j]))
        throw Error("adam: non-finite gradient in tensor " + std::to_string(i) + " at element " + std::to_string(j));
  }

  ++t_;
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(opts_.eps);
  const float decay = static_cast<float>(lr * opts_.weight_decay);
  const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);

  for (std::size_t i = 0; i < m_.size(); ++i) {
    float* p = params[i].data();
    const float* g = grads[i].data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t j = 0; j < m_[i].size(); ++j) {
      m[j] = fb1 * m[j] + (1.0f - fb1) * g[j];
      v[j] = fb2 * v[j] + (1.0f - fb2) * g[j] * g[j];
      if (decay != 0.0f) p[j] -= decay * p[j];
      p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
    }
  }
}

}  // namespace saev
