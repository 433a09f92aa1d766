#pragma once

#include "saev/common.hpp"

#include <vector>

namespace saev {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  // Decoupled (AdamW) weight decay; 0 gives plain Adam.
  double weight_decay = 0.0;
};

// Adam with bias correction over a fixed list of flat float tensors.
class Adam {
 public:
  Adam(AdamOptions opts, const std::vector<std::size_t>& sizes);

  // Applies one update. params[i] and grads[i] must match the registered
  // sizes. Throws Error on a non-finite gradient; nothing is modified then.
  void step(std::span<const std::span<float>> params, std::span<const std::span<const float>> grads, double lr);

  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

 private:
  AdamOptions opts_;
  std::vector<std::vector<float>> m_;
  std::vector<std::vector<float>> v_;
  std::int64_t t_ = 0;
};

template <typename Derived>
std::span<float> flat(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename Derived>
std::span<const float> flat(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace saev
