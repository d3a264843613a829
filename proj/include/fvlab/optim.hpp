#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fvlab {

// Adam with bias correction over a flat buffer. Moments are kept in double.
class Adam {
 public:
  Adam(std::size_t n, double beta1, double beta2, double eps);
  template <typename T>
  void step(std::span<T> params, std::span<const T> grad, double lr);
  int steps_taken() const noexcept { return t_; }

 private:
  std::vector<double> m_, v_;
  double beta1_, beta2_, eps_;
  int t_ = 0;
};

}  // namespace fvlab
