#include "fvlab/optim.hpp"

#include <cmath>

#include "fvlab/error.hpp"

namespace fvlab {

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : m_(n, 0.0), v_(n, 0.0), beta1_(beta1), beta2_(beta2), eps_(eps) {}

template <typename T>
void Adam::step(std::span<T> params, std::span<const T> grad, double lr) {
  if (params.size() != m_.size() || grad.size() != m_.size()) {
    throw InvalidArgument("Adam: buffer size mismatch");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, t_);
  const double c2 = 1.0 - std::pow(beta2_, t_);
  for (std::size_t i = 0; i < m_.size(); ++i) {
    const double g = static_cast<double>(grad[i]);
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    const double mh = m_[i] / c1;
    const double vh = v_[i] / c2;
    params[i] = static_cast<T>(static_cast<double>(params[i]) - lr * mh / (std::sqrt(vh) + eps_));
  }
}

template void Adam::step<float>(std::span<float>, std::span<const float>, double);
template void Adam::step<double>(std::span<double>, std::span<const double>, double);

}  // namespace fvlab
