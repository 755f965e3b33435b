#include "rsc/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace rsc {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.beta1 > 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 > 0.0 && cfg_.beta2 < 1.0)) {
    throw std::invalid_argument("Adam: beta moments must lie in (0,1)");
  }
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    if (!p.defined()) throw std::invalid_argument("Adam: undefined parameter");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  ++step_;
  const double corr1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double corr2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto grad = params_[i].grad();
    if (static_cast<std::int64_t>(m_[i].size()) != params_[i].size() ||
        grad.size() != m_[i].size()) {
      throw std::invalid_argument("Adam: parameter/gradient shape mismatch");
    }
    auto data = params_[i].raw_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < m.size(); ++j) {
      const double g = grad[j];
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m[j] / corr1;
      const double vhat = v[j] / corr2;
      data[j] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

}  // namespace rsc
