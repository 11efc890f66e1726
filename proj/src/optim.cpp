#include "ofdiff/optim.hpp"

#include <cmath>

namespace ofdiff {

template <typename Scalar>
AdamW<Scalar>::AdamW(ParameterList<Scalar> params, AdamWConfig config) : params_(std::move(params)) {
  state_.config = config;
  for (const auto* p : params_) {
    state_.first_moment.push_back(Tensor<Scalar>::zeros(p->value.shape()));
    state_.second_moment.push_back(Tensor<Scalar>::zeros(p->value.shape()));
  }
}

template <typename Scalar>
void AdamW<Scalar>::step(const Gradients<Scalar>& grads) {
  step(gradients_for(grads, params_));
}

template <typename Scalar>
void AdamW<Scalar>::step(const std::vector<Tensor<Scalar>>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("AdamW: one gradient per parameter required");
  const AdamWConfig& c = state_.config;
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double decay = 1.0 - c.learning_rate * c.weight_decay;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<Scalar>& p = params_[i]->value;
    const Tensor<Scalar>& g = grads[i];
    if (g.shape() != p.shape()) {
      throw ShapeError("AdamW: gradient " + shape_string(g.shape()) + " for parameter " +
                       params_[i]->name + " " + shape_string(p.shape()));
    }
    Tensor<Scalar>& m = state_.first_moment[i];
    Tensor<Scalar>& v = state_.second_moment[i];
    for (Index k = 0; k < p.size(); ++k) {
      const double gk = g[k];
      const double mk = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
      const double vk = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
      m[k] = static_cast<Scalar>(mk);
      v[k] = static_cast<Scalar>(vk);
      const double update = (mk / bc1) / (std::sqrt(vk / bc2) + c.eps);
      p[k] = static_cast<Scalar>(static_cast<double>(p[k]) * decay - c.learning_rate * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace ofdiff
