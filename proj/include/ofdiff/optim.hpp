#pragma once

#include "ofdiff/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace ofdiff {

struct AdamWConfig {
  double learning_rate = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moment accumulators, one pair per parameter, plus the step count.
template <typename Scalar>
struct OptimizerState {
  AdamWConfig config;
  std::int64_t step = 0;
  std::vector<Tensor<Scalar>> first_moment;
  std::vector<Tensor<Scalar>> second_moment;
};

/// AdamW with decoupled weight decay and bias-corrected moments.
template <typename Scalar>
class AdamW {
 public:
  AdamW(ParameterList<Scalar> params, AdamWConfig config = {});

  /// One update; `grads` is aligned with the parameter list.
  void step(const std::vector<Tensor<Scalar>>& grads);
  void step(const Gradients<Scalar>& grads);

  const ParameterList<Scalar>& parameters() const { return params_; }
  const OptimizerState<Scalar>& state() const { return state_; }
  OptimizerState<Scalar>& state() { return state_; }

 private:
  ParameterList<Scalar> params_;
  OptimizerState<Scalar> state_;
};

/// Gradients of `params`, in list order.
template <typename Scalar>
std::vector<Tensor<Scalar>> gradients_for(const Gradients<Scalar>& grads, const ParameterList<Scalar>& params) {
  std::vector<Tensor<Scalar>> out;
  out.reserve(params.size());
  for (const auto* p : params) out.push_back(grads.of(*p));
  return out;
}

}  // namespace ofdiff
