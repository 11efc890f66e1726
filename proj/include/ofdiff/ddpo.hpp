#pragma once

#include "ofdiff/diffusion.hpp"
#include "ofdiff/optim.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ofdiff {

enum class FeatureMap { gray8x8 };

struct RewardConfig {
  int k = 3;
  double omega = 1.0;
  FeatureMap feature_map = FeatureMap::gray8x8;

  void validate(std::size_t batch_size) const;
};

/// Luminance of a (3, H, W) image averaged over an 8x8 grid of cells,
/// flattened row-major to 64 values.
Eigen::VectorXd reward_features(const Tensor<double>& image);

/// Diagonal Gaussian fit of features; variances floored at 1e-6.
struct GaussianFit {
  Eigen::VectorXd mean;
  Eigen::VectorXd variance;
  /// Number of coordinates whose variance was raised to the floor.
  int floored = 0;
};

GaussianFit fit_gaussian(const std::vector<Eigen::VectorXd>& features);

/// Features of held-out real images and their Gaussian fit.
struct RealReference {
  std::vector<Eigen::VectorXd> features;
  GaussianFit fit;
};

RealReference make_reference(std::span<const Tensor<double>> images);

/// KL(a || b) between diagonal Gaussians.
double diagonal_gaussian_kl(const GaussianFit& a, const GaussianFit& b);

struct RewardBreakdown {
  std::vector<double> rewards;
  /// Distance to the k-th nearest other batch member.
  std::vector<double> knn;
  /// KL from the batch fit to the reference fit, shared by the batch.
  double kl = 0.0;
  /// Coordinates of the batch fit raised to the variance floor.
  int floored = 0;
};

/// r_b = knn_b - omega * KL(batch fit || reference fit).
RewardBreakdown compute_reward(std::span<const Tensor<double>> images, const RealReference& reference,
                               const RewardConfig& config);

/// -(mean intensity - 0.8)^2.
double toy_brightness_reward(const Tensor<double>& image);

/// A policy over reverse-diffusion actions with Gaussian transitions.
template <typename Scalar>
class GaussianPolicy {
 public:
  virtual ~GaussianPolicy() = default;
  virtual ParameterList<Scalar> parameters() = 0;
  /// Transition means for step `step` of every trajectory, stacked on the leading axis.
  virtual Var<Scalar> transition_mean(Graph<Scalar>& g, std::span<const Trajectory<Scalar>> batch,
                                      std::size_t step) = 0;
};

/// The denoiser's shape branch under the ancestral sampler.
template <typename Scalar>
class DenoiserPolicy : public GaussianPolicy<Scalar> {
 public:
  DenoiserPolicy(Denoiser<Scalar>& model, const NoiseSchedule& schedule, int steps);

  ParameterList<Scalar> parameters() override;
  Var<Scalar> transition_mean(Graph<Scalar>& g, std::span<const Trajectory<Scalar>> batch, std::size_t step) override;

 private:
  SamplingView<Scalar> view_;
  std::vector<ReverseCoefficients> coeffs_;
};

/// Ancestral sampling with recording under the current (behavior) parameters.
template <typename Scalar>
std::vector<Trajectory<Scalar>> rollout(Denoiser<Scalar>& model, std::span<const ShapeMask> conditions,
                                        const std::vector<std::vector<int>>& category_ids,
                                        const NoiseSchedule& schedule, int steps, Sampler sampler, std::uint64_t seed);

/// log N(action; mean_theta(state), sigma^2 I) of one recorded step under the
/// current policy; `sigma` overrides the recorded standard deviation.
template <typename Scalar>
double transition_logprob(GaussianPolicy<Scalar>& policy, const Trajectory<Scalar>& trajectory, std::size_t step,
                          std::optional<double> sigma = std::nullopt);

struct PolicyGradientOptions {
  double clip_eps = 0.2;
  bool normalize_advantages = true;
};

template <typename Scalar>
struct GradientEstimate {
  /// Ascent direction of the objective, aligned with policy.parameters().
  std::vector<Tensor<Scalar>> gradients;
  double mean_ratio = 0.0;
  double clipped_fraction = 0.0;
  std::vector<double> advantages;
};

/// Advantages from rewards: zero-mean, unit-variance across the batch when
/// `normalize`; all zeros when every reward is equal.
std::vector<double> advantages_from_rewards(std::span<const double> rewards, bool normalize);

/// Importance-weighted, ratio-clipped policy gradient
///   g = (1/B) sum_b sum_t grad min(rho A_b, clip(rho, 1 - eps, 1 + eps) A_b)
/// with rho = p_theta(action | state) / p_old(action | state). When an
/// optimizer is given it takes one descent step along -g.
template <typename Scalar>
GradientEstimate<Scalar> policy_gradient_step(std::span<const Trajectory<Scalar>> trajectories,
                                              GaussianPolicy<Scalar>& policy, AdamW<Scalar>* optimizer,
                                              const PolicyGradientOptions& options = {});

struct DdpoOptions {
  int batch_size = 8;
  int sampling_steps = 10;
  PolicyGradientOptions gradient;
  RewardConfig reward;
  bool toy_reward = false;
};

struct DdpoUpdateStats {
  std::int64_t update = 0;
  double mean_reward = 0.0;
  double mean_ratio = 0.0;
  double clipped_fraction = 0.0;
  double kl = 0.0;
};

/// Rollout, reward and one policy-gradient step on a batch of conditions.
template <typename Scalar>
DdpoUpdateStats ddpo_update(Denoiser<Scalar>& model, AdamW<Scalar>& optimizer, std::span<const ShapeMask> conditions,
                            const std::vector<std::vector<int>>& category_ids, const NoiseSchedule& schedule,
                            const RealReference* reference, const DdpoOptions& options, std::uint64_t seed,
                            std::int64_t update);

}  // namespace ofdiff
