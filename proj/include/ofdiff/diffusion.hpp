#pragma once

#include "ofdiff/denoiser.hpp"
#include "ofdiff/optim.hpp"
#include "ofdiff/scene.hpp"

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ofdiff {

enum class ScheduleKind { linear };

/// Betas indexed 1..T; index 0 holds the empty-product convention
/// (beta 0, alpha_bar 1).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
};

/// Linear betas from 1e-4 to 0.02, rescaled by 1000 / T so short chains
/// reach a comparable terminal noise level.
NoiseSchedule make_schedule(int T, ScheduleKind kind = ScheduleKind::linear);

/// sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
template <typename Scalar>
Tensor<Scalar> q_sample(const Tensor<Scalar>& z0, int t, const Tensor<Scalar>& eps, const NoiseSchedule& schedule);

/// Batched q_sample with one timestep per leading index.
template <typename Scalar>
Tensor<Scalar> q_sample(const Tensor<Scalar>& z0, std::span<const int> t, const Tensor<Scalar>& eps,
                        const NoiseSchedule& schedule);

struct LossBreakdown {
  double l_s = 0.0;
  double l_m = 0.0;
  /// Absent when the consistency loss is switched off.
  std::optional<double> l_c;
  double total = 0.0;
};

/// Which pair the consistency loss compares.
enum class ConsistencyForm {
  /// mse(eps_s, sg[eps_m]): the shape branch is pulled toward the mix branch.
  shape_to_mix,
  /// mse(eps_m, sg[eps_m]) as literally written; identically zero.
  literal,
};

std::string to_string(ConsistencyForm form);
ConsistencyForm consistency_form_from_string(const std::string& name);

struct TrainOptions {
  int batch_size = 16;
  std::int64_t iterations = 2000;
  /// Condition the model on true instance masks; false uses filled layout boxes.
  bool use_esgm = true;
  bool use_dcloss = true;
  ConsistencyForm consistency = ConsistencyForm::shape_to_mix;
  std::uint64_t seed = 0;
};

template <typename Scalar>
struct LossVars {
  Var<Scalar> l_s, l_m, l_c, total;
};

/// l_s = mse(eps_s, eps), l_m = mse(eps_m, eps), l_c per `form`; the total
/// omits l_c when `use_dcloss` is false.
template <typename Scalar>
LossVars<Scalar> assemble_losses(const Var<Scalar>& eps_s, const Var<Scalar>& eps_m, const Var<Scalar>& eps,
                                 bool use_dcloss, ConsistencyForm form);

/// Inputs of one training step, already stacked.
template <typename Scalar>
struct TrainBatch {
  /// (N, 3, S, S) in [-1, 1].
  Tensor<Scalar> images;
  /// (N, 1, S, S) condition masks.
  Tensor<Scalar> masks;
  std::vector<std::vector<int>> category_ids;
};

/// Condition masks are the true composites (ESGM identity transform) or,
/// for the layout-only ablation, filled boxes.
template <typename Scalar>
TrainBatch<Scalar> make_train_batch(std::span<const SceneSample> samples, std::span<const std::size_t> indices,
                                    bool use_esgm);

struct TrainState {
  std::int64_t n = 0;
  std::int64_t N = 0;
  std::int64_t epoch = 0;
};

class ScheduleExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dataset indices of step n: consecutive slices of a per-epoch permutation
/// keyed by (seed, epoch).
std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, std::int64_t n, std::uint64_t seed,
                                       std::int64_t* epoch = nullptr);

/// Timesteps and noise of step n, keyed by (seed, epoch, n).
template <typename Scalar>
struct StepNoise {
  std::vector<int> t;
  Tensor<Scalar> eps;
};

template <typename Scalar>
StepNoise<Scalar> draw_step_noise(const Shape& latent_shape, const NoiseSchedule& schedule, std::uint64_t seed,
                                  std::int64_t epoch, std::int64_t n);

template <typename Scalar>
struct StepResult {
  LossBreakdown losses;
  Gradients<Scalar> gradients;
};

/// Losses and gradients of one batch at iteration `state.n` without updating anything.
template <typename Scalar>
StepResult<Scalar> compute_step(Denoiser<Scalar>& model, const TrainBatch<Scalar>& batch, const StepNoise<Scalar>& noise,
                                const TrainState& state, const NoiseSchedule& schedule, const TrainOptions& options);

/// One optimizer step on all parameter groups; increments state.n.
/// Throws ScheduleExhausted when n >= N.
template <typename Scalar>
StepResult<Scalar> training_step(Denoiser<Scalar>& model, AdamW<Scalar>& optimizer, const TrainBatch<Scalar>& batch,
                                 TrainState& state, const NoiseSchedule& schedule, const TrainOptions& options);

// --- sampling ----------------------------------------------------------------

enum class Sampler { ancestral, deterministic };
std::string to_string(Sampler sampler);
Sampler sampler_from_string(const std::string& name);

/// Respaced timesteps tau_0 = 0 < tau_1 < ... < tau_steps = T.
std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, int steps);

/// Coefficients of one reverse transition t -> t_prev.
struct ReverseCoefficients {
  int t = 0;
  int t_prev = 0;
  /// x0_hat = clamp(x0_from_xt * x_t - x0_from_eps * eps_hat, -1, 1)
  double x0_from_xt = 0.0;
  double x0_from_eps = 0.0;
  /// Posterior mean = mean_from_x0 * x0_hat + mean_from_xt * x_t.
  double mean_from_x0 = 0.0;
  double mean_from_xt = 0.0;
  /// Ancestral standard deviation. At t_prev = 0 the posterior variance
  /// vanishes, so the variance of the preceding transition is reused.
  double sigma = 0.0;
};

std::vector<ReverseCoefficients> reverse_coefficients(const NoiseSchedule& schedule, int steps);

/// Ancestral transition mean as a differentiable function of eps_hat.
template <typename Scalar>
Var<Scalar> posterior_mean(const Var<Scalar>& x_t, const Var<Scalar>& eps_hat, const ReverseCoefficients& c);

/// DDIM (eta = 0) update.
template <typename Scalar>
Tensor<Scalar> ddim_step(const Tensor<Scalar>& x_t, const Tensor<Scalar>& eps_hat, const NoiseSchedule& schedule, int t,
                         int t_prev);

/// One recorded reverse transition of one sample.
template <typename Scalar>
struct ReverseStep {
  int t = 0;
  int t_prev = 0;
  double sigma = 0.0;
  /// (3, S, S)
  Tensor<Scalar> state;
  Tensor<Scalar> action;
  Tensor<Scalar> mean;
  double logprob = 0.0;
  /// Zero for every step but the last, which carries the terminal reward.
  double reward = 0.0;
};

template <typename Scalar>
struct Trajectory {
  ShapeMask condition;
  std::vector<int> category_ids;
  std::vector<ReverseStep<Scalar>> steps;
  std::optional<double> reward;

  /// Final action before clamping to the image range.
  const Tensor<Scalar>& terminal() const { return steps.back().action; }
  void set_reward(double r);
};

struct SampleOptions {
  int steps = 50;
  Sampler sampler = Sampler::ancestral;
  bool record_trajectory = false;
};

template <typename Scalar>
struct SampleResult {
  /// (N, 3, S, S) in [0, 1].
  Tensor<Scalar> images;
  /// Latent after the last step, before clamping.
  Tensor<Scalar> final_latent;
  std::vector<Trajectory<Scalar>> trajectories;
};

/// Reverse diffusion through the shape branch only. Sample i draws its noise
/// from a stream keyed by (seed, i).
template <typename Scalar>
SampleResult<Scalar> sample(SamplingView<Scalar> view, std::span<const ShapeMask> conditions,
                            const std::vector<std::vector<int>>& category_ids, const NoiseSchedule& schedule,
                            const SampleOptions& options, std::uint64_t seed);

/// Latent in [-1, 1] to an image in [0, 1].
template <typename Scalar>
Tensor<Scalar> latent_to_image(const Tensor<Scalar>& z);

}  // namespace ofdiff
