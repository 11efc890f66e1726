#include "ofdiff/ddpo.hpp"

#include "ofdiff/random.hpp"

#include <algorithm>
#include <cmath>

namespace ofdiff {

namespace {

constexpr std::uint64_t kRolloutStream = 0x4444504f;  // "DDPO"
constexpr double kVarianceFloor = 1e-6;

template <typename Scalar>
Tensor<Scalar> stack_step(std::span<const Trajectory<Scalar>> batch, std::size_t step, bool actions) {
  const Tensor<Scalar>& first = actions ? batch[0].steps[step].action : batch[0].steps[step].state;
  Shape shape{static_cast<Index>(batch.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<Scalar> out(shape);
  const Index per = first.size();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor<Scalar>& src = actions ? batch[b].steps[step].action : batch[b].steps[step].state;
    if (src.shape() != first.shape()) throw ShapeError("trajectory states differ in shape");
    out.array().segment(static_cast<Index>(b) * per, per) = src.array();
  }
  return out;
}

}  // namespace

void RewardConfig::validate(std::size_t batch_size) const {
  if (k < 1) throw std::invalid_argument("reward k must be >= 1");
  if (static_cast<std::size_t>(k) >= batch_size) {
    throw std::invalid_argument("reward k=" + std::to_string(k) + " needs a batch larger than k, got " +
                                std::to_string(batch_size));
  }
  if (!(omega >= 0.0)) throw std::invalid_argument("reward omega must be >= 0");
}

Eigen::VectorXd reward_features(const Tensor<double>& image) {
  if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) < 8 || image.dim(2) < 8) {
    throw ShapeError("reward features need a (3, H, W) image with H, W >= 8, got " + shape_string(image.shape()));
  }
  const Index h = image.dim(1), w = image.dim(2);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(64);
  for (Index gy = 0; gy < 8; ++gy) {
    const Index y0 = gy * h / 8, y1 = (gy + 1) * h / 8;
    for (Index gx = 0; gx < 8; ++gx) {
      const Index x0 = gx * w / 8, x1 = (gx + 1) * w / 8;
      double acc = 0.0;
      for (Index y = y0; y < y1; ++y) {
        for (Index x = x0; x < x1; ++x) {
          acc += 0.299 * image.at(0, y, x) + 0.587 * image.at(1, y, x) + 0.114 * image.at(2, y, x);
        }
      }
      f[gy * 8 + gx] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
    }
  }
  return f;
}

GaussianFit fit_gaussian(const std::vector<Eigen::VectorXd>& features) {
  if (features.empty()) throw ContractError("Gaussian fit of an empty feature set");
  const Index d = features[0].size();
  GaussianFit fit;
  fit.mean = Eigen::VectorXd::Zero(d);
  for (const auto& f : features) fit.mean += f;
  fit.mean /= static_cast<double>(features.size());
  fit.variance = Eigen::VectorXd::Zero(d);
  for (const auto& f : features) fit.variance += (f - fit.mean).array().square().matrix();
  fit.variance /= static_cast<double>(features.size());
  for (Index i = 0; i < d; ++i) {
    if (fit.variance[i] < kVarianceFloor) {
      fit.variance[i] = kVarianceFloor;
      ++fit.floored;
    }
  }
  return fit;
}

RealReference make_reference(std::span<const Tensor<double>> images) {
  RealReference ref;
  for (const auto& img : images) ref.features.push_back(reward_features(img));
  ref.fit = fit_gaussian(ref.features);
  return ref;
}

double diagonal_gaussian_kl(const GaussianFit& a, const GaussianFit& b) {
  if (a.mean.size() != b.mean.size()) throw ShapeError("KL between Gaussians of different dimension");
  double kl = 0.0;
  for (Index i = 0; i < a.mean.size(); ++i) {
    const double va = a.variance[i], vb = b.variance[i], dm = a.mean[i] - b.mean[i];
    kl += 0.5 * ((va + dm * dm) / vb - 1.0 + std::log(vb / va));
  }
  return kl;
}

RewardBreakdown compute_reward(std::span<const Tensor<double>> images, const RealReference& reference,
                               const RewardConfig& config) {
  config.validate(images.size());
  std::vector<Eigen::VectorXd> feats;
  for (const auto& img : images) feats.push_back(reward_features(img));
  RewardBreakdown out;
  const GaussianFit fit = fit_gaussian(feats);
  out.floored = fit.floored;
  out.kl = diagonal_gaussian_kl(fit, reference.fit);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < feats.size(); ++j) {
      if (j != i) d.push_back((feats[i] - feats[j]).norm());
    }
    std::nth_element(d.begin(), d.begin() + (config.k - 1), d.end());
    out.knn.push_back(d[static_cast<std::size_t>(config.k - 1)]);
    out.rewards.push_back(out.knn.back() - config.omega * out.kl);
  }
  return out;
}

double toy_brightness_reward(const Tensor<double>& image) {
  const double m = image.array().mean() - 0.8;
  return -m * m;
}

template <typename Scalar>
DenoiserPolicy<Scalar>::DenoiserPolicy(Denoiser<Scalar>& model, const NoiseSchedule& schedule, int steps)
    : view_(model), coeffs_(reverse_coefficients(schedule, steps)) {}

template <typename Scalar>
ParameterList<Scalar> DenoiserPolicy<Scalar>::parameters() {
  return view_.parameters();
}

template <typename Scalar>
Var<Scalar> DenoiserPolicy<Scalar>::transition_mean(Graph<Scalar>& g, std::span<const Trajectory<Scalar>> batch,
                                                    std::size_t step) {
  if (batch.empty()) throw ContractError("transition_mean of an empty batch");
  if (step >= coeffs_.size()) throw ContractError("step index beyond the sampling chain");
  const ReverseCoefficients& c = coeffs_[step];
  std::vector<ShapeMask> masks;
  std::vector<std::vector<int>> cats;
  for (const auto& traj : batch) {
    if (step >= traj.steps.size() || traj.steps[step].t != c.t || traj.steps[step].t_prev != c.t_prev) {
      throw ContractError("trajectory does not follow this policy's timestep chain");
    }
    masks.push_back(traj.condition);
    cats.push_back(traj.category_ids);
  }
  const Var<Scalar> xt = g.constant(stack_step(batch, step, false));
  const std::vector<double> t(batch.size(), static_cast<double>(c.t));
  const Var<Scalar> eps = view_.predict(g, xt, t, mask_batch<Scalar>(masks), cats);
  return posterior_mean(xt, eps, c);
}

template <typename Scalar>
std::vector<Trajectory<Scalar>> rollout(Denoiser<Scalar>& model, std::span<const ShapeMask> conditions,
                                        const std::vector<std::vector<int>>& category_ids,
                                        const NoiseSchedule& schedule, int steps, Sampler sampler, std::uint64_t seed) {
  if (sampler != Sampler::ancestral) {
    throw ContractError("policy density undefined at sigma=0: rollouts need the ancestral sampler");
  }
  SampleOptions opts;
  opts.steps = steps;
  opts.sampler = sampler;
  opts.record_trajectory = true;
  return sample(SamplingView<Scalar>(model), conditions, category_ids, schedule, opts, seed).trajectories;
}

template <typename Scalar>
double transition_logprob(GaussianPolicy<Scalar>& policy, const Trajectory<Scalar>& trajectory, std::size_t step,
                          std::optional<double> sigma) {
  if (step >= trajectory.steps.size()) throw ContractError("step index out of range");
  const ReverseStep<Scalar>& s = trajectory.steps[step];
  if (s.t < 1) throw ContractError("no transition below t=1");
  Graph<Scalar> g(false);
  const Var<Scalar> mean = policy.transition_mean(g, std::span<const Trajectory<Scalar>>(&trajectory, 1), step);
  return gaussian_log_density<Scalar>(s.action.values(), mean.value().values(), sigma.value_or(s.sigma));
}

std::vector<double> advantages_from_rewards(std::span<const double> rewards, bool normalize) {
  std::vector<double> a(rewards.begin(), rewards.end());
  if (!normalize || a.empty()) return a;
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  if (*lo == *hi) return std::vector<double>(a.size(), 0.0);
  double mean = 0.0;
  for (double r : a) mean += r;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (double r : a) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / static_cast<double>(a.size()));
  for (double& r : a) r = (r - mean) / sd;
  return a;
}

template <typename Scalar>
GradientEstimate<Scalar> policy_gradient_step(std::span<const Trajectory<Scalar>> trajectories,
                                              GaussianPolicy<Scalar>& policy, AdamW<Scalar>* optimizer,
                                              const PolicyGradientOptions& options) {
  if (trajectories.empty()) throw ContractError("policy gradient of an empty batch");
  const std::size_t steps = trajectories[0].steps.size();
  std::vector<double> rewards;
  for (const auto& t : trajectories) {
    if (!t.reward) throw ContractError("trajectory has no reward");
    if (t.steps.size() != steps) throw ContractError("trajectories differ in length");
    rewards.push_back(*t.reward);
  }
  GradientEstimate<Scalar> out;
  out.advantages = advantages_from_rewards(rewards, options.normalize_advantages);
  const ParameterList<Scalar> params = policy.parameters();
  for (const auto* p : params) out.gradients.push_back(Tensor<Scalar>::zeros(p->value.shape()));

  const double batch = static_cast<double>(trajectories.size());
  const double lo = 1.0 - options.clip_eps, hi = 1.0 + options.clip_eps;
  double ratio_sum = 0.0;
  std::size_t clipped = 0, total = 0;
  for (std::size_t s = 0; s < steps; ++s) {
    Graph<Scalar> g;
    const Var<Scalar> mean = policy.transition_mean(g, trajectories, s);
    const double sigma = trajectories[0].steps[s].sigma;
    std::vector<double> logp_old;
    for (const auto& t : trajectories) {
      if (t.steps[s].sigma != sigma) throw ContractError("trajectories differ in step variance");
      logp_old.push_back(t.steps[s].logprob);
    }
    const Var<Scalar> ratio = gaussian_likelihood_ratio(mean, stack_step(trajectories, s, true), sigma, logp_old);

    // Gradient flows through rho A only where the unclipped term is the minimum.
    Tensor<Scalar> weights({static_cast<Index>(trajectories.size())});
    bool any = false;
    for (std::size_t b = 0; b < trajectories.size(); ++b) {
      const double rho = static_cast<double>(ratio.value()[static_cast<Index>(b)]);
      const double a = out.advantages[b];
      ratio_sum += rho;
      ++total;
      if (rho < lo || rho > hi) ++clipped;
      const double w = rho * a <= std::clamp(rho, lo, hi) * a ? a / batch : 0.0;
      weights[static_cast<Index>(b)] = static_cast<Scalar>(w);
      any = any || w != 0.0;
    }
    if (!any) continue;
    const Var<Scalar> objective = sum(ratio * g.constant(std::move(weights)));
    const Gradients<Scalar> grads = g.backward(objective);
    for (std::size_t i = 0; i < params.size(); ++i) out.gradients[i].array() += grads.of(*params[i]).array();
  }
  out.mean_ratio = total ? ratio_sum / static_cast<double>(total) : 0.0;
  out.clipped_fraction = total ? static_cast<double>(clipped) / static_cast<double>(total) : 0.0;

  if (optimizer) {
    std::vector<Tensor<Scalar>> descent;
    for (const auto& gr : out.gradients) {
      Tensor<Scalar> d = gr;
      d.array() = -d.array();
      descent.push_back(std::move(d));
    }
    if (optimizer->parameters() != params) throw ContractError("optimizer and policy parameters differ");
    optimizer->step(descent);
  }
  return out;
}

template <typename Scalar>
DdpoUpdateStats ddpo_update(Denoiser<Scalar>& model, AdamW<Scalar>& optimizer, std::span<const ShapeMask> conditions,
                            const std::vector<std::vector<int>>& category_ids, const NoiseSchedule& schedule,
                            const RealReference* reference, const DdpoOptions& options, std::uint64_t seed,
                            std::int64_t update) {
  const std::uint64_t rollout_seed = Rng(seed, {kRolloutStream, static_cast<std::uint64_t>(update)}).next_u64();
  std::vector<Trajectory<Scalar>> trajs =
      rollout(model, conditions, category_ids, schedule, options.sampling_steps, Sampler::ancestral, rollout_seed);
  std::vector<Tensor<double>> images;
  for (const auto& t : trajs) images.push_back(latent_to_image(t.terminal()).template cast<double>());

  DdpoUpdateStats stats;
  stats.update = update;
  std::vector<double> rewards;
  if (options.toy_reward) {
    for (const auto& img : images) rewards.push_back(toy_brightness_reward(img));
  } else {
    if (!reference) throw ContractError("the KNN-KL reward needs a real reference");
    const RewardBreakdown r = compute_reward(images, *reference, options.reward);
    rewards = r.rewards;
    stats.kl = r.kl;
  }
  for (std::size_t i = 0; i < trajs.size(); ++i) trajs[i].set_reward(rewards[i]);
  for (double r : rewards) stats.mean_reward += r / static_cast<double>(rewards.size());

  DenoiserPolicy<Scalar> policy(model, schedule, options.sampling_steps);
  const GradientEstimate<Scalar> est =
      policy_gradient_step<Scalar>(trajs, policy, &optimizer, options.gradient);
  stats.mean_ratio = est.mean_ratio;
  stats.clipped_fraction = est.clipped_fraction;
  return stats;
}

#define OFDIFF_INSTANTIATE(S)                                                                                       \
  template class DenoiserPolicy<S>;                                                                                 \
  template std::vector<Trajectory<S>> rollout<S>(Denoiser<S>&, std::span<const ShapeMask>,                          \
                                                 const std::vector<std::vector<int>>&, const NoiseSchedule&, int,   \
                                                 Sampler, std::uint64_t);                                           \
  template double transition_logprob<S>(GaussianPolicy<S>&, const Trajectory<S>&, std::size_t,                      \
                                        std::optional<double>);                                                     \
  template GradientEstimate<S> policy_gradient_step<S>(std::span<const Trajectory<S>>, GaussianPolicy<S>&,          \
                                                       AdamW<S>*, const PolicyGradientOptions&);                    \
  template DdpoUpdateStats ddpo_update<S>(Denoiser<S>&, AdamW<S>&, std::span<const ShapeMask>,                      \
                                          const std::vector<std::vector<int>>&, const NoiseSchedule&,               \
                                          const RealReference*, const DdpoOptions&, std::uint64_t, std::int64_t);

OFDIFF_INSTANTIATE(float)
OFDIFF_INSTANTIATE(double)

}  // namespace ofdiff
