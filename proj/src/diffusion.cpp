#include "ofdiff/diffusion.hpp"

#include "ofdiff/esgm.hpp"
#include "ofdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ofdiff {

namespace {

constexpr std::uint64_t kEpochStream = 0x45504f43;  // "EPOC"
constexpr std::uint64_t kStepStream = 0x53544550;   // "STEP"
constexpr std::uint64_t kSampleStream = 0x53414d50;  // "SAMP"

void check_t(const NoiseSchedule& schedule, int t) {
  if (t < 0 || t > schedule.T) {
    throw ContractError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(schedule.T) + "]");
  }
}

}  // namespace

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
  if (T < 2) throw ContractError("noise schedule needs T >= 2, got " + std::to_string(T));
  (void)kind;
  NoiseSchedule s;
  s.T = T;
  s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
  const double scale = 1000.0 / T;
  const double lo = 1e-4 * scale, hi = 0.02 * scale;
  for (int t = 1; t <= T; ++t) {
    const double b = std::min(lo + (hi - lo) * (t - 1) / (T - 1), 0.999);
    s.betas[static_cast<std::size_t>(t)] = b;
    s.alphas[static_cast<std::size_t>(t)] = 1.0 - b;
    s.alpha_bars[static_cast<std::size_t>(t)] = s.alpha_bars[static_cast<std::size_t>(t) - 1] * (1.0 - b);
  }
  return s;
}

template <typename Scalar>
Tensor<Scalar> q_sample(const Tensor<Scalar>& z0, int t, const Tensor<Scalar>& eps, const NoiseSchedule& schedule) {
  check_t(schedule, t);
  if (z0.shape() != eps.shape()) {
    throw ShapeError("q_sample: z0 " + shape_string(z0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  const double ab = schedule.alpha_bar(t);
  Tensor<Scalar> out(z0.shape());
  out.array() = (std::sqrt(ab) * z0.array().template cast<double>() +
                 std::sqrt(1.0 - ab) * eps.array().template cast<double>())
                    .template cast<Scalar>();
  return out;
}

template <typename Scalar>
Tensor<Scalar> q_sample(const Tensor<Scalar>& z0, std::span<const int> t, const Tensor<Scalar>& eps,
                        const NoiseSchedule& schedule) {
  if (z0.shape() != eps.shape()) {
    throw ShapeError("q_sample: z0 " + shape_string(z0.shape()) + " vs eps " + shape_string(eps.shape()));
  }
  if (z0.rank() < 1 || static_cast<Index>(t.size()) != z0.dim(0)) throw ShapeError("q_sample: one timestep per sample");
  Tensor<Scalar> out(z0.shape());
  const Index per = z0.dim(0) ? z0.size() / z0.dim(0) : 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    check_t(schedule, t[i]);
    const double ab = schedule.alpha_bar(t[i]);
    const Index off = static_cast<Index>(i) * per;
    out.array().segment(off, per) = (std::sqrt(ab) * z0.array().segment(off, per).template cast<double>() +
                                     std::sqrt(1.0 - ab) * eps.array().segment(off, per).template cast<double>())
                                        .template cast<Scalar>();
  }
  return out;
}

std::string to_string(ConsistencyForm form) { return form == ConsistencyForm::shape_to_mix ? "shape_to_mix" : "literal"; }

ConsistencyForm consistency_form_from_string(const std::string& name) {
  if (name == "shape_to_mix") return ConsistencyForm::shape_to_mix;
  if (name == "literal") return ConsistencyForm::literal;
  throw std::invalid_argument("unknown consistency form '" + name + "'");
}

template <typename Scalar>
LossVars<Scalar> assemble_losses(const Var<Scalar>& eps_s, const Var<Scalar>& eps_m, const Var<Scalar>& eps,
                                 bool use_dcloss, ConsistencyForm form) {
  LossVars<Scalar> out;
  out.l_s = mse(eps_s, eps);
  out.l_m = mse(eps_m, eps);
  out.total = out.l_s + out.l_m;
  if (use_dcloss) {
    out.l_c = form == ConsistencyForm::shape_to_mix ? mse(eps_s, stop_gradient(eps_m)) : mse(eps_m, stop_gradient(eps_m));
    out.total = out.total + out.l_c;
  }
  return out;
}

template <typename Scalar>
TrainBatch<Scalar> make_train_batch(std::span<const SceneSample> samples, std::span<const std::size_t> indices,
                                    bool use_esgm) {
  std::vector<Tensor<double>> images;
  std::vector<ShapeMask> masks;
  TrainBatch<Scalar> batch;
  for (std::size_t i : indices) {
    const SceneSample& s = samples[i];
    images.push_back(s.image);
    masks.push_back(use_esgm ? s.composite_mask
                             : layout_box_condition(s.layout, static_cast<int>(s.composite_mask.pixels.rows())));
    batch.category_ids.push_back(s.layout.category_ids);
  }
  batch.images = image_batch<Scalar>(images);
  batch.masks = mask_batch<Scalar>(masks);
  return batch;
}

std::vector<std::size_t> batch_indices(std::size_t dataset_size, int batch_size, std::int64_t n, std::uint64_t seed,
                                       std::int64_t* epoch) {
  if (dataset_size == 0) throw ContractError("training needs a nonempty dataset");
  if (batch_size < 1) throw ContractError("batch size must be >= 1");
  std::vector<std::size_t> out;
  std::int64_t cached_epoch = -1;
  std::vector<std::size_t> perm;
  const std::uint64_t first = static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(batch_size);
  for (int j = 0; j < batch_size; ++j) {
    const std::uint64_t k = first + static_cast<std::uint64_t>(j);
    const auto e = static_cast<std::int64_t>(k / dataset_size);
    if (e != cached_epoch) {
      perm.resize(dataset_size);
      std::iota(perm.begin(), perm.end(), std::size_t{0});
      Rng rng(seed, {kEpochStream, static_cast<std::uint64_t>(e)});
      for (std::size_t i = dataset_size - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
      cached_epoch = e;
    }
    out.push_back(perm[k % dataset_size]);
  }
  if (epoch) *epoch = static_cast<std::int64_t>(first / dataset_size);
  return out;
}

template <typename Scalar>
StepNoise<Scalar> draw_step_noise(const Shape& latent_shape, const NoiseSchedule& schedule, std::uint64_t seed,
                                  std::int64_t epoch, std::int64_t n) {
  Rng rng(seed, {kStepStream, static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(n)});
  StepNoise<Scalar> out;
  const Index batch = latent_shape.at(0);
  for (Index i = 0; i < batch; ++i) out.t.push_back(static_cast<int>(rng.uniform_int(1, schedule.T)));
  out.eps = Tensor<Scalar>(latent_shape);
  for (Scalar& v : out.eps.values()) v = static_cast<Scalar>(rng.normal());
  return out;
}

template <typename Scalar>
StepResult<Scalar> compute_step(Denoiser<Scalar>& model, const TrainBatch<Scalar>& batch, const StepNoise<Scalar>& noise,
                                const TrainState& state, const NoiseSchedule& schedule, const TrainOptions& options) {
  Graph<Scalar> g;
  const Tensor<Scalar> z_t = q_sample(batch.images, noise.t, noise.eps, schedule);
  ConditionBundle<Scalar> bundle = model.encode_conditions(g, &batch.images, batch.masks, batch.category_ids);
  bundle.c_m = mix_conditions(bundle.c_i, bundle.c_l, state.n, state.N);
  std::vector<double> t(noise.t.begin(), noise.t.end());
  const NoisePrediction<Scalar> pred = model.predict_noise(g, g.constant(z_t), t, bundle, Branches::both);
  const LossVars<Scalar> loss =
      assemble_losses(pred.eps_s, pred.eps_m, g.constant(noise.eps), options.use_dcloss, options.consistency);

  StepResult<Scalar> out;
  out.losses.l_s = static_cast<double>(loss.l_s.value().item());
  out.losses.l_m = static_cast<double>(loss.l_m.value().item());
  if (options.use_dcloss) out.losses.l_c = static_cast<double>(loss.l_c.value().item());
  out.losses.total = static_cast<double>(loss.total.value().item());
  out.gradients = g.backward(loss.total);
  return out;
}

template <typename Scalar>
StepResult<Scalar> training_step(Denoiser<Scalar>& model, AdamW<Scalar>& optimizer, const TrainBatch<Scalar>& batch,
                                 TrainState& state, const NoiseSchedule& schedule, const TrainOptions& options) {
  if (state.n >= state.N) {
    throw ScheduleExhausted("schedule exhausted: iteration " + std::to_string(state.n) + " of " + std::to_string(state.N));
  }
  if (batch.images.rank() != 4 || batch.images.dim(0) == 0) throw ContractError("training batch is empty");
  const StepNoise<Scalar> noise = draw_step_noise<Scalar>(batch.images.shape(), schedule, options.seed, state.epoch, state.n);
  StepResult<Scalar> out = compute_step(model, batch, noise, state, schedule, options);
  optimizer.step(out.gradients);
  ++state.n;
  return out;
}

std::string to_string(Sampler sampler) { return sampler == Sampler::ancestral ? "ancestral" : "deterministic"; }

Sampler sampler_from_string(const std::string& name) {
  if (name == "ancestral") return Sampler::ancestral;
  if (name == "deterministic") return Sampler::deterministic;
  throw std::invalid_argument("unknown sampler '" + name + "'");
}

std::vector<int> sampling_timesteps(const NoiseSchedule& schedule, int steps) {
  if (steps < 1 || steps > schedule.T) {
    throw ContractError("sampling steps must lie in [1, T=" + std::to_string(schedule.T) + "], got " +
                        std::to_string(steps));
  }
  std::vector<int> tau(static_cast<std::size_t>(steps) + 1);
  for (int i = 0; i <= steps; ++i) {
    tau[static_cast<std::size_t>(i)] =
        static_cast<int>(std::llround(static_cast<double>(i) * schedule.T / static_cast<double>(steps)));
  }
  return tau;
}

std::vector<ReverseCoefficients> reverse_coefficients(const NoiseSchedule& schedule, int steps) {
  const std::vector<int> tau = sampling_timesteps(schedule, steps);
  std::vector<ReverseCoefficients> out;
  double last_variance = schedule.beta(1);
  // Walk from the end of the chain so the step to t_prev = 0 can reuse the
  // variance of the transition before it.
  for (int i = steps; i >= 1; --i) {
    ReverseCoefficients c;
    c.t = tau[static_cast<std::size_t>(i)];
    c.t_prev = tau[static_cast<std::size_t>(i) - 1];
    const double ab = schedule.alpha_bar(c.t), ab_prev = schedule.alpha_bar(c.t_prev);
    const double beta = 1.0 - ab / ab_prev;
    c.x0_from_xt = 1.0 / std::sqrt(ab);
    c.x0_from_eps = std::sqrt(1.0 - ab) / std::sqrt(ab);
    c.mean_from_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    c.mean_from_xt = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    const double variance = (1.0 - ab_prev) / (1.0 - ab) * beta;
    if (c.t_prev > 0) last_variance = variance;
    c.sigma = std::sqrt(c.t_prev > 0 ? variance : last_variance);
    out.push_back(c);
  }
  return out;
}

template <typename Scalar>
Var<Scalar> posterior_mean(const Var<Scalar>& x_t, const Var<Scalar>& eps_hat, const ReverseCoefficients& c) {
  const Var<Scalar> x0 = clamp(scale(x_t, c.x0_from_xt) - scale(eps_hat, c.x0_from_eps), -1.0, 1.0);
  return scale(x0, c.mean_from_x0) + scale(x_t, c.mean_from_xt);
}

template <typename Scalar>
Tensor<Scalar> ddim_step(const Tensor<Scalar>& x_t, const Tensor<Scalar>& eps_hat, const NoiseSchedule& schedule, int t,
                         int t_prev) {
  check_t(schedule, t);
  check_t(schedule, t_prev);
  const double ab = schedule.alpha_bar(t), ab_prev = schedule.alpha_bar(t_prev);
  const auto xt = x_t.array().template cast<double>();
  const auto eh = eps_hat.array().template cast<double>();
  const Eigen::ArrayXd x0 = ((xt - std::sqrt(1.0 - ab) * eh) / std::sqrt(ab)).cwiseMax(-1.0).cwiseMin(1.0);
  // Re-derive the noise consistent with the clamped x0.
  const Eigen::ArrayXd eps = (xt - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
  Tensor<Scalar> out(x_t.shape());
  out.array() = (std::sqrt(ab_prev) * x0 + std::sqrt(1.0 - ab_prev) * eps).template cast<Scalar>();
  return out;
}

template <typename Scalar>
void Trajectory<Scalar>::set_reward(double r) {
  if (steps.empty()) throw ContractError("cannot reward an empty trajectory");
  reward = r;
  for (ReverseStep<Scalar>& s : steps) s.reward = 0.0;
  steps.back().reward = r;
}

template <typename Scalar>
Tensor<Scalar> latent_to_image(const Tensor<Scalar>& z) {
  Tensor<Scalar> out(z.shape());
  out.array() = ((z.array() + Scalar(1)) * Scalar(0.5)).cwiseMax(Scalar(0)).cwiseMin(Scalar(1));
  return out;
}

template <typename Scalar>
SampleResult<Scalar> sample(SamplingView<Scalar> view, std::span<const ShapeMask> conditions,
                            const std::vector<std::vector<int>>& category_ids, const NoiseSchedule& schedule,
                            const SampleOptions& options, std::uint64_t seed) {
  if (conditions.size() != category_ids.size()) throw ShapeError("one category list per condition required");
  if (options.record_trajectory && options.sampler == Sampler::deterministic) {
    throw ContractError("policy density undefined at sigma=0: trajectories need the ancestral sampler");
  }
  const std::vector<ReverseCoefficients> coeffs = reverse_coefficients(schedule, options.steps);
  const Index n = static_cast<Index>(conditions.size());
  const Index s = view.config().canvas_size;
  const Index per = 3 * s * s;
  const Tensor<Scalar> masks = mask_batch<Scalar>(conditions);

  std::vector<Rng> rngs;
  for (Index i = 0; i < n; ++i) rngs.emplace_back(seed, std::initializer_list<std::uint64_t>{kSampleStream, static_cast<std::uint64_t>(i)});
  Tensor<Scalar> x({n, 3, s, s});
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < per; ++k) x[i * per + k] = static_cast<Scalar>(rngs[static_cast<std::size_t>(i)].normal());
  }

  SampleResult<Scalar> out;
  if (options.record_trajectory) {
    for (Index i = 0; i < n; ++i) {
      Trajectory<Scalar> traj;
      traj.condition = conditions[static_cast<std::size_t>(i)];
      traj.category_ids = category_ids[static_cast<std::size_t>(i)];
      out.trajectories.push_back(std::move(traj));
    }
  }
  auto slice = [&](const Tensor<Scalar>& batch, Index i) {
    return Tensor<Scalar>({3, s, s}, batch.array().segment(i * per, per));
  };

  for (const ReverseCoefficients& c : coeffs) {
    Graph<Scalar> g(false);
    const std::vector<double> t(static_cast<std::size_t>(n), static_cast<double>(c.t));
    const Var<Scalar> xt = g.constant(x);
    const Var<Scalar> eps_hat = view.predict(g, xt, t, masks, category_ids);
    Tensor<Scalar> next;
    if (options.sampler == Sampler::deterministic) {
      next = ddim_step(x, eps_hat.value(), schedule, c.t, c.t_prev);
    } else {
      const Tensor<Scalar>& mean = posterior_mean(xt, eps_hat, c).value();
      next = mean;
      for (Index i = 0; i < n; ++i) {
        Rng& rng = rngs[static_cast<std::size_t>(i)];
        for (Index k = 0; k < per; ++k) next[i * per + k] += static_cast<Scalar>(c.sigma * rng.normal());
      }
      if (options.record_trajectory) {
        for (Index i = 0; i < n; ++i) {
          ReverseStep<Scalar> step;
          step.t = c.t;
          step.t_prev = c.t_prev;
          step.sigma = c.sigma;
          step.state = slice(x, i);
          step.action = slice(next, i);
          step.mean = slice(mean, i);
          step.logprob = gaussian_log_density<Scalar>(step.action.values(), step.mean.values(), c.sigma);
          out.trajectories[static_cast<std::size_t>(i)].steps.push_back(std::move(step));
        }
      }
    }
    x = std::move(next);
  }
  out.final_latent = x;
  out.images = latent_to_image(x);
  return out;
}

#define OFDIFF_INSTANTIATE(S)                                                                                        \
  template Tensor<S> q_sample<S>(const Tensor<S>&, int, const Tensor<S>&, const NoiseSchedule&);                     \
  template Tensor<S> q_sample<S>(const Tensor<S>&, std::span<const int>, const Tensor<S>&, const NoiseSchedule&);    \
  template LossVars<S> assemble_losses<S>(const Var<S>&, const Var<S>&, const Var<S>&, bool, ConsistencyForm);       \
  template TrainBatch<S> make_train_batch<S>(std::span<const SceneSample>, std::span<const std::size_t>, bool);      \
  template StepNoise<S> draw_step_noise<S>(const Shape&, const NoiseSchedule&, std::uint64_t, std::int64_t,          \
                                           std::int64_t);                                                            \
  template StepResult<S> compute_step<S>(Denoiser<S>&, const TrainBatch<S>&, const StepNoise<S>&, const TrainState&, \
                                         const NoiseSchedule&, const TrainOptions&);                                 \
  template StepResult<S> training_step<S>(Denoiser<S>&, AdamW<S>&, const TrainBatch<S>&, TrainState&,                \
                                          const NoiseSchedule&, const TrainOptions&);                                \
  template Var<S> posterior_mean<S>(const Var<S>&, const Var<S>&, const ReverseCoefficients&);                       \
  template Tensor<S> ddim_step<S>(const Tensor<S>&, const Tensor<S>&, const NoiseSchedule&, int, int);               \
  template struct Trajectory<S>;                                                                                     \
  template Tensor<S> latent_to_image<S>(const Tensor<S>&);                                                           \
  template SampleResult<S> sample<S>(SamplingView<S>, std::span<const ShapeMask>,                                   \
                                     const std::vector<std::vector<int>>&, const NoiseSchedule&,                     \
                                     const SampleOptions&, std::uint64_t);

OFDIFF_INSTANTIATE(float)
OFDIFF_INSTANTIATE(double)

}  // namespace ofdiff
