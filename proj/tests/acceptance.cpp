// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
//
//   acceptance            all criteria
//   acceptance 1 4 10     a subset
//
// Exit status is non-zero when any selected criterion fails.

#include "ofdiff/checkpoint.hpp"
#include "ofdiff/commands.hpp"
#include "ofdiff/config.hpp"

#include "gradient_suite.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <sys/wait.h>

using namespace ofdiff;
using namespace ofdiff::testing;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes.
constexpr double kGradTol = 1e-4;
constexpr int kGradShapes = 20;
constexpr int kSeveranceSteps = 10;
constexpr int kForwardDraws = 10000;
constexpr double kForwardTol = 0.02;
constexpr double kLossTol = 1e-12;
constexpr double kMetricTol = 1e-9;
constexpr int kMetricPairs = 20;
constexpr int kEsgmCases = 200;
constexpr double kAreaTol = 0.10;
constexpr int kReinforceSamples = 100000;
constexpr double kSeMultiple = 3.0;
constexpr double kLogprobTol = 1e-9;
constexpr int kDdpoUpdates = 50;

struct Outcome {
  bool pass = true;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double budget_seconds;
  std::function<Outcome()> run;
};

// Collects failures while the body keeps running.
class Checker {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++failed_;
  }
  Outcome done(const std::string& summary) const {
    Outcome o{failed_ == 0, summary};
    for (const std::string& f : failures_) o.detail += "; " + f;
    if (failed_ > static_cast<int>(failures_.size())) o.detail += "; +" + std::to_string(failed_ - failures_.size()) + " more";
    return o;
  }

 private:
  std::vector<std::string> failures_;
  int failed_ = 0;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
}

bool all_zero(const Tensor<double>& t) {
  for (double v : t.values()) {
    if (v != 0.0) return false;
  }
  return true;
}

double max_abs(const Tensor<double>& t) {
  double m = 0;
  for (double v : t.values()) m = std::max(m, std::abs(v));
  return m;
}

SceneSpec toy_spec(int canvas) {
  SceneSpec s;
  s.canvas_size = canvas;
  return s;
}

std::vector<SceneSample> toy_scenes(const SceneSpec& spec, int count, std::uint64_t seed) {
  std::vector<SceneSample> out;
  for (int i = 0; i < count; ++i) out.push_back(render_scene(generate_layout(spec, seed, i), spec, seed));
  return out;
}

// 1 ------------------------------------------------------------------------

Outcome gradient_suite() {
  Checker c;
  std::map<std::string, std::pair<int, double>> worst;
  for (const GradCase& g : primitive_gradient_cases(kGradShapes, 1)) {
    auto& [n, e] = worst[g.primitive];
    ++n;
    e = std::max(e, g.error);
    c.expect(g.error <= kGradTol, g.primitive + " " + g.shape + " err " + fmt(g.error));
  }
  for (const GradCase& g : loss_gradient_cases(kGradShapes, 2)) {
    auto& [n, e] = worst["dual_branch_loss"];
    ++n;
    e = std::max(e, g.error);
    c.expect(g.error <= kGradTol, g.primitive + " " + g.shape + " err " + fmt(g.error));
  }
  double overall = 0;
  int fewest = kGradShapes;
  for (const auto& [name, v] : worst) {
    overall = std::max(overall, v.second);
    fewest = std::min(fewest, v.first);
    c.expect(v.first >= kGradShapes, name + " has " + std::to_string(v.first) + " shapes");
  }
  return c.done(std::to_string(worst.size()) + " checks x >=" + std::to_string(fewest) + " shapes, max rel err " + fmt(overall));
}

// 2 ------------------------------------------------------------------------

Outcome severances() {
  Checker c;
  Rng rng(3);
  DenoiserConfig cfg;
  cfg.canvas_size = 16;
  cfg.base_width = 8;
  cfg.embed_dim = 8;
  cfg.groups = 4;
  Denoiser<double> model(cfg, 3);
  randomize_parameters(model, rng, 0.2);
  AdamW<double> opt(model.parameters(), AdamWConfig{});
  double shape_signal = 1e300, image_signal = 1e300;
  for (int step = 0; step < kSeveranceSteps; ++step) {
    LossFixture f = random_loss_fixture(cfg, rng);
    f.N = kSeveranceSteps;
    f.n = step;
    {
      Graph<double> g;
      const LossVars<double> loss = dual_branch_loss(g, model, f);
      const Gradients<double> grads = g.backward(loss.l_c);
      for (auto* p : model.parameters(ParamGroup::mix_decoder))
        c.expect(all_zero(grads.of(*p)), "step " + std::to_string(step) + " dl_c/d" + p->name);
      double s = 0;
      for (auto* p : model.parameters(ParamGroup::shape_decoder)) s += max_abs(grads.of(*p));
      shape_signal = std::min(shape_signal, s);
    }
    {
      Graph<double> g;
      ConditionBundle<double> bundle = model.encode_conditions(g, &f.images, f.masks, f.cats);
      bundle.c_m = mix_conditions(bundle.c_i, bundle.c_l, f.n, f.N);
      Var<double> acc = sum(mul(bundle.c_m[0], bundle.c_m[0]));
      for (std::size_t l = 1; l < bundle.c_m.size(); ++l) acc = add(acc, sum(mul(bundle.c_m[l], bundle.c_m[l])));
      const Gradients<double> grads = g.backward(acc);
      for (auto* p : model.parameters(ParamGroup::mask_encoder))
        c.expect(all_zero(grads.of(*p)), "step " + std::to_string(step) + " dc_m/d" + p->name);
      double s = 0;
      for (auto* p : model.parameters(ParamGroup::image_encoder)) s += max_abs(grads.of(*p));
      // At n = 0 the mix is all layout and no image gradient is expected.
      if (step > 0) image_signal = std::min(image_signal, s);
    }
    // Advance the model so later audits see trained parameters.
    Graph<double> g;
    opt.step(g.backward(dual_branch_loss(g, model, f).total));
  }
  // The audit must be able to see a gradient where one should flow.
  c.expect(shape_signal > 0, "no l_c gradient reached the shape decoder");
  c.expect(image_signal > 0, "no c_m gradient reached the image encoder");
  return c.done(std::to_string(kSeveranceSteps) + " audited steps, all severed gradients exactly 0");
}

// 3 ------------------------------------------------------------------------

// Per timestep: RMS over pixels of the mean error, relative to RMS(z_t), and
// the pooled variance relative to 1 - abar_t.
Outcome forward_statistics() {
  Checker c;
  const NoiseSchedule s = make_schedule(200);
  Rng rng(4);
  Tensor<double> z0({3, 8, 8});
  for (auto& v : z0.values()) v = rng.uniform(-1.0, 1.0);
  const Index d = z0.size();
  double worst_mean = 0, worst_var = 0;
  for (int t : {1, 20, 50, 100, 200}) {
    const double ab = s.alpha_bar(t);
    Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(d), sq = Eigen::ArrayXd::Zero(d);
    for (int k = 0; k < kForwardDraws; ++k) {
      Tensor<double> eps({3, 8, 8});
      for (auto& v : eps.values()) v = rng.normal();
      const Tensor<double> zt = q_sample(z0, t, eps, s);
      const Eigen::ArrayXd a = Eigen::Map<const Eigen::ArrayXd>(zt.values().data(), d);
      sum += a;
      sq += a * a;
    }
    const Eigen::ArrayXd mean = sum / kForwardDraws;
    const Eigen::ArrayXd var = (sq - kForwardDraws * mean * mean) / (kForwardDraws - 1);
    const Eigen::ArrayXd mu = std::sqrt(ab) * Eigen::Map<const Eigen::ArrayXd>(z0.values().data(), d);
    const double sigma2 = 1 - ab;
    const double scale = std::sqrt((mu * mu).mean() + sigma2);
    const double mean_err = std::sqrt((mean - mu).square().mean()) / scale;
    const double var_err = std::abs(var.mean() / sigma2 - 1);
    worst_mean = std::max(worst_mean, mean_err);
    worst_var = std::max(worst_var, var_err);
    c.expect(mean_err <= kForwardTol, "t=" + std::to_string(t) + " mean err " + fmt(mean_err));
    c.expect(var_err <= kForwardTol, "t=" + std::to_string(t) + " var err " + fmt(var_err));
  }
  return c.done("5 timesteps x " + std::to_string(kForwardDraws) + " draws, mean err " + fmt(worst_mean) +
                ", var err " + fmt(worst_var));
}

// 4 ------------------------------------------------------------------------

Outcome loss_algebra() {
  Checker c;
  SceneSpec spec = toy_spec(16);
  spec.num_objects = {1, 2};
  const std::vector<SceneSample> scenes = toy_scenes(spec, 8, 5);
  DenoiserConfig cfg;
  cfg.canvas_size = 16;
  cfg.base_width = 8;
  cfg.embed_dim = 8;
  cfg.groups = 4;
  const NoiseSchedule schedule = make_schedule(200);
  double worst = 0;
  int steps = 0;
  for (bool dc : {true, false}) {
    for (ConsistencyForm form : {ConsistencyForm::shape_to_mix, ConsistencyForm::literal}) {
      Denoiser<double> model(cfg, 5);
      AdamW<double> opt(model.parameters(), AdamWConfig{});
      TrainOptions o;
      o.batch_size = 4;
      o.iterations = 10;
      o.use_dcloss = dc;
      o.consistency = form;
      o.seed = 5;
      TrainState state;
      state.N = o.iterations;
      while (state.n < state.N) {
        const auto idx = batch_indices(scenes.size(), o.batch_size, state.n, o.seed);
        const TrainBatch<double> batch = make_train_batch<double>(scenes, idx, true);
        const StepResult<double> r = training_step(model, opt, batch, state, schedule, o);
        const LossBreakdown& l = r.losses;
        c.expect(l.l_c.has_value() == dc, "l_c presence");
        const double err = std::abs(l.total - (l.l_s + l.l_m + l.l_c.value_or(0.0)));
        worst = std::max(worst, err);
        c.expect(err <= kLossTol, "step " + std::to_string(state.n) + " |total - sum| " + fmt(err));
        ++steps;
      }
    }
  }
  // Predictions stubbed to the true noise.
  Rng rng(6);
  for (ConsistencyForm form : {ConsistencyForm::shape_to_mix, ConsistencyForm::literal}) {
    Graph<double> g;
    const Var<double> eps = g.constant(random_tensor<double>({2, 3, 16, 16}, rng));
    const LossVars<double> l = assemble_losses(eps, eps, eps, true, form);
    c.expect(l.total.value()[0] == 0.0, "stubbed total " + fmt(l.total.value()[0]));
  }
  return c.done(std::to_string(steps) + " steps, max |total - (l_s + l_m + l_c)| " + fmt(worst) + ", stubbed total 0");
}

// 5 ------------------------------------------------------------------------

Outcome metric_oracles() {
  Checker c;
  Rng rng(2024);
  double worst = 0;
  auto close = [&](double a, double b, const std::string& what) {
    worst = std::max(worst, std::abs(a - b));
    c.expect(std::abs(a - b) <= kMetricTol, what + " " + fmt(a) + " vs " + fmt(b));
  };
  for (int trial = 0; trial < kMetricPairs; ++trial) {
    const EdgeMap a = random_edges(rng, 16, 16, 0.1 + 0.01 * trial);
    const EdgeMap b = random_edges(rng, 16, 16, 0.15);
    const double inter = double(((a != 0) && (b != 0)).count());
    const double uni = double(((a != 0) || (b != 0)).count());
    const Overlap o = edge_overlap(a, b);
    close(o.iou, inter / uni, "IoU");
    close(o.dice, 2 * inter / double((a != 0).count() + (b != 0).count()), "Dice");
    c.expect(std::abs(o.dice - 2 * o.iou / (1 + o.iou)) <= 1e-12, "Dice-IoU identity");
    close(chamfer(a, b), brute_chamfer(a, b), "CD");
    close(hausdorff(a, b), brute_hausdorff(a, b), "HD");
    c.expect(chamfer(a, b) <= hausdorff(a, b), "CD <= HD");
    close(ssim(a, b), brute_ssim(a.cast<double>(), b.cast<double>()), "SSIM");

    // Translated pair: both maps shifted together inside a larger canvas.
    EdgeMap pa = EdgeMap::Zero(40, 40), pb = EdgeMap::Zero(40, 40), sa = pa, sb = pb;
    pa.block(4, 4, 16, 16) = a;
    pb.block(4, 4, 16, 16) = b;
    const int dy = static_cast<int>(rng.uniform_int(1, 15)), dx = static_cast<int>(rng.uniform_int(1, 15));
    sa.block(4 + dy, 4 + dx, 16, 16) = a;
    sb.block(4 + dy, 4 + dx, 16, 16) = b;
    const Overlap po = edge_overlap(pa, pb), so = edge_overlap(sa, sb);
    c.expect(std::abs(po.iou - so.iou) <= 1e-12 && std::abs(po.dice - so.dice) <= 1e-12, "translated IoU/Dice");
    c.expect(std::abs(chamfer(pa, pb) - chamfer(sa, sb)) <= 1e-12, "translated CD");
    c.expect(std::abs(hausdorff(pa, pb) - hausdorff(sa, sb)) <= 1e-12, "translated HD");
  }
  return c.done(std::to_string(kMetricPairs) + " random 16x16 pairs, max oracle gap " + fmt(worst));
}

// 6 ------------------------------------------------------------------------

Outcome canny_contract() {
  Checker c;
  for (double v : {0.0, 0.3, 1.0}) {
    c.expect((canny_edges(Tensor<double>({3, 64, 64}, v)) != 0).count() == 0, "constant " + fmt(v) + " has edges");
  }
  int steps = 0;
  for (int size : {8, 16, 32, 64}) {
    for (bool vertical : {true, false}) {
      Eigen::ArrayXXd g = Eigen::ArrayXXd::Zero(size, size);
      if (vertical) {
        g.rightCols(size / 2) = 1.0;
      } else {
        g.bottomRows(size / 2) = 1.0;
      }
      const EdgeMap e = canny_edges(gray_image(g));
      c.expect(components8(e) == 1, "step " + std::to_string(size) + " has " + std::to_string(components8(e)) + " components");
      ++steps;
    }
  }
  Rng rng(5);
  int images = 0;
  for (double scale : {0.01, 0.1, 1.0, 7.0, 255.0}) {
    for (int k = 0; k < 4; ++k) {
      Tensor<double> img({3, 32, 32});
      for (auto& v : img.values()) v = scale * (rng.uniform() - 0.3);
      const EdgeMap e = canny_edges(img);
      c.expect(((e == 0) || (e == 1)).all(), "non-binary output at scale " + fmt(scale));
      ++images;
    }
  }
  return c.done("3 constant, " + std::to_string(steps) + " step, " + std::to_string(images) + " random images");
}

// 7 ------------------------------------------------------------------------

Outcome esgm_geometry() {
  Checker c;
  Rng rng(21);
  double worst = 0;
  for (int trial = 0; trial < kEsgmCases; ++trial) {
    const InstancePatchMask p = random_patch(rng);
    const OrientedBox& src = p.source_box;
    // Box with swapped sides and the same sub-pixel center: a pure quarter turn.
    const OrientedBox same{32.0 + (src.cx - std::floor(src.cx)), 32.0 + (src.cy - std::floor(src.cy)), src.height,
                           src.width, src.angle};
    const ShapeMask quarter = augment_shape(p, std::numbers::pi / 2, same, 64);
    c.expect(quarter.count() == p.count(), "case " + std::to_string(trial) + " quarter turn " +
                                               std::to_string(quarter.count()) + " vs " + std::to_string(p.count()));

    const double angle = rng.uniform(0.0, 2 * std::numbers::pi);
    const double tw = rng.uniform(16.0, 40.0), th = rng.uniform(16.0, 40.0);
    const OrientedBox tb{32.0, 32.0, tw, th, rng.uniform(-1.5, 1.5)};
    const ShapeMask out = augment_shape(p, angle, tb, 64);
    const double rel = src.angle + angle - tb.angle;
    const double cs = std::abs(std::cos(rel)), sn = std::abs(std::sin(rel));
    const double s = std::min(tw / (cs * src.width + sn * src.height), th / (sn * src.width + cs * src.height));
    const double err = std::abs(out.count() / (p.count() * s * s) - 1.0);
    worst = std::max(worst, err);
    c.expect(err <= kAreaTol, "case " + std::to_string(trial) + " area err " + fmt(err));
  }

  const SceneSpec spec = toy_spec(32);
  int scenes = 0;
  for (const SceneSample& smp : toy_scenes(spec, 50, 7)) {
    const ShapeMask parity = training_shape_condition(smp);
    c.expect((parity.pixels == smp.composite_mask.pixels).all(), smp.layout.scene_id + " parity");
    ++scenes;
  }
  return c.done(std::to_string(kEsgmCases) + " cases, quarter turns exact, max area err " + fmt(worst) + ", " +
                std::to_string(scenes) + " composites reproduced");
}

// 8 ------------------------------------------------------------------------

Outcome ddpo_estimator() {
  Checker c;
  const Index d = 2;
  const double sigma = 0.5;
  Parameter<double> theta{"theta", Tensor<double>({d}, 0.0)};
  theta.value[0] = 0.3;
  theta.value[1] = -0.2;
  Eigen::VectorXd target(2);
  target << 0.8, 0.1;
  LinearPolicy policy(theta);

  Rng rng(6);
  const int batch = 4000;
  std::vector<Trajectory<double>> trajs;
  for (int b = 0; b < batch; ++b) {
    trajs.push_back(one_step(theta.value, sigma, rng));
    trajs.back().set_reward(quadratic_reward(trajs.back().terminal(), target));
  }
  PolicyGradientOptions o;
  o.normalize_advantages = false;
  const auto est = policy_gradient_step<double>(trajs, policy, nullptr, o);

  Rng mc(7);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(d), sq = Eigen::VectorXd::Zero(d);
  for (int i = 0; i < kReinforceSamples; ++i) {
    Tensor<double> a = theta.value;
    for (auto& v : a.values()) v += sigma * mc.normal();
    const double r = quadratic_reward(a, target);
    for (Index j = 0; j < d; ++j) {
      const double term = r * (a[j] - theta.value[j]) / (sigma * sigma);
      mean[j] += term / kReinforceSamples;
      sq[j] += term * term / kReinforceSamples;
    }
  }
  Eigen::VectorXd est_sq = Eigen::VectorXd::Zero(d);
  for (const auto& tr : trajs) {
    for (Index j = 0; j < d; ++j) {
      const double term = *tr.reward * (tr.terminal()[j] - theta.value[j]) / (sigma * sigma);
      est_sq[j] += term * term / batch;
    }
  }
  double worst_z = 0;
  for (Index j = 0; j < d; ++j) {
    const double g = est.gradients[0][j];
    const double se = std::sqrt((sq[j] - mean[j] * mean[j]) / kReinforceSamples + (est_sq[j] - g * g) / batch);
    worst_z = std::max(worst_z, std::abs(g - mean[j]) / se);
    c.expect(std::abs(g - mean[j]) <= kSeMultiple * se, "coordinate " + std::to_string(j) + " " + fmt(g) + " vs " + fmt(mean[j]));
  }

  // On-policy ratios and equal rewards on the denoiser policy.
  DenoiserConfig cfg;
  cfg.canvas_size = 16;
  cfg.base_width = 8;
  cfg.embed_dim = 8;
  cfg.groups = 4;
  Denoiser<double> model(cfg, 5);
  Rng init(5);
  randomize_parameters(model, init, 0.1);
  const NoiseSchedule s = make_schedule(40);
  std::vector<ShapeMask> masks;
  std::vector<std::vector<int>> cats;
  for (int i = 0; i < 4; ++i) {
    ShapeMask m{Raster::Zero(16, 16)};
    m.pixels.block(2 + i, 3, 6, 5 + i % 3).setOnes();
    masks.push_back(m);
    cats.push_back({i % 3});
  }
  auto rolled = rollout(model, std::span<const ShapeMask>(masks), cats, s, 3, Sampler::ancestral, 7);
  DenoiserPolicy<double> dpolicy(model, s, 3);
  int ratios = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    Graph<double> g(false);
    const Var<double> m = dpolicy.transition_mean(g, rolled, k);
    std::vector<double> old;
    Tensor<double> actions({4, 3, 16, 16});
    for (std::size_t b = 0; b < 4; ++b) {
      old.push_back(rolled[b].steps[k].logprob);
      actions.array().segment(static_cast<Index>(b) * 768, 768) = rolled[b].steps[k].action.array();
    }
    const Var<double> ratio = gaussian_likelihood_ratio(m, actions, rolled[0].steps[k].sigma, old);
    for (Index b = 0; b < 4; ++b) {
      c.expect(ratio.value()[b] == 1.0, "ratio " + fmt(ratio.value()[b]));
      ++ratios;
    }
  }
  for (auto& t : rolled) t.set_reward(0.7);
  const auto flat = policy_gradient_step<double>(rolled, dpolicy, nullptr);
  for (const auto& g : flat.gradients) c.expect((g.array() == 0.0).all(), "equal rewards gave a non-zero gradient");
  return c.done("estimator within " + fmt(worst_z) + " SE of " + std::to_string(kReinforceSamples) + "-sample REINFORCE, " +
                std::to_string(ratios) + " ratios exactly 1, equal-reward update 0");
}

// 9 ------------------------------------------------------------------------

Outcome trajectory_contracts() {
  Checker c;
  DenoiserConfig cfg;
  cfg.canvas_size = 16;
  cfg.base_width = 8;
  cfg.embed_dim = 8;
  cfg.groups = 4;
  Denoiser<double> model(cfg, 9);
  Rng init(9);
  randomize_parameters(model, init, 0.1);
  const NoiseSchedule s = make_schedule(200);
  SceneSpec spec = toy_spec(16);
  spec.num_objects = {1, 2};
  std::vector<ShapeMask> masks;
  std::vector<std::vector<int>> cats;
  for (const SceneSample& smp : toy_scenes(spec, 4, 9)) {
    masks.push_back(smp.composite_mask);
    cats.push_back(smp.layout.category_ids);
  }
  auto trajs = rollout(model, std::span<const ShapeMask>(masks), cats, s, 6, Sampler::ancestral, 9);
  double worst = 0;
  int checked = 0;
  for (auto& tr : trajs) {
    for (const ReverseStep<double>& st : tr.steps) {
      // log N(a; m, s^2 I) written out directly.
      double q = 0;
      for (Index i = 0; i < st.action.size(); ++i) q += (st.action[i] - st.mean[i]) * (st.action[i] - st.mean[i]);
      const double dim = static_cast<double>(st.action.size());
      const double expected = -q / (2 * st.sigma * st.sigma) - dim / 2 * std::log(2 * std::numbers::pi * st.sigma * st.sigma);
      worst = std::max(worst, std::abs(st.logprob - expected));
      c.expect(std::abs(st.logprob - expected) <= kLogprobTol, "logprob gap " + fmt(st.logprob - expected));
      ++checked;
    }
    tr.set_reward(-0.5);
    for (std::size_t k = 0; k + 1 < tr.steps.size(); ++k) c.expect(tr.steps[k].reward == 0.0, "non-terminal reward");
    c.expect(tr.steps.back().reward == -0.5 && tr.steps.back().t_prev == 0, "terminal reward");
  }

  Rng rng(10);
  std::vector<Tensor<double>> varied;
  for (int i = 0; i < 6; ++i) {
    Tensor<double> t({3, 16, 16});
    for (auto& v : t.values()) v = rng.uniform();
    varied.push_back(t);
  }
  const RealReference ref = make_reference(varied);
  const std::vector<Tensor<double>> same(6, varied[0]);
  RewardConfig rc;
  for (double k : compute_reward(same, ref, rc).knn) c.expect(k == 0.0, "identical-batch knn " + fmt(k));
  const double kl = compute_reward(varied, ref, rc).kl;
  c.expect(kl == 0.0, "matched KL " + fmt(kl));
  const GaussianFit a{Eigen::VectorXd::Constant(1, 0.0), Eigen::VectorXd::Constant(1, 1.0), 0};
  const GaussianFit b{Eigen::VectorXd::Constant(1, 1.0), Eigen::VectorXd::Constant(1, 1.0), 0};
  const double kl1 = diagonal_gaussian_kl(a, b);
  c.expect(std::abs(kl1 - 0.5) <= 1e-15, "1-D KL " + fmt(kl1));
  return c.done(std::to_string(checked) + " logprobs within " + fmt(worst) + ", terminal-only reward, KNN 0, KL 0, 1-D KL " + fmt(kl1));
}

// 10 -----------------------------------------------------------------------

const char* kToyConfig = R"(seed = 11
[dataset]
canvas_size = 32
train_count = 500
val_count = 100
[model]
base_width = 16
embed_dim = 32
groups = 4
[train]
batch_size = 8
iterations = 3000
learning_rate = 0.001
[sample]
steps = 50
rotation = box_aligned
batch_size = 25
[eval]
reference = mask
)";

Outcome esgm_effect() {
  Checker c;
  TempDir dir("accept10");
  const RunConfig base = parse_config(kToyConfig, "toy");
  cmd_gen_data(base, dir / "data");
  const fs::path layouts = dir / "data" / "val" / "layouts.jsonl";
  struct Result {
    double iou = 0;
    PermutationTest mmd;
  };
  auto run = [&](const std::string& tag, bool esgm, bool dcloss) {
    RunConfig cfg = base;
    cfg.train.use_esgm = esgm;
    cfg.train.use_dcloss = dcloss;
    const TrainResult tr = cmd_train(cfg, dir / "data", dir / ("train_" + tag));
    SampleCommandOptions so;
    so.layouts_file = layouts;
    cmd_sample(cfg, tr.checkpoint_path, dir / ("sample_" + tag), so);
    const EvalCommandResult e = cmd_eval(cfg, dir / ("sample_" + tag), dir / "data" / "val", layouts, dir / ("eval_" + tag));
    Result r;
    if (e.report.overall) r.iou = e.report.overall->iou;
    if (e.mmd) r.mmd = *e.mmd;
    c.expect(e.report.overall.has_value() && e.mmd.has_value(), tag + " produced no report");
    return r;
  };
  const Result full = run("full", true, true);
  const Result box = run("box", false, true);
  const Result nodc = run("nodc", true, false);
  c.expect(full.iou > box.iou, "edge-IoU " + fmt(full.iou) + " <= box-only " + fmt(box.iou));
  c.expect(full.mmd.mmd2 <= nodc.mmd.mmd2 + full.mmd.standard_error,
           "MMD2 " + fmt(full.mmd.mmd2) + " > DCLoss-off " + fmt(nodc.mmd.mmd2) + " + se " + fmt(full.mmd.standard_error));
  return c.done("edge-IoU ESGM+DCLoss " + fmt(full.iou) + " vs box-only " + fmt(box.iou) + "; MMD2 DCLoss-on " +
                fmt(full.mmd.mmd2) + " (se " + fmt(full.mmd.standard_error) + ") vs off " + fmt(nodc.mmd.mmd2));
}

// 11 -----------------------------------------------------------------------

Outcome ddpo_effect() {
  Checker c;
  TempDir dir("accept11");
  RunConfig cfg = parse_config(kToyConfig, "toy");
  cfg.dataset.train_count = 100;
  cfg.dataset.val_count = 0;
  cfg.train.iterations = 200;
  cmd_gen_data(cfg, dir / "data");
  const TrainResult tr = cmd_train(cfg, dir / "data", dir / "train");
  cfg.ddpo.updates = kDdpoUpdates;
  cfg.ddpo.toy_reward = true;
  std::string summary;
  for (std::uint64_t seed : {1, 2, 3}) {
    RunConfig run = cfg;
    run.seed = seed;
    const DdpoCommandResult r = cmd_ddpo(run, tr.checkpoint_path, dir / "data", dir / ("ddpo_" + std::to_string(seed)));
    const double first = r.updates.front().mean_reward, last = r.updates.back().mean_reward;
    c.expect(r.updates.size() == static_cast<std::size_t>(kDdpoUpdates), "update count");
    c.expect(last > first, "seed " + std::to_string(seed) + " " + fmt(first) + " -> " + fmt(last));
    summary += (summary.empty() ? "" : ", ") + std::string("seed ") + std::to_string(seed) + " " + fmt(first) + " -> " + fmt(last);
  }
  return c.done("mean reward first -> last of " + std::to_string(kDdpoUpdates) + " updates: " + summary);
}

// 12 -----------------------------------------------------------------------

const char* kPipelineConfig = R"(seed = 12
[dataset]
canvas_size = 32
train_count = 60
val_count = 20
[model]
base_width = 8
embed_dim = 16
groups = 4
[train]
batch_size = 8
iterations = 60
checkpoint_every = 20
[sample]
steps = 10
batch_size = 10
[ddpo]
updates = 3
batch_size = 4
sampling_steps = 5
k = 2
reference_count = 20
[eval]
mmd_permutations = 50
)";

std::map<std::string, std::string> tree_digests(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).string();
    if (e.path().filename() == "run_manifest.jsonl") {
      // Wall-clock stamps are the only permitted difference.
      std::string canonical;
      std::ifstream in(e.path());
      for (std::string line; std::getline(in, line);) {
        auto j = nlohmann::json::parse(line);
        j.erase("started");
        j.erase("finished");
        canonical += j.dump() + "\n";
      }
      out[rel] = sha256_hex(canonical);
    } else {
      out[rel] = sha256_file(e.path());
    }
  }
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = "OFDIFF_LOG=error '" + std::string(OFDIFF_CLI_PATH) + "' " + args;
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome determinism() {
  Checker c;
  TempDir dir("accept12");
  write_text(dir / "pipeline.cfg", kPipelineConfig);
  const std::string cfg = "--config '" + (dir / "pipeline.cfg").string() + "' --deterministic ";
  for (const std::string run : {"a", "b"}) {
    const fs::path r = dir / run;
    const std::string d = "'" + r.string() + "/";
    const std::vector<std::string> steps = {
        "gen-data " + cfg + "--out " + d + "data'",
        "train " + d + "data' " + cfg + "--out " + d + "train'",
        "sample " + d + "train/checkpoint.ckpt' " + d + "data/val/layouts.jsonl' " + cfg + "--out " + d + "sample'",
        "ddpo " + d + "train/checkpoint.ckpt' " + d + "data' " + cfg + "--out " + d + "ddpo'",
        "sample " + d + "ddpo/checkpoint.ckpt' " + d + "data/val/layouts.jsonl' " + cfg + "--out " + d + "sample_ddpo'",
        "eval " + d + "sample' " + d + "data/val' " + d + "data/val/layouts.jsonl' " + cfg + "--out " + d + "eval' > /dev/null",
    };
    for (const std::string& s : steps) c.expect(run_cli(s) == 0, "run " + run + " failed: " + s.substr(0, s.find(' ')));
  }
  const auto a = tree_digests(dir / "a"), b = tree_digests(dir / "b");
  c.expect(a.size() == b.size(), "file sets differ");
  int same = 0;
  for (const auto& [rel, digest] : a) {
    const auto it = b.find(rel);
    c.expect(it != b.end() && it->second == digest, rel + " differs");
    if (it != b.end() && it->second == digest) ++same;
  }
  for (const char* must : {"data/train/manifest.json", "train/checkpoint.ckpt", "sample/manifest.json", "ddpo/checkpoint.ckpt",
                           "eval/report.json"}) {
    c.expect(a.count(must) == 1, std::string("missing ") + must);
  }

  // Checkpoint round trip: decode, encode, save, reload into a fresh model.
  const fs::path ck = dir / "a" / "train" / "checkpoint.ckpt";
  const std::vector<std::uint8_t> bytes = read_bytes(ck);
  const Checkpoint decoded = decode_checkpoint(bytes);
  c.expect(encode_checkpoint(decoded) == bytes, "decode/encode not byte-identical");
  const RunConfig trained = checkpoint_config(decoded);
  Denoiser<float> model(trained.denoiser_config(), trained.seed + 1);
  restore_parameters(decoded, model);
  AdamW<float> opt(model.parameters(), trained.train_optimizer());
  restore_optimizer(decoded, model, opt);
  const Checkpoint again = make_checkpoint(model, &opt, checkpoint_train_state(decoded), trained);
  save_checkpoint(dir / "again.ckpt", again);
  c.expect(read_bytes(dir / "again.ckpt") == bytes, "restore/save not byte-identical");
  return c.done(std::to_string(same) + "/" + std::to_string(a.size()) + " files bit-identical across two runs, checkpoint round trip exact");
}

std::vector<Criterion> criteria() {
  return {
      {1, "gradient suite", 120, gradient_suite},
      {2, "stop-gradient severances", 60, severances},
      {3, "forward-process statistics", 60, forward_statistics},
      {4, "loss algebra", 60, loss_algebra},
      {5, "metric oracle equivalence", 60, metric_oracles},
      {6, "Canny contract", 60, canny_contract},
      {7, "ESGM geometry", 120, esgm_geometry},
      {8, "DDPO estimator oracle", 300, ddpo_estimator},
      {9, "trajectory and reward contracts", 60, trajectory_contracts},
      {10, "directional ESGM and DCLoss effect", 1800, esgm_effect},
      {11, "directional DDPO effect", 600, ddpo_effect},
      {12, "determinism and persistence", 600, determinism},
  };
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  bool all_pass = true;
  for (const Criterion& k : criteria()) {
    if (!wanted.empty() && !wanted.count(k.id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = k.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (secs > k.budget_seconds) {
      o.pass = false;
      o.detail += "; over budget " + fmt(k.budget_seconds) + " s";
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << k.id << ". " << k.name << ": " << o.detail << " [" << fmt(secs)
              << " s]" << std::endl;
  }
  return all_pass ? 0 : 1;
}
