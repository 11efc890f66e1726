#include "ofdiff/gradcheck.hpp"

#include "ofdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ofdiff {

namespace {

std::vector<Index> probe_coordinates(Index size, const GradCheckOptions& options, std::uint64_t stream) {
  std::vector<Index> all(static_cast<std::size_t>(size));
  std::iota(all.begin(), all.end(), Index{0});
  if (size <= options.max_coordinates) return all;
  Rng rng(options.seed, {stream});
  for (Index i = 0; i < options.max_coordinates; ++i) {
    const auto j = i + static_cast<Index>(rng.uniform_int(static_cast<std::uint64_t>(size - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(options.max_coordinates));
  return all;
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

void check_step(const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw ContractError("finite_diff_check: step must be positive");
}

}  // namespace

double finite_diff_check(const ScalarFunction& f, const Tensor<double>& x, const GradCheckOptions& options) {
  check_step(options);
  Graph<double> g;
  g.record_stop_gradients();
  const Var<double> xv = g.input(x);
  const Var<double> loss = f(g, xv);
  const Tensor<double> analytic = g.backward(loss).of(xv);
  const std::vector<Tensor<double>> frozen = g.recorded_stop_gradients();

  auto evaluate = [&](const Tensor<double>& at) {
    Graph<double> probe(false);
    probe.replay_stop_gradients(&frozen);
    return f(probe, probe.input(at)).value().item();
  };

  double worst = 0.0;
  for (Index i : probe_coordinates(x.size(), options, 0)) {
    Tensor<double> xp = x, xm = x;
    xp[i] += options.step;
    xm[i] -= options.step;
    const double numeric = (evaluate(xp) - evaluate(xm)) / (2.0 * options.step);
    worst = std::max(worst, relative_error(analytic[i], numeric, options.floor));
  }
  return worst;
}

double finite_diff_check(const LossFunction& loss, const ParameterList<double>& params,
                         const GradCheckOptions& options) {
  check_step(options);
  Graph<double> g;
  g.record_stop_gradients();
  const Var<double> l = loss(g);
  const Gradients<double> grads = g.backward(l);
  const std::vector<Tensor<double>> frozen = g.recorded_stop_gradients();

  auto evaluate = [&]() {
    Graph<double> probe(false);
    probe.replay_stop_gradients(&frozen);
    return loss(probe).value().item();
  };

  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<double>& p = *params[pi];
    const Tensor<double> analytic = grads.of(p);
    for (Index i : probe_coordinates(p.value.size(), options, pi + 1)) {
      const double original = p.value[i];
      p.value[i] = original + options.step;
      const double up = evaluate();
      p.value[i] = original - options.step;
      const double down = evaluate();
      p.value[i] = original;
      const double numeric = (up - down) / (2.0 * options.step);
      worst = std::max(worst, relative_error(analytic[i], numeric, options.floor));
    }
  }
  return worst;
}

}  // namespace ofdiff
