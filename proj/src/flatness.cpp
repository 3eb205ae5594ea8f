#include "flatmin/flatness.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "flatmin/errors.hpp"

namespace flatmin {

namespace {

void check_budget(const AscentBudget& budget, double rho) {
  if (budget.n_random < 1) throw BudgetError("flatness estimate needs at least one random start");
  if (budget.n_ascent_steps < 0) throw BudgetError("negative ascent step count");
  if (!(budget.ascent_step > 0.0)) throw BudgetError("ascent step must be positive");
  if (!(rho >= 0.0) || !std::isfinite(rho)) throw ConfigError("rho must be nonnegative");
}

ParamVector uniform_in_ball(Eigen::Index dim, double radius, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  ParamVector v(dim);
  double norm = 0.0;
  while (norm == 0.0) {
    for (Eigen::Index i = 0; i < dim; ++i) v[i] = normal(rng);
    norm = v.norm();
  }
  const double r = radius * std::pow(unit(rng), 1.0 / static_cast<double>(dim));
  return v * (r / norm);
}

ParamVector project(const ParamVector& center, ParamVector point, double radius) {
  ParamVector offset = point - center;
  const double n = offset.norm();
  if (n > radius) point = center + offset * (radius / n);
  return point;
}

ParamVector rademacher(Eigen::Index dim, std::mt19937_64& rng) {
  std::bernoulli_distribution coin(0.5);
  ParamVector v(dim);
  for (Eigen::Index i = 0; i < dim; ++i) v[i] = coin(rng) ? 1.0 : -1.0;
  return v;
}

// Multi-restart projected ascent shared by both flatness measures. `score`
// maps a point to (value, ascent direction); a zero direction ends a restart.
template <typename Score>
double ball_maximum(const ParamVector& theta, double rho, const AscentBudget& budget, std::uint64_t seed,
                    Score&& score) {
  double best = -std::numeric_limits<double>::infinity();
  const double step = budget.ascent_step * rho;
  for (int r = 0; r < budget.n_random; ++r) {
    auto rng = make_rng(seed, {static_cast<std::uint64_t>(r)});
    ParamVector point = theta + uniform_in_ball(theta.size(), rho, rng);
    for (int s = 0;; ++s) {
      auto [value, direction] = score(point);
      best = std::max(best, value);
      if (s == budget.n_ascent_steps) break;
      const double norm = direction.norm();
      if (!(norm > 0.0)) break;
      point = project(theta, point + (step / norm) * direction, rho);
    }
  }
  return best;
}

}  // namespace

double zeroth_order_flatness(const Objective& obj, const ParamVector& theta, double rho, const Batch& batch,
                             const AscentBudget& budget, std::uint64_t seed, double) {
  check_budget(budget, rho);
  const double base = obj.loss(theta, batch);
  if (rho == 0.0) return 0.0;
  const double best = ball_maximum(theta, rho, budget, seed, [&](const ParamVector& p) {
    auto lg = obj.loss_and_grad(p, batch);
    return std::pair<double, ParamVector>{lg.loss - base, std::move(lg.grad)};
  });
  return std::max(0.0, best);
}

double first_order_flatness(const Objective& obj, const ParamVector& theta, double rho, const Batch& batch,
                            const AscentBudget& budget, std::uint64_t seed, double fd_step) {
  check_budget(budget, rho);
  if (static_cast<std::size_t>(theta.size()) != obj.dim()) {
    throw DimensionError(fmt::format("theta has {} entries, objective has {}", theta.size(), obj.dim()));
  }
  if (rho == 0.0) return 0.0;
  const double best = ball_maximum(theta, rho, budget, seed, [&](const ParamVector& p) {
    ParamVector g = obj.grad(p, batch);
    const double norm = g.norm();
    if (!(norm > 0.0)) return std::pair<double, ParamVector>{0.0, ParamVector::Zero(p.size())};
    // hvp_fd along u = g/||g||, reusing g as the base gradient.
    const double s = fd_step;
    ParamVector direction = (obj.grad(p + (s / norm) * g, batch) - g) / s;
    return std::pair<double, ParamVector>{norm, std::move(direction)};
  });
  return rho * best;
}

double fad_regularizer(double r0, double r1, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  return alpha * r0 + (1.0 - alpha) * r1;
}

double total_objective(const Objective& obj, const ParamVector& theta, double rho, double alpha, double beta,
                       const Batch& batch, const AscentBudget& budget, std::uint64_t seed) {
  if (!(beta >= 0.0)) throw ConfigError("beta must be nonnegative");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  const double loss = obj.loss(theta, batch);
  if (beta == 0.0 || rho == 0.0) {
    check_budget(budget, rho);
    return loss;
  }
  const double r0 = zeroth_order_flatness(obj, theta, rho, batch, budget, seed);
  const double r1 = first_order_flatness(obj, theta, rho, batch, budget, seed);
  return loss + beta * fad_regularizer(r0, r1, alpha);
}

double lambda_max_from_fad(double r_fad, double rho, double alpha) {
  if (!(rho > 0.0)) throw ConfigError("the flatness/eigenvalue identity needs rho > 0");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  return r_fad / (rho * rho * (1.0 - alpha / 2.0));
}

EigenEstimate power_iteration(const Objective& obj, const ParamVector& theta, const Batch& batch,
                              const PowerIterationOptions& options, std::uint64_t seed) {
  if (options.k < 1) throw ConfigError("power iteration needs k >= 1");
  if (!(options.tol > 0.0)) throw ConfigError("power iteration tolerance must be positive");
  if (options.max_iter < 1) throw ConfigError("power iteration needs max_iter >= 1");
  const auto dim = static_cast<Eigen::Index>(obj.dim());
  if (options.k > dim) throw ConfigError(fmt::format("cannot extract {} eigenvalues in dimension {}", options.k, dim));

  const FiniteDifferenceHvp hvp(obj, theta, batch, options.fd_step);
  auto rng = make_rng(seed, {0x706f776572});
  std::vector<ParamVector> found;
  EigenEstimate out;

  auto deflate = [&](ParamVector& v) {
    for (const auto& q : found) v -= q.dot(v) * q;
  };

  for (int j = 0; j < options.k; ++j) {
    ParamVector v = rademacher(dim, rng);
    deflate(v);
    if (!(v.norm() > 0.0)) v = rademacher(dim, rng);
    v.normalize();
    double lambda = 0.0;
    double previous = std::numeric_limits<double>::quiet_NaN();
    int it = 0;
    bool converged = false;
    while (it < options.max_iter) {
      ++it;
      ParamVector w = hvp(v);
      ++out.hvp_evals;
      deflate(w);
      lambda = v.dot(w);
      if (!std::isfinite(lambda)) throw NumericalError("non-finite Rayleigh quotient in power iteration");
      const double norm = w.norm();
      if (!(norm > 0.0)) {
        converged = true;  // v lies in the (deflated) null space
        break;
      }
      v = w / norm;
      deflate(v);
      v.normalize();
      if (std::abs(lambda - previous) < options.tol * std::max(1.0, std::abs(lambda))) {
        converged = true;
        break;
      }
      previous = lambda;
    }
    out.values.push_back(lambda);
    out.iterations.push_back(it);
    out.converged = out.converged && converged;
    found.push_back(v);
  }
  std::sort(out.values.begin(), out.values.end(), std::greater<>());
  return out;
}

TraceEstimate hutchinson_trace(const Objective& obj, const ParamVector& theta, const Batch& batch, int n_probes,
                               double fd_step, std::uint64_t seed) {
  if (n_probes < 2) throw BudgetError("Hutchinson trace needs at least two probes");
  const FiniteDifferenceHvp hvp(obj, theta, batch, fd_step);
  auto rng = make_rng(seed, {0x7472616365});
  const auto dim = static_cast<Eigen::Index>(obj.dim());
  // Welford running mean/variance over the fixed probe sequence.
  double mean = 0.0;
  double m2 = 0.0;
  for (int i = 0; i < n_probes; ++i) {
    const ParamVector v = rademacher(dim, rng);
    const double sample = v.dot(hvp(v));
    if (!std::isfinite(sample)) throw NumericalError("non-finite Hutchinson probe");
    const double d = sample - mean;
    mean += d / (i + 1);
    m2 += d * (sample - mean);
  }
  const double variance = m2 / (n_probes - 1);
  return {mean, std::sqrt(variance / n_probes), n_probes};
}

FlatnessReport flatness_report(const Objective& obj, const ParamVector& theta, const Batch& batch,
                               const FlatnessOptions& options) {
  FlatnessReport rep;
  rep.rho = options.rho;
  rep.alpha = options.alpha;
  rep.budget = options.budget;
  rep.power = options.power;
  rep.n_probes = options.n_probes;
  rep.seed = options.seed;

  rep.r0 = zeroth_order_flatness(obj, theta, options.rho, batch, options.budget, options.seed,
                                 options.power.fd_step);
  rep.r1 = first_order_flatness(obj, theta, options.rho, batch, options.budget, options.seed,
                                options.power.fd_step);
  rep.r_fad = fad_regularizer(rep.r0, rep.r1, options.alpha);
  if (options.rho > 0.0) rep.lambda_from_fad = lambda_max_from_fad(rep.r_fad, options.rho, options.alpha);

  const auto eig = power_iteration(obj, theta, batch, options.power, options.seed);
  rep.top_eigs = eig.values;
  rep.lambda_max = eig.values.front();
  rep.eigs_converged = eig.converged;

  const auto tr = hutchinson_trace(obj, theta, batch, options.n_probes, options.power.fd_step, options.seed);
  rep.trace = tr.mean;
  rep.trace_stderr = tr.std_error;
  return rep;
}

nlohmann::json to_json(const FlatnessReport& r) {
  nlohmann::json doc = {
      {"rho", r.rho},
      {"alpha", r.alpha},
      {"r0", r.r0},
      {"r1", r.r1},
      {"r_fad", r.r_fad},
      {"lambda_max", r.lambda_max},
      {"top_eigs", r.top_eigs},
      {"eigs_converged", r.eigs_converged},
      {"trace", r.trace},
      {"trace_stderr", r.trace_stderr},
      {"budget",
       {{"n_random", r.budget.n_random},
        {"n_ascent_steps", r.budget.n_ascent_steps},
        {"ascent_step", r.budget.ascent_step},
        {"k", r.power.k},
        {"tol", r.power.tol},
        {"max_iter", r.power.max_iter},
        {"fd_step", r.power.fd_step},
        {"n_probes", r.n_probes}}},
      {"seed", r.seed},
  };
  if (r.lambda_from_fad) doc["lambda_max_from_fad"] = *r.lambda_from_fad;
  return doc;
}

}  // namespace flatmin
