#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "flatmin/objective.hpp"

namespace flatmin {

// Search budget for the ball maxima behind the flatness measures. Each
// restart starts uniformly in the ball and takes `n_ascent_steps` projected
// normalised-gradient steps of length `ascent_step * rho`.
struct AscentBudget {
  int n_random = 16;
  int n_ascent_steps = 50;
  double ascent_step = 1.0;
};

// max_{||e|| <= rho} L(theta + e) - L(theta), clamped at 0.
double zeroth_order_flatness(const Objective& obj, const ParamVector& theta, double rho,
                             const Batch& batch = Batch::full(), const AscentBudget& budget = {},
                             std::uint64_t seed = 0, double fd_step = kDefaultFdStep);

// rho * max_{||e|| <= rho} ||grad L(theta + e)||. The ascent direction on the
// gradient norm is the finite-difference product H g / ||g||.
double first_order_flatness(const Objective& obj, const ParamVector& theta, double rho,
                            const Batch& batch = Batch::full(), const AscentBudget& budget = {},
                            std::uint64_t seed = 0, double fd_step = kDefaultFdStep);

// alpha * r0 + (1 - alpha) * r1.
double fad_regularizer(double r0, double r1, double alpha);

// L(theta) + beta * (alpha r0 + (1 - alpha) r1) with both terms estimated.
double total_objective(const Objective& obj, const ParamVector& theta, double rho, double alpha, double beta,
                       const Batch& batch = Batch::full(), const AscentBudget& budget = {},
                       std::uint64_t seed = 0);

// Dominant Hessian eigenvalue implied at a local minimum:
//   r_fad / (rho^2 (1 - alpha / 2)).
double lambda_max_from_fad(double r_fad, double rho, double alpha);

struct PowerIterationOptions {
  int k = 1;
  double tol = 1e-8;  // on successive Rayleigh quotients, relative to max(1, |lambda|)
  int max_iter = 1000;
  double fd_step = kDefaultFdStep;
};

struct EigenEstimate {
  std::vector<double> values;   // sorted descending
  std::vector<int> iterations;  // per eigenpair, in extraction order
  bool converged = true;        // false if any eigenpair hit max_iter
  int hvp_evals = 0;
};

// Top-k Hessian eigenvalues by magnitude via power iteration on finite-
// difference HVPs, deflating converged directions by Gram-Schmidt.
EigenEstimate power_iteration(const Objective& obj, const ParamVector& theta, const Batch& batch,
                              const PowerIterationOptions& options, std::uint64_t seed);

struct TraceEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  int n_probes = 0;
};

// Hutchinson estimate of tr(H) from Rademacher probes v^T H v.
TraceEstimate hutchinson_trace(const Objective& obj, const ParamVector& theta, const Batch& batch, int n_probes,
                               double fd_step, std::uint64_t seed);

struct FlatnessOptions {
  double rho = 0.05;
  double alpha = 0.5;
  AscentBudget budget;
  PowerIterationOptions power;
  int n_probes = 100;
  std::uint64_t seed = 0;
};

struct FlatnessReport {
  double rho = 0.0;
  double alpha = 0.0;
  double r0 = 0.0;
  double r1 = 0.0;
  double r_fad = 0.0;
  std::optional<double> lambda_from_fad;  // present when rho > 0
  double lambda_max = 0.0;
  std::vector<double> top_eigs;
  bool eigs_converged = true;
  double trace = 0.0;
  double trace_stderr = 0.0;
  AscentBudget budget;
  PowerIterationOptions power;
  int n_probes = 0;
  std::uint64_t seed = 0;
};

FlatnessReport flatness_report(const Objective& obj, const ParamVector& theta, const Batch& batch,
                               const FlatnessOptions& options);

nlohmann::json to_json(const FlatnessReport& report);

}  // namespace flatmin
