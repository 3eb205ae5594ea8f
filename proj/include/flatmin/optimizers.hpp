#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "flatmin/objective.hpp"

namespace flatmin {

enum class Method { sgd, momentum_sgd, adam, adamw, sam, gam, fad };
enum class Schedule { constant, inverse_sqrt };

std::string_view to_string(Method m);
std::string_view to_string(Schedule s);
Method parse_method(std::string_view name);      // throws ConfigError
Schedule parse_schedule(std::string_view name);  // throws ConfigError

struct OptimizerConfig {
  Method method = Method::sgd;
  double eta0 = 0.01;   // base learning rate
  double rho0 = 0.05;   // base perturbation radius
  double alpha = 0.5;   // zeroth/first-order flatness trade-off
  double beta = 0.1;    // flatness regulariser strength
  double xi = 1e-12;    // normaliser guard, g / (||g|| + xi)
  Schedule schedule = Schedule::constant;
  double fad_ratio = 1.0;  // fraction of fad steps that apply the flatness correction
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  // Throws ConfigError on any out-of-range field.
  void validate() const;
};

// Step sizes for the 1-based iteration t.
double scheduled_eta(const OptimizerConfig& config, std::int64_t t);
double scheduled_rho(const OptimizerConfig& config, std::int64_t t);

struct OptimizerState {
  OptimizerState() = default;
  OptimizerState(std::size_t dim, std::uint64_t seed);

  std::int64_t t = 0;  // completed steps
  ParamVector velocity;
  ParamVector first_moment;
  ParamVector second_moment;
  std::mt19937_64 batch_rng;
  // Separate stream for the partial-correction draws so that batches do not
  // depend on fad_ratio.
  std::mt19937_64 ratio_rng;
};

// Everything one iteration computed. Vectors the method did not need are
// zero; `delta` is the direction the base rule consumed, i.e.
// g0 + beta (alpha h0 + (1 - alpha) h1) for the flatness-aware methods.
struct StepTrace {
  std::int64_t t = 0;  // 1-based
  ParamVector g0, g1, g2, g3;
  ParamVector h0, h1;
  ParamVector delta;
  double eta_t = 0.0;
  double rho_t = 0.0;
  double loss_before = 0.0;
  bool fad_applied = false;
  int grad_evals = 0;

  double norm_g0() const { return g0.norm(); }
  double norm_h0() const { return h0.norm(); }
  double norm_h1() const { return h1.norm(); }
  double norm_delta() const { return delta.norm(); }
};

struct StepResult {
  ParamVector theta;
  StepTrace trace;
};

// Each step evaluates every gradient it needs on `batch`, advances state.t by
// one and throws NumericalError (carrying t) on non-finite values.
StepResult sgd_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch);
StepResult momentum_sgd_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                             const OptimizerConfig& config, const Batch& batch);
StepResult adam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                     const OptimizerConfig& config, const Batch& batch);
StepResult adamw_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                      const OptimizerConfig& config, const Batch& batch);
StepResult sam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch);
StepResult gam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch);
StepResult fad_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch);

// Dispatches on config.method.
StepResult optimizer_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                          const OptimizerConfig& config, const Batch& batch);

}  // namespace flatmin
