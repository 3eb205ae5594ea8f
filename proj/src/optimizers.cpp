#include "flatmin/optimizers.hpp"

#include <cmath>

#include <fmt/format.h>

#include "flatmin/errors.hpp"

namespace flatmin {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::sgd: return "sgd";
    case Method::momentum_sgd: return "momentum_sgd";
    case Method::adam: return "adam";
    case Method::adamw: return "adamw";
    case Method::sam: return "sam";
    case Method::gam: return "gam";
    case Method::fad: return "fad";
  }
  return "unknown";
}

std::string_view to_string(Schedule s) {
  return s == Schedule::constant ? "constant" : "inverse_sqrt";
}

Method parse_method(std::string_view name) {
  for (auto m : {Method::sgd, Method::momentum_sgd, Method::adam, Method::adamw, Method::sam, Method::gam,
                 Method::fad}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError(fmt::format("unknown optimizer method '{}'", name));
}

Schedule parse_schedule(std::string_view name) {
  if (name == "constant") return Schedule::constant;
  if (name == "inverse_sqrt") return Schedule::inverse_sqrt;
  throw ConfigError(fmt::format("unknown schedule '{}'", name));
}

void OptimizerConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(what);
  };
  require(eta0 > 0.0 && std::isfinite(eta0), "eta0 must be positive");
  require(rho0 >= 0.0 && std::isfinite(rho0), "rho0 must be nonnegative");
  require(alpha >= 0.0 && alpha <= 1.0, "alpha must lie in [0, 1]");
  require(beta >= 0.0 && std::isfinite(beta), "beta must be nonnegative");
  require(xi > 0.0 && std::isfinite(xi), "xi must be positive");
  require(fad_ratio >= 0.0 && fad_ratio <= 1.0, "fad_ratio must lie in [0, 1]");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(weight_decay >= 0.0 && std::isfinite(weight_decay), "weight_decay must be nonnegative");
}

double scheduled_eta(const OptimizerConfig& config, std::int64_t t) {
  if (config.schedule == Schedule::constant) return config.eta0;
  return config.eta0 / std::sqrt(static_cast<double>(t));
}

double scheduled_rho(const OptimizerConfig& config, std::int64_t t) {
  if (config.schedule == Schedule::constant) return config.rho0;
  return config.rho0 / std::sqrt(static_cast<double>(t));
}

OptimizerState::OptimizerState(std::size_t dim, std::uint64_t seed)
    : velocity(ParamVector::Zero(static_cast<Eigen::Index>(dim))),
      first_moment(ParamVector::Zero(static_cast<Eigen::Index>(dim))),
      second_moment(ParamVector::Zero(static_cast<Eigen::Index>(dim))),
      batch_rng(make_rng(seed, {1})),
      ratio_rng(make_rng(seed, {2})) {}

namespace {

struct StepContext {
  const Objective& obj;
  const Batch& batch;
  std::int64_t t;
  StepTrace trace;

  LossAndGrad eval(const ParamVector& theta) {
    ++trace.grad_evals;
    try {
      return obj.loss_and_grad(theta, batch);
    } catch (const NumericalError& e) {
      throw NumericalError(e.what(), t);
    }
  }
  ParamVector grad(const ParamVector& theta) { return eval(theta).grad; }
};

StepContext begin(const Objective& obj, const ParamVector& theta, const OptimizerState& state,
                  const OptimizerConfig& config, const Batch& batch) {
  config.validate();
  if (static_cast<std::size_t>(theta.size()) != obj.dim()) {
    throw DimensionError(fmt::format("theta has {} entries, objective has {}", theta.size(), obj.dim()));
  }
  StepContext ctx{obj, batch, state.t + 1, {}};
  ctx.trace.t = ctx.t;
  ctx.trace.eta_t = scheduled_eta(config, ctx.t);
  ctx.trace.rho_t = scheduled_rho(config, ctx.t);
  const auto zero = ParamVector::Zero(theta.size());
  ctx.trace.g1 = ctx.trace.g2 = ctx.trace.g3 = zero;
  ctx.trace.h0 = ctx.trace.h1 = zero;
  const auto first = ctx.eval(theta);
  ctx.trace.loss_before = first.loss;
  ctx.trace.g0 = first.grad;
  return ctx;
}

StepResult finish(StepContext& ctx, ParamVector theta_next, OptimizerState& state) {
  if (!all_finite(theta_next)) throw NumericalError("non-finite parameter update", ctx.t);
  state.t = ctx.t;
  return {std::move(theta_next), std::move(ctx.trace)};
}

ParamVector ascend(const ParamVector& from, const ParamVector& direction, double rho, double xi) {
  return from + rho * direction / (direction.norm() + xi);
}

// Fills g1..g3, h0, h1 following the four-gradient flatness pass.
void flatness_pass(StepContext& ctx, const ParamVector& theta, const OptimizerConfig& config) {
  auto& tr = ctx.trace;
  const double rho = tr.rho_t;
  tr.g1 = ctx.grad(ascend(theta, tr.g0, rho, config.xi));
  tr.h0 = tr.g1 - tr.g0;
  const ParamVector theta2 = ascend(theta, tr.h0, rho, config.xi);
  tr.g2 = ctx.grad(theta2);
  tr.g3 = ctx.grad(ascend(theta2, tr.g2, rho, config.xi));
  tr.h1 = tr.g3 - tr.g2;
}

// theta - eta (direction + wd theta), the coupled-decay SGD rule.
ParamVector descend(const ParamVector& theta, const ParamVector& direction, double eta, double wd) {
  return theta - eta * (direction + wd * theta);
}

StepResult corrected_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                          const OptimizerConfig& config, const Batch& batch, double alpha, bool apply) {
  auto ctx = begin(obj, theta, state, config, batch);
  auto& tr = ctx.trace;
  if (apply) {
    flatness_pass(ctx, theta, config);
    tr.delta = tr.g0 + config.beta * (alpha * tr.h0 + (1.0 - alpha) * tr.h1);
    tr.fad_applied = true;
  } else {
    tr.delta = tr.g0;
  }
  return finish(ctx, descend(theta, tr.delta, tr.eta_t, config.weight_decay), state);
}

void check_method(const OptimizerConfig& config, Method expected) {
  if (config.method != expected) {
    throw ConfigError(fmt::format("{} step called with method '{}'", to_string(expected), to_string(config.method)));
  }
}

void ensure_buffers(OptimizerState& state, Eigen::Index dim) {
  if (state.velocity.size() != dim) state.velocity = ParamVector::Zero(dim);
  if (state.first_moment.size() != dim) state.first_moment = ParamVector::Zero(dim);
  if (state.second_moment.size() != dim) state.second_moment = ParamVector::Zero(dim);
}

StepResult adam_like(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                     const OptimizerConfig& config, const Batch& batch, bool decoupled) {
  auto ctx = begin(obj, theta, state, config, batch);
  auto& tr = ctx.trace;
  ensure_buffers(state, theta.size());
  tr.delta = tr.g0;

  ParamVector base = theta;
  ParamVector g = tr.g0;
  if (decoupled) {
    base = theta * (1.0 - tr.eta_t * config.weight_decay);
  } else {
    g += config.weight_decay * theta;
  }
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  ParamVector m = b1 * state.first_moment + (1.0 - b1) * g;
  ParamVector v = b2 * state.second_moment + (1.0 - b2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(ctx.t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(ctx.t));
  const ParamVector m_hat = m / c1;
  const ParamVector v_hat = v / c2;
  ParamVector next = base - tr.eta_t * (m_hat.array() / (v_hat.array().sqrt() + config.adam_eps)).matrix();
  auto out = finish(ctx, std::move(next), state);
  state.first_moment = std::move(m);
  state.second_moment = std::move(v);
  return out;
}

}  // namespace

StepResult sgd_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::sgd);
  auto ctx = begin(obj, theta, state, config, batch);
  ctx.trace.delta = ctx.trace.g0;
  return finish(ctx, descend(theta, ctx.trace.delta, ctx.trace.eta_t, config.weight_decay), state);
}

StepResult momentum_sgd_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                             const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::momentum_sgd);
  auto ctx = begin(obj, theta, state, config, batch);
  auto& tr = ctx.trace;
  ensure_buffers(state, theta.size());
  tr.delta = tr.g0;
  ParamVector velocity = config.momentum * state.velocity + (tr.g0 + config.weight_decay * theta);
  ParamVector next = theta - tr.eta_t * velocity;
  auto out = finish(ctx, std::move(next), state);
  state.velocity = std::move(velocity);
  return out;
}

StepResult adam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                     const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::adam);
  return adam_like(obj, theta, state, config, batch, false);
}

StepResult adamw_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                      const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::adamw);
  return adam_like(obj, theta, state, config, batch, true);
}

StepResult sam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::sam);
  auto ctx = begin(obj, theta, state, config, batch);
  auto& tr = ctx.trace;
  tr.g1 = ctx.grad(ascend(theta, tr.g0, tr.rho_t, config.xi));
  tr.h0 = tr.g1 - tr.g0;
  tr.delta = tr.g1;
  tr.fad_applied = true;
  return finish(ctx, descend(theta, tr.delta, tr.eta_t, config.weight_decay), state);
}

StepResult gam_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::gam);
  return corrected_step(obj, theta, state, config, batch, 0.0, true);
}

StepResult fad_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                    const OptimizerConfig& config, const Batch& batch) {
  check_method(config, Method::fad);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const bool apply = unit(state.ratio_rng) < config.fad_ratio;
  return corrected_step(obj, theta, state, config, batch, config.alpha, apply);
}

StepResult optimizer_step(const Objective& obj, const ParamVector& theta, OptimizerState& state,
                          const OptimizerConfig& config, const Batch& batch) {
  switch (config.method) {
    case Method::sgd: return sgd_step(obj, theta, state, config, batch);
    case Method::momentum_sgd: return momentum_sgd_step(obj, theta, state, config, batch);
    case Method::adam: return adam_step(obj, theta, state, config, batch);
    case Method::adamw: return adamw_step(obj, theta, state, config, batch);
    case Method::sam: return sam_step(obj, theta, state, config, batch);
    case Method::gam: return gam_step(obj, theta, state, config, batch);
    case Method::fad: return fad_step(obj, theta, state, config, batch);
  }
  throw ConfigError("unhandled optimizer method");
}

}  // namespace flatmin
