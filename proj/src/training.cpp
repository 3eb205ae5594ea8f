#include "flatmin/training.hpp"

#include <algorithm>
#include <numeric>
#include <chrono>
#include <cmath>
#include <ostream>

#include <fmt/format.h>

#include "flatmin/errors.hpp"

namespace flatmin {

std::string format_log_row(const LogRow& r) {
  return fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}", r.run_id, r.method, r.seed, r.t, r.eta_t,
                     r.rho_t, r.loss, r.norm_g0, r.norm_h0, r.norm_h1, r.norm_delta, r.fad_applied ? 1 : 0,
                     r.wall_ms);
}

CsvLogSink::CsvLogSink(std::ostream& out) : out_(&out) { *out_ << kLogHeader << '\n'; }

void CsvLogSink::write(const LogRow& row) { *out_ << format_log_row(row) << '\n'; }

void CsvLogSink::flush() { out_->flush(); }

TrainingResult run_training(const Objective& obj, const ParamVector& theta0, const OptimizerConfig& config,
                            const TrainingOptions& options, LogSink* sink) {
  if (options.iterations < 1) throw ConfigError("training needs at least one iteration");
  config.validate();
  if (static_cast<std::size_t>(theta0.size()) != obj.dim()) {
    throw DimensionError(fmt::format("theta0 has {} entries, objective has {}", theta0.size(), obj.dim()));
  }
  const std::size_t n = obj.num_samples();
  if (n > 0 && options.batch_size > n) {
    throw BatchSizeError(fmt::format("batch size {} exceeds {} samples", options.batch_size, n));
  }

  TrainingResult result{theta0, {}};
  OptimizerState state(obj.dim(), options.seed);
  const std::string method{to_string(config.method)};
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  auto elapsed_ms = [&] { return std::chrono::duration<double, std::milli>(Clock::now() - start).count(); };

  for (std::int64_t i = 0; i < options.iterations; ++i) {
    const Batch batch = (n == 0 || options.batch_size == 0) ? Batch::full()
                                                           : sample_batch(n, options.batch_size, state.batch_rng);
    StepResult step;
    try {
      step = optimizer_step(obj, result.theta, state, config, batch);
    } catch (const NumericalError&) {
      result.record.loop_ms = elapsed_ms();
      if (sink) sink->flush();
      throw;
    }
    result.theta = std::move(step.theta);
    const auto& tr = step.trace;
    result.record.grad_evals += tr.grad_evals;

    LogRow row{options.run_id, method,      options.seed, tr.t,          tr.eta_t,         tr.rho_t,
               tr.loss_before, tr.norm_g0(), tr.norm_h0(), tr.norm_h1(), tr.norm_delta(), tr.fad_applied,
               options.log_wall_time ? elapsed_ms() : 0.0};
    if (sink) sink->write(row);
    result.record.rows.push_back(std::move(row));
    if (options.keep_traces) result.record.traces.push_back(std::move(step.trace));
  }
  result.record.loop_ms = elapsed_ms();
  if (sink) sink->flush();
  return result;
}

ConvergenceReport convergence_check(const std::vector<StepTrace>& traces, double eta0, double rho0) {
  const std::size_t T = traces.size();
  if (T < 10) throw InsufficientDataError(fmt::format("convergence check needs >= 10 steps, got {}", T));

  ConvergenceReport report;
  report.num_steps = T;

  for (const auto& tr : traces) {
    const double root = std::sqrt(static_cast<double>(tr.t));
    const double tol = 1e-12;
    if (tr.t < 1 || std::abs(tr.eta_t * root - eta0) > tol * std::max(1.0, std::abs(eta0)) ||
        std::abs(tr.rho_t * root - rho0) > tol * std::max(1.0, std::abs(rho0))) {
      report.schedule_ok = false;
      report.warning =
          "schedule violates the convergence hypotheses: step sizes must follow eta0/sqrt(t) and rho0/sqrt(t)";
      break;
    }
  }

  std::vector<double> sq(T);
  report.cumulative.resize(T);
  double running = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    sq[i] = traces[i].delta.squaredNorm();
    running += sq[i];
    report.cumulative[i] = running;
  }
  report.min_delta_sq = *std::min_element(sq.begin(), sq.end());
  const std::size_t decile = std::max<std::size_t>(1, T / 10);
  report.min_delta_sq_first_decile = *std::min_element(sq.begin(), sq.begin() + static_cast<long>(decile));
  report.min_delta_sq_last_decile = *std::min_element(sq.end() - static_cast<long>(decile), sq.end());

  // Least squares of y = C(T') sqrt(T') against x = log T' over the second half.
  report.fit_begin = T / 2 + 1;
  std::vector<double> xs, ys;
  for (std::size_t tp = report.fit_begin; tp <= T; ++tp) {
    xs.push_back(std::log(static_cast<double>(tp)));
    ys.push_back(report.cumulative[tp - 1] * std::sqrt(static_cast<double>(tp)));
  }
  const double md = static_cast<double>(xs.size());
  const double mean_x = std::accumulate(xs.begin(), xs.end(), 0.0) / md;
  const double mean_y = std::accumulate(ys.begin(), ys.end(), 0.0) / md;
  double sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mean_x) * (xs[i] - mean_x);
    sxy += (xs[i] - mean_x) * (ys[i] - mean_y);
  }
  report.c2 = sxx > 0.0 ? sxy / sxx : 0.0;
  report.c1 = mean_y - report.c2 * mean_x;
  double ss_res = 0, ss_tot = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = ys[i] - (report.c1 + report.c2 * xs[i]);
    ss_res += r * r;
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  report.residual = ss_res;
  report.r_squared = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : 0.0);
  return report;
}

}  // namespace flatmin
