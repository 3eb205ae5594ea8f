#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "flatmin/optimizers.hpp"

namespace flatmin {

// One row of the per-iteration CSV log. Column order is fixed by kLogHeader.
struct LogRow {
  std::string run_id;
  std::string method;
  std::uint64_t seed = 0;
  std::int64_t t = 0;
  double eta_t = 0.0;
  double rho_t = 0.0;
  double loss = 0.0;
  double norm_g0 = 0.0;
  double norm_h0 = 0.0;
  double norm_h1 = 0.0;
  double norm_delta = 0.0;
  bool fad_applied = false;
  double wall_ms = 0.0;

  friend bool operator==(const LogRow&, const LogRow&) = default;
};

inline constexpr const char* kLogHeader =
    "run_id,method,seed,t,eta_t,rho_t,loss,norm_g0,norm_h0,norm_h1,norm_delta,fad_applied,wall_ms";

std::string format_log_row(const LogRow& row);

class LogSink {
 public:
  virtual ~LogSink() = default;
  virtual void write(const LogRow& row) = 0;
  virtual void flush() {}
};

// Writes the header on construction, then one line per row.
class CsvLogSink final : public LogSink {
 public:
  explicit CsvLogSink(std::ostream& out);
  void write(const LogRow& row) override;
  void flush() override;

 private:
  std::ostream* out_;
};

struct TrainingOptions {
  std::int64_t iterations = 100;
  std::size_t batch_size = 0;  // 0 selects the full dataset every step
  std::uint64_t seed = 0;
  std::string run_id = "run";
  bool keep_traces = false;    // store every StepTrace in the RunRecord
  bool log_wall_time = false;  // otherwise wall_ms is written as 0
};

struct RunRecord {
  std::vector<LogRow> rows;
  std::vector<StepTrace> traces;
  std::int64_t grad_evals = 0;
  double loop_ms = 0.0;  // monotonic time spent inside the step loop
};

struct TrainingResult {
  ParamVector theta;
  RunRecord record;
};

// Applies `iterations` steps of config.method. Deterministic in (seed,
// config, objective). On a numerical failure the rows emitted so far are
// flushed to the sink and the NumericalError is rethrown with its step.
TrainingResult run_training(const Objective& obj, const ParamVector& theta0, const OptimizerConfig& config,
                            const TrainingOptions& options, LogSink* sink = nullptr);

struct ConvergenceReport {
  std::size_t num_steps = 0;
  std::vector<double> cumulative;  // C(T') = sum_{t <= T'} ||delta_t||^2
  double c1 = 0.0;
  double c2 = 0.0;
  double residual = 0.0;   // residual sum of squares of the fit
  double r_squared = 1.0;  // coefficient of determination of the fit
  std::size_t fit_begin = 0;  // first T' (1-based) inside the fit window
  double min_delta_sq = 0.0;
  double min_delta_sq_first_decile = 0.0;
  double min_delta_sq_last_decile = 0.0;
  bool schedule_ok = true;
  std::string warning;
};

// Fits C(T') * sqrt(T') ~ c1 + c2 log T' by least squares over the second
// half of the run. Needs at least 10 traces (InsufficientDataError). A run
// whose step sizes do not follow eta0/sqrt(t), rho0/sqrt(t) is flagged.
ConvergenceReport convergence_check(const std::vector<StepTrace>& traces, double eta0, double rho0);

}  // namespace flatmin
