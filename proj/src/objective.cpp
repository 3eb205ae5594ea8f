#include "flatmin/objective.hpp"

#include <cmath>

#include <fmt/format.h>

#include "flatmin/errors.hpp"

namespace flatmin {

bool all_finite(const ParamVector& v) { return v.allFinite(); }

void Objective::check_input(const ParamVector& theta, const Batch& batch) const {
  if (static_cast<std::size_t>(theta.size()) != dim()) {
    throw DimensionError(
        fmt::format("{} objective expects {} parameters, got {}", kind(), dim(), theta.size()));
  }
  if (!all_finite(theta)) throw NumericalError(fmt::format("non-finite parameters passed to {}", kind()));
  const auto n = num_samples();
  if (n > 0 && !batch.is_full()) {
    for (auto i : batch.indices()) {
      if (i >= n) throw BatchSizeError(fmt::format("batch index {} >= n = {}", i, n));
    }
  }
}

double Objective::loss(const ParamVector& theta, const Batch& batch) const {
  check_input(theta, batch);
  const double value = evaluate(theta, batch, nullptr);
  if (!std::isfinite(value)) throw NumericalError(fmt::format("non-finite {} loss", kind()));
  return value;
}

ParamVector Objective::grad(const ParamVector& theta, const Batch& batch) const {
  return loss_and_grad(theta, batch).grad;
}

LossAndGrad Objective::loss_and_grad(const ParamVector& theta, const Batch& batch) const {
  check_input(theta, batch);
  LossAndGrad out;
  out.grad = ParamVector::Zero(static_cast<Eigen::Index>(dim()));
  out.loss = evaluate(theta, batch, &out.grad);
  if (!std::isfinite(out.loss) || !all_finite(out.grad)) {
    throw NumericalError(fmt::format("non-finite {} loss or gradient", kind()));
  }
  return out;
}

double eval_loss(const Objective& obj, const ParamVector& theta, const Batch& batch) {
  return obj.loss(theta, batch);
}

ParamVector eval_grad(const Objective& obj, const ParamVector& theta, const Batch& batch) {
  return obj.grad(theta, batch);
}

namespace {

void check_fd_args(const ParamVector& v, double h, std::size_t dim) {
  if (static_cast<std::size_t>(v.size()) != dim) {
    throw DimensionError(fmt::format("direction has {} entries, objective has {}", v.size(), dim));
  }
  if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("finite-difference step must be positive");
  const double norm = v.norm();
  if (!(norm > 0.0)) throw DegenerateDirectionError("Hessian-vector product needs a nonzero direction");
  if (!std::isfinite(norm)) throw NumericalError("non-finite Hessian-vector direction");
}

ParamVector fd_difference(const Objective& obj, const ParamVector& theta, const ParamVector& base_grad,
                          const ParamVector& v, const Batch& batch, double h) {
  const double step = h / v.norm();
  const ParamVector shifted = theta + step * v;
  ParamVector out = (obj.grad(shifted, batch) - base_grad) / step;
  if (!all_finite(out)) throw NumericalError("non-finite Hessian-vector product");
  return out;
}

}  // namespace

ParamVector hvp_fd(const Objective& obj, const ParamVector& theta, const ParamVector& v, const Batch& batch,
                   double h) {
  check_fd_args(v, h, obj.dim());
  return fd_difference(obj, theta, obj.grad(theta, batch), v, batch, h);
}

FiniteDifferenceHvp::FiniteDifferenceHvp(const Objective& obj, ParamVector theta, Batch batch, double h)
    : obj_(&obj), theta_(std::move(theta)), batch_(std::move(batch)), h_(h) {
  if (!(h_ > 0.0) || !std::isfinite(h_)) throw ConfigError("finite-difference step must be positive");
  base_grad_ = obj_->grad(theta_, batch_);
}

ParamVector FiniteDifferenceHvp::operator()(const ParamVector& v) const {
  check_fd_args(v, h_, obj_->dim());
  return fd_difference(*obj_, theta_, base_grad_, v, batch_, h_);
}

// ---------------------------------------------------------------------------

QuadraticObjective::QuadraticObjective(Eigen::MatrixXd hessian) : QuadraticObjective(std::move(hessian), false) {}

QuadraticObjective::QuadraticObjective(Eigen::MatrixXd hessian, bool diagonal)
    : hessian_(std::move(hessian)), diagonal_(diagonal) {
  if (hessian_.rows() != hessian_.cols() || hessian_.rows() == 0) {
    throw DimensionError("quadratic Hessian must be a nonempty square matrix");
  }
  if (!hessian_.allFinite()) throw ConfigError("quadratic Hessian must be finite");
  for (Eigen::Index i = 0; i < hessian_.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < hessian_.cols(); ++j) {
      if (hessian_(i, j) != hessian_(j, i)) {
        throw ConfigError(fmt::format("quadratic Hessian is not symmetric at ({}, {})", i, j));
      }
    }
  }
  diag_ = hessian_.diagonal();
}

QuadraticObjective QuadraticObjective::diagonal(const Eigen::VectorXd& diag) {
  return QuadraticObjective(Eigen::MatrixXd(diag.asDiagonal()), true);
}

double QuadraticObjective::evaluate(const ParamVector& theta, const Batch&, ParamVector* grad) const {
  if (diagonal_) {
    if (grad) *grad = diag_.cwiseProduct(theta);
    return 0.5 * theta.dot(diag_.cwiseProduct(theta));
  }
  ParamVector h_theta = hessian_ * theta;
  const double value = 0.5 * theta.dot(h_theta);
  if (grad) *grad = std::move(h_theta);
  return value;
}

RosenbrockObjective::RosenbrockObjective(std::size_t dim) : dim_(dim) {
  if (dim < 2) throw ConfigError("rosenbrock needs dim >= 2");
}

double RosenbrockObjective::evaluate(const ParamVector& x, const Batch&, ParamVector* grad) const {
  double value = 0.0;
  for (Eigen::Index i = 0; i + 1 < x.size(); ++i) {
    const double a = x[i + 1] - x[i] * x[i];
    const double b = 1.0 - x[i];
    value += 100.0 * a * a + b * b;
    if (grad) {
      (*grad)[i] += -400.0 * x[i] * a - 2.0 * b;
      (*grad)[i + 1] += 200.0 * a;
    }
  }
  return value;
}

DoubleWellObjective::DoubleWellObjective(DoubleWellParams params) : params_(params) {
  if (!(params_.sharp_curvature > 0.0) || !(params_.flat_curvature > 0.0)) {
    throw ConfigError("double-well curvatures must be positive");
  }
}

double DoubleWellObjective::evaluate(const ParamVector& theta, const Batch&, ParamVector* grad) const {
  const double x = theta[0];
  const double ds = x - params_.sharp_center;
  const double df = x - params_.flat_center;
  const double sharp = 0.5 * params_.sharp_curvature * ds * ds + params_.sharp_depth;
  const double flat = 0.5 * params_.flat_curvature * df * df + params_.flat_depth;
  if (sharp <= flat) {
    if (grad) (*grad)[0] = params_.sharp_curvature * ds;
    return sharp;
  }
  if (grad) (*grad)[0] = params_.flat_curvature * df;
  return flat;
}

LinearObjective::LinearObjective(Eigen::VectorXd c, double offset) : c_(std::move(c)), offset_(offset) {
  if (c_.size() == 0) throw DimensionError("linear objective needs at least one parameter");
  if (!c_.allFinite() || !std::isfinite(offset_)) throw ConfigError("linear objective must be finite");
}

LinearObjective LinearObjective::constant(std::size_t dim, double value) {
  return LinearObjective(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim)), value);
}

double LinearObjective::evaluate(const ParamVector& theta, const Batch&, ParamVector* grad) const {
  if (grad) *grad = c_;
  return c_.dot(theta) + offset_;
}

}  // namespace flatmin
