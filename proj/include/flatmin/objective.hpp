#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flatmin/dataset.hpp"

namespace flatmin {

using ParamVector = Eigen::VectorXd;

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

bool all_finite(const ParamVector& v);

// Gradient oracle over a parameter vector and a minibatch. The public entry
// points check dimensions and finiteness; subclasses implement `evaluate`.
// Implementations are immutable after construction, so one instance may be
// shared by concurrent evaluators.
class Objective {
 public:
  virtual ~Objective() = default;

  virtual std::size_t dim() const = 0;
  virtual std::string kind() const = 0;
  // Sample count of the attached dataset, 0 for analytic objectives.
  virtual std::size_t num_samples() const { return 0; }

  double loss(const ParamVector& theta, const Batch& batch = Batch::full()) const;
  ParamVector grad(const ParamVector& theta, const Batch& batch = Batch::full()) const;
  LossAndGrad loss_and_grad(const ParamVector& theta, const Batch& batch = Batch::full()) const;

 protected:
  // `grad` is non-null when the caller wants the gradient; it is pre-sized to dim().
  virtual double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const = 0;

 private:
  void check_input(const ParamVector& theta, const Batch& batch) const;
};

double eval_loss(const Objective& obj, const ParamVector& theta, const Batch& batch = Batch::full());
ParamVector eval_grad(const Objective& obj, const ParamVector& theta, const Batch& batch = Batch::full());

inline constexpr double kDefaultFdStep = 1e-4;

// Forward-difference Hessian-vector product along v:
//   (grad(theta + s v) - grad(theta)) / s   with s = h / ||v||.
ParamVector hvp_fd(const Objective& obj, const ParamVector& theta, const ParamVector& v,
                   const Batch& batch = Batch::full(), double h = kDefaultFdStep);

// Same product with the base gradient evaluated once and reused across calls.
class FiniteDifferenceHvp {
 public:
  FiniteDifferenceHvp(const Objective& obj, ParamVector theta, Batch batch, double h = kDefaultFdStep);

  ParamVector operator()(const ParamVector& v) const;
  const ParamVector& base_grad() const { return base_grad_; }
  std::size_t dim() const { return static_cast<std::size_t>(theta_.size()); }

 private:
  const Objective* obj_;
  ParamVector theta_;
  Batch batch_;
  double h_;
  ParamVector base_grad_;
};

// 1/2 theta^T H theta with symmetric H.
class QuadraticObjective final : public Objective {
 public:
  explicit QuadraticObjective(Eigen::MatrixXd hessian);
  static QuadraticObjective diagonal(const Eigen::VectorXd& diag);

  std::size_t dim() const override { return static_cast<std::size_t>(hessian_.rows()); }
  std::string kind() const override { return "quadratic"; }
  const Eigen::MatrixXd& hessian() const { return hessian_; }
  bool is_diagonal() const { return diagonal_; }

 protected:
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const override;

 private:
  QuadraticObjective(Eigen::MatrixXd hessian, bool diagonal);

  Eigen::MatrixXd hessian_;
  Eigen::VectorXd diag_;
  bool diagonal_ = false;
};

// Chained Rosenbrock: sum_i 100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2.
class RosenbrockObjective final : public Objective {
 public:
  explicit RosenbrockObjective(std::size_t dim);

  std::size_t dim() const override { return dim_; }
  std::string kind() const override { return "rosenbrock"; }

 protected:
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const override;

 private:
  std::size_t dim_;
};

// One-dimensional landscape with two parabolic basins,
//   f(x) = min(k_s/2 (x - c_s)^2 + d_s, k_f/2 (x - c_f)^2 + d_f),
// a sharp one (large k_s) and a flat one (small k_f).
struct DoubleWellParams {
  double sharp_center = -1.0;
  double sharp_curvature = 50.0;
  double sharp_depth = 0.0;
  double flat_center = 1.0;
  double flat_curvature = 2.0;
  double flat_depth = 0.0;
};

class DoubleWellObjective final : public Objective {
 public:
  explicit DoubleWellObjective(DoubleWellParams params);

  std::size_t dim() const override { return 1; }
  std::string kind() const override { return "double_well"; }
  const DoubleWellParams& params() const { return params_; }

 protected:
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const override;

 private:
  DoubleWellParams params_;
};

// c^T theta + offset. A zero `c` gives the constant objective.
class LinearObjective final : public Objective {
 public:
  explicit LinearObjective(Eigen::VectorXd c, double offset = 0.0);
  static LinearObjective constant(std::size_t dim, double value = 0.0);

  std::size_t dim() const override { return static_cast<std::size_t>(c_.size()); }
  std::string kind() const override { return "linear"; }

 protected:
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const override;

 private:
  Eigen::VectorXd c_;
  double offset_;
};

// Fully connected network with tanh hidden activations and softmax
// cross-entropy loss, averaged over the batch.
//
// Parameter layout, layer by layer: weights (fan_out x fan_in, row-major)
// followed by biases (fan_out).
class MlpObjective final : public Objective {
 public:
  MlpObjective(std::vector<int> layer_sizes, std::shared_ptr<const Dataset> data);

  std::size_t dim() const override { return num_params_; }
  std::string kind() const override { return "mlp"; }
  std::size_t num_samples() const override { return data_->size(); }

  const std::vector<int>& layer_sizes() const { return layer_sizes_; }
  const Dataset& data() const { return *data_; }
  std::shared_ptr<const Dataset> shared_data() const { return data_; }

  static std::size_t param_count(const std::vector<int>& layer_sizes);

  // Glorot-uniform weights, zero biases.
  ParamVector init_params(std::uint64_t seed) const;

  RowMatrix logits(const ParamVector& theta, const RowMatrix& inputs) const;
  std::vector<int> predict(const ParamVector& theta, const RowMatrix& inputs) const;
  double accuracy(const ParamVector& theta, const Dataset& data) const;

 protected:
  double evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const override;

 private:
  std::vector<int> layer_sizes_;
  std::shared_ptr<const Dataset> data_;
  std::size_t num_params_;
};

}  // namespace flatmin
