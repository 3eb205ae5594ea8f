#include <cmath>
#include <random>

#include <fmt/format.h>

#include "flatmin/errors.hpp"
#include "flatmin/objective.hpp"

namespace flatmin {

namespace {

using ConstWeights = Eigen::Map<const RowMatrix>;
using Weights = Eigen::Map<RowMatrix>;

struct LayerView {
  Eigen::Index fan_in;
  Eigen::Index fan_out;
  Eigen::Index offset;  // start of the weight block; biases follow it
};

std::vector<LayerView> layer_views(const std::vector<int>& sizes) {
  std::vector<LayerView> views;
  Eigen::Index offset = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    views.push_back({sizes[l], sizes[l + 1], offset});
    offset += static_cast<Eigen::Index>(sizes[l] + 1) * sizes[l + 1];
  }
  return views;
}

// Forward pass keeping hidden activations for the backward pass.
RowMatrix forward(const std::vector<LayerView>& views, const ParamVector& theta, const RowMatrix& x,
                  std::vector<RowMatrix>* hidden) {
  RowMatrix a = x;
  for (std::size_t l = 0; l < views.size(); ++l) {
    const auto& v = views[l];
    ConstWeights w(theta.data() + v.offset, v.fan_out, v.fan_in);
    Eigen::Map<const Eigen::RowVectorXd> b(theta.data() + v.offset + v.fan_out * v.fan_in, v.fan_out);
    RowMatrix z = a * w.transpose();
    z.rowwise() += b;
    if (l + 1 == views.size()) return z;
    a = z.array().tanh().matrix();
    if (hidden) hidden->push_back(a);
  }
  return a;
}

}  // namespace

MlpObjective::MlpObjective(std::vector<int> layer_sizes, std::shared_ptr<const Dataset> data)
    : layer_sizes_(std::move(layer_sizes)), data_(std::move(data)), num_params_(0) {
  if (!data_) throw ConfigError("mlp objective requires a dataset");
  if (layer_sizes_.size() < 2) throw ConfigError("mlp needs at least an input and an output layer");
  for (int s : layer_sizes_) {
    if (s < 1) throw ConfigError("mlp layer sizes must be positive");
  }
  data_->validate();
  if (data_->size() == 0) throw ConfigError("mlp dataset is empty");
  if (static_cast<std::size_t>(layer_sizes_.front()) != data_->feature_dim()) {
    throw DimensionError(fmt::format("mlp input width {} does not match feature dimension {}",
                                     layer_sizes_.front(), data_->feature_dim()));
  }
  if (layer_sizes_.back() < data_->num_classes) {
    throw DimensionError(fmt::format("mlp output width {} is smaller than the {} classes",
                                     layer_sizes_.back(), data_->num_classes));
  }
  num_params_ = param_count(layer_sizes_);
}

std::size_t MlpObjective::param_count(const std::vector<int>& sizes) {
  std::size_t count = 0;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    count += static_cast<std::size_t>(sizes[l] + 1) * static_cast<std::size_t>(sizes[l + 1]);
  }
  return count;
}

ParamVector MlpObjective::init_params(std::uint64_t seed) const {
  auto rng = make_rng(seed, {0x6d6c70});
  ParamVector theta = ParamVector::Zero(static_cast<Eigen::Index>(num_params_));
  for (const auto& v : layer_views(layer_sizes_)) {
    const double limit = std::sqrt(6.0 / static_cast<double>(v.fan_in + v.fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < v.fan_in * v.fan_out; ++i) theta[v.offset + i] = dist(rng);
  }
  return theta;
}

RowMatrix MlpObjective::logits(const ParamVector& theta, const RowMatrix& inputs) const {
  if (static_cast<std::size_t>(theta.size()) != num_params_) {
    throw DimensionError(fmt::format("mlp expects {} parameters, got {}", num_params_, theta.size()));
  }
  if (inputs.cols() != layer_sizes_.front()) throw DimensionError("mlp input width mismatch");
  return forward(layer_views(layer_sizes_), theta, inputs, nullptr);
}

std::vector<int> MlpObjective::predict(const ParamVector& theta, const RowMatrix& inputs) const {
  const RowMatrix z = logits(theta, inputs);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    Eigen::Index best = 0;
    z.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

double MlpObjective::accuracy(const ParamVector& theta, const Dataset& data) const {
  if (data.size() == 0) throw ConfigError("accuracy of an empty dataset");
  const auto pred = predict(theta, data.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

double MlpObjective::evaluate(const ParamVector& theta, const Batch& batch, ParamVector* grad) const {
  const auto views = layer_views(layer_sizes_);
  const Dataset& data = *data_;

  RowMatrix x;
  std::vector<int> y;
  if (batch.is_full()) {
    x = data.inputs;
    y = data.labels;
  } else {
    const auto idx = batch.indices();
    x.resize(static_cast<Eigen::Index>(idx.size()), data.inputs.cols());
    y.resize(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      x.row(static_cast<Eigen::Index>(r)) = data.inputs.row(static_cast<Eigen::Index>(idx[r]));
      y[r] = data.labels[idx[r]];
    }
  }
  const auto b = static_cast<double>(y.size());

  std::vector<RowMatrix> hidden;
  hidden.reserve(views.size());
  RowMatrix z = forward(views, theta, x, grad ? &hidden : nullptr);

  // Softmax cross-entropy; z is overwritten with dLoss/dz.
  double loss = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double m = z.row(r).maxCoeff();
    const double lse = m + std::log((z.row(r).array() - m).exp().sum());
    const int label = y[static_cast<std::size_t>(r)];
    loss += lse - z(r, label);
    if (grad) {
      z.row(r) = (z.row(r).array() - lse).exp().matrix() / b;
      z(r, label) -= 1.0 / b;
    }
  }
  loss /= b;
  if (!grad) return loss;

  RowMatrix dz = std::move(z);
  for (std::size_t l = views.size(); l-- > 0;) {
    const auto& v = views[l];
    const RowMatrix& a_prev = l == 0 ? x : hidden[l - 1];
    Weights dw(grad->data() + v.offset, v.fan_out, v.fan_in);
    dw.noalias() = dz.transpose() * a_prev;
    Eigen::Map<Eigen::RowVectorXd> db(grad->data() + v.offset + v.fan_out * v.fan_in, v.fan_out);
    db = dz.colwise().sum();
    if (l > 0) {
      ConstWeights w(theta.data() + v.offset, v.fan_out, v.fan_in);
      RowMatrix da = dz * w;
      dz = da.array() * (1.0 - a_prev.array().square());
    }
  }
  return loss;
}

}  // namespace flatmin
