#include "flatmin/shiftbench.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>
#include <set>

#include <fmt/format.h>

#include "flatmin/errors.hpp"
#include "flatmin/training.hpp"

namespace flatmin {

std::string_view to_string(DomainTransform t) {
  switch (t) {
    case DomainTransform::identity: return "identity";
    case DomainTransform::rotation: return "rotation";
    case DomainTransform::translation: return "translation";
  }
  return "unknown";
}

DomainTransform parse_transform(std::string_view name) {
  for (auto t : {DomainTransform::identity, DomainTransform::rotation, DomainTransform::translation}) {
    if (to_string(t) == name) return t;
  }
  throw ConfigError(fmt::format("unknown domain transform '{}'", name));
}

void DomainSpec::validate() const {
  if (n_domains < 3) throw ConfigError("leave-one-domain-out needs at least 3 domains");
  if (num_classes < 2) throw ConfigError("need at least 2 classes");
  if (per_domain_n < 10 * num_classes) {
    throw ConfigError(fmt::format("per_domain_n must be >= 10 * num_classes = {}", 10 * num_classes));
  }
  if (feature_dim < 1) throw ConfigError("feature_dim must be positive");
  if (transform == DomainTransform::rotation && feature_dim < 2) {
    throw ConfigError("rotation needs feature_dim >= 2");
  }
  if (transform == DomainTransform::translation &&
      translation_step.size() != static_cast<std::size_t>(feature_dim)) {
    throw ConfigError("translation_step must have feature_dim entries");
  }
  if (!(noise >= 0.0) || !(cluster_std > 0.0) || !std::isfinite(class_separation)) {
    throw ConfigError("noise must be >= 0, cluster_std > 0, class_separation finite");
  }
}

void MultiDomainDataset::validate() const {
  if (domains.size() < 3) throw ConfigError("a multi-domain dataset needs at least 3 domains");
  if (domain_params.size() != domains.size()) throw ConfigError("one transform descriptor per domain required");
  for (const auto& d : domains) {
    d.validate();
    if (d.num_classes != num_classes) throw ConfigError("domains disagree on num_classes");
    if (d.feature_dim() != domains.front().feature_dim()) throw ConfigError("domains disagree on feature_dim");
  }
}

MultiDomainDataset generate_domains(const DomainSpec& spec, std::uint64_t seed) {
  spec.validate();
  const int dim = spec.feature_dim;
  const int k = spec.num_classes;

  std::vector<Eigen::RowVectorXd> means;
  for (int c = 0; c < k; ++c) {
    Eigen::RowVectorXd m = Eigen::RowVectorXd::Zero(dim);
    if (dim >= 2) {
      const double a = 2.0 * std::numbers::pi * c / k;
      m[0] = spec.class_separation * std::cos(a);
      m[1] = spec.class_separation * std::sin(a);
    } else {
      m[0] = spec.class_separation * (c - 0.5 * (k - 1));
    }
    means.push_back(m);
  }

  MultiDomainDataset md;
  md.num_classes = k;
  md.name = spec.name;
  for (int d = 0; d < spec.n_domains; ++d) {
    DomainParams params;
    params.noise = spec.noise;
    params.translation.assign(static_cast<std::size_t>(dim), 0.0);
    if (spec.transform == DomainTransform::rotation) params.rotation_deg = d * spec.rotation_step_deg;
    if (spec.transform == DomainTransform::translation) {
      for (int j = 0; j < dim; ++j) params.translation[static_cast<std::size_t>(j)] = d * spec.translation_step[static_cast<std::size_t>(j)];
    }

    auto rng = make_rng(seed, {0x646f6d, static_cast<std::uint64_t>(d)});
    std::normal_distribution<double> normal;
    const double angle = params.rotation_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(angle);
    const double sn = std::sin(angle);

    Dataset data;
    data.num_classes = k;
    data.inputs.resize(spec.per_domain_n, dim);
    for (int i = 0; i < spec.per_domain_n; ++i) {
      const int label = i % k;
      Eigen::RowVectorXd x = means[static_cast<std::size_t>(label)];
      for (int j = 0; j < dim; ++j) x[j] += spec.cluster_std * normal(rng);
      if (dim >= 2) {
        const double x0 = x[0];
        const double x1 = x[1];
        x[0] = cs * x0 - sn * x1;
        x[1] = sn * x0 + cs * x1;
      }
      for (int j = 0; j < dim; ++j) x[j] += params.translation[static_cast<std::size_t>(j)];
      if (spec.noise > 0.0) {
        for (int j = 0; j < dim; ++j) x[j] += spec.noise * normal(rng);
      }
      data.inputs.row(i) = x;
      data.labels.push_back(label);
      data.domain_ids.push_back(d);
    }
    md.domains.push_back(std::move(data));
    md.domain_params.push_back(std::move(params));
  }
  md.validate();
  return md;
}

std::vector<DomainSplit> leave_one_out_splits(const MultiDomainDataset& md) {
  md.validate();
  std::vector<DomainSplit> splits;
  const int n = static_cast<int>(md.domains.size());
  for (int test = 0; test < n; ++test) {
    DomainSplit s;
    s.test_domain = test;
    for (int d = 0; d < n; ++d) {
      if (d != test) s.train_domains.push_back(d);
    }
    splits.push_back(std::move(s));
  }
  return splits;
}

PooledDataset pool_domains(const MultiDomainDataset& md, const std::vector<int>& domains) {
  std::vector<Dataset> parts;
  PooledDataset out;
  for (int d : domains) {
    if (d < 0 || static_cast<std::size_t>(d) >= md.domains.size()) {
      throw ConfigError(fmt::format("domain {} does not exist", d));
    }
    parts.push_back(md.domains[static_cast<std::size_t>(d)]);
    for (std::size_t i = 0; i < parts.back().size(); ++i) out.refs.push_back({d, i});
  }
  out.data = concat(parts);
  out.data.num_classes = md.num_classes;
  return out;
}

TrainValSplit stratified_split(const Dataset& pool, double val_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  std::map<std::pair<int, int>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < pool.size(); ++i) groups[{pool.domain_ids[i], pool.labels[i]}].push_back(i);

  auto rng = make_rng(seed, {0x76616c});
  TrainValSplit split;
  for (auto& [key, rows] : groups) {
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(rows.size())));
    split.val.insert(split.val.end(), rows.begin(), rows.begin() + static_cast<long>(n_val));
    split.train.insert(split.train.end(), rows.begin() + static_cast<long>(n_val), rows.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  if (split.train.empty() || split.val.empty()) throw ConfigError("train/validation split left a side empty");
  return split;
}

void ProtocolConfig::validate() const {
  if (n_hparam_trials < 1) throw ConfigError("n_hparam_trials must be >= 1");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must lie in (0, 1)");
  if (seeds_per_trial < 1) throw ConfigError("seeds_per_trial must be >= 1");
  if (iterations < 1) throw ConfigError("iterations must be >= 1");
  auto check_set = [](const std::vector<double>& v, const char* name) {
    if (v.empty()) throw ConfigError(fmt::format("search set '{}' is empty", name));
  };
  check_set(search_space.sam_rho, "sam_rho");
  check_set(search_space.fad_rho, "fad_rho");
  check_set(search_space.fad_alpha, "fad_alpha");
  check_set(search_space.fad_beta, "fad_beta");
}

TrialConfig sample_trial(const OptimizerConfig& templ, const SearchSpace& space, std::mt19937_64& rng) {
  auto uniform = [&](Range r) { return std::uniform_real_distribution<double>(r.lo, r.hi)(rng); };
  auto pick = [&](const std::vector<double>& set) {
    return set[std::uniform_int_distribution<std::size_t>(0, set.size() - 1)(rng)];
  };
  // Every draw happens for every method so trial i sees the same shared values.
  const double batch_log2 = uniform(space.batch_size_log2);
  const double lr_log10 = uniform(space.lr_log10);
  const double momentum_log10 = uniform(space.momentum_log10);
  const double wd_log10 = uniform(space.weight_decay_log10);
  const double sam_rho = pick(space.sam_rho);
  const double fad_rho = pick(space.fad_rho);
  const double fad_alpha = pick(space.fad_alpha);
  const double fad_beta = pick(space.fad_beta);

  TrialConfig trial;
  trial.optimizer = templ;
  trial.batch_size = static_cast<std::size_t>(std::pow(2.0, batch_log2));
  trial.optimizer.eta0 = std::pow(10.0, lr_log10);
  trial.optimizer.weight_decay = std::pow(10.0, wd_log10);
  switch (templ.method) {
    case Method::momentum_sgd:
      trial.optimizer.momentum = std::min(std::pow(10.0, momentum_log10), 0.999);
      break;
    case Method::sam:
      trial.optimizer.rho0 = sam_rho;
      break;
    case Method::gam:
      trial.optimizer.rho0 = fad_rho;
      trial.optimizer.beta = fad_beta;
      break;
    case Method::fad:
      trial.optimizer.rho0 = fad_rho;
      trial.optimizer.alpha = fad_alpha;
      trial.optimizer.beta = fad_beta;
      break;
    default:
      break;
  }
  return trial;
}

std::size_t select_trial(const std::vector<std::optional<double>>& validation_accuracy) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < validation_accuracy.size(); ++i) {
    const auto& acc = validation_accuracy[i];
    if (!acc) continue;
    if (!best || *acc > *validation_accuracy[*best]) best = i;
  }
  if (!best) throw ProtocolError("every hyperparameter trial failed");
  return *best;
}

const CellResult& BenchResult::cell(std::size_t method_index, int test_domain) const {
  for (const auto& c : cells) {
    if (c.method_index == method_index && c.test_domain == test_domain) return c;
  }
  throw ConfigError(fmt::format("no cell for method {} and domain {}", method_index, test_domain));
}

namespace {

// Held-out domain that refuses reads until model selection has finished.
class GuardedTestSet {
 public:
  GuardedTestSet(const Dataset& data, ProtocolAudit& audit) : data_(&data), audit_(&audit) {}

  void open() { open_ = true; }

  const Dataset& read() {
    ++audit_->test_reads;
    if (!open_) {
      ++audit_->test_reads_before_selection;
      throw ProtocolError("held-out domain read before model selection finished");
    }
    return *data_;
  }

 private:
  const Dataset* data_;
  ProtocolAudit* audit_;
  bool open_ = false;
};

void check_disjoint(const std::vector<SampleRef>& train, const std::vector<SampleRef>& val, int test_domain,
                    std::size_t test_size, ProtocolAudit& audit) {
  std::set<SampleRef> seen(train.begin(), train.end());
  if (seen.size() != train.size()) throw ProtocolError("duplicate sample in the training split");
  for (const auto& r : val) {
    if (!seen.insert(r).second) throw ProtocolError("validation sample also in the training split");
  }
  for (std::size_t i = 0; i < test_size; ++i) {
    if (seen.count({test_domain, i})) throw ProtocolError("held-out domain sample leaked into training data");
  }
  ++audit.disjointness_checks;
}

struct TrainedModel {
  ParamVector theta;
};

TrainedModel train_model(const MlpObjective& obj, const TrialConfig& trial, std::int64_t iterations,
                         std::uint64_t seed) {
  TrainingOptions opts;
  opts.iterations = iterations;
  opts.batch_size = std::min(trial.batch_size, obj.num_samples());
  opts.seed = seed;
  const ParamVector theta0 = obj.init_params(seed);
  return {run_training(obj, theta0, trial.optimizer, opts).theta};
}

std::uint64_t stream_seed(std::uint64_t base, std::initializer_list<std::uint64_t> parts) {
  auto rng = make_rng(base, parts);
  return rng();
}

}  // namespace

BenchResult run_protocol(const MultiDomainDataset& md, const std::vector<OptimizerConfig>& methods,
                         const ProtocolConfig& protocol, const ModelSpec& model) {
  protocol.validate();
  md.validate();
  if (methods.empty()) throw ConfigError("protocol needs at least one method");
  for (const auto& m : methods) m.validate();

  BenchResult result;
  const auto splits = leave_one_out_splits(md);
  for (const auto& m : methods) result.methods.emplace_back(to_string(m.method));
  for (const auto& s : splits) result.test_domains.push_back(s.test_domain);

  std::vector<int> layers;
  layers.push_back(static_cast<int>(md.domains.front().feature_dim()));
  layers.insert(layers.end(), model.hidden.begin(), model.hidden.end());
  layers.push_back(md.num_classes);

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    for (const auto& split : splits) {
      const auto td = static_cast<std::uint64_t>(split.test_domain);
      const PooledDataset pooled = pool_domains(md, split.train_domains);
      const TrainValSplit tv = stratified_split(pooled.data, protocol.val_fraction, stream_seed(protocol.seed, {td}));

      std::vector<SampleRef> train_refs, val_refs;
      for (auto i : tv.train) train_refs.push_back(pooled.refs[i]);
      for (auto i : tv.val) val_refs.push_back(pooled.refs[i]);
      const auto& test_domain = md.domains[static_cast<std::size_t>(split.test_domain)];

      auto train_data = std::make_shared<const Dataset>(pooled.data.subset(tv.train));
      const Dataset val_data = pooled.data.subset(tv.val);
      const MlpObjective obj(layers, train_data);
      GuardedTestSet test_set(test_domain, result.audit);

      CellResult cell;
      cell.method = methods[mi].method;
      cell.method_index = mi;
      cell.test_domain = split.test_domain;

      std::vector<std::optional<double>> val_acc;
      for (int trial = 0; trial < protocol.n_hparam_trials; ++trial) {
        check_disjoint(train_refs, val_refs, split.test_domain, test_domain.size(), result.audit);
        auto rng = make_rng(protocol.seed, {0x68706172616d, mi, td, static_cast<std::uint64_t>(trial)});
        TrialRecord rec;
        rec.index = static_cast<std::size_t>(trial);
        rec.config = sample_trial(methods[mi], protocol.search_space, rng);
        try {
          const auto trained = train_model(
              obj, rec.config, protocol.iterations,
              stream_seed(protocol.seed, {0x7472, mi, td, static_cast<std::uint64_t>(trial), 0}));
          rec.val_accuracy = obj.accuracy(trained.theta, val_data);
        } catch (const NumericalError& e) {
          rec.error = e.what();
        }
        val_acc.push_back(rec.val_accuracy);
        cell.trials.push_back(std::move(rec));
      }

      cell.selected_trial = select_trial(val_acc);
      ++result.audit.selection_calls;
      cell.selected = cell.trials[cell.selected_trial].config;
      test_set.open();

      for (int s = 0; s < protocol.seeds_per_trial; ++s) {
        const auto seed = stream_seed(protocol.seed, {0x7472, mi, td, cell.selected_trial, static_cast<std::uint64_t>(s)});
        TrainedModel trained;
        try {
          trained = train_model(obj, cell.selected, protocol.iterations, seed);
        } catch (const NumericalError& e) {
          throw ProtocolError(fmt::format("selected configuration diverged on seed {}: {}", s, e.what()));
        }
        cell.test_accuracy.push_back(obj.accuracy(trained.theta, test_set.read()));
        FlatnessOptions fo = protocol.flatness;
        fo.seed = stream_seed(protocol.flatness.seed, {mi, td, static_cast<std::uint64_t>(s)});
        cell.flatness.push_back(flatness_report(obj, trained.theta, Batch::full(), fo));
      }
      const double n = static_cast<double>(cell.test_accuracy.size());
      cell.mean_accuracy = std::accumulate(cell.test_accuracy.begin(), cell.test_accuracy.end(), 0.0) / n;
      double ss = 0.0;
      for (double a : cell.test_accuracy) ss += (a - cell.mean_accuracy) * (a - cell.mean_accuracy);
      cell.std_accuracy = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
      result.cells.push_back(std::move(cell));
    }
  }
  return result;
}

nlohmann::json to_json(const TrialConfig& trial) {
  const auto& o = trial.optimizer;
  return {{"method", to_string(o.method)},
          {"batch_size", trial.batch_size},
          {"eta0", o.eta0},
          {"rho0", o.rho0},
          {"alpha", o.alpha},
          {"beta", o.beta},
          {"xi", o.xi},
          {"schedule", to_string(o.schedule)},
          {"fad_ratio", o.fad_ratio},
          {"momentum", o.momentum},
          {"adam_beta1", o.adam_beta1},
          {"adam_beta2", o.adam_beta2},
          {"adam_eps", o.adam_eps},
          {"weight_decay", o.weight_decay}};
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

nlohmann::json to_json(const BenchResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) {
    nlohmann::json trials = nlohmann::json::array();
    for (const auto& t : c.trials) {
      trials.push_back({{"index", t.index},
                        {"val_accuracy", t.val_accuracy ? nlohmann::json(*t.val_accuracy) : nlohmann::json()},
                        {"error", t.error},
                        {"config", to_json(t.config)}});
    }
    nlohmann::json flat = nlohmann::json::array();
    std::vector<double> lambdas;
    for (const auto& f : c.flatness) {
      flat.push_back(to_json(f));
      lambdas.push_back(f.lambda_max);
    }
    cells.push_back({{"method", to_string(c.method)},
                     {"method_index", c.method_index},
                     {"test_domain", c.test_domain},
                     {"selected_trial", c.selected_trial},
                     {"selected", to_json(c.selected)},
                     {"test_accuracy", c.test_accuracy},
                     {"mean_accuracy", c.mean_accuracy},
                     {"std_accuracy", c.std_accuracy},
                     {"median_lambda_max", lambdas.empty() ? 0.0 : median(lambdas)},
                     {"flatness", flat},
                     {"trials", trials}});
  }
  return {{"methods", r.methods},
          {"test_domains", r.test_domains},
          {"cells", cells},
          {"audit",
           {{"disjointness_checks", r.audit.disjointness_checks},
            {"selection_calls", r.audit.selection_calls},
            {"selection_inputs", "validation_accuracy"},
            {"test_reads", r.audit.test_reads},
            {"test_reads_before_selection", r.audit.test_reads_before_selection}}}};
}

std::string bench_table_csv(const BenchResult& r) {
  std::string out = "test_domain";
  for (const auto& m : r.methods) out += "," + m;
  for (const auto& m : r.methods) out += "," + m + "_lambda_max";
  out += '\n';
  for (int td : r.test_domains) {
    out += std::to_string(td);
    for (std::size_t mi = 0; mi < r.methods.size(); ++mi) {
      const auto& c = r.cell(mi, td);
      out += fmt::format(",{:.1f}±{:.1f}", 100.0 * c.mean_accuracy, 100.0 * c.std_accuracy);
    }
    for (std::size_t mi = 0; mi < r.methods.size(); ++mi) {
      std::vector<double> lambdas;
      for (const auto& f : r.cell(mi, td).flatness) lambdas.push_back(f.lambda_max);
      out += fmt::format(",{}", median(lambdas));
    }
    out += '\n';
  }
  return out;
}

}  // namespace flatmin
