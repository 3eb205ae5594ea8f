#include "flatmin/config.hpp"

#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace flatmin {

ConfigReader::ConfigReader(const nlohmann::json& doc, std::string where) : doc_(&doc), where_(std::move(where)) {
  if (!doc.is_object()) throw ConfigError(fmt::format("{} must be a JSON object", where_));
}

ConfigReader ConfigReader::child(const std::string& key) {
  used_.insert(key);
  if (!has(key)) throw ConfigError(fmt_missing(key));
  return ConfigReader(doc_->at(key), where_ + "." + key);
}

const nlohmann::json& ConfigReader::raw(const std::string& key) {
  used_.insert(key);
  if (!has(key)) throw ConfigError(fmt_missing(key));
  return doc_->at(key);
}

void ConfigReader::finish() const {
  for (const auto& [key, _] : doc_->items()) {
    if (!used_.count(key)) throw ConfigError(fmt::format("unknown key '{}' in {}", key, where_));
  }
}

std::string ConfigReader::fmt_missing(const std::string& key) const {
  return fmt::format("missing required key '{}' in {}", key, where_);
}

std::string ConfigReader::fmt_bad(const std::string& key, const std::string& why) const {
  return fmt::format("bad value for '{}' in {}: {}", key, where_, why);
}

// ---------------------------------------------------------------------------

namespace {

DoubleWellParams parse_double_well(ConfigReader& r) {
  DoubleWellParams p;
  p.sharp_center = r.get_or("sharp_center", p.sharp_center);
  p.sharp_curvature = r.get_or("sharp_curvature", p.sharp_curvature);
  p.sharp_depth = r.get_or("sharp_depth", p.sharp_depth);
  p.flat_center = r.get_or("flat_center", p.flat_center);
  p.flat_curvature = r.get_or("flat_curvature", p.flat_curvature);
  p.flat_depth = r.get_or("flat_depth", p.flat_depth);
  return p;
}

}  // namespace

DatasetSource parse_dataset_source(ConfigReader r) {
  DatasetSource src;
  if (r.has("path")) src.path = r.get<std::string>("path");
  if (r.has("generate")) src.generate = parse_domain_spec(r.child("generate"));
  src.seed = r.get_or<std::uint64_t>("seed", 0);
  src.domains = r.get_or<std::vector<int>>("domains", {});
  r.finish();
  if (src.path.has_value() == src.generate.has_value()) {
    throw ConfigError(fmt::format("{} needs exactly one of 'path' or 'generate'", r.where()));
  }
  if (src.path && !src.domains.empty()) throw ConfigError("'domains' only applies to generated datasets");
  return src;
}

nlohmann::json to_json(const DatasetSource& src) {
  nlohmann::json doc;
  if (src.path) {
    doc["path"] = *src.path;
  } else {
    doc["generate"] = to_json(*src.generate);
    doc["seed"] = src.seed;
    doc["domains"] = src.domains;
  }
  return doc;
}

ObjectiveSpec parse_objective(ConfigReader r) {
  ObjectiveSpec s;
  s.kind = r.get<std::string>("kind");
  if (s.kind == "quadratic") {
    if (r.has("diag") == r.has("matrix")) throw ConfigError("quadratic objective needs exactly one of 'diag' or 'matrix'");
    s.diag = r.get_or<std::vector<double>>("diag", {});
    s.matrix = r.get_or<std::vector<std::vector<double>>>("matrix", {});
  } else if (s.kind == "rosenbrock") {
    s.dim = r.get_or<std::size_t>("dim", 2);
  } else if (s.kind == "double_well") {
    s.double_well = parse_double_well(r);
  } else if (s.kind == "linear") {
    s.c = r.get<std::vector<double>>("c");
    s.offset = r.get_or("offset", 0.0);
  } else if (s.kind == "constant") {
    s.dim = r.get<std::size_t>("dim");
    s.offset = r.get_or("offset", 0.0);
  } else if (s.kind == "mlp") {
    s.hidden = r.get_or<std::vector<int>>("hidden", {16});
    s.dataset = parse_dataset_source(r.child("dataset"));
  } else {
    throw ConfigError(fmt::format("unknown objective kind '{}'", s.kind));
  }
  r.finish();
  return s;
}

nlohmann::json to_json(const ObjectiveSpec& s) {
  nlohmann::json doc{{"kind", s.kind}};
  if (s.kind == "quadratic") {
    if (!s.diag.empty()) doc["diag"] = s.diag;
    else doc["matrix"] = s.matrix;
  } else if (s.kind == "rosenbrock") {
    doc["dim"] = s.dim;
  } else if (s.kind == "double_well") {
    const auto& p = s.double_well;
    doc["sharp_center"] = p.sharp_center;
    doc["sharp_curvature"] = p.sharp_curvature;
    doc["sharp_depth"] = p.sharp_depth;
    doc["flat_center"] = p.flat_center;
    doc["flat_curvature"] = p.flat_curvature;
    doc["flat_depth"] = p.flat_depth;
  } else if (s.kind == "linear") {
    doc["c"] = s.c;
    doc["offset"] = s.offset;
  } else if (s.kind == "constant") {
    doc["dim"] = s.dim;
    doc["offset"] = s.offset;
  } else if (s.kind == "mlp") {
    doc["hidden"] = s.hidden;
    doc["dataset"] = to_json(s.dataset);
  }
  return doc;
}

std::unique_ptr<Objective> build_objective(const ObjectiveSpec& s) {
  if (s.kind == "quadratic") {
    if (!s.diag.empty()) {
      return std::make_unique<QuadraticObjective>(
          QuadraticObjective::diagonal(Eigen::Map<const Eigen::VectorXd>(s.diag.data(), static_cast<Eigen::Index>(s.diag.size()))));
    }
    const auto d = static_cast<Eigen::Index>(s.matrix.size());
    Eigen::MatrixXd h(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      if (static_cast<Eigen::Index>(s.matrix[static_cast<std::size_t>(i)].size()) != d) {
        throw DimensionError("quadratic matrix must be square");
      }
      for (Eigen::Index j = 0; j < d; ++j) h(i, j) = s.matrix[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return std::make_unique<QuadraticObjective>(std::move(h));
  }
  if (s.kind == "rosenbrock") return std::make_unique<RosenbrockObjective>(s.dim);
  if (s.kind == "double_well") return std::make_unique<DoubleWellObjective>(s.double_well);
  if (s.kind == "linear") {
    return std::make_unique<LinearObjective>(
        Eigen::Map<const Eigen::VectorXd>(s.c.data(), static_cast<Eigen::Index>(s.c.size())), s.offset);
  }
  if (s.kind == "constant") {
    if (s.dim < 1) throw ConfigError("constant objective needs dim >= 1");
    return std::make_unique<LinearObjective>(LinearObjective::constant(s.dim, s.offset));
  }
  if (s.kind == "mlp") {
    std::shared_ptr<const Dataset> data;
    int classes = 0;
    if (s.dataset.path) {
      data = std::make_shared<const Dataset>(load_dataset(*s.dataset.path));
    } else {
      const auto md = generate_domains(*s.dataset.generate, s.dataset.seed);
      std::vector<int> domains = s.dataset.domains;
      if (domains.empty()) {
        for (int d = 0; d < static_cast<int>(md.domains.size()); ++d) domains.push_back(d);
      }
      data = std::make_shared<const Dataset>(pool_domains(md, domains).data);
    }
    classes = data->num_classes;
    std::vector<int> layers{static_cast<int>(data->feature_dim())};
    layers.insert(layers.end(), s.hidden.begin(), s.hidden.end());
    layers.push_back(classes);
    return std::make_unique<MlpObjective>(std::move(layers), std::move(data));
  }
  throw ConfigError(fmt::format("unknown objective kind '{}'", s.kind));
}

OptimizerConfig parse_optimizer(ConfigReader r) {
  OptimizerConfig c;
  c.method = parse_method(r.get<std::string>("method"));
  c.eta0 = r.get_or("eta0", c.eta0);
  c.rho0 = r.get_or("rho0", c.rho0);
  c.alpha = r.get_or("alpha", c.alpha);
  c.beta = r.get_or("beta", c.beta);
  c.xi = r.get_or("xi", c.xi);
  c.schedule = parse_schedule(r.get_or<std::string>("schedule", "constant"));
  c.fad_ratio = r.get_or("fad_ratio", c.fad_ratio);
  c.momentum = r.get_or("momentum", c.momentum);
  c.adam_beta1 = r.get_or("adam_beta1", c.adam_beta1);
  c.adam_beta2 = r.get_or("adam_beta2", c.adam_beta2);
  c.adam_eps = r.get_or("adam_eps", c.adam_eps);
  c.weight_decay = r.get_or("weight_decay", c.weight_decay);
  r.finish();
  c.validate();
  return c;
}

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"method", to_string(c.method)},
          {"eta0", c.eta0},
          {"rho0", c.rho0},
          {"alpha", c.alpha},
          {"beta", c.beta},
          {"xi", c.xi},
          {"schedule", to_string(c.schedule)},
          {"fad_ratio", c.fad_ratio},
          {"momentum", c.momentum},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay}};
}

FlatnessOptions parse_flatness(ConfigReader r) {
  FlatnessOptions o;
  o.rho = r.get_or("rho", o.rho);
  o.alpha = r.get_or("alpha", o.alpha);
  o.budget.n_random = r.get_or("n_random", o.budget.n_random);
  o.budget.n_ascent_steps = r.get_or("n_ascent_steps", o.budget.n_ascent_steps);
  o.budget.ascent_step = r.get_or("ascent_step", o.budget.ascent_step);
  o.power.k = r.get_or("k", o.power.k);
  o.power.tol = r.get_or("tol", o.power.tol);
  o.power.max_iter = r.get_or("max_iter", o.power.max_iter);
  o.power.fd_step = r.get_or("fd_step", o.power.fd_step);
  o.n_probes = r.get_or("n_probes", o.n_probes);
  o.seed = r.get_or<std::uint64_t>("seed", o.seed);
  r.finish();
  if (!(o.rho >= 0.0)) throw ConfigError("flatness.rho must be nonnegative");
  if (!(o.alpha >= 0.0 && o.alpha <= 1.0)) throw ConfigError("flatness.alpha must lie in [0, 1]");
  if (o.budget.n_random < 1) throw ConfigError("flatness.n_random must be >= 1");
  if (o.power.k < 1) throw ConfigError("flatness.k must be >= 1");
  if (o.n_probes < 2) throw ConfigError("flatness.n_probes must be >= 2");
  return o;
}

nlohmann::json to_json(const FlatnessOptions& o) {
  return {{"rho", o.rho},
          {"alpha", o.alpha},
          {"n_random", o.budget.n_random},
          {"n_ascent_steps", o.budget.n_ascent_steps},
          {"ascent_step", o.budget.ascent_step},
          {"k", o.power.k},
          {"tol", o.power.tol},
          {"max_iter", o.power.max_iter},
          {"fd_step", o.power.fd_step},
          {"n_probes", o.n_probes},
          {"seed", o.seed}};
}

DomainSpec parse_domain_spec(ConfigReader r) {
  DomainSpec s;
  s.n_domains = r.get_or("n_domains", s.n_domains);
  s.per_domain_n = r.get_or("per_domain_n", s.per_domain_n);
  s.num_classes = r.get_or("num_classes", s.num_classes);
  s.feature_dim = r.get_or("feature_dim", s.feature_dim);
  s.transform = parse_transform(r.get_or<std::string>("transform", "rotation"));
  s.rotation_step_deg = r.get_or("rotation_step_deg", s.rotation_step_deg);
  s.translation_step = r.get_or("translation_step", s.translation_step);
  s.noise = r.get_or("noise", s.noise);
  s.class_separation = r.get_or("class_separation", s.class_separation);
  s.cluster_std = r.get_or("cluster_std", s.cluster_std);
  s.name = r.get_or<std::string>("name", s.name);
  r.finish();
  s.validate();
  return s;
}

nlohmann::json to_json(const DomainSpec& s) {
  return {{"n_domains", s.n_domains},
          {"per_domain_n", s.per_domain_n},
          {"num_classes", s.num_classes},
          {"feature_dim", s.feature_dim},
          {"transform", to_string(s.transform)},
          {"rotation_step_deg", s.rotation_step_deg},
          {"translation_step", s.translation_step},
          {"noise", s.noise},
          {"class_separation", s.class_separation},
          {"cluster_std", s.cluster_std},
          {"name", s.name}};
}

namespace {

Range parse_range(ConfigReader& r, const std::string& key, Range fallback) {
  if (!r.has(key)) return fallback;
  const auto v = r.get<std::vector<double>>(key);
  if (v.size() != 2 || !(v[0] <= v[1])) throw ConfigError(fmt::format("'{}' must be [lo, hi] with lo <= hi", key));
  return {v[0], v[1]};
}

nlohmann::json range_json(Range r) { return nlohmann::json::array({r.lo, r.hi}); }

}  // namespace

ProtocolConfig parse_protocol(ConfigReader r) {
  ProtocolConfig p;
  p.n_hparam_trials = r.get_or("n_hparam_trials", p.n_hparam_trials);
  p.val_fraction = r.get_or("val_fraction", p.val_fraction);
  p.seeds_per_trial = r.get_or("seeds_per_trial", p.seeds_per_trial);
  p.iterations = r.get_or<std::int64_t>("iterations", p.iterations);
  if (r.has("search_space")) {
    auto s = r.child("search_space");
    auto& sp = p.search_space;
    sp.batch_size_log2 = parse_range(s, "batch_size_log2", sp.batch_size_log2);
    sp.lr_log10 = parse_range(s, "lr_log10", sp.lr_log10);
    sp.momentum_log10 = parse_range(s, "momentum_log10", sp.momentum_log10);
    sp.weight_decay_log10 = parse_range(s, "weight_decay_log10", sp.weight_decay_log10);
    sp.sam_rho = s.get_or("sam_rho", sp.sam_rho);
    sp.fad_rho = s.get_or("fad_rho", sp.fad_rho);
    sp.fad_alpha = s.get_or("fad_alpha", sp.fad_alpha);
    sp.fad_beta = s.get_or("fad_beta", sp.fad_beta);
    s.finish();
  }
  if (r.has("flatness")) p.flatness = parse_flatness(r.child("flatness"));
  r.finish();
  p.validate();
  return p;
}

nlohmann::json to_json(const ProtocolConfig& p) {
  const auto& sp = p.search_space;
  return {{"n_hparam_trials", p.n_hparam_trials},
          {"val_fraction", p.val_fraction},
          {"seeds_per_trial", p.seeds_per_trial},
          {"iterations", p.iterations},
          {"search_space",
           {{"batch_size_log2", range_json(sp.batch_size_log2)},
            {"lr_log10", range_json(sp.lr_log10)},
            {"momentum_log10", range_json(sp.momentum_log10)},
            {"weight_decay_log10", range_json(sp.weight_decay_log10)},
            {"sam_rho", sp.sam_rho},
            {"fad_rho", sp.fad_rho},
            {"fad_alpha", sp.fad_alpha},
            {"fad_beta", sp.fad_beta}}},
          {"flatness", to_json(p.flatness)}};
}

ModelSpec parse_model(ConfigReader r) {
  ModelSpec m;
  m.hidden = r.get_or("hidden", m.hidden);
  r.finish();
  for (int h : m.hidden) {
    if (h < 1) throw ConfigError("model.hidden sizes must be positive");
  }
  return m;
}

nlohmann::json to_json(const ModelSpec& m) { return {{"hidden", m.hidden}}; }

ParamVector initial_point(const Objective& obj, const std::optional<std::vector<double>>& theta0,
                          std::uint64_t seed) {
  if (theta0) {
    if (theta0->size() != obj.dim()) {
      throw DimensionError(fmt::format("theta0 has {} entries, objective has {}", theta0->size(), obj.dim()));
    }
    return Eigen::Map<const ParamVector>(theta0->data(), static_cast<Eigen::Index>(theta0->size()));
  }
  if (const auto* mlp = dynamic_cast<const MlpObjective*>(&obj)) return mlp->init_params(seed);
  return ParamVector::Zero(static_cast<Eigen::Index>(obj.dim()));
}

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open '{}'", path.string()));
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("cannot parse '{}': {}", path.string(), e.what()));
  }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError(fmt::format("cannot write '{}'", tmp.string()));
    out << contents;
    if (!out) throw ConfigError(fmt::format("short write to '{}'", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace flatmin
