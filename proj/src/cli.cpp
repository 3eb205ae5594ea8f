#include "flatmin/cli.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "flatmin/config.hpp"
#include "flatmin/training.hpp"

namespace flatmin::cli {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

template <typename Body>
int guarded(std::ostream& log, Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
  } catch (const DimensionError& e) {
    log << "dimension error: " << e.what() << '\n';
  } catch (const BatchSizeError& e) {
    log << "batch error: " << e.what() << '\n';
  } catch (const BudgetError& e) {
    log << "budget error: " << e.what() << '\n';
  } catch (const DegenerateDirectionError& e) {
    log << "direction error: " << e.what() << '\n';
  } catch (const NumericalError& e) {
    log << "numerical error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const ProtocolError& e) {
    log << "protocol error: " << e.what() << '\n';
    return kExitFailure;
  } catch (const InsufficientDataError& e) {
    log << "insufficient data: " << e.what() << '\n';
    return kExitFailure;
  } catch (const fs::filesystem_error& e) {
    log << "file error: " << e.what() << '\n';
  }
  return kExitUsage;
}

struct Loaded {
  json doc;
  std::uint64_t seed = 0;
  fs::path out_dir;
};

// Reads the config document, applies --seed and resolves the output directory.
Loaded load(const CommandOptions& options, ConfigReader& top, const json& doc) {
  Loaded l;
  const auto configured_seed = top.get_or<std::uint64_t>("seed", 0);
  l.seed = options.seed ? *options.seed : configured_seed;
  const auto configured = top.get_or<std::string>("out_dir", ".");
  l.out_dir = options.out_dir ? *options.out_dir : fs::path(configured);
  l.doc = doc;
  return l;
}

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

void write_resolved(const fs::path& out_dir, const json& resolved) {
  write_file_atomic(out_dir / "resolved_config.json", dump(resolved));
}

std::optional<std::vector<double>> read_point(ConfigReader& r, const std::string& key) {
  if (!r.has(key)) return std::nullopt;
  return r.get<std::vector<double>>(key);
}

MultiDomainDataset load_multi_domain(const DatasetSource& src) {
  if (src.generate) return generate_domains(*src.generate, src.seed);
  if (!src.domains.empty()) throw ConfigError("'domains' is not used by this command");
  const Dataset all = load_dataset(*src.path);
  std::map<int, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < all.size(); ++i) by_domain[all.domain_ids[i]].push_back(i);
  MultiDomainDataset md;
  md.num_classes = all.num_classes;
  md.name = fs::path(*src.path).stem().string();
  int index = 0;
  for (const auto& [id, rows] : by_domain) {
    Dataset d = all.subset(rows);
    std::fill(d.domain_ids.begin(), d.domain_ids.end(), index++);
    md.domains.push_back(std::move(d));
    md.domain_params.push_back({0.0, std::vector<double>(all.feature_dim(), 0.0), 0.0});
  }
  md.validate();
  return md;
}

json theta_json(const ParamVector& theta) { return std::vector<double>(theta.begin(), theta.end()); }

}  // namespace

int cmd_train(const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const json doc = read_json_file(options.config);
    ConfigReader top(doc, "train config");
    const auto l = load(options, top, doc);
    const auto objective = parse_objective(top.child("objective"));
    const auto theta0 = read_point(top, "theta0");
    const auto optimizer = parse_optimizer(top.child("optimizer"));
    TrainingOptions topts;
    topts.iterations = top.get_or<std::int64_t>("iterations", 100);
    topts.batch_size = top.get_or<std::size_t>("batch_size", 0);
    topts.run_id = top.get_or<std::string>("run_id", "run");
    topts.log_wall_time = top.get_or("log_wall_time", false);
    topts.seed = l.seed;
    const FlatnessOptions flat = top.has("flatness") ? parse_flatness(top.child("flatness")) : FlatnessOptions{};
    top.finish();

    json resolved = {{"objective", to_json(objective)},
                     {"optimizer", to_json(optimizer)},
                     {"iterations", topts.iterations},
                     {"batch_size", topts.batch_size},
                     {"run_id", topts.run_id},
                     {"log_wall_time", topts.log_wall_time},
                     {"flatness", to_json(flat)},
                     {"seed", l.seed}};
    if (theta0) resolved["theta0"] = *theta0;

    const auto obj = build_objective(objective);
    const ParamVector start = initial_point(*obj, theta0, l.seed);
    write_resolved(l.out_dir, resolved);

    std::ostringstream csv;
    CsvLogSink sink(csv);
    TrainingResult result;
    try {
      result = run_training(*obj, start, optimizer, topts, &sink);
    } catch (const NumericalError& e) {
      write_file_atomic(l.out_dir / "run.csv", csv.str());
      log << "numerical error: " << e.what() << " (partial log written)\n";
      return kExitFailure;
    }
    write_file_atomic(l.out_dir / "run.csv", csv.str());
    write_file_atomic(l.out_dir / "final_theta.json",
                      dump({{"theta", theta_json(result.theta)}, {"config", resolved}}));
    json report = to_json(flatness_report(*obj, result.theta, Batch::full(), flat));
    report["config"] = resolved;
    write_file_atomic(l.out_dir / "flatness.json", dump(report));
    log << fmt::format("train: {} steps of {} written to {}\n", topts.iterations, to_string(optimizer.method),
                       l.out_dir.string());
    return kExitOk;
  });
}

int cmd_flatness(const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const json doc = read_json_file(options.config);
    ConfigReader top(doc, "flatness config");
    const auto l = load(options, top, doc);
    const auto objective = parse_objective(top.child("objective"));
    auto theta = read_point(top, "theta");
    std::optional<std::string> theta_path;
    if (top.has("theta_path")) {
      if (theta) throw ConfigError("give either 'theta' or 'theta_path', not both");
      theta_path = top.get<std::string>("theta_path");
      const json point = read_json_file(*theta_path);
      try {
        theta = point.is_object() ? point.at("theta").get<std::vector<double>>() : point.get<std::vector<double>>();
      } catch (const json::exception& e) {
        throw ConfigError(fmt::format("bad point file '{}': {}", *theta_path, e.what()));
      }
    }
    const FlatnessOptions flat = top.has("flatness") ? parse_flatness(top.child("flatness")) : FlatnessOptions{};
    top.finish();

    json resolved = {{"objective", to_json(objective)}, {"flatness", to_json(flat)}, {"seed", l.seed}};
    if (theta_path) {
      resolved["theta_path"] = *theta_path;
    } else if (theta) {
      resolved["theta"] = *theta;
    }
    const auto obj = build_objective(objective);
    const ParamVector point = initial_point(*obj, theta, l.seed);
    json report = to_json(flatness_report(*obj, point, Batch::full(), flat));
    report["config"] = resolved;
    write_resolved(l.out_dir, resolved);
    write_file_atomic(l.out_dir / "flatness.json", dump(report));
    log << fmt::format("flatness: lambda_max {} trace {}\n", report["lambda_max"].get<double>(),
                       report["trace"].get<double>());
    return kExitOk;
  });
}

int cmd_converge(const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const json doc = read_json_file(options.config);
    ConfigReader top(doc, "converge config");
    const auto l = load(options, top, doc);
    const auto objective = parse_objective(top.child("objective"));
    const auto theta0 = read_point(top, "theta0");
    const auto optimizer = parse_optimizer(top.child("optimizer"));
    TrainingOptions topts;
    topts.iterations = top.get_or<std::int64_t>("iterations", 1000);
    topts.batch_size = top.get_or<std::size_t>("batch_size", 0);
    topts.seed = l.seed;
    topts.keep_traces = true;
    top.finish();
    if (optimizer.schedule != Schedule::inverse_sqrt) {
      throw ConfigError(
          "converge requires optimizer.schedule = \"inverse_sqrt\": the convergence bound assumes "
          "eta_t = eta0/sqrt(t) and rho_t = rho0/sqrt(t)");
    }

    json resolved = {{"objective", to_json(objective)},
                     {"optimizer", to_json(optimizer)},
                     {"iterations", topts.iterations},
                     {"batch_size", topts.batch_size},
                     {"seed", l.seed}};
    if (theta0) resolved["theta0"] = *theta0;
    const auto obj = build_objective(objective);
    const auto result = run_training(*obj, initial_point(*obj, theta0, l.seed), optimizer, topts);
    const auto rep = convergence_check(result.record.traces, optimizer.eta0, optimizer.rho0);
    json out = {{"num_steps", rep.num_steps},
                {"c1", rep.c1},
                {"c2", rep.c2},
                {"residual", rep.residual},
                {"r_squared", rep.r_squared},
                {"fit_begin", rep.fit_begin},
                {"min_delta_sq", rep.min_delta_sq},
                {"min_delta_sq_first_decile", rep.min_delta_sq_first_decile},
                {"min_delta_sq_last_decile", rep.min_delta_sq_last_decile},
                {"schedule_ok", rep.schedule_ok},
                {"warning", rep.warning},
                {"cumulative", rep.cumulative},
                {"config", resolved}};
    write_resolved(l.out_dir, resolved);
    write_file_atomic(l.out_dir / "convergence.json", dump(out));
    log << fmt::format("converge: c1 {} c2 {} r^2 {}\n", rep.c1, rep.c2, rep.r_squared);
    return kExitOk;
  });
}

int cmd_bench(const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const json doc = read_json_file(options.config);
    ConfigReader top(doc, "bench config");
    const auto l = load(options, top, doc);
    const auto source = parse_dataset_source(top.child("dataset"));
    std::vector<OptimizerConfig> methods;
    const auto& list = top.raw("methods");
    if (!list.is_array() || list.empty()) throw ConfigError("'methods' must be a nonempty array");
    for (std::size_t i = 0; i < list.size(); ++i) {
      methods.push_back(parse_optimizer(ConfigReader(list[i], fmt::format("methods[{}]", i))));
    }
    ProtocolConfig protocol = top.has("protocol") ? parse_protocol(top.child("protocol")) : ProtocolConfig{};
    const ModelSpec model = top.has("model") ? parse_model(top.child("model")) : ModelSpec{};
    top.finish();
    protocol.seed = l.seed;

    json method_docs = json::array();
    for (const auto& m : methods) method_docs.push_back(to_json(m));
    const json resolved = {{"dataset", to_json(source)},
                           {"methods", method_docs},
                           {"protocol", to_json(protocol)},
                           {"model", to_json(model)},
                           {"seed", l.seed}};

    const auto md = load_multi_domain(source);
    const auto result = run_protocol(md, methods, protocol, model);
    json out = to_json(result);
    out["config"] = resolved;
    write_resolved(l.out_dir, resolved);
    write_file_atomic(l.out_dir / "bench.json", dump(out));
    write_file_atomic(l.out_dir / "bench.csv", bench_table_csv(result));
    for (const auto& c : result.cells) {
      const json sidecar = {{"method", to_string(c.method)},
                            {"method_index", c.method_index},
                            {"test_domain", c.test_domain},
                            {"selected_trial", c.selected_trial},
                            {"val_accuracy", *c.trials[c.selected_trial].val_accuracy},
                            {"hyperparameters", to_json(c.selected)}};
      write_file_atomic(l.out_dir / "selected" /
                            fmt::format("{}_{}_domain{}.json", c.method_index, to_string(c.method), c.test_domain),
                        dump(sidecar));
    }
    log << fmt::format("bench: {} cells written to {}\n", result.cells.size(), l.out_dir.string());
    return kExitOk;
  });
}

namespace {

void set_parameter(OptimizerConfig& c, const std::string& name, double value) {
  if (name == "rho") c.rho0 = value;
  else if (name == "alpha") c.alpha = value;
  else if (name == "beta") c.beta = value;
  else if (name == "fad_ratio") c.fad_ratio = value;
  else throw ConfigError(fmt::format("sweep parameter must be rho, alpha, beta or fad_ratio, got '{}'", name));
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

int cmd_sweep(const CommandOptions& options, std::ostream& log) {
  return guarded(log, [&] {
    const json doc = read_json_file(options.config);
    ConfigReader top(doc, "sweep config");
    const auto l = load(options, top, doc);
    const auto source = parse_dataset_source(top.child("dataset"));
    const int test_domain = top.get_or("test_domain", 0);
    const ModelSpec model = top.has("model") ? parse_model(top.child("model")) : ModelSpec{};
    const auto base = parse_optimizer(top.child("optimizer"));
    const auto iterations = top.get_or<std::int64_t>("iterations", 500);
    const auto batch_size = top.get_or<std::size_t>("batch_size", 32);
    const auto parameter = top.get<std::string>("parameter");
    const auto values = top.get<std::vector<double>>("values");
    const int repeats = top.get_or("repeats", 3);
    const FlatnessOptions flat = top.has("flatness") ? parse_flatness(top.child("flatness")) : FlatnessOptions{};
    top.finish();
    if (values.empty()) throw ConfigError("sweep grid 'values' is empty");
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    {
      OptimizerConfig probe = base;
      set_parameter(probe, parameter, values.front());
    }

    const json resolved = {{"dataset", to_json(source)},
                           {"test_domain", test_domain},
                           {"model", to_json(model)},
                           {"optimizer", to_json(base)},
                           {"iterations", iterations},
                           {"batch_size", batch_size},
                           {"parameter", parameter},
                           {"values", values},
                           {"repeats", repeats},
                           {"flatness", to_json(flat)},
                           {"seed", l.seed}};

    const auto md = load_multi_domain(source);
    if (test_domain < 0 || static_cast<std::size_t>(test_domain) >= md.domains.size()) {
      throw ConfigError(fmt::format("test_domain {} does not exist", test_domain));
    }
    std::vector<int> train_domains;
    for (int d = 0; d < static_cast<int>(md.domains.size()); ++d) {
      if (d != test_domain) train_domains.push_back(d);
    }
    auto train = std::make_shared<const Dataset>(pool_domains(md, train_domains).data);
    std::vector<int> layers{static_cast<int>(train->feature_dim())};
    layers.insert(layers.end(), model.hidden.begin(), model.hidden.end());
    layers.push_back(md.num_classes);
    const MlpObjective obj(layers, train);
    const auto& test = md.domains[static_cast<std::size_t>(test_domain)];

    std::string csv = "value,test_accuracy,lambda_max,wall_ms,status\n";
    json rows = json::array();
    for (double value : values) {
      OptimizerConfig cfg = base;
      set_parameter(cfg, parameter, value);
      double accuracy = std::numeric_limits<double>::quiet_NaN();
      double lambda = std::numeric_limits<double>::quiet_NaN();
      double wall = std::numeric_limits<double>::quiet_NaN();
      std::string status = "ok";
      try {
        cfg.validate();
        TrainingOptions topts;
        topts.iterations = iterations;
        topts.batch_size = std::min(batch_size, obj.num_samples());
        topts.seed = l.seed;
        std::vector<double> walls;
        TrainingResult result;
        for (int r = 0; r < repeats; ++r) {
          result = run_training(obj, obj.init_params(l.seed), cfg, topts);
          walls.push_back(result.record.loop_ms);
        }
        wall = median_of(walls);
        accuracy = obj.accuracy(result.theta, test);
        lambda = power_iteration(obj, result.theta, Batch::full(), flat.power, flat.seed).values.front();
      } catch (const ConfigError& e) {
        status = fmt::format("config_error: {}", e.what());
      } catch (const NumericalError& e) {
        status = fmt::format("numerical_error: {}", e.what());
      }
      std::replace(status.begin(), status.end(), ',', ';');
      csv += fmt::format("{},{},{},{},{}\n", value, accuracy, lambda, wall, status);
      rows.push_back({{"value", value},
                      {"test_accuracy", std::isfinite(accuracy) ? json(accuracy) : json()},
                      {"lambda_max", std::isfinite(lambda) ? json(lambda) : json()},
                      {"wall_ms", std::isfinite(wall) ? json(wall) : json()},
                      {"status", status}});
    }
    write_resolved(l.out_dir, resolved);
    write_file_atomic(l.out_dir / "sweep.csv", csv);
    write_file_atomic(l.out_dir / "sweep.json", dump({{"rows", rows}, {"config", resolved}}));
    log << fmt::format("sweep: {} rows over {} written to {}\n", values.size(), parameter, l.out_dir.string());
    return kExitOk;
  });
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"flatmin: flatness-aware optimisation experiments"};
  app.require_subcommand(1);
  CommandOptions options;
  std::string config;
  std::uint64_t seed = 0;
  std::string out_dir;

  using Handler = int (*)(const CommandOptions&, std::ostream&);
  const std::vector<std::pair<std::string, std::pair<std::string, Handler>>> commands = {
      {"train", {"run one configured training and write the per-step log", &cmd_train}},
      {"flatness", {"measure flatness and the Hessian spectrum at a point", &cmd_flatness}},
      {"converge", {"run an inverse-sqrt schedule and fit the convergence curve", &cmd_converge}},
      {"bench", {"leave-one-domain-out optimizer benchmark", &cmd_bench}},
      {"sweep", {"ablation over rho, alpha, beta or fad_ratio", &cmd_sweep}},
  };
  std::vector<std::pair<CLI::App*, Handler>> subs;
  std::vector<CLI::Option*> seed_opts, out_opts;
  for (const auto& [name, info] : commands) {
    auto* sub = app.add_subcommand(name, info.first);
    sub->add_option("--config", config, "experiment config (JSON)")->required();
    seed_opts.push_back(sub->add_option("--seed", seed, "override the config seed"));
    out_opts.push_back(sub->add_option("--out-dir", out_dir, "output directory"));
    subs.emplace_back(sub, info.second);
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  options.config = config;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i].first->parsed()) continue;
    if (seed_opts[i]->count()) options.seed = seed;
    if (out_opts[i]->count()) options.out_dir = out_dir;
    return subs[i].second(options, err);
  }
  return kExitUsage;
}

}  // namespace flatmin::cli
