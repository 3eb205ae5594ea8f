#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flatmin/errors.hpp"
#include "flatmin/flatness.hpp"
#include "flatmin/objective.hpp"
#include "flatmin/optimizers.hpp"
#include "flatmin/shiftbench.hpp"

namespace flatmin {

// Strict view over one JSON object: every key must be consumed before
// finish(), otherwise it is reported as unknown.
class ConfigReader {
 public:
  ConfigReader(const nlohmann::json& doc, std::string where);

  bool has(const std::string& key) const { return doc_->contains(key); }

  template <typename T>
  T get(const std::string& key) {
    if (!has(key)) throw ConfigError(fmt_missing(key));
    return convert<T>(key);
  }

  template <typename T>
  T get_or(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  ConfigReader child(const std::string& key);
  const nlohmann::json& raw(const std::string& key);
  const std::string& where() const { return where_; }

  void finish() const;

 private:
  template <typename T>
  T convert(const std::string& key) {
    used_.insert(key);
    try {
      return doc_->at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt_bad(key, e.what()));
    }
  }
  std::string fmt_missing(const std::string& key) const;
  std::string fmt_bad(const std::string& key, const std::string& why) const;

  const nlohmann::json* doc_;
  std::string where_;
  std::set<std::string> used_;
};

struct DatasetSource {
  std::optional<std::string> path;
  std::optional<DomainSpec> generate;
  std::uint64_t seed = 0;
  std::vector<int> domains;  // generated datasets only; empty pools every domain
};

struct ObjectiveSpec {
  std::string kind = "quadratic";
  std::vector<double> diag;
  std::vector<std::vector<double>> matrix;
  std::size_t dim = 2;
  DoubleWellParams double_well;
  std::vector<double> c;
  double offset = 0.0;
  std::vector<int> hidden{16};
  DatasetSource dataset;
};

DatasetSource parse_dataset_source(ConfigReader r);
nlohmann::json to_json(const DatasetSource& src);

ObjectiveSpec parse_objective(ConfigReader r);
nlohmann::json to_json(const ObjectiveSpec& spec);
std::unique_ptr<Objective> build_objective(const ObjectiveSpec& spec);

OptimizerConfig parse_optimizer(ConfigReader r);
nlohmann::json to_json(const OptimizerConfig& config);

FlatnessOptions parse_flatness(ConfigReader r);
nlohmann::json to_json(const FlatnessOptions& options);

DomainSpec parse_domain_spec(ConfigReader r);
nlohmann::json to_json(const DomainSpec& spec);

ProtocolConfig parse_protocol(ConfigReader r);
nlohmann::json to_json(const ProtocolConfig& config);

ModelSpec parse_model(ConfigReader r);
nlohmann::json to_json(const ModelSpec& model);

// Initial point: explicit `theta0`, otherwise the MLP initialiser or zeros.
ParamVector initial_point(const Objective& obj, const std::optional<std::vector<double>>& theta0,
                          std::uint64_t seed);

nlohmann::json read_json_file(const std::filesystem::path& path);
// Writes to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace flatmin
