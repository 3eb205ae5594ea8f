#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flatmin/dataset.hpp"
#include "flatmin/flatness.hpp"
#include "flatmin/optimizers.hpp"

namespace flatmin {

enum class DomainTransform { identity, rotation, translation };

std::string_view to_string(DomainTransform t);
DomainTransform parse_transform(std::string_view name);

// Class-conditional Gaussians in a canonical frame; each domain applies its
// own transform to the inputs only. Class means sit evenly on a circle of
// radius `class_separation` in the first two features.
struct DomainSpec {
  int n_domains = 3;
  int per_domain_n = 200;
  int num_classes = 3;
  int feature_dim = 2;
  DomainTransform transform = DomainTransform::rotation;
  double rotation_step_deg = 30.0;          // domain i is rotated by i * step
  std::vector<double> translation_step{};   // domain i is shifted by i * step
  double noise = 0.0;                       // extra isotropic input noise per domain
  double class_separation = 2.0;
  double cluster_std = 1.0;
  std::string name = "rotated-gaussians";

  void validate() const;
};

struct DomainParams {
  double rotation_deg = 0.0;
  std::vector<double> translation;
  double noise = 0.0;
};

struct MultiDomainDataset {
  std::vector<Dataset> domains;
  std::vector<DomainParams> domain_params;
  int num_classes = 0;
  std::string name;

  void validate() const;
};

MultiDomainDataset generate_domains(const DomainSpec& spec, std::uint64_t seed);

struct DomainSplit {
  std::vector<int> train_domains;
  int test_domain = 0;
};

std::vector<DomainSplit> leave_one_out_splits(const MultiDomainDataset& md);

// Identity of a sample across the whole multi-domain dataset.
struct SampleRef {
  int domain = 0;
  std::size_t index = 0;
  friend auto operator<=>(const SampleRef&, const SampleRef&) = default;
};

struct PooledDataset {
  Dataset data;
  std::vector<SampleRef> refs;  // refs[i] is the origin of data row i
};

PooledDataset pool_domains(const MultiDomainDataset& md, const std::vector<int>& domains);

// Holds out round(val_fraction * |group|) samples of every (domain, class)
// group for validation. Returns row indices into `pool`.
struct TrainValSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};
TrainValSplit stratified_split(const Dataset& pool, double val_fraction, std::uint64_t seed);

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

// Random-search distributions; each value is base^Uniform(lo, hi).
struct SearchSpace {
  Range batch_size_log2{3.0, 5.5};
  Range lr_log10{-5.0, -3.5};
  Range momentum_log10{-1.0, 0.0};
  Range weight_decay_log10{-6.0, -3.0};
  std::vector<double> sam_rho{0.01, 0.05, 0.1, 0.2, 0.5, 1.0};
  std::vector<double> fad_rho{0.05, 0.1, 0.2, 0.5, 1.0, 2.0};
  std::vector<double> fad_alpha{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<double> fad_beta{0.01, 0.05, 0.1, 0.2, 0.5, 1.0};
};

struct ProtocolConfig {
  int n_hparam_trials = 20;
  double val_fraction = 0.2;
  int seeds_per_trial = 3;
  std::int64_t iterations = 1000;
  SearchSpace search_space;
  FlatnessOptions flatness;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ModelSpec {
  std::vector<int> hidden{16};
};

struct TrialConfig {
  OptimizerConfig optimizer;
  std::size_t batch_size = 32;
};

// Draws one configuration: shared hyperparameters for every method plus
// rho/alpha/beta where the method has them. Fields not searched keep the
// template's value.
TrialConfig sample_trial(const OptimizerConfig& templ, const SearchSpace& space, std::mt19937_64& rng);

// Index of the best validation accuracy, lowest index on ties; invalid
// trials are nullopt. Throws ProtocolError when every trial is invalid.
std::size_t select_trial(const std::vector<std::optional<double>>& validation_accuracy);

struct TrialRecord {
  std::size_t index = 0;
  TrialConfig config;
  std::optional<double> val_accuracy;
  std::string error;
};

struct CellResult {
  Method method = Method::sgd;
  std::size_t method_index = 0;
  int test_domain = 0;
  std::vector<TrialRecord> trials;
  std::size_t selected_trial = 0;
  TrialConfig selected;
  std::vector<double> test_accuracy;  // one per seed
  double mean_accuracy = 0.0;
  double std_accuracy = 0.0;
  std::vector<FlatnessReport> flatness;  // one per seed, at the final point
};

struct ProtocolAudit {
  std::size_t disjointness_checks = 0;
  std::size_t selection_calls = 0;
  std::size_t test_reads_before_selection = 0;
  std::size_t test_reads = 0;
};

struct BenchResult {
  std::vector<std::string> methods;
  std::vector<int> test_domains;
  std::vector<CellResult> cells;  // method-major, then test domain
  ProtocolAudit audit;

  const CellResult& cell(std::size_t method_index, int test_domain) const;
};

// Leave-one-domain-out random search with training-domain validation:
// selection reads only validation accuracy; the held-out domain is opened
// after selection for the final per-seed evaluation.
BenchResult run_protocol(const MultiDomainDataset& md, const std::vector<OptimizerConfig>& methods,
                         const ProtocolConfig& protocol, const ModelSpec& model);

nlohmann::json to_json(const TrialConfig& trial);
nlohmann::json to_json(const BenchResult& result);
// Rows: held-out domain; columns: methods; cells "mean±std" (accuracy in %).
// A trailing block of lambda_max columns gives the per-cell median.
std::string bench_table_csv(const BenchResult& result);

}  // namespace flatmin
