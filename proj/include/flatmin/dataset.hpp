#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace flatmin {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Labelled samples, one row of `inputs` per sample. Labels are class indices.
struct Dataset {
  RowMatrix inputs;
  std::vector<int> labels;
  std::vector<int> domain_ids;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return static_cast<std::size_t>(inputs.cols()); }

  // Throws ConfigError when lengths disagree or a label is out of range.
  void validate() const;

  Dataset subset(std::span<const std::size_t> indices) const;
};

Dataset concat(std::span<const Dataset> parts);

// {"inputs": [[...]], "labels": [...], "domain_ids": [...], "num_classes": k}
// `domain_ids` and `num_classes` are optional on input.
Dataset dataset_from_json(const nlohmann::json& doc);
nlohmann::json dataset_to_json(const Dataset& data);
Dataset load_dataset(const std::filesystem::path& path);

// A minibatch selection. A default-constructed Batch selects every sample;
// analytic objectives ignore the selection altogether.
class Batch {
 public:
  Batch() = default;

  static Batch full() { return Batch{}; }
  // Throws BatchSizeError when empty, out of range or containing duplicates.
  static Batch of(std::vector<std::size_t> indices, std::size_t n);

  bool is_full() const { return full_; }
  std::span<const std::size_t> indices() const { return indices_; }
  std::size_t size(std::size_t n) const { return full_ ? n : indices_.size(); }

  friend bool operator==(const Batch&, const Batch&) = default;

 private:
  std::vector<std::size_t> indices_;
  bool full_ = true;
};

// Uniform sample of b distinct indices from [0, n). Deterministic in `rng`.
Batch sample_batch(std::size_t n, std::size_t b, std::mt19937_64& rng);
Batch sample_batch(const Dataset& data, std::size_t b, std::mt19937_64& rng);

// Independent generator for a (seed, stream...) tuple.
std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream = {});

}  // namespace flatmin
