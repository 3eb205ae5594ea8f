#include "flatmin/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "flatmin/errors.hpp"

namespace flatmin {

void Dataset::validate() const {
  const auto n = size();
  if (static_cast<std::size_t>(inputs.rows()) != n) {
    throw ConfigError(fmt::format("dataset has {} input rows but {} labels", inputs.rows(), n));
  }
  if (domain_ids.size() != n) {
    throw ConfigError(fmt::format("dataset has {} domain ids but {} labels", domain_ids.size(), n));
  }
  if (num_classes < 1) throw ConfigError("dataset needs at least one class");
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw ConfigError(fmt::format("label {} outside [0, {})", y, num_classes));
    }
  }
  if (!inputs.allFinite()) throw ConfigError("dataset inputs must be finite");
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.num_classes = num_classes;
  out.inputs.resize(static_cast<Eigen::Index>(indices.size()), inputs.cols());
  out.labels.reserve(indices.size());
  out.domain_ids.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto i = indices[r];
    if (i >= size()) throw ConfigError(fmt::format("subset index {} out of range", i));
    out.inputs.row(static_cast<Eigen::Index>(r)) = inputs.row(static_cast<Eigen::Index>(i));
    out.labels.push_back(labels[i]);
    out.domain_ids.push_back(domain_ids[i]);
  }
  return out;
}

Dataset concat(std::span<const Dataset> parts) {
  Dataset out;
  if (parts.empty()) return out;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.inputs.cols() != parts.front().inputs.cols()) {
      throw ConfigError("cannot concatenate datasets with different feature dimensions");
    }
    total += p.size();
    out.num_classes = std::max(out.num_classes, p.num_classes);
  }
  out.inputs.resize(static_cast<Eigen::Index>(total), parts.front().inputs.cols());
  Eigen::Index row = 0;
  for (const auto& p : parts) {
    out.inputs.middleRows(row, p.inputs.rows()) = p.inputs;
    row += p.inputs.rows();
    out.labels.insert(out.labels.end(), p.labels.begin(), p.labels.end());
    out.domain_ids.insert(out.domain_ids.end(), p.domain_ids.begin(), p.domain_ids.end());
  }
  return out;
}

Dataset dataset_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("dataset document must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "inputs" && key != "labels" && key != "domain_ids" && key != "num_classes") {
      throw ConfigError(fmt::format("unknown dataset key '{}'", key));
    }
  }
  if (!doc.contains("inputs") || !doc.contains("labels")) {
    throw ConfigError("dataset requires 'inputs' and 'labels'");
  }
  Dataset data;
  try {
    const auto rows = doc.at("inputs").get<std::vector<std::vector<double>>>();
    data.labels = doc.at("labels").get<std::vector<int>>();
    const std::size_t cols = rows.empty() ? 0 : rows.front().size();
    data.inputs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != cols) throw ConfigError("dataset inputs are ragged");
      for (std::size_t c = 0; c < cols; ++c) {
        data.inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      }
    }
    if (doc.contains("domain_ids")) {
      data.domain_ids = doc.at("domain_ids").get<std::vector<int>>();
    } else {
      data.domain_ids.assign(data.labels.size(), 0);
    }
    if (doc.contains("num_classes")) {
      data.num_classes = doc.at("num_classes").get<int>();
    } else {
      data.num_classes =
          data.labels.empty() ? 0 : *std::max_element(data.labels.begin(), data.labels.end()) + 1;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("malformed dataset: {}", e.what()));
  }
  data.validate();
  return data;
}

nlohmann::json dataset_to_json(const Dataset& data) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < data.inputs.rows(); ++r) {
    std::vector<double> row(data.inputs.row(r).begin(), data.inputs.row(r).end());
    rows.push_back(row);
  }
  return {{"inputs", rows},
          {"labels", data.labels},
          {"domain_ids", data.domain_ids},
          {"num_classes", data.num_classes}};
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open dataset file '{}'", path.string()));
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("cannot parse dataset file '{}': {}", path.string(), e.what()));
  }
  return dataset_from_json(doc);
}

Batch Batch::of(std::vector<std::size_t> indices, std::size_t n) {
  if (indices.empty()) throw BatchSizeError("batch must contain at least one index");
  std::vector<std::size_t> sorted = indices;
  std::sort(sorted.begin(), sorted.end());
  if (sorted.back() >= n) throw BatchSizeError(fmt::format("batch index {} >= n = {}", sorted.back(), n));
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw BatchSizeError("batch indices must be distinct");
  }
  Batch b;
  b.indices_ = std::move(indices);
  b.full_ = false;
  return b;
}

Batch sample_batch(std::size_t n, std::size_t b, std::mt19937_64& rng) {
  if (b < 1 || b > n) throw BatchSizeError(fmt::format("batch size {} not in [1, {}]", b, n));
  // Partial Fisher-Yates over [0, n).
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < b; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(b);
  return Batch::of(std::move(pool), n);
}

Batch sample_batch(const Dataset& data, std::size_t b, std::mt19937_64& rng) {
  return sample_batch(data.size(), b, rng);
}

std::mt19937_64 make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> stream) {
  std::vector<std::uint32_t> words;
  words.push_back(static_cast<std::uint32_t>(seed));
  words.push_back(static_cast<std::uint32_t>(seed >> 32));
  for (auto s : stream) {
    words.push_back(static_cast<std::uint32_t>(s));
    words.push_back(static_cast<std::uint32_t>(s >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

}  // namespace flatmin
