#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace auxdrop {

using FeatureId = std::uint64_t;

/// Sparse auxiliary values, sorted by feature id.
using FeatureValues = std::vector<std::pair<FeatureId, double>>;

/// One stream step: the always-present base features, whichever auxiliary
/// features arrived, and the label revealed after prediction.
struct HaphazardInstance {
  std::uint64_t t = 0;  // 1-based
  std::vector<double> base;
  FeatureValues aux;
  std::size_t label = 0;

  friend bool operator==(const HaphazardInstance&, const HaphazardInstance&) = default;
};

inline std::vector<FeatureId> feature_ids(const FeatureValues& values) {
  std::vector<FeatureId> ids;
  ids.reserve(values.size());
  for (const auto& kv : values) ids.push_back(kv.first);
  return ids;
}

}  // namespace auxdrop
