#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "safe/tensor.hpp"

namespace safe {

struct Dataset {
  Tensor images;            // [N x C x H x W], no gradient tracking
  std::vector<int> labels;  // class indices
  int num_classes = 0;

  int size() const { return static_cast<int>(labels.size()); }
  std::vector<int> histogram() const;
  Dataset subset(const std::vector<int>& indices) const;
};

struct Shard {
  int client_id = 0;
  Dataset dataset;
  std::vector<int> dis;  // per-class counts
};

/// Server-held monitoring set: exactly m samples per class, disjoint from
/// every client shard.
struct SesSet {
  Dataset data;
  int per_class = 0;
};

struct DataConfig {
  int classes = 8;
  int samples_per_class = 40;
  double imbalance_ratio = 10.0;
  double dirichlet_alpha = 0.5;
  int clients = 5;
  int ses_per_class = 8;
  int image_size = 16;
  uint64_t seed = 0;
};

/// Class-specific geometric foreground patch on a noisy background;
/// deterministic for a given seed.
Dataset generate_synthetic(const DataConfig& cfg);

/// Geometric keep-ratio interpolation from 1 (class 0) to 1/ratio (last class).
Dataset induce_imbalance(const Dataset& ds, double ratio, uint64_t seed);

/// Per-class Dirichlet(alpha) proportions with largest-remainder rounding;
/// retries empty shards with fresh sub-seeds up to 10 times.
std::vector<Shard> dirichlet_partition(const Dataset& ds, int clients, double alpha,
                                       uint64_t seed);

std::pair<SesSet, Dataset> reserve_ses(const Dataset& ds, int m_per_class, uint64_t seed);

/// Flat binary dump: "SAFEDS1" magic, little-endian int32 J,N,C,H,W, then N
/// int32 labels and N*C*H*W float32 pixels.
void dump_dataset(const Dataset& ds, const std::string& path);
Dataset load_dataset(const std::string& path);

}  // namespace safe
