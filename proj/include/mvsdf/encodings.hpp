#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mvsdf/params.hpp"
#include "mvsdf/rng.hpp"
#include "mvsdf/tensor.hpp"

namespace mvsdf {

// Multiresolution hash grid over the scene cube [-1,1]^3.
struct HashGridConfig {
  int r_min = 16;
  int r_max = 2048;
  int levels = 16;
  int features = 2;       // per level
  int table_size = 1 << 19;  // entries per level

  int output_dim() const { return levels * features; }
};

inline std::vector<int> level_resolutions(const HashGridConfig& cfg) {
  if (cfg.r_min < 2) throw std::runtime_error("hash grid: r_min must be >= 2");
  if (cfg.r_max < cfg.r_min) throw std::runtime_error("hash grid: r_max < r_min");
  if (cfg.levels < 1) throw std::runtime_error("hash grid: levels must be >= 1");
  std::vector<int> res(cfg.levels);
  if (cfg.levels == 1) {
    res[0] = cfg.r_min;
    return res;
  }
  double b = std::exp((std::log(static_cast<double>(cfg.r_max)) -
                       std::log(static_cast<double>(cfg.r_min))) /
                      (cfg.levels - 1));
  for (int l = 0; l < cfg.levels; ++l)
    res[l] = static_cast<int>(std::floor(cfg.r_min * std::pow(b, l) + 1e-9));
  return res;
}

// Config plus precomputed per-level resolutions; graph hash nodes borrow a
// pointer to this, so it must outlive any graph referencing it.
struct HashGridState {
  HashGridConfig cfg;
  std::vector<int> res;

  explicit HashGridState(const HashGridConfig& c) : cfg(c), res(level_resolutions(c)) {}
};

inline uint32_t hash_grid_index(uint32_t x, uint32_t y, uint32_t z, uint32_t table_size) {
  uint32_t h = (x * 1u) ^ (y * 2654435761u) ^ (z * 805459861u);
  return h % table_size;
}

struct FrequencyEncodingConfig {
  int octaves = 6;
  bool include_identity = false;

  int output_dim(int input_dim) const {
    return input_dim * 2 * octaves + (include_identity ? input_dim : 0);
  }
};

// Per-frame embedding table; rows fixed at construction, zero-initialized so
// transient branches start inert.
template <typename T>
Tensor<T>& create_embedding(ParameterStore<T>& store, const std::string& name, long rows,
                            long dim) {
  return store.create(name, rows, dim, true);
}

template <typename T>
Tensor<T>& create_hash_table(ParameterStore<T>& store, const std::string& name,
                             const HashGridConfig& cfg, Prng& rng) {
  Tensor<T>& t = store.create(name, cfg.table_size, cfg.levels * cfg.features, true);
  for (auto& x : t.v) x = static_cast<T>(rng.uniform(-1e-4, 1e-4));
  return t;
}

}  // namespace mvsdf
