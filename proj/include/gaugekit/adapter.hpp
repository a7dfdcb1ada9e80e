#pragma once

#include <compare>
#include <cstddef>
#include <filesystem>
#include <map>

#include "gaugekit/checkpoint.hpp"
#include "gaugekit/linalg.hpp"
#include "gaugekit/safetensors.hpp"

namespace gauge {

struct AdapterTarget {
  std::size_t layer = 0;
  Site site = Site::kQ;

  friend auto operator<=>(const AdapterTarget&, const AdapterTarget&) = default;
};

// Low-rank factors in x*W orientation: a is (in x rank), b is (rank x out),
// so the site's weight becomes W + scale * a * b.
struct LoraPair {
  Matrix a;
  Matrix b;
  safetensors::Dtype dtype_a = safetensors::Dtype::kF32;
  safetensors::Dtype dtype_b = safetensors::Dtype::kF32;

  friend bool operator==(const LoraPair&, const LoraPair&) = default;
};

struct LoraAdapter {
  std::map<AdapterTarget, LoraPair> targets;
  std::size_t rank = 0;
  double alpha = 0.0;

  // alpha / rank; folded into the dense delta before any gauge algebra.
  double scale() const { return alpha / static_cast<double>(rank); }

  // Dense effective update C = (alpha / rank) * A * B.
  Matrix delta(const AdapterTarget& target) const;

  // Throws AdapterError unless every pair has a.cols == b.rows == rank.
  void validate() const;

  friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// Checks rank consistency and that every pair's outer shape matches the
// base weight it targets.
void validate_adapter(const LoraAdapter& adapter, const ModelConfig& config);

// Tensor names follow the PEFT convention
//   base_model.model.model.layers.{i}.self_attn.q_proj.lora_A.weight
// with lora_A stored as (rank, in) and lora_B as (out, rank). Any prefix
// before "layers." is accepted on load. Rank and alpha travel in the
// container metadata as "r" and "lora_alpha".
LoraAdapter adapter_from_container(const safetensors::Container& container);
safetensors::Container container_from_adapter(const LoraAdapter& adapter);

LoraAdapter load_adapter(const std::filesystem::path& path);
void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path);

// Seeded random adapter over the given sites of every layer; factors are
// i.i.d. N(0, 1) * factor_scale.
LoraAdapter random_adapter(const ModelConfig& config, std::span<const Site> sites, std::size_t rank, double alpha,
                           std::uint64_t seed, double factor_scale = 0.05,
                           safetensors::Dtype dtype = safetensors::Dtype::kF64);

}  // namespace gauge
