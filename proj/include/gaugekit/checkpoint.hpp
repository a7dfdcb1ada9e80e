#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gaugekit/linalg.hpp"
#include "gaugekit/safetensors.hpp"

namespace gauge {

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_size = 64;
  std::size_t n_heads = 8;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 8;
  std::size_t intermediate_size = 128;
  std::size_t vocab_size = 256;
  double rope_theta = 10000.0;
  double norm_eps = 1e-5;
  // Optional: the architecture rescales Q/K per coordinate after projection
  // (Qwen3-style QK norm). Such models refuse the Q/K gauge.
  bool qk_norm = false;

  // Throws ShapeError on non-positive sizes or n_heads % n_kv_heads != 0.
  void validate() const;

  std::size_t q_heads_per_kv() const { return n_heads / n_kv_heads; }
  std::size_t q_width() const { return n_heads * head_dim; }
  std::size_t kv_width() const { return n_kv_heads * head_dim; }

  // The 2-layer, hidden-64, 8Q/2KV-head desk configuration.
  static ModelConfig desk_default() { return {}; }

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);

  // FNV-1a over the canonical JSON encoding.
  std::uint64_t hash() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

ModelConfig load_config(const std::filesystem::path& path);
void save_config(const ModelConfig& config, const std::filesystem::path& path);

// Linear projection sites that carry a gauge or an adapter.
enum class Site { kQ, kK, kV, kO, kGate, kUp, kDown };

inline constexpr std::array<Site, 7> kAllSites{Site::kQ, Site::kK, Site::kV, Site::kO,
                                               Site::kGate, Site::kUp, Site::kDown};

std::string_view site_name(Site s);  // "q", "k", ..., "down"
std::optional<Site> parse_site(std::string_view name);
bool is_attention_site(Site s);

// In/out widths of a site in x*W orientation: W is (in x out).
struct SiteShape {
  std::size_t in;
  std::size_t out;
};
SiteShape site_shape(const ModelConfig& config, Site s);

enum class Norm { kInput, kPostAttention };

std::string weight_name(std::size_t layer, Site s);
std::string norm_name(std::size_t layer, Norm n);

// Every tensor a checkpoint must carry for `config`, in sorted order.
std::vector<std::string> canonical_tensor_names(const ModelConfig& config);

// One canonical tensor widened to double.
//
// Linear weights are stored on disk in the (out_features, in_features) layout
// and held here transposed, as (in x out), so a row vector x maps to x * W.
// Norm scale vectors are held as 1 x hidden.
struct WeightTensor {
  safetensors::Dtype dtype = safetensors::Dtype::kF32;
  std::vector<std::uint64_t> shape;  // on-disk shape
  Matrix value;
};

class CheckpointView {
 public:
  CheckpointView() = default;
  explicit CheckpointView(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig& config() const { return config_; }

  const Matrix& weight(std::size_t layer, Site s) const;
  Matrix& weight(std::size_t layer, Site s);
  const Matrix& norm(std::size_t layer, Norm n) const;

  const std::map<std::string, WeightTensor>& tensors() const { return tensors_; }
  std::map<std::string, WeightTensor>& tensors() { return tensors_; }

  // Tensors outside the canonical schema (embeddings, final norm, ...),
  // carried through untouched.
  const std::map<std::string, safetensors::Tensor>& passthrough() const { return passthrough_; }
  std::map<std::string, safetensors::Tensor>& passthrough() { return passthrough_; }

  std::map<std::string, std::string>& metadata() { return metadata_; }
  const std::map<std::string, std::string>& metadata() const { return metadata_; }

  // Throws MissingTensorError / ShapeError if the canonical schema is not
  // fully present with the expected shapes.
  void validate() const;

 private:
  const WeightTensor& at(const std::string& name) const;

  ModelConfig config_;
  std::map<std::string, WeightTensor> tensors_;
  std::map<std::string, safetensors::Tensor> passthrough_;
  std::map<std::string, std::string> metadata_;
};

CheckpointView view_from_container(const safetensors::Container& container, const ModelConfig& config);
safetensors::Container container_from_view(const CheckpointView& view);

CheckpointView load_checkpoint(const std::filesystem::path& path, const ModelConfig& config);
void save_checkpoint(const CheckpointView& view, const std::filesystem::path& path);

// Copy of `view` with every canonical tensor rounded through `dtype`
// (storage dtype tags are left as they were).
CheckpointView round_through(const CheckpointView& view, safetensors::Dtype dtype);

// Seeded random checkpoint: i.i.d. N(0, 1) / sqrt(hidden) weights, norm
// scales drawn from 1 + 0.1 * N(0, 1).
CheckpointView random_checkpoint(const ModelConfig& config, std::uint64_t seed,
                                 safetensors::Dtype dtype = safetensors::Dtype::kF64);

// Total parameter count of the canonical tensors.
std::uint64_t parameter_count(const ModelConfig& config);

}  // namespace gauge
