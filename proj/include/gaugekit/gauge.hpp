#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gaugekit/adapter.hpp"
#include "gaugekit/checkpoint.hpp"
#include "gaugekit/linalg.hpp"

namespace gauge {

// Which symmetries a spec exercises.
struct SiteSet {
  bool vo = false;   // per-KV-head orthogonal change of basis between W_V and W_O
  bool mlp = false;  // hidden-unit permutation of the gated MLP
  bool qk = false;   // RoPE-commuting per-frequency-pair gauge between W_Q and W_K

  // Comma-separated list of "vo", "mlp", "qk"; empty string is the empty set.
  // Throws FormatError on unknown names.
  static SiteSet parse(std::string_view text);
  std::string to_string() const;
  std::vector<std::string> names() const;
  bool empty() const { return !vo && !mlp && !qk; }

  friend bool operator==(const SiteSet&, const SiteSet&) = default;
};

// Scaled rotation scale * R(angle) acting on one (j, j + head_dim/2)
// frequency pair of a head. Under the row-vector convention q' = q G the
// block is scale * [[cos, sin], [-sin, cos]], the same form as a RoPE
// rotation, so the two commute. scale = 1 gives an orthogonal block.
struct PairRotation {
  double angle = 0.0;
  double scale = 1.0;

  friend bool operator==(const PairRotation&, const PairRotation&) = default;
};

// head_dim x head_dim matrix for a set of pair rotations (head_dim / 2 entries).
Matrix pair_rotation_matrix(std::span<const PairRotation> pairs, std::size_t head_dim);

struct LayerGauge {
  // One per KV head when vo is enabled, otherwise empty.
  std::vector<OrthogonalMatrix> vo;
  // Present when mlp is enabled.
  std::optional<PermutationMatrix> mlp;
  // [kv_head][pair] when qk is enabled, otherwise empty. Every query head of
  // a KV group shares that group's rotations.
  std::vector<std::vector<PairRotation>> qk;
};

struct GaugeSpec {
  ModelConfig config;
  SiteSet sites;
  // Set when the spec is exactly build_gauge_spec(config, *seed, sites),
  // possibly inverted. Composed specs carry no seed.
  std::optional<std::uint64_t> seed;
  bool inverted = false;
  std::vector<LayerGauge> layers;

  // Regenerable JSON form: {"seed", "sites", "config_hash", "inverted"}.
  // Throws Error for composed specs, which have no seed to regenerate from.
  std::string to_json() const;
  // Rebuilds the matrices from the seed; throws ConfigMismatchError if the
  // recorded config hash differs from `config`.
  static GaugeSpec from_json(std::string_view text, const ModelConfig& config);
};

// Independent draws per (layer, site) stream: Haar gauges for each KV head,
// a uniform permutation of the intermediate units, uniform angles in
// [0, 2*pi) with unit scale for each frequency pair.
GaugeSpec build_gauge_spec(const ModelConfig& config, std::uint64_t seed, SiteSet sites);

// Spec with the given sites enabled and every transform the identity.
GaugeSpec identity_gauge_spec(const ModelConfig& config, SiteSet sites);

// W_V column block of KV head h -> W_V,h G_h; W_O row block of every query
// head q in group h -> G_h^T W_O,q.
CheckpointView apply_vo_gauge(CheckpointView view, const GaugeSpec& spec);

// W_gate -> W_gate P, W_up -> W_up P, W_down -> P^-1 W_down.
CheckpointView apply_mlp_permutation(CheckpointView view, const GaugeSpec& spec);

// W_Q head block -> W_Q,q G_h, W_K head block -> W_K,h G_h^-T with G_h block
// diagonal over frequency pairs. Throws UnsupportedArchitectureError when the
// config declares QK normalization.
CheckpointView apply_qk_rope_gauge(CheckpointView view, const GaugeSpec& spec);

// Applies every enabled site.
CheckpointView apply_gauge(CheckpointView view, const GaugeSpec& spec);

// Applies every enabled site to one layer in place; layers are independent.
void apply_gauge_to_layer(CheckpointView& view, const GaugeSpec& spec, std::size_t layer);

// The adapter that, installed on the original weights, reproduces the given
// adapter installed on the gauged weights. Exactly one factor changes per
// site; sites whose gauge is disabled pass through.
LoraAdapter pullback_adapter(LoraAdapter adapter, const GaugeSpec& spec);

// Inverse of pullback_adapter: the adapter to install on the gauged weights
// so it behaves like the given adapter on the original weights.
LoraAdapter pushforward_adapter(LoraAdapter adapter, const GaugeSpec& spec);

// apply(compose(first, second)) == apply(second) after apply(first).
GaugeSpec compose_gauges(const GaugeSpec& first, const GaugeSpec& second);

// apply(inverse_gauge(s)) undoes apply(s).
GaugeSpec inverse_gauge(const GaugeSpec& spec);

}  // namespace gauge
