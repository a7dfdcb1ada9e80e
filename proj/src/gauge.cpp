#include "gaugekit/gauge.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "gaugekit/error.hpp"
#include "json.hpp"

namespace gauge {

using json = nlohmann::json;

namespace {

void require_config(const GaugeSpec& spec, const ModelConfig& config) {
  if (!(spec.config == config)) throw ConfigMismatchError("gauge spec was built for a different model config");
  if (spec.layers.size() != config.n_layers) {
    throw ShapeError("gauge spec has " + std::to_string(spec.layers.size()) + " layers, model has " +
                     std::to_string(config.n_layers));
  }
}

void require_even_head_dim(const ModelConfig& config) {
  if (config.head_dim % 2 != 0) throw ShapeError("Q/K gauge needs an even head_dim for RoPE frequency pairs");
}

// W[:, col0 : col0 + g.rows()] <- W[:, block] * g
void right_multiply_cols(Matrix& w, std::size_t col0, const Matrix& g) {
  w.set_col_block(col0, matmul(w.col_block(col0, g.rows()), g));
}

// W[row0 : row0 + g.cols(), :] <- g * W[block, :]
void left_multiply_rows(Matrix& w, std::size_t row0, const Matrix& g) {
  w.set_row_block(row0, matmul(g, w.row_block(row0, g.cols())));
}

void check_vo(const LayerGauge& layer, const ModelConfig& c, std::size_t l) {
  if (layer.vo.size() != c.n_kv_heads) {
    throw ShapeError("layer " + std::to_string(l) + ": spec has " + std::to_string(layer.vo.size()) +
                     " V/O gauges, model has " + std::to_string(c.n_kv_heads) + " KV heads");
  }
  for (const auto& g : layer.vo)
    if (g.dim() != c.head_dim) throw ShapeError("layer " + std::to_string(l) + ": V/O gauge dim differs from head_dim");
}

void check_mlp(const LayerGauge& layer, const ModelConfig& c, std::size_t l) {
  if (!layer.mlp || layer.mlp->dim() != c.intermediate_size) {
    throw ShapeError("layer " + std::to_string(l) + ": MLP permutation missing or sized differently from " +
                     "intermediate_size");
  }
}

void check_qk(const LayerGauge& layer, const ModelConfig& c, std::size_t l) {
  if (layer.qk.size() != c.n_kv_heads) throw ShapeError("layer " + std::to_string(l) + ": Q/K gauge head count mismatch");
  for (const auto& head : layer.qk)
    if (head.size() != c.head_dim / 2) throw ShapeError("layer " + std::to_string(l) + ": Q/K gauge pair count mismatch");
}

std::vector<PairRotation> inverse_pairs(const std::vector<PairRotation>& pairs) {
  std::vector<PairRotation> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({-p.angle, 1.0 / p.scale});
  return out;
}

// G^-T for a scaled rotation block: same angle, reciprocal scale.
std::vector<PairRotation> inverse_transpose_pairs(const std::vector<PairRotation>& pairs) {
  std::vector<PairRotation> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({p.angle, 1.0 / p.scale});
  return out;
}

std::vector<PairRotation> transpose_pairs(const std::vector<PairRotation>& pairs) {
  std::vector<PairRotation> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({-p.angle, p.scale});
  return out;
}

enum class Direction { kPull, kPush };

LoraAdapter map_adapter(LoraAdapter adapter, const GaugeSpec& spec, Direction dir) {
  const ModelConfig& c = spec.config;
  const std::size_t hd = c.head_dim;
  const std::size_t group = c.q_heads_per_kv();
  const bool pull = dir == Direction::kPull;
  validate_adapter(adapter, c);
  if (spec.layers.size() != c.n_layers) throw ShapeError("gauge spec layer count differs from its config");

  for (auto& [target, pair] : adapter.targets) {
    const LayerGauge& layer = spec.layers[target.layer];
    switch (target.site) {
      case Site::kQ:
        if (!spec.sites.qk) break;
        check_qk(layer, c, target.layer);
        for (std::size_t q = 0; q < c.n_heads; ++q) {
          const auto& pairs = layer.qk[q / group];
          // gauged W_Q G + C = (W_Q + C G^-1) G
          const Matrix g = pull ? pair_rotation_matrix(inverse_pairs(pairs), hd) : pair_rotation_matrix(pairs, hd);
          right_multiply_cols(pair.b, q * hd, g);
        }
        break;
      case Site::kK:
        if (!spec.sites.qk) break;
        check_qk(layer, c, target.layer);
        for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
          const auto& pairs = layer.qk[h];
          // gauged W_K G^-T + C = (W_K + C G^T) G^-T
          const Matrix g = pull ? pair_rotation_matrix(transpose_pairs(pairs), hd)
                                : pair_rotation_matrix(inverse_transpose_pairs(pairs), hd);
          right_multiply_cols(pair.b, h * hd, g);
        }
        break;
      case Site::kV:
        if (!spec.sites.vo) break;
        check_vo(layer, c, target.layer);
        for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
          const Matrix& g = layer.vo[h].matrix();
          right_multiply_cols(pair.b, h * hd, pull ? g.transpose() : g);
        }
        break;
      case Site::kO:
        if (!spec.sites.vo) break;
        check_vo(layer, c, target.layer);
        for (std::size_t q = 0; q < c.n_heads; ++q) {
          const Matrix& g = layer.vo[q / group].matrix();
          // gauged G^T W_O + C = G^T (W_O + G C)
          left_multiply_rows(pair.a, q * hd, pull ? g : g.transpose());
        }
        break;
      case Site::kGate:
      case Site::kUp:
        if (!spec.sites.mlp) break;
        check_mlp(layer, c, target.layer);
        pair.b = pull ? layer.mlp->inverse_permute_columns(pair.b) : layer.mlp->permute_columns(pair.b);
        break;
      case Site::kDown:
        if (!spec.sites.mlp) break;
        check_mlp(layer, c, target.layer);
        pair.a = pull ? layer.mlp->permute_rows(pair.a) : layer.mlp->inverse_permute_rows(pair.a);
        break;
    }
  }
  return adapter;
}

}  // namespace

SiteSet SiteSet::parse(std::string_view text) {
  SiteSet s;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = text.find(',', pos);
    const std::size_t end = comma == std::string_view::npos ? text.size() : comma;
    std::string_view tok = text.substr(pos, end - pos);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    if (tok == "vo") {
      s.vo = true;
    } else if (tok == "mlp") {
      s.mlp = true;
    } else if (tok == "qk") {
      s.qk = true;
    } else if (!tok.empty()) {
      throw FormatError("unknown gauge site '" + std::string(tok) + "' (expected vo, mlp, qk)");
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return s;
}

std::vector<std::string> SiteSet::names() const {
  std::vector<std::string> out;
  if (vo) out.emplace_back("vo");
  if (mlp) out.emplace_back("mlp");
  if (qk) out.emplace_back("qk");
  return out;
}

std::string SiteSet::to_string() const {
  std::string out;
  for (const auto& n : names()) {
    if (!out.empty()) out += ',';
    out += n;
  }
  return out;
}

Matrix pair_rotation_matrix(std::span<const PairRotation> pairs, std::size_t head_dim) {
  if (head_dim % 2 != 0 || pairs.size() != head_dim / 2) {
    throw ShapeError("pair rotations: need head_dim / 2 pairs for an even head_dim");
  }
  const std::size_t half = head_dim / 2;
  Matrix g(head_dim, head_dim);
  for (std::size_t j = 0; j < half; ++j) {
    const double c = pairs[j].scale * std::cos(pairs[j].angle);
    const double s = pairs[j].scale * std::sin(pairs[j].angle);
    g(j, j) = c;
    g(j, j + half) = s;
    g(j + half, j) = -s;
    g(j + half, j + half) = c;
  }
  return g;
}

GaugeSpec build_gauge_spec(const ModelConfig& config, std::uint64_t seed, SiteSet sites) {
  config.validate();
  if (sites.qk) require_even_head_dim(config);
  GaugeSpec spec{config, sites, seed, false, {}};
  spec.layers.resize(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerGauge& layer = spec.layers[l];
    if (sites.vo) {
      Rng rng = Rng::stream(seed, l, "vo");
      for (std::size_t h = 0; h < config.n_kv_heads; ++h) layer.vo.push_back(haar_orthogonal(config.head_dim, rng));
    }
    if (sites.mlp) {
      Rng rng = Rng::stream(seed, l, "mlp");
      layer.mlp = random_permutation(config.intermediate_size, rng);
    }
    if (sites.qk) {
      Rng rng = Rng::stream(seed, l, "qk");
      layer.qk.resize(config.n_kv_heads);
      for (auto& head : layer.qk) {
        head.resize(config.head_dim / 2);
        for (auto& p : head) p = {2.0 * std::numbers::pi * rng.uniform(), 1.0};
      }
    }
  }
  return spec;
}

GaugeSpec identity_gauge_spec(const ModelConfig& config, SiteSet sites) {
  config.validate();
  if (sites.qk) require_even_head_dim(config);
  GaugeSpec spec{config, sites, std::nullopt, false, {}};
  spec.layers.resize(config.n_layers);
  for (auto& layer : spec.layers) {
    if (sites.vo) layer.vo.assign(config.n_kv_heads, OrthogonalMatrix::identity(config.head_dim));
    if (sites.mlp) layer.mlp = PermutationMatrix::identity(config.intermediate_size);
    if (sites.qk) layer.qk.assign(config.n_kv_heads, std::vector<PairRotation>(config.head_dim / 2));
  }
  return spec;
}

namespace {

void vo_layer(CheckpointView& view, const GaugeSpec& spec, std::size_t l) {
  const ModelConfig& c = view.config();
  const std::size_t hd = c.head_dim;
  const std::size_t group = c.q_heads_per_kv();
  const LayerGauge& layer = spec.layers[l];
  check_vo(layer, c, l);
  Matrix& wv = view.weight(l, Site::kV);
  Matrix& wo = view.weight(l, Site::kO);
  for (std::size_t h = 0; h < c.n_kv_heads; ++h) right_multiply_cols(wv, h * hd, layer.vo[h].matrix());
  for (std::size_t q = 0; q < c.n_heads; ++q) left_multiply_rows(wo, q * hd, layer.vo[q / group].matrix().transpose());
}

void mlp_layer(CheckpointView& view, const GaugeSpec& spec, std::size_t l) {
  const LayerGauge& layer = spec.layers[l];
  check_mlp(layer, view.config(), l);
  const PermutationMatrix& p = *layer.mlp;
  view.weight(l, Site::kGate) = p.permute_columns(view.weight(l, Site::kGate));
  view.weight(l, Site::kUp) = p.permute_columns(view.weight(l, Site::kUp));
  view.weight(l, Site::kDown) = p.inverse_permute_rows(view.weight(l, Site::kDown));
}

void require_qk_supported(const ModelConfig& c) {
  if (c.qk_norm) {
    throw UnsupportedArchitectureError(
        "Q/K gauge refused: the model applies learned per-coordinate QK normalization, which does not commute "
        "with the gauge");
  }
  require_even_head_dim(c);
}

void qk_layer(CheckpointView& view, const GaugeSpec& spec, std::size_t l) {
  const ModelConfig& c = view.config();
  const std::size_t hd = c.head_dim;
  const std::size_t group = c.q_heads_per_kv();
  const LayerGauge& layer = spec.layers[l];
  check_qk(layer, c, l);
  Matrix& wq = view.weight(l, Site::kQ);
  Matrix& wk = view.weight(l, Site::kK);
  for (std::size_t q = 0; q < c.n_heads; ++q) right_multiply_cols(wq, q * hd, pair_rotation_matrix(layer.qk[q / group], hd));
  for (std::size_t h = 0; h < c.n_kv_heads; ++h) {
    right_multiply_cols(wk, h * hd, pair_rotation_matrix(inverse_transpose_pairs(layer.qk[h]), hd));
  }
}

}  // namespace

CheckpointView apply_vo_gauge(CheckpointView view, const GaugeSpec& spec) {
  if (!spec.sites.vo) throw SiteNotEnabledError("apply_vo_gauge: vo site not enabled in gauge spec");
  require_config(spec, view.config());
  for (std::size_t l = 0; l < view.config().n_layers; ++l) vo_layer(view, spec, l);
  return view;
}

CheckpointView apply_mlp_permutation(CheckpointView view, const GaugeSpec& spec) {
  if (!spec.sites.mlp) throw SiteNotEnabledError("apply_mlp_permutation: mlp site not enabled in gauge spec");
  require_config(spec, view.config());
  for (std::size_t l = 0; l < view.config().n_layers; ++l) mlp_layer(view, spec, l);
  return view;
}

CheckpointView apply_qk_rope_gauge(CheckpointView view, const GaugeSpec& spec) {
  if (!spec.sites.qk) throw SiteNotEnabledError("apply_qk_rope_gauge: qk site not enabled in gauge spec");
  require_config(spec, view.config());
  require_qk_supported(view.config());
  for (std::size_t l = 0; l < view.config().n_layers; ++l) qk_layer(view, spec, l);
  return view;
}

void apply_gauge_to_layer(CheckpointView& view, const GaugeSpec& spec, std::size_t layer) {
  require_config(spec, view.config());
  if (layer >= view.config().n_layers) throw ShapeError("layer index " + std::to_string(layer) + " out of range");
  if (spec.sites.qk) require_qk_supported(view.config());
  if (spec.sites.vo) vo_layer(view, spec, layer);
  if (spec.sites.mlp) mlp_layer(view, spec, layer);
  if (spec.sites.qk) qk_layer(view, spec, layer);
}

CheckpointView apply_gauge(CheckpointView view, const GaugeSpec& spec) {
  require_config(spec, view.config());
  if (spec.sites.qk) require_qk_supported(view.config());
  for (std::size_t l = 0; l < view.config().n_layers; ++l) apply_gauge_to_layer(view, spec, l);
  return view;
}

LoraAdapter pullback_adapter(LoraAdapter adapter, const GaugeSpec& spec) {
  return map_adapter(std::move(adapter), spec, Direction::kPull);
}

LoraAdapter pushforward_adapter(LoraAdapter adapter, const GaugeSpec& spec) {
  return map_adapter(std::move(adapter), spec, Direction::kPush);
}

GaugeSpec compose_gauges(const GaugeSpec& first, const GaugeSpec& second) {
  if (!(first.config == second.config)) throw ConfigMismatchError("compose_gauges: specs built for different configs");
  if (!(first.sites == second.sites)) throw ConfigMismatchError("compose_gauges: specs enable different sites");
  if (first.layers.size() != second.layers.size()) throw ShapeError("compose_gauges: layer count mismatch");
  GaugeSpec out{first.config, first.sites, std::nullopt, false, {}};
  out.layers.resize(first.layers.size());
  for (std::size_t l = 0; l < first.layers.size(); ++l) {
    const LayerGauge& a = first.layers[l];
    const LayerGauge& b = second.layers[l];
    LayerGauge& o = out.layers[l];
    if (first.sites.vo) {
      check_vo(a, first.config, l);
      check_vo(b, first.config, l);
      for (std::size_t h = 0; h < a.vo.size(); ++h) o.vo.push_back(a.vo[h] * b.vo[h]);
    }
    if (first.sites.mlp) {
      check_mlp(a, first.config, l);
      check_mlp(b, first.config, l);
      o.mlp = *a.mlp * *b.mlp;
    }
    if (first.sites.qk) {
      check_qk(a, first.config, l);
      check_qk(b, first.config, l);
      o.qk.resize(a.qk.size());
      for (std::size_t h = 0; h < a.qk.size(); ++h) {
        for (std::size_t j = 0; j < a.qk[h].size(); ++j) {
          o.qk[h].push_back({a.qk[h][j].angle + b.qk[h][j].angle, a.qk[h][j].scale * b.qk[h][j].scale});
        }
      }
    }
  }
  return out;
}

GaugeSpec inverse_gauge(const GaugeSpec& spec) {
  GaugeSpec out{spec.config, spec.sites, spec.seed, !spec.inverted, {}};
  out.layers.reserve(spec.layers.size());
  for (const LayerGauge& layer : spec.layers) {
    LayerGauge inv;
    for (const auto& g : layer.vo) inv.vo.push_back(g.inverse());
    if (layer.mlp) inv.mlp = layer.mlp->inverse();
    for (const auto& head : layer.qk) inv.qk.push_back(inverse_pairs(head));
    out.layers.push_back(std::move(inv));
  }
  return out;
}

std::string GaugeSpec::to_json() const {
  if (!seed) throw Error("gauge spec has no seed (composed or hand-built) and cannot be serialized");
  std::ostringstream hash;
  hash << "0x" << std::hex << config.hash();
  json j = {{"format", "gaugekit.gauge_spec.v1"},
            {"seed", *seed},
            {"sites", sites.names()},
            {"config_hash", hash.str()},
            {"inverted", inverted}};
  return j.dump(2);
}

GaugeSpec GaugeSpec::from_json(std::string_view text, const ModelConfig& config) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("gauge spec: ") + e.what());
  }
  std::uint64_t seed = 0;
  SiteSet sites;
  std::string recorded_hash;
  bool inverted = false;
  try {
    seed = j.at("seed").get<std::uint64_t>();
    std::string joined;
    for (const auto& s : j.at("sites")) {
      if (!joined.empty()) joined += ',';
      joined += s.get<std::string>();
    }
    sites = SiteSet::parse(joined);
    recorded_hash = j.at("config_hash").get<std::string>();
    inverted = j.value("inverted", false);
  } catch (const json::exception& e) {
    throw FormatError(std::string("gauge spec: ") + e.what());
  }
  std::ostringstream hash;
  hash << "0x" << std::hex << config.hash();
  if (recorded_hash != hash.str()) {
    throw ConfigMismatchError("gauge spec was recorded for config hash " + recorded_hash + ", current config is " +
                              hash.str());
  }
  GaugeSpec spec = build_gauge_spec(config, seed, sites);
  return inverted ? inverse_gauge(spec) : spec;
}

}  // namespace gauge
