#include "gaugekit/transformer.hpp"

#include <algorithm>
#include <cmath>

#include "gaugekit/error.hpp"

namespace gauge {

namespace {

void add_delta(Matrix& w, const LoraAdapter& adapter, std::size_t layer, Site site) {
  const AdapterTarget t{layer, site};
  if (adapter.targets.contains(t)) w = w + adapter.delta(t);
}

void check_input(const Matrix& x, const ModelConfig& c) {
  if (x.cols() != c.hidden_size) {
    throw ShapeError("input width " + std::to_string(x.cols()) + " differs from hidden_size " +
                     std::to_string(c.hidden_size));
  }
}

void check_attention_weights(const LayerWeights& w, const ModelConfig& c) {
  auto check = [&](const Matrix& m, Site s) {
    const auto shape = site_shape(c, s);
    if (m.rows() != shape.in || m.cols() != shape.out) {
      throw ShapeError("attention weight " + std::string(site_name(s)) + " has shape " + std::to_string(m.rows()) +
                       "x" + std::to_string(m.cols()));
    }
  };
  check(w.q, Site::kQ);
  check(w.k, Site::kK);
  check(w.v, Site::kV);
  check(w.o, Site::kO);
}

double silu(double t) { return t / (1.0 + std::exp(-t)); }

struct Projected {
  Matrix q, k, v;
};

Projected project(const Matrix& x, const LayerWeights& w, const ModelConfig& c, const AttentionOptions& options) {
  check_input(x, c);
  check_attention_weights(w, c);
  Projected p{matmul(x, w.q), matmul(x, w.k), matmul(x, w.v)};
  if (options.rope) {
    if (c.head_dim % 2 != 0) throw ShapeError("RoPE needs an even head_dim");
    const std::size_t hd = c.head_dim;
    for (std::size_t t = 0; t < x.rows(); ++t) {
      for (std::size_t h = 0; h < c.n_heads; ++h) apply_rope(p.q.row(t).subspan(h * hd, hd), t, c.rope_theta);
      for (std::size_t h = 0; h < c.n_kv_heads; ++h) apply_rope(p.k.row(t).subspan(h * hd, hd), t, c.rope_theta);
    }
  }
  return p;
}

Matrix head_probabilities(const Projected& p, const ModelConfig& c, std::size_t q_head, const AttentionOptions& options) {
  const std::size_t seq = p.q.rows();
  const std::size_t hd = c.head_dim;
  const std::size_t kv = q_head / c.q_heads_per_kv();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  Matrix probs(seq, seq);
  for (std::size_t t = 0; t < seq; ++t) {
    const std::size_t visible = options.causal ? t + 1 : seq;
    const auto qv = p.q.row(t).subspan(q_head * hd, hd);
    auto row = probs.row(t);
    double max_score = -INFINITY;
    for (std::size_t s = 0; s < visible; ++s) {
      const auto kvv = p.k.row(s).subspan(kv * hd, hd);
      double dot = 0.0;
      for (std::size_t d = 0; d < hd; ++d) dot += qv[d] * kvv[d];
      row[s] = dot * inv_sqrt;
      max_score = std::max(max_score, row[s]);
    }
    double total = 0.0;
    for (std::size_t s = 0; s < visible; ++s) {
      row[s] = std::exp(row[s] - max_score);
      total += row[s];
    }
    for (std::size_t s = 0; s < visible; ++s) row[s] /= total;
  }
  return probs;
}

}  // namespace

LayerWeights layer_weights(const CheckpointView& view, std::size_t layer, const LoraAdapter* adapter) {
  LayerWeights w{view.weight(layer, Site::kQ),       view.weight(layer, Site::kK),
                 view.weight(layer, Site::kV),       view.weight(layer, Site::kO),
                 view.weight(layer, Site::kGate),    view.weight(layer, Site::kUp),
                 view.weight(layer, Site::kDown),    view.norm(layer, Norm::kInput),
                 view.norm(layer, Norm::kPostAttention)};
  if (adapter) {
    add_delta(w.q, *adapter, layer, Site::kQ);
    add_delta(w.k, *adapter, layer, Site::kK);
    add_delta(w.v, *adapter, layer, Site::kV);
    add_delta(w.o, *adapter, layer, Site::kO);
    add_delta(w.gate, *adapter, layer, Site::kGate);
    add_delta(w.up, *adapter, layer, Site::kUp);
    add_delta(w.down, *adapter, layer, Site::kDown);
  }
  return w;
}

void apply_rope(std::span<double> head, std::size_t position, double theta) {
  const std::size_t hd = head.size();
  const std::size_t half = hd / 2;
  for (std::size_t j = 0; j < half; ++j) {
    const double inv_freq = std::pow(theta, -2.0 * static_cast<double>(j) / static_cast<double>(hd));
    const double angle = static_cast<double>(position) * inv_freq;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double x1 = head[j];
    const double x2 = head[j + half];
    head[j] = x1 * c - x2 * s;
    head[j + half] = x2 * c + x1 * s;
  }
}

Matrix attention_probabilities(const Matrix& x, const LayerWeights& w, const ModelConfig& config, std::size_t q_head,
                               AttentionOptions options) {
  if (q_head >= config.n_heads) throw ShapeError("query head index out of range");
  return head_probabilities(project(x, w, config, options), config, q_head, options);
}

Matrix attention_block(const Matrix& x, const LayerWeights& w, const ModelConfig& config, AttentionOptions options) {
  const Projected p = project(x, w, config, options);
  const std::size_t seq = x.rows();
  const std::size_t hd = config.head_dim;
  Matrix heads(seq, config.q_width());
  for (std::size_t qh = 0; qh < config.n_heads; ++qh) {
    const Matrix probs = head_probabilities(p, config, qh, options);
    const std::size_t kv = qh / config.q_heads_per_kv();
    for (std::size_t t = 0; t < seq; ++t) {
      auto out = heads.row(t).subspan(qh * hd, hd);
      for (std::size_t s = 0; s < seq; ++s) {
        const double weight = probs(t, s);
        if (weight == 0.0) continue;
        const auto vv = p.v.row(s).subspan(kv * hd, hd);
        for (std::size_t d = 0; d < hd; ++d) out[d] += weight * vv[d];
      }
    }
  }
  return matmul(heads, w.o);
}

Matrix mlp_block(const Matrix& x, const LayerWeights& w) {
  if (w.gate.rows() != x.cols() || w.up.rows() != x.cols() || w.gate.cols() != w.up.cols() ||
      w.down.rows() != w.gate.cols()) {
    throw ShapeError("mlp_block: weight shapes do not line up with input width " + std::to_string(x.cols()));
  }
  Matrix g = matmul(x, w.gate);
  const Matrix u = matmul(x, w.up);
  auto gd = g.data();
  auto ud = u.data();
  for (std::size_t i = 0; i < gd.size(); ++i) gd[i] = silu(gd[i]) * ud[i];
  return matmul(g, w.down);
}

Matrix rms_norm(const Matrix& x, const Matrix& scale, double eps) {
  if (scale.rows() != 1 || scale.cols() != x.cols()) throw ShapeError("rms_norm: scale width mismatch");
  Matrix out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const auto row = x.row(t);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.cols()) + eps);
    auto dst = out.row(t);
    for (std::size_t j = 0; j < x.cols(); ++j) dst[j] = row[j] * inv * scale(0, j);
  }
  return out;
}

ForwardOutput forward(const CheckpointView& view, const LoraAdapter* adapter, const ForwardInput& input,
                      AttentionOptions options) {
  const ModelConfig& c = view.config();
  check_input(input.tokens, c);
  if (input.tokens.rows() == 0) throw ShapeError("forward: input must have at least one position");
  if (adapter) validate_adapter(*adapter, c);
  Matrix x = input.tokens;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const LayerWeights w = layer_weights(view, l, adapter);
    x = x + attention_block(rms_norm(x, w.input_norm, c.norm_eps), w, c, options);
    x = x + mlp_block(rms_norm(x, w.post_attention_norm, c.norm_eps), w);
  }
  return {std::move(x)};
}

ForwardInput random_input(const ModelConfig& config, std::size_t seq_len, Rng& rng) {
  return {gaussian_matrix(seq_len, config.hidden_size, rng)};
}

double max_divergence(const CheckpointView& a, const CheckpointView& b, const LoraAdapter* adapter_a,
                      const LoraAdapter* adapter_b, DivergenceOptions options) {
  if (!(a.config() == b.config())) throw ConfigMismatchError("max_divergence: checkpoints use different configs");
  double worst = 0.0;
  for (std::size_t i = 0; i < options.n_inputs; ++i) {
    Rng rng = Rng::stream(options.seed, i, "divergence.input");
    const ForwardInput input = random_input(a.config(), options.seq_len, rng);
    const auto out_a = forward(a, adapter_a, input);
    const auto out_b = forward(b, adapter_b, input);
    worst = std::max(worst, max_abs_diff(out_a.hidden, out_b.hidden));
  }
  return worst;
}

}  // namespace gauge
