#pragma once

// Independent reference implementations for the test suites. These work on
// plain nested vectors and scalar loops and share no code with the library's
// numeric paths.

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <random>
#include <unistd.h>
#include <string>
#include <vector>

#include "gaugekit/checkpoint.hpp"
#include "gaugekit/linalg.hpp"
#include "gaugekit/transformer.hpp"

namespace gauge::testing {

using Rows = std::vector<std::vector<double>>;

inline Rows to_rows(const Matrix& m) {
  Rows r(m.rows(), std::vector<double>(m.cols()));
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) r[i][j] = m(i, j);
  return r;
}

inline Matrix from_rows(const Rows& r) {
  Matrix m(r.size(), r.empty() ? 0 : r[0].size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) m(i, j) = r[i][j];
  return m;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      out(i, j) = s;
    }
  return out;
}

// Straight-line GQA attention: per position, per query head, compute q, k,
// v by explicit dot products, rotate (j, j + hd/2) pairs, softmax without
// max-shift, then project.
inline Matrix naive_attention(const Matrix& x, const LayerWeights& w, const ModelConfig& c, bool rope = true,
                              bool causal = true) {
  const std::size_t seq = x.rows();
  const std::size_t hd = c.head_dim;
  const std::size_t half = hd / 2;
  const std::size_t group = c.n_heads / c.n_kv_heads;

  auto project = [&](const Matrix& wm, std::size_t t, std::size_t col0) {
    std::vector<double> v(hd, 0.0);
    for (std::size_t d = 0; d < hd; ++d)
      for (std::size_t i = 0; i < c.hidden_size; ++i) v[d] += x(t, i) * wm(i, col0 + d);
    return v;
  };
  auto rotate = [&](std::vector<double> v, std::size_t pos) {
    if (!rope) return v;
    std::vector<double> r(hd);
    for (std::size_t j = 0; j < half; ++j) {
      const double freq = 1.0 / std::pow(c.rope_theta, static_cast<double>(2 * j) / static_cast<double>(hd));
      const double ang = static_cast<double>(pos) * freq;
      r[j] = v[j] * std::cos(ang) - v[j + half] * std::sin(ang);
      r[j + half] = v[j] * std::sin(ang) + v[j + half] * std::cos(ang);
    }
    return r;
  };

  Matrix y(seq, c.hidden_size);
  for (std::size_t t = 0; t < seq; ++t) {
    std::vector<double> concat(c.n_heads * hd, 0.0);
    for (std::size_t qh = 0; qh < c.n_heads; ++qh) {
      const std::size_t kv = qh / group;
      const auto q = rotate(project(w.q, t, qh * hd), t);
      const std::size_t last = causal ? t : seq - 1;
      std::vector<double> weights;
      double denom = 0.0;
      for (std::size_t s = 0; s <= last; ++s) {
        const auto k = rotate(project(w.k, s, kv * hd), s);
        double dot = 0.0;
        for (std::size_t d = 0; d < hd; ++d) dot += q[d] * k[d];
        const double e = std::exp(dot / std::sqrt(static_cast<double>(hd)));
        weights.push_back(e);
        denom += e;
      }
      for (std::size_t s = 0; s <= last; ++s) {
        const auto v = project(w.v, s, kv * hd);
        for (std::size_t d = 0; d < hd; ++d) concat[qh * hd + d] += weights[s] / denom * v[d];
      }
    }
    for (std::size_t j = 0; j < c.hidden_size; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < concat.size(); ++i) s += concat[i] * w.o(i, j);
      y(t, j) = s;
    }
  }
  return y;
}

inline Matrix naive_mlp(const Matrix& x, const LayerWeights& w) {
  const std::size_t inter = w.gate.cols();
  Matrix y(x.rows(), w.down.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::vector<double> h(inter);
    for (std::size_t u = 0; u < inter; ++u) {
      double g = 0.0, up = 0.0;
      for (std::size_t i = 0; i < x.cols(); ++i) {
        g += x(t, i) * w.gate(i, u);
        up += x(t, i) * w.up(i, u);
      }
      h[u] = g / (1.0 + std::exp(-g)) * up;
    }
    for (std::size_t j = 0; j < w.down.cols(); ++j) {
      double s = 0.0;
      for (std::size_t u = 0; u < inter; ++u) s += h[u] * w.down(u, j);
      y(t, j) = s;
    }
  }
  return y;
}

// Random layer weights drawn with std::mt19937_64 + std::normal_distribution,
// independent of the library's generator.
inline LayerWeights random_layer(const ModelConfig& c, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(c.hidden_size)));
  auto fill = [&](std::size_t r, std::size_t cols) {
    Matrix m(r, cols);
    for (double& v : m.data()) v = dist(eng);
    return m;
  };
  LayerWeights w;
  w.q = fill(c.hidden_size, c.q_width());
  w.k = fill(c.hidden_size, c.kv_width());
  w.v = fill(c.hidden_size, c.kv_width());
  w.o = fill(c.q_width(), c.hidden_size);
  w.gate = fill(c.hidden_size, c.intermediate_size);
  w.up = fill(c.hidden_size, c.intermediate_size);
  w.down = fill(c.intermediate_size, c.hidden_size);
  w.input_norm = Matrix(1, c.hidden_size);
  w.post_attention_norm = Matrix(1, c.hidden_size);
  for (double& v : w.input_norm.data()) v = 1.0;
  for (double& v : w.post_attention_norm.data()) v = 1.0;
  return w;
}

inline Matrix random_tokens(std::size_t seq, std::size_t hidden, std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix m(seq, hidden);
  for (double& v : m.data()) v = dist(eng);
  return m;
}

// Single attention head of width 8 on an 8-wide residual stream.
inline ModelConfig single_head_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.hidden_size = 8;
  c.n_heads = 1;
  c.n_kv_heads = 1;
  c.head_dim = 8;
  c.intermediate_size = 16;
  return c;
}

// 4 query heads sharing 2 KV heads.
inline ModelConfig gqa_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_size = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 8;
  c.intermediate_size = 48;
  return c;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("gaugekit_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace gauge::testing
