#include "gaugekit/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <fstream>
#include <sstream>

#include "gaugekit/error.hpp"
#include "json.hpp"

namespace gauge {

using json = nlohmann::json;
namespace st = safetensors;

namespace {

constexpr std::array<std::string_view, 9> kConfigFields{"n_layers",          "hidden_size", "n_heads",
                                                        "n_kv_heads",        "head_dim",    "intermediate_size",
                                                        "vocab_size",        "rope_theta",  "norm_eps"};

std::string shape_str(const std::vector<std::uint64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::vector<std::uint64_t> expected_disk_shape(const ModelConfig& c, std::size_t /*layer*/, Site s) {
  const auto shape = site_shape(c, s);
  return {shape.out, shape.in};
}

}  // namespace

void ModelConfig::validate() const {
  if (hidden_size == 0 || n_heads == 0 || n_kv_heads == 0 || head_dim == 0 || intermediate_size == 0 ||
      vocab_size == 0) {
    throw ShapeError("model config: sizes must be positive");
  }
  if (n_heads % n_kv_heads != 0) {
    throw ShapeError("model config: n_heads (" + std::to_string(n_heads) + ") not divisible by n_kv_heads (" +
                     std::to_string(n_kv_heads) + ")");
  }
  if (!(rope_theta > 0.0) || !(norm_eps > 0.0)) throw ShapeError("model config: rope_theta and norm_eps must be positive");
}

std::string ModelConfig::to_json() const {
  json j = {{"n_layers", n_layers},     {"hidden_size", hidden_size},
            {"n_heads", n_heads},       {"n_kv_heads", n_kv_heads},
            {"head_dim", head_dim},     {"intermediate_size", intermediate_size},
            {"vocab_size", vocab_size}, {"rope_theta", rope_theta},
            {"norm_eps", norm_eps}};
  if (qk_norm) j["qk_norm"] = true;
  return j.dump(2);
}

ModelConfig ModelConfig::from_json(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("model config: expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (key != "qk_norm" && std::find(kConfigFields.begin(), kConfigFields.end(), key) == kConfigFields.end()) {
      throw FormatError("model config: unknown field '" + key + "'");
    }
  }
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.hidden_size = j.at("hidden_size").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
    c.head_dim = j.at("head_dim").get<std::size_t>();
    c.intermediate_size = j.at("intermediate_size").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.rope_theta = j.at("rope_theta").get<double>();
    c.norm_eps = j.at("norm_eps").get<double>();
    c.qk_norm = j.value("qk_norm", false);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint64_t ModelConfig::hash() const { return fnv1a64(json::parse(to_json()).dump()); }

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ModelConfig::from_json(ss.str());
}

void save_config(const ModelConfig& config, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << config.to_json() << '\n';
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

std::string_view site_name(Site s) {
  switch (s) {
    case Site::kQ: return "q";
    case Site::kK: return "k";
    case Site::kV: return "v";
    case Site::kO: return "o";
    case Site::kGate: return "gate";
    case Site::kUp: return "up";
    case Site::kDown: return "down";
  }
  return "?";
}

std::optional<Site> parse_site(std::string_view name) {
  for (Site s : kAllSites)
    if (site_name(s) == name) return s;
  return std::nullopt;
}

bool is_attention_site(Site s) { return s == Site::kQ || s == Site::kK || s == Site::kV || s == Site::kO; }

SiteShape site_shape(const ModelConfig& c, Site s) {
  switch (s) {
    case Site::kQ: return {c.hidden_size, c.q_width()};
    case Site::kK:
    case Site::kV: return {c.hidden_size, c.kv_width()};
    case Site::kO: return {c.q_width(), c.hidden_size};
    case Site::kGate:
    case Site::kUp: return {c.hidden_size, c.intermediate_size};
    case Site::kDown: return {c.intermediate_size, c.hidden_size};
  }
  return {0, 0};
}

std::string weight_name(std::size_t layer, Site s) {
  const std::string prefix = "model.layers." + std::to_string(layer);
  const std::string block = is_attention_site(s) ? ".self_attn." : ".mlp.";
  return prefix + block + std::string(site_name(s)) + "_proj.weight";
}

std::string norm_name(std::size_t layer, Norm n) {
  return "model.layers." + std::to_string(layer) +
         (n == Norm::kInput ? ".input_layernorm.weight" : ".post_attention_layernorm.weight");
}

std::vector<std::string> canonical_tensor_names(const ModelConfig& config) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Site s : kAllSites) names.push_back(weight_name(l, s));
    names.push_back(norm_name(l, Norm::kInput));
    names.push_back(norm_name(l, Norm::kPostAttention));
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::uint64_t parameter_count(const ModelConfig& config) {
  std::uint64_t per_layer = 2 * config.hidden_size;
  for (Site s : kAllSites) {
    const auto shape = site_shape(config, s);
    per_layer += static_cast<std::uint64_t>(shape.in) * shape.out;
  }
  return per_layer * config.n_layers;
}

const WeightTensor& CheckpointView::at(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw MissingTensorError("missing tensor '" + name + "'");
  return it->second;
}

const Matrix& CheckpointView::weight(std::size_t layer, Site s) const { return at(weight_name(layer, s)).value; }

Matrix& CheckpointView::weight(std::size_t layer, Site s) {
  return const_cast<Matrix&>(std::as_const(*this).weight(layer, s));
}

const Matrix& CheckpointView::norm(std::size_t layer, Norm n) const { return at(norm_name(layer, n)).value; }

void CheckpointView::validate() const {
  config_.validate();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    for (Site s : kAllSites) {
      const auto name = weight_name(l, s);
      const auto& t = at(name);
      const auto shape = site_shape(config_, s);
      if (t.value.rows() != shape.in || t.value.cols() != shape.out) {
        throw ShapeError("shape mismatch for tensor '" + name + "' (layer " + std::to_string(l) + "): expected " +
                         shape_str({shape.out, shape.in}) + ", found " +
                         shape_str({t.value.cols(), t.value.rows()}));
      }
    }
    for (Norm n : {Norm::kInput, Norm::kPostAttention}) {
      const auto name = norm_name(l, n);
      const auto& t = at(name);
      if (t.value.rows() != 1 || t.value.cols() != config_.hidden_size) {
        throw ShapeError("shape mismatch for tensor '" + name + "': expected [" +
                         std::to_string(config_.hidden_size) + "]");
      }
    }
  }
}

CheckpointView view_from_container(const st::Container& container, const ModelConfig& config) {
  config.validate();
  CheckpointView view(config);
  view.metadata() = container.metadata;

  std::map<std::string, std::vector<std::uint64_t>> expected;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Site s : kAllSites) expected[weight_name(l, s)] = expected_disk_shape(config, l, s);
    expected[norm_name(l, Norm::kInput)] = {config.hidden_size};
    expected[norm_name(l, Norm::kPostAttention)] = {config.hidden_size};
  }

  for (const auto& [name, shape] : expected) {
    auto it = container.tensors.find(name);
    if (it == container.tensors.end()) throw MissingTensorError("missing tensor '" + name + "'");
    const st::Tensor& raw = it->second;
    if (raw.shape != shape) {
      throw ShapeError("shape mismatch for tensor '" + name + "': expected " + shape_str(shape) + ", found " +
                       shape_str(raw.shape));
    }
    if (!st::is_float(raw.dtype)) {
      throw UnsupportedDtypeError("tensor '" + name + "' has unsupported dtype " +
                                  std::string(st::dtype_name(raw.dtype)));
    }
    auto values = st::decode(raw);
    for (double v : values)
      if (!std::isfinite(v)) throw FormatError("tensor '" + name + "' contains a non-finite value");
    WeightTensor w;
    w.dtype = raw.dtype;
    w.shape = raw.shape;
    if (shape.size() == 2) {
      w.value = Matrix(shape[0], shape[1], std::move(values)).transpose();
    } else {
      w.value = Matrix(1, shape[0], std::move(values));
    }
    view.tensors().emplace(name, std::move(w));
  }
  for (const auto& [name, raw] : container.tensors) {
    if (!expected.contains(name)) view.passthrough().emplace(name, raw);
  }
  return view;
}

st::Container container_from_view(const CheckpointView& view) {
  st::Container c;
  c.metadata = view.metadata();
  for (const auto& [name, w] : view.tensors()) {
    if (w.shape.size() == 2) {
      const Matrix disk = w.value.transpose();
      c.tensors.emplace(name, st::encode(disk.data(), w.shape, w.dtype));
    } else {
      c.tensors.emplace(name, st::encode(w.value.data(), w.shape, w.dtype));
    }
  }
  for (const auto& [name, raw] : view.passthrough()) c.tensors.emplace(name, raw);
  return c;
}

CheckpointView load_checkpoint(const std::filesystem::path& path, const ModelConfig& config) {
  return view_from_container(st::read_file(path), config);
}

void save_checkpoint(const CheckpointView& view, const std::filesystem::path& path) {
  st::write_file(container_from_view(view), path);
}

CheckpointView round_through(const CheckpointView& view, st::Dtype dtype) {
  CheckpointView out = view;
  for (auto& [name, w] : out.tensors())
    for (double& v : w.value.data()) v = st::round_to(v, dtype);
  return out;
}

CheckpointView random_checkpoint(const ModelConfig& config, std::uint64_t seed, st::Dtype dtype) {
  config.validate();
  CheckpointView view(config);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.hidden_size));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Site s : kAllSites) {
      Rng rng = Rng::stream(seed, l, std::string("init.") + std::string(site_name(s)));
      const auto shape = site_shape(config, s);
      WeightTensor w{dtype, {shape.out, shape.in}, gaussian_matrix(shape.in, shape.out, rng, scale)};
      for (double& v : w.value.data()) v = st::round_to(v, dtype);
      view.tensors().emplace(weight_name(l, s), std::move(w));
    }
    for (Norm n : {Norm::kInput, Norm::kPostAttention}) {
      Rng rng = Rng::stream(seed, l, n == Norm::kInput ? "init.input_norm" : "init.post_attention_norm");
      WeightTensor w{dtype, {config.hidden_size}, Matrix(1, config.hidden_size)};
      for (double& v : w.value.data()) v = st::round_to(1.0 + 0.1 * rng.normal(), dtype);
      view.tensors().emplace(norm_name(l, n), std::move(w));
    }
  }
  return view;
}

}  // namespace gauge
