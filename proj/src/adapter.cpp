#include "gaugekit/adapter.hpp"

#include <charconv>
#include <regex>
#include <string>

#include "gaugekit/error.hpp"

namespace gauge {

namespace st = safetensors;

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

double parse_double(const std::string& s, const char* what) {
  double v = 0.0;
  auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw FormatError(std::string("adapter metadata: cannot parse ") + what + " '" + s + "'");
  }
  return v;
}

std::string factor_name(const AdapterTarget& t, char which) {
  const std::string block = is_attention_site(t.site) ? ".self_attn." : ".mlp.";
  return "base_model.model.model.layers." + std::to_string(t.layer) + block + std::string(site_name(t.site)) +
         "_proj.lora_" + which + ".weight";
}

Matrix disk_to_math(const st::Tensor& raw, const std::string& name) {
  if (raw.shape.size() != 2) throw AdapterError("adapter tensor '" + name + "' is not 2-D");
  if (!st::is_float(raw.dtype)) {
    throw UnsupportedDtypeError("adapter tensor '" + name + "' has unsupported dtype " +
                                std::string(st::dtype_name(raw.dtype)));
  }
  return Matrix(raw.shape[0], raw.shape[1], st::decode(raw)).transpose();
}

}  // namespace

Matrix LoraAdapter::delta(const AdapterTarget& target) const {
  const LoraPair& p = targets.at(target);
  return scale() * matmul(p.a, p.b);
}

void LoraAdapter::validate() const {
  if (rank == 0) throw AdapterError("adapter rank must be positive");
  if (!(alpha > 0.0)) throw AdapterError("adapter alpha must be positive");
  for (const auto& [t, p] : targets) {
    if (p.a.cols() != p.b.rows()) {
      throw AdapterError("rank inconsistency at layer " + std::to_string(t.layer) + " site " +
                         std::string(site_name(t.site)) + ": A has " + std::to_string(p.a.cols()) +
                         " columns, B has " + std::to_string(p.b.rows()) + " rows");
    }
    if (p.a.cols() != rank) {
      throw AdapterError("rank inconsistency at layer " + std::to_string(t.layer) + " site " +
                         std::string(site_name(t.site)) + ": factor rank " + std::to_string(p.a.cols()) +
                         " differs from adapter rank " + std::to_string(rank));
    }
  }
}

void validate_adapter(const LoraAdapter& adapter, const ModelConfig& config) {
  adapter.validate();
  for (const auto& [t, p] : adapter.targets) {
    if (t.layer >= config.n_layers) {
      throw ConfigMismatchError("adapter targets layer " + std::to_string(t.layer) + " but model has " +
                                std::to_string(config.n_layers));
    }
    const auto shape = site_shape(config, t.site);
    if (p.a.rows() != shape.in || p.b.cols() != shape.out) {
      throw ShapeError("adapter at layer " + std::to_string(t.layer) + " site " + std::string(site_name(t.site)) +
                       " has outer shape " + std::to_string(p.a.rows()) + "x" + std::to_string(p.b.cols()) +
                       ", base weight is " + std::to_string(shape.in) + "x" + std::to_string(shape.out));
    }
  }
}

LoraAdapter adapter_from_container(const st::Container& container) {
  static const std::regex kName(R"((?:^|\.)layers\.(\d+)\.(?:(?:self_attn|mlp)\.)?([A-Za-z]+)(?:_proj)?\.lora_(A|B)(?:\.weight)?$)");

  std::map<AdapterTarget, LoraPair> pairs;
  std::map<AdapterTarget, std::pair<bool, bool>> seen;

  for (const auto& [name, raw] : container.tensors) {
    std::smatch m;
    if (!std::regex_search(name, m, kName)) throw AdapterError("unrecognized adapter tensor name '" + name + "'");
    const auto site = parse_site(m[2].str());
    if (!site) throw AdapterError("unknown site name '" + m[2].str() + "' in adapter tensor '" + name + "'");
    const AdapterTarget t{std::stoul(m[1].str()), *site};
    auto& pair = pairs[t];
    auto& flags = seen[t];
    if (m[3] == "A") {
      if (flags.first) throw AdapterError("duplicate lora_A for tensor '" + name + "'");
      pair.a = disk_to_math(raw, name);
      pair.dtype_a = raw.dtype;
      flags.first = true;
    } else {
      if (flags.second) throw AdapterError("duplicate lora_B for tensor '" + name + "'");
      pair.b = disk_to_math(raw, name);
      pair.dtype_b = raw.dtype;
      flags.second = true;
    }
  }
  for (const auto& [t, flags] : seen) {
    if (!flags.first || !flags.second) {
      throw AdapterError("adapter at layer " + std::to_string(t.layer) + " site " + std::string(site_name(t.site)) +
                         " is missing its lora_" + (flags.first ? "B" : "A") + " factor");
    }
  }

  LoraAdapter adapter;
  adapter.targets = std::move(pairs);
  if (auto it = container.metadata.find("r"); it != container.metadata.end()) {
    adapter.rank = static_cast<std::size_t>(parse_double(it->second, "r"));
  } else if (!adapter.targets.empty()) {
    adapter.rank = adapter.targets.begin()->second.a.cols();
  }
  if (auto it = container.metadata.find("lora_alpha"); it != container.metadata.end()) {
    adapter.alpha = parse_double(it->second, "lora_alpha");
  } else {
    adapter.alpha = static_cast<double>(adapter.rank);
  }
  adapter.validate();
  return adapter;
}

st::Container container_from_adapter(const LoraAdapter& adapter) {
  adapter.validate();
  st::Container c;
  c.metadata["r"] = std::to_string(adapter.rank);
  c.metadata["lora_alpha"] = format_double(adapter.alpha);
  for (const auto& [t, p] : adapter.targets) {
    const Matrix a_disk = p.a.transpose();
    const Matrix b_disk = p.b.transpose();
    c.tensors.emplace(factor_name(t, 'A'), st::encode(a_disk.data(), {a_disk.rows(), a_disk.cols()}, p.dtype_a));
    c.tensors.emplace(factor_name(t, 'B'), st::encode(b_disk.data(), {b_disk.rows(), b_disk.cols()}, p.dtype_b));
  }
  return c;
}

LoraAdapter load_adapter(const std::filesystem::path& path) { return adapter_from_container(st::read_file(path)); }

void save_adapter(const LoraAdapter& adapter, const std::filesystem::path& path) {
  st::write_file(container_from_adapter(adapter), path);
}

LoraAdapter random_adapter(const ModelConfig& config, std::span<const Site> sites, std::size_t rank, double alpha,
                           std::uint64_t seed, double factor_scale, st::Dtype dtype) {
  LoraAdapter adapter;
  adapter.rank = rank;
  adapter.alpha = alpha;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    for (Site s : sites) {
      Rng rng = Rng::stream(seed, l, std::string("adapter.") + std::string(site_name(s)));
      const auto shape = site_shape(config, s);
      LoraPair p{gaussian_matrix(shape.in, rank, rng, factor_scale), gaussian_matrix(rank, shape.out, rng, factor_scale),
                 dtype, dtype};
      for (double& v : p.a.data()) v = st::round_to(v, dtype);
      for (double& v : p.b.data()) v = st::round_to(v, dtype);
      adapter.targets.emplace(AdapterTarget{l, s}, std::move(p));
    }
  }
  adapter.validate();
  return adapter;
}

}  // namespace gauge
