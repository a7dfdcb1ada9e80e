#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gaugekit/adapter.hpp"
#include "gaugekit/checkpoint.hpp"
#include "gaugekit/error.hpp"
#include "gaugekit/gauge.hpp"
#include "gaugekit/safelora.hpp"
#include "gaugekit/safetensors.hpp"
#include "gaugekit/transformer.hpp"
#include "json.hpp"

namespace gauge::cli {

namespace {

using json = nlohmann::json;
using Clock = std::chrono::steady_clock;
namespace fs = std::filesystem;
namespace st = safetensors;

// Parameter count of the checkpoint the wall-time claim was made for.
constexpr double kReferenceParams = 70e9;

// Tolerance applied after storage narrowing when --storage-precision is set
// and --tolerance is not.
constexpr double kNarrowedTolerance = 1e-2;

// Evasion results must satisfy both residual bounds.
constexpr double kEvasionTolerance = 1e-8;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3e", v);
  return buf;
}

const CLI::Validator kWritablePath(
    [](std::string& path) -> std::string {
      const fs::path parent = fs::absolute(fs::path(path)).parent_path();
      if (!fs::is_directory(parent)) return "directory does not exist: " + parent.string();
      return {};
    },
    "WRITABLE_PATH");

st::Dtype parse_storage_dtype(const std::string& name) {
  if (name == "f64") return st::Dtype::kF64;
  if (name == "f32") return st::Dtype::kF32;
  if (name == "bf16") return st::Dtype::kBF16;
  if (name == "f16") return st::Dtype::kF16;
  throw FormatError("unknown storage dtype '" + name + "'");
}

const std::vector<std::string> kDtypeChoices{"f64", "f32", "bf16", "f16"};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text << '\n';
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json report(const std::string& command, std::uint64_t seed, const SiteSet& sites, std::optional<double> divergence,
            double wall_time) {
  json j = {{"command", command},
            {"seed", seed},
            {"sites", sites.names()},
            {"max_divergence", nullptr},
            {"wall_time_seconds", wall_time}};
  if (divergence) j["max_divergence"] = *divergence;
  return j;
}

struct Options {
  std::uint64_t seed = 42;
  std::string sites = "vo,mlp";
  double tolerance = 1e-10;
  std::size_t n_inputs = 100;
  bool json_output = false;

  std::string model, model_a, model_b, config, out, config_out, spec, spec_out, report;
  std::string adapter, adapter_a, adapter_b, adapter_out, safelora_out, input;
  std::string dtype = "f64";
  std::string storage_precision;
  std::string direction = "pullback";
  std::size_t rank = 4;
  double alpha = 8.0;
  std::size_t evasion_dim = 16;
  std::size_t basis_dim = 3;
};

int cmd_gen_toy(const Options& o, std::ostream& out) {
  const ModelConfig config = o.config.empty() ? ModelConfig::desk_default() : load_config(o.config);
  const st::Dtype dtype = parse_storage_dtype(o.dtype);
  save_checkpoint(random_checkpoint(config, o.seed, dtype), o.out);
  save_config(config, o.config_out);
  out << "wrote " << o.out << " (" << parameter_count(config) << " parameters, " << st::dtype_name(dtype) << ")\n";
  out << "wrote " << o.config_out << "\n";
  if (!o.adapter_out.empty()) {
    save_adapter(random_adapter(config, kAllSites, o.rank, o.alpha, o.seed, 0.05, dtype), o.adapter_out);
    out << "wrote " << o.adapter_out << " (rank " << o.rank << ", all seven sites)\n";
  }
  if (!o.safelora_out.empty()) {
    Rng rng = Rng::stream(o.seed, 0, "gen-toy.safelora");
    const std::size_t n = o.evasion_dim;
    st::Container c;
    const Matrix base = gaussian_matrix(n, n, rng) + 4.0 * Matrix::identity(n);
    const Matrix tuned = base + gaussian_matrix(n, n, rng, 0.1);
    c.tensors.emplace("w_base", st::encode(base.data(), {n, n}, st::Dtype::kF64));
    c.tensors.emplace("w_tuned", st::encode(tuned.data(), {n, n}, st::Dtype::kF64));
    for (std::size_t i = 0; i < o.basis_dim; ++i) {
      const Matrix b = gaussian_matrix(n, n, rng);
      c.tensors.emplace("basis." + std::to_string(i), st::encode(b.data(), {n, n}, st::Dtype::kF64));
    }
    st::write_file(c, o.safelora_out);
    out << "wrote " << o.safelora_out << " (" << n << "x" << n << ", " << o.basis_dim << "-dim subspace)\n";
  }
  return kOk;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  const st::Container c = st::read_file(o.model);
  json tensors = json::array();
  for (const auto& [name, t] : c.tensors) {
    json entry = {{"name", name}, {"dtype", st::dtype_name(t.dtype)}, {"shape", t.shape}, {"max_abs", nullptr}};
    if (st::is_float(t.dtype)) {
      double m = 0.0;
      for (double v : st::decode(t)) m = std::max(m, std::abs(v));
      entry["max_abs"] = m;
    }
    tensors.push_back(std::move(entry));
  }
  if (o.json_output) {
    out << json{{"tensors", tensors}, {"metadata", c.metadata}}.dump(2) << "\n";
    return kOk;
  }
  for (const auto& t : tensors) {
    std::string shape = "[";
    for (std::size_t i = 0; i < t["shape"].size(); ++i) shape += (i ? ", " : "") + t["shape"][i].dump();
    shape += "]";
    out << t["name"].get<std::string>() << "  " << t["dtype"].get<std::string>() << "  " << shape << "  max_abs="
        << (t["max_abs"].is_null() ? std::string("-") : sci(t["max_abs"].get<double>())) << "\n";
  }
  out << c.tensors.size() << " tensors\n";
  return kOk;
}

int cmd_attack(const Options& o, std::ostream& out) {
  const auto start = Clock::now();
  const ModelConfig config = load_config(o.config);
  const SiteSet sites = SiteSet::parse(o.sites);

  auto t0 = Clock::now();
  CheckpointView view = load_checkpoint(o.model, config);
  const double load_s = seconds_since(t0);

  t0 = Clock::now();
  const GaugeSpec spec = build_gauge_spec(config, o.seed, sites);
  const double build_s = seconds_since(t0);

  std::vector<double> layer_s;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    t0 = Clock::now();
    apply_gauge_to_layer(view, spec, l);
    layer_s.push_back(seconds_since(t0));
  }

  t0 = Clock::now();
  save_checkpoint(view, o.out);
  write_text(o.spec_out, spec.to_json());
  const double save_s = seconds_since(t0);
  const double total = seconds_since(start);

  const double params = static_cast<double>(parameter_count(config));
  out << "sites: " << (sites.empty() ? std::string("(none)") : sites.to_string()) << "  seed: " << o.seed << "\n";
  out << "load: " << sci(load_s) << " s\n";
  out << "build gauge spec: " << sci(build_s) << " s\n";
  for (std::size_t l = 0; l < layer_s.size(); ++l) out << "layer " << l << ": " << sci(layer_s[l]) << " s\n";
  out << "save: " << sci(save_s) << " s\n";
  out << "total wall time: " << sci(total) << " s\n";
  out << "cost per parameter: " << sci(total / params) << " s (" << static_cast<std::uint64_t>(params)
      << " parameters)\n";
  out << "extrapolated to 70B parameters: " << sci(total / params * kReferenceParams) << " s\n";
  if (!o.report.empty()) write_text(o.report, report("attack", o.seed, sites, std::nullopt, total).dump(2));
  return kOk;
}

int cmd_verify(const Options& o, std::ostream& out, std::ostream& err, bool tolerance_given) {
  const auto start = Clock::now();
  const ModelConfig config = load_config(o.config);
  CheckpointView a = load_checkpoint(o.model_a, config);
  CheckpointView b = load_checkpoint(o.model_b, config);
  std::optional<LoraAdapter> adapter_a, adapter_b;
  if (!o.adapter_a.empty()) adapter_a = load_adapter(o.adapter_a);
  if (!o.adapter_b.empty()) adapter_b = load_adapter(o.adapter_b);

  const DivergenceOptions opts{o.n_inputs, o.seed, 4};
  const LoraAdapter* pa = adapter_a ? &*adapter_a : nullptr;
  const LoraAdapter* pb = adapter_b ? &*adapter_b : nullptr;
  double divergence = max_divergence(a, b, pa, pb, opts);
  double tolerance = o.tolerance;
  out << "max_divergence: " << sci(divergence) << "\n";

  if (!o.storage_precision.empty()) {
    const st::Dtype dtype = parse_storage_dtype(o.storage_precision);
    if (!tolerance_given) tolerance = kNarrowedTolerance;
    divergence = max_divergence(round_through(a, dtype), round_through(b, dtype), pa, pb, opts);
    out << "max_divergence after " << st::dtype_name(dtype) << " narrowing: " << sci(divergence) << "\n";
  }
  out << "tolerance: " << sci(tolerance) << "\n";
  const double total = seconds_since(start);
  if (!o.report.empty()) {
    write_text(o.report, report("verify", o.seed, SiteSet{}, divergence, total).dump(2));
  }
  if (divergence <= tolerance) {
    out << "PASS\n";
    return kOk;
  }
  err << "verify: divergence " << sci(divergence) << " exceeds tolerance " << sci(tolerance) << "\n";
  out << "FAIL\n";
  return kCheckFailed;
}

int cmd_transform_adapter(const Options& o, std::ostream& out) {
  const ModelConfig config = load_config(o.config);
  const GaugeSpec spec = GaugeSpec::from_json(read_text(o.spec), config);
  LoraAdapter adapter = load_adapter(o.adapter);
  adapter = o.direction == "pullback" ? pullback_adapter(std::move(adapter), spec)
                                      : pushforward_adapter(std::move(adapter), spec);
  save_adapter(adapter, o.out);
  out << o.direction << ": wrote " << o.out << " (" << adapter.targets.size() << " targets, rank " << adapter.rank
      << ")\n";
  return kOk;
}

int cmd_evade_safelora(const Options& o, std::ostream& out, std::ostream& err) {
  const auto start = Clock::now();
  const st::Container in = st::read_file(o.input);
  auto matrix = [&](const std::string& name) {
    auto it = in.tensors.find(name);
    if (it == in.tensors.end()) throw MissingTensorError("missing tensor '" + name + "' in " + o.input);
    const st::Tensor& t = it->second;
    if (t.shape.size() != 2) throw ShapeError("tensor '" + name + "' is not 2-D");
    return Matrix(t.shape[0], t.shape[1], st::decode(t));
  };
  const Matrix base = matrix("w_base");
  const Matrix tuned = matrix("w_tuned");
  std::vector<Matrix> basis;
  for (std::size_t i = 0; in.tensors.contains("basis." + std::to_string(i)); ++i) {
    basis.push_back(matrix("basis." + std::to_string(i)));
  }
  const SafeSubspace subspace(base.rows(), base.cols(), std::move(basis));
  Rng rng = Rng::stream(o.seed, 0, "evade-safelora");
  const EvasionResult r = construct_evasion_gauge(base, tuned, subspace, rng);

  const double residual_norm = std::sqrt(frobenius_dot(r.residual, r.residual));
  const Matrix safe_part = project_residual(r.residual, subspace);
  const double safe_fraction =
      residual_norm > 0.0 ? std::sqrt(frobenius_dot(safe_part, safe_part)) / residual_norm : 1.0;

  st::Container result;
  for (const auto& [name, m] : {std::pair<std::string, const Matrix*>{"gauge", &r.gauge},
                                {"safe_component", &r.safe_component},
                                {"residual", &r.residual}}) {
    result.tensors.emplace(name, st::encode(m->data(), {m->rows(), m->cols()}, st::Dtype::kF64));
  }
  st::write_file(result, o.out);

  const bool ok = r.residual_check <= kEvasionTolerance && r.orthogonal_residual <= kEvasionTolerance;
  const json rep = {{"command", "evade-safelora"},
                    {"seed", o.seed},
                    {"subspace_dim", subspace.dim()},
                    {"residual_check", r.residual_check},
                    {"orthogonal_residual", r.orthogonal_residual},
                    {"safe_fraction", safe_fraction},
                    {"attempts", r.attempts},
                    {"wall_time_seconds", seconds_since(start)}};
  if (!o.report.empty()) write_text(o.report, rep.dump(2));
  out << "residual_check: " << sci(r.residual_check) << "\n";
  out << "orthogonal_residual: " << sci(r.orthogonal_residual) << "\n";
  out << "safe_fraction: " << safe_fraction << "\n";
  if (!ok) {
    err << "evade-safelora: residual bounds exceed " << sci(kEvasionTolerance) << "\n";
    return kCheckFailed;
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weight-space gauge transforms for transformer checkpoints and LoRA adapters", "gaugekit"};
  app.require_subcommand(1);
  app.allow_extras(false);
  Options o;

  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Master RNG seed")->capture_default_str(); };

  auto* gen = app.add_subcommand("gen-toy", "Write a seeded random checkpoint and its config");
  gen->add_option("--out", o.out, "Checkpoint output path")->required()->check(kWritablePath);
  gen->add_option("--config-out", o.config_out, "Config JSON output path")->required()->check(kWritablePath);
  gen->add_option("--config", o.config, "Model config to use instead of the desk default")->check(CLI::ExistingFile);
  gen->add_option("--dtype", o.dtype, "Storage dtype")->check(CLI::IsMember(kDtypeChoices))->capture_default_str();
  gen->add_option("--adapter-out", o.adapter_out, "Also write a random adapter on all seven sites")
      ->check(kWritablePath);
  gen->add_option("--rank", o.rank, "Adapter rank")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--alpha", o.alpha, "Adapter alpha")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--safelora-out", o.safelora_out, "Also write a Safe-LoRA evasion input container")
      ->check(kWritablePath);
  gen->add_option("--dim", o.evasion_dim, "Protected matrix size for --safelora-out")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  gen->add_option("--basis-dim", o.basis_dim, "Safe subspace dimension for --safelora-out")->capture_default_str();
  add_seed(gen);

  auto* inspect = app.add_subcommand("inspect", "List tensors with shapes, dtypes and max-abs");
  inspect->add_option("model", o.model, "Container path")->required()->check(CLI::ExistingFile);
  inspect->add_flag("--json", o.json_output, "Machine-readable output");

  auto* attack = app.add_subcommand("attack", "Apply a seeded gauge transform to a checkpoint");
  attack->add_option("--model", o.model, "Input checkpoint")->required()->check(CLI::ExistingFile);
  attack->add_option("--config", o.config, "Model config JSON")->required()->check(CLI::ExistingFile);
  attack->add_option("--out", o.out, "Gauged checkpoint output path")->required()->check(kWritablePath);
  attack->add_option("--spec-out", o.spec_out, "Gauge spec JSON output path")->required()->check(kWritablePath);
  attack->add_option("--sites", o.sites, "Comma-separated subset of vo,mlp,qk")->capture_default_str();
  attack->add_option("--report", o.report, "JSON report path")->check(kWritablePath);
  add_seed(attack);

  auto* verify = app.add_subcommand("verify", "Measure forward-pass divergence between two checkpoints");
  verify->add_option("--config", o.config, "Model config JSON")->required()->check(CLI::ExistingFile);
  verify->add_option("--model-a", o.model_a, "First checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--model-b", o.model_b, "Second checkpoint")->required()->check(CLI::ExistingFile);
  verify->add_option("--adapter-a", o.adapter_a, "Adapter installed on the first checkpoint")
      ->check(CLI::ExistingFile);
  verify->add_option("--adapter-b", o.adapter_b, "Adapter installed on the second checkpoint")
      ->check(CLI::ExistingFile);
  auto* tol_opt =
      verify->add_option("--tolerance", o.tolerance, "Maximum allowed divergence")->capture_default_str();
  verify->add_option("--n-inputs", o.n_inputs, "Number of random inputs")->check(CLI::PositiveNumber)
      ->capture_default_str();
  verify->add_option("--storage-precision", o.storage_precision,
                     "Round both checkpoints through this dtype before comparing (tolerance defaults to 1e-2)")
      ->check(CLI::IsMember(kDtypeChoices));
  verify->add_option("--report", o.report, "JSON report path")->check(kWritablePath);
  add_seed(verify);

  auto* transform = app.add_subcommand("transform-adapter", "Map an adapter across a stored gauge spec");
  transform->add_option("--config", o.config, "Model config JSON")->required()->check(CLI::ExistingFile);
  transform->add_option("--adapter", o.adapter, "Input adapter")->required()->check(CLI::ExistingFile);
  transform->add_option("--spec", o.spec, "Gauge spec JSON written by attack")->required()->check(CLI::ExistingFile);
  transform->add_option("--out", o.out, "Output adapter path")->required()->check(kWritablePath);
  transform->add_option("--direction", o.direction, "pullback or pushforward")
      ->check(CLI::IsMember({"pullback", "pushforward"}))
      ->capture_default_str();

  auto* evade = app.add_subcommand("evade-safelora", "Build a gauge whose weight residual lies in a safe subspace");
  evade->add_option("--input", o.input, "Container with w_base, w_tuned, basis.0 ...")
      ->required()
      ->check(CLI::ExistingFile);
  evade->add_option("--out", o.out, "Output container (gauge, safe_component, residual)")
      ->required()
      ->check(kWritablePath);
  evade->add_option("--report", o.report, "JSON report path")->check(kWritablePath);
  add_seed(evade);

  std::vector<std::string> rev(args.begin() + (args.empty() ? 0 : 1), args.end());
  std::reverse(rev.begin(), rev.end());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kError;
  }

  try {
    if (gen->parsed()) return cmd_gen_toy(o, out);
    if (inspect->parsed()) return cmd_inspect(o, out);
    if (attack->parsed()) return cmd_attack(o, out);
    if (verify->parsed()) return cmd_verify(o, out, err, tol_opt->count() > 0);
    if (transform->parsed()) return cmd_transform_adapter(o, out);
    if (evade->parsed()) return cmd_evade_safelora(o, out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kError;
  }
  return kError;
}

}  // namespace gauge::cli
