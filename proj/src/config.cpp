#include "rpm/config.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace rpm::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "experiment.kind", "experiment.seed", "experiment.out",
      "dataset.generator", "dataset.classes", "dataset.per_class", "dataset.dim",
      "dataset.noise_std", "dataset.max_pairs", "dataset.images_path",
      "dataset.labels_path", "dataset.pgm_paths", "dataset.items", "dataset.steps",
      "dataset.pixels", "dataset.component_var", "dataset.stripe_amp",
      "dataset.bump_amp", "dataset.images", "dataset.grid", "dataset.patch_side",
      "dataset.mix_alpha",
      "model.k", "model.hidden", "model.method", "model.inducing_points",
      "model.alpha", "model.kernel_variance", "model.kernel_lengthscale",
      "optimizer.lr", "optimizer.iters", "optimizer.msteps_per_estep",
      "optimizer.mc_samples", "optimizer.estep_sweeps", "optimizer.estep_tol",
  };
  return keys;
}

struct Reader {
  const ParsedConfig& raw;
  std::vector<std::string>& diags;

  bool has(const std::string& key) const { return raw.values.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = raw.values.find(key);
    return it == raw.values.end() ? fallback : it->second;
  }

  long long integer(const std::string& key, long long fallback) {
    auto it = raw.values.find(key);
    if (it == raw.values.end()) return fallback;
    try {
      std::size_t used = 0;
      const long long v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      diags.push_back(key + ": not an integer: '" + it->second + "'");
      return fallback;
    }
  }

  double real(const std::string& key, double fallback) {
    auto it = raw.values.find(key);
    if (it == raw.values.end()) return fallback;
    try {
      std::size_t used = 0;
      const double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing text");
      return v;
    } catch (const std::exception&) {
      diags.push_back(key + ": not a number: '" + it->second + "'");
      return fallback;
    }
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    auto it = raw.values.find(key);
    if (it == raw.values.end()) return out;
    std::stringstream ss(it->second);
    std::string part;
    while (std::getline(ss, part, ',')) {
      part = trim(part);
      if (!part.empty()) out.push_back(part);
    }
    return out;
  }
};

void require_range_int(std::vector<std::string>& diags, const std::string& key, long long v,
                       long long lo, long long hi) {
  if (v < lo || v > hi)
    diags.push_back(key + ": " + std::to_string(v) + " outside [" + std::to_string(lo) + ", " +
                    std::to_string(hi) + "]");
}

void require_positive(std::vector<std::string>& diags, const std::string& key, double v) {
  if (!(v > 0.0)) diags.push_back(key + ": must be > 0, got " + std::to_string(v));
}

void require_file(std::vector<std::string>& diags, const std::string& key,
                  const std::string& path) {
  if (path.empty()) {
    diags.push_back(key + ": required path is empty");
    return;
  }
  if (!std::filesystem::exists(path)) diags.push_back(key + ": path does not exist: " + path);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string kind_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Peer: return "peer";
    case ExperimentKind::Lda: return "lda";
    case ExperimentKind::Gpfa: return "gpfa";
    case ExperimentKind::Datagen: return "datagen";
    case ExperimentKind::Selftest: return "selftest";
  }
  return "?";
}

ParsedConfig parse_config_text(const std::string& text, const std::string& source_name) {
  ParsedConfig out;
  out.source_path = source_name;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError(source_name + ":" + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError(source_name + ":" + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(source_name + ":" + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw ConfigError(source_name + ":" + std::to_string(line_no) + ": empty key");
    if (section.empty())
      throw ConfigError(source_name + ":" + std::to_string(line_no) + ": key '" + key +
                        "' appears before any [section]");
    const std::string full = section + "." + key;
    if (out.values.count(full))
      throw ConfigError(source_name + ":" + std::to_string(line_no) + ": duplicate key " + full);
    out.values[full] = trim(line.substr(eq + 1));
  }
  return out;
}

ParsedConfig parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path);
}

Resolution resolve(const ParsedConfig& raw) {
  Resolution res;
  auto& diags = res.diagnostics;
  auto& cfg = res.config;
  Reader rd{raw, diags};

  for (const auto& [key, value] : raw.values) {
    (void)value;
    if (!known_keys().count(key)) diags.push_back(key + ": unknown key");
  }

  const std::string kind = rd.str("experiment.kind", "");
  if (kind == "peer") cfg.kind = ExperimentKind::Peer;
  else if (kind == "lda") cfg.kind = ExperimentKind::Lda;
  else if (kind == "gpfa") cfg.kind = ExperimentKind::Gpfa;
  else if (kind == "datagen") cfg.kind = ExperimentKind::Datagen;
  else if (kind == "selftest") cfg.kind = ExperimentKind::Selftest;
  else {
    diags.push_back("experiment.kind: expected one of {peer, lda, gpfa, datagen, selftest}, got '" +
                    kind + "'");
    return res;
  }

  const long long seed = rd.integer("experiment.seed", 0);
  if (seed < 0) diags.push_back("experiment.seed: must be >= 0");
  cfg.seed = static_cast<std::uint64_t>(std::max<long long>(0, seed));
  cfg.out_dir = rd.str("experiment.out", "runs/" + kind_name(cfg.kind));

  auto& ds = cfg.dataset;
  switch (cfg.kind) {
    case ExperimentKind::Peer: ds.generator = "synthetic_digits"; break;
    case ExperimentKind::Lda: ds.generator = "texture_corpus"; break;
    case ExperimentKind::Gpfa: ds.generator = "textured_ball"; break;
    case ExperimentKind::Datagen: ds.generator = "textured_ball"; break;
    case ExperimentKind::Selftest: ds.generator = "none"; break;
  }
  ds.generator = rd.str("dataset.generator", ds.generator);
  ds.classes = static_cast<int>(rd.integer("dataset.classes", ds.classes));
  ds.per_class = static_cast<int>(rd.integer("dataset.per_class", ds.per_class));
  ds.dim = static_cast<int>(rd.integer("dataset.dim", ds.dim));
  ds.noise_std = rd.real("dataset.noise_std", ds.noise_std);
  ds.max_pairs = static_cast<int>(rd.integer("dataset.max_pairs", ds.max_pairs));
  ds.images_path = rd.str("dataset.images_path", "");
  ds.labels_path = rd.str("dataset.labels_path", "");
  ds.pgm_paths = rd.list("dataset.pgm_paths");
  ds.items = static_cast<int>(rd.integer("dataset.items", ds.items));
  ds.steps = static_cast<int>(rd.integer("dataset.steps", ds.steps));
  ds.pixels = static_cast<int>(rd.integer("dataset.pixels", ds.pixels));
  ds.component_var = rd.real("dataset.component_var", ds.component_var);
  ds.stripe_amp = rd.real("dataset.stripe_amp", ds.stripe_amp);
  ds.bump_amp = rd.real("dataset.bump_amp", ds.bump_amp);
  ds.images = static_cast<int>(rd.integer("dataset.images", ds.images));
  ds.grid = static_cast<int>(rd.integer("dataset.grid", ds.grid));
  ds.patch_side = static_cast<int>(rd.integer("dataset.patch_side", ds.patch_side));
  ds.mix_alpha = rd.real("dataset.mix_alpha", ds.mix_alpha);

  auto& md = cfg.model;
  switch (cfg.kind) {
    case ExperimentKind::Peer: md.k = 10; break;
    case ExperimentKind::Lda: md.k = 3; break;
    default: md.k = 1; break;
  }
  md.k = static_cast<int>(rd.integer("model.k", md.k));
  if (rd.has("model.hidden")) {
    md.hidden.clear();
    for (const std::string& part : rd.list("model.hidden")) {
      try {
        md.hidden.push_back(std::stoi(part));
      } catch (const std::exception&) {
        diags.push_back("model.hidden: not an integer: '" + part + "'");
      }
    }
  }
  md.method = rd.str("model.method", md.method);
  md.inducing_points = static_cast<int>(rd.integer("model.inducing_points", md.inducing_points));
  md.alpha = rd.real("model.alpha", md.alpha);
  md.kernel_variance = rd.real("model.kernel_variance", md.kernel_variance);
  md.kernel_lengthscale = rd.real("model.kernel_lengthscale", md.kernel_lengthscale);

  auto& op = cfg.opts;
  op.lr = rd.real("optimizer.lr", op.lr);
  op.iters = static_cast<int>(rd.integer("optimizer.iters", op.iters));
  op.msteps_per_estep = static_cast<int>(rd.integer("optimizer.msteps_per_estep", op.msteps_per_estep));
  op.mc_samples = static_cast<int>(rd.integer("optimizer.mc_samples", op.mc_samples));
  op.estep_sweeps = static_cast<int>(rd.integer("optimizer.estep_sweeps", op.estep_sweeps));
  op.estep_tol = rd.real("optimizer.estep_tol", op.estep_tol);
  op.seed = cfg.seed;

  if (cfg.kind == ExperimentKind::Selftest) return res;

  // shared range checks; K is the latent cardinality everywhere
  require_range_int(diags, "model.k (latent cardinality K)", md.k, 1, 4096);
  for (int h : md.hidden) require_range_int(diags, "model.hidden", h, 1, 65536);
  require_positive(diags, "optimizer.lr", op.lr);
  require_range_int(diags, "optimizer.iters", op.iters, 0, 10000000);
  require_range_int(diags, "optimizer.msteps_per_estep", op.msteps_per_estep, 1, 1000);
  require_range_int(diags, "optimizer.mc_samples", op.mc_samples, 1, 1000000);
  require_range_int(diags, "optimizer.estep_sweeps", op.estep_sweeps, 1, 100000);
  require_positive(diags, "optimizer.estep_tol", op.estep_tol);

  const std::set<std::string> seq_gens = {"textured_ball", "structured_ball"};
  switch (cfg.kind) {
    case ExperimentKind::Peer:
      if (ds.generator == "synthetic_digits") {
        require_range_int(diags, "dataset.classes", ds.classes, 1, 1000);
        require_range_int(diags, "dataset.per_class", ds.per_class, 2, 100000);
        require_range_int(diags, "dataset.dim", ds.dim, 4, 1 << 20);
        if (ds.noise_std < 0) diags.push_back("dataset.noise_std: must be >= 0");
      } else if (ds.generator == "idx") {
        require_file(diags, "dataset.images_path", ds.images_path);
        require_file(diags, "dataset.labels_path", ds.labels_path);
      } else {
        diags.push_back("dataset.generator: expected one of {synthetic_digits, idx} for peer, got '" +
                        ds.generator + "'");
      }
      if (ds.max_pairs < 0) diags.push_back("dataset.max_pairs: must be >= 0");
      break;
    case ExperimentKind::Lda:
      require_range_int(diags, "dataset.patch_side", ds.patch_side, 2, 256);
      if (ds.generator == "texture_corpus") {
        require_range_int(diags, "dataset.images", ds.images, 1, 100000);
        require_range_int(diags, "dataset.grid", ds.grid, 1, 256);
        require_positive(diags, "dataset.mix_alpha", ds.mix_alpha);
        if (ds.noise_std < 0) diags.push_back("dataset.noise_std: must be >= 0");
      } else if (ds.generator == "pgm") {
        if (ds.pgm_paths.empty()) diags.push_back("dataset.pgm_paths: required path is empty");
        for (const std::string& p : ds.pgm_paths) require_file(diags, "dataset.pgm_paths", p);
      } else {
        diags.push_back("dataset.generator: expected one of {texture_corpus, pgm} for lda, got '" +
                        ds.generator + "'");
      }
      require_positive(diags, "model.alpha", md.alpha);
      break;
    case ExperimentKind::Gpfa:
      if (!seq_gens.count(ds.generator))
        diags.push_back(
            "dataset.generator: expected one of {textured_ball, structured_ball} for gpfa, got '" +
            ds.generator + "'");
      require_range_int(diags, "dataset.items", ds.items, 2, 100000);
      require_range_int(diags, "dataset.steps", ds.steps, 2, 100000);
      require_range_int(diags, "dataset.pixels", ds.pixels, 4, 1 << 20);
      require_positive(diags, "dataset.component_var", ds.component_var);
      if (md.method != "mc" && md.method != "second-order" && md.method != "interior-bound")
        diags.push_back("model.method: expected one of {mc, second-order, interior-bound}, got '" +
                        md.method + "'");
      require_range_int(diags, "model.inducing_points", md.inducing_points, 1, 100000);
      if (md.inducing_points > ds.steps)
        diags.push_back("model.inducing_points: must be <= dataset.steps");
      require_positive(diags, "model.kernel_variance", md.kernel_variance);
      require_positive(diags, "model.kernel_lengthscale", md.kernel_lengthscale);
      break;
    case ExperimentKind::Datagen: {
      const std::set<std::string> gens = {"textured_ball", "structured_ball", "synthetic_digits",
                                          "texture_corpus"};
      if (!gens.count(ds.generator))
        diags.push_back(
            "dataset.generator: expected one of {textured_ball, structured_ball, "
            "synthetic_digits, texture_corpus}, got '" + ds.generator + "'");
      break;
    }
    case ExperimentKind::Selftest: break;
  }
  return res;
}

std::string render(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "[experiment]\n";
  os << "kind = " << kind_name(cfg.kind) << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "out = " << cfg.out_dir << "\n";
  os << "\n[dataset]\n";
  const auto& ds = cfg.dataset;
  os << "generator = " << ds.generator << "\n";
  os << "classes = " << ds.classes << "\n";
  os << "per_class = " << ds.per_class << "\n";
  os << "dim = " << ds.dim << "\n";
  os << "noise_std = " << fmt(ds.noise_std) << "\n";
  os << "max_pairs = " << ds.max_pairs << "\n";
  os << "images_path = " << ds.images_path << "\n";
  os << "labels_path = " << ds.labels_path << "\n";
  os << "pgm_paths = ";
  for (std::size_t i = 0; i < ds.pgm_paths.size(); ++i)
    os << (i ? "," : "") << ds.pgm_paths[i];
  os << "\n";
  os << "items = " << ds.items << "\n";
  os << "steps = " << ds.steps << "\n";
  os << "pixels = " << ds.pixels << "\n";
  os << "component_var = " << fmt(ds.component_var) << "\n";
  os << "stripe_amp = " << fmt(ds.stripe_amp) << "\n";
  os << "bump_amp = " << fmt(ds.bump_amp) << "\n";
  os << "images = " << ds.images << "\n";
  os << "grid = " << ds.grid << "\n";
  os << "patch_side = " << ds.patch_side << "\n";
  os << "mix_alpha = " << fmt(ds.mix_alpha) << "\n";
  os << "\n[model]\n";
  const auto& md = cfg.model;
  os << "k = " << md.k << "\n";
  os << "hidden = ";
  for (std::size_t i = 0; i < md.hidden.size(); ++i) os << (i ? "," : "") << md.hidden[i];
  os << "\n";
  os << "method = " << md.method << "\n";
  os << "inducing_points = " << md.inducing_points << "\n";
  os << "alpha = " << fmt(md.alpha) << "\n";
  os << "kernel_variance = " << fmt(md.kernel_variance) << "\n";
  os << "kernel_lengthscale = " << fmt(md.kernel_lengthscale) << "\n";
  os << "\n[optimizer]\n";
  const auto& op = cfg.opts;
  os << "lr = " << fmt(op.lr) << "\n";
  os << "iters = " << op.iters << "\n";
  os << "msteps_per_estep = " << op.msteps_per_estep << "\n";
  os << "mc_samples = " << op.mc_samples << "\n";
  os << "estep_sweeps = " << op.estep_sweeps << "\n";
  os << "estep_tol = " << fmt(op.estep_tol) << "\n";
  return os.str();
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string text = render(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace rpm::config
