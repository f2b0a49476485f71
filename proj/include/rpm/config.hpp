#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "rpm/fit.hpp"

namespace rpm::config {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flat key-value text with [section] headers, one "key = value" per line,
// '#' comments. Keys are stored as "section.key".
struct ParsedConfig {
  std::map<std::string, std::string> values;
  std::string source_path;
};

ParsedConfig parse_config_text(const std::string& text, const std::string& source_name = "<string>");
ParsedConfig parse_config_file(const std::string& path);

enum class ExperimentKind { Peer, Lda, Gpfa, Datagen, Selftest };

std::string kind_name(ExperimentKind kind);

struct DatasetSpec {
  std::string generator;  // resolved per experiment when left empty
  // labeled images
  int classes = 10;
  int per_class = 40;
  int dim = 64;
  double noise_std = 0.35;
  int max_pairs = 0;  // 0 keeps every pair
  std::string images_path;
  std::string labels_path;
  std::vector<std::string> pgm_paths;
  // sequences
  int items = 50;
  int steps = 50;
  int pixels = 16;
  double component_var = 0.25;
  double stripe_amp = 0.3;
  double bump_amp = 1.0;
  // patch corpus
  int images = 60;
  int grid = 4;
  int patch_side = 8;
  double mix_alpha = 0.4;
};

struct ModelSpec {
  int k = 0;  // latent cardinality / latent dimensions; default depends on experiment
  std::vector<int> hidden = {50, 50};
  std::string method = "second-order";  // mc | second-order | interior-bound
  int inducing_points = 20;
  double alpha = 1.0;
  double kernel_variance = 1.0;
  double kernel_lengthscale = 1.0;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Selftest;
  std::uint64_t seed = 0;
  std::string out_dir;
  DatasetSpec dataset;
  ModelSpec model;
  FitOptions opts;
};

// Defaults filled, every value range-checked, every referenced path checked
// for existence. Diagnostics name the offending field; an empty list means
// the config is runnable.
struct Resolution {
  ExperimentConfig config;
  std::vector<std::string> diagnostics;
};

Resolution resolve(const ParsedConfig& raw);

// Canonical text of a resolved config: every field explicit, fixed order.
// Hashing and the on-disk resolved.cfg both use this rendering.
std::string render(const ExperimentConfig& cfg);

// FNV-1a over the rendered text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

}  // namespace rpm::config
