#pragma once

#include <cstdint>
#include <string>

#include "rpm/common.hpp"

namespace rpm::datagen {

// Multi-view dataset with one observation vector per (item, view).
struct DiscreteDataset {
  std::vector<MatrixXd> views;  // views[j]: items x dim_j
  std::vector<int> labels;      // optional ground truth, may be empty

  Eigen::Index items() const { return views.empty() ? 0 : views[0].rows(); }
  int n_views() const { return static_cast<int>(views.size()); }
};

// Time-series dataset; obs[n][j] holds a T x P block of observations.
struct SequenceDataset {
  std::vector<std::vector<MatrixXd>> obs;
  MatrixXd z_true;  // N x T ground-truth latent (first oscillator component)
  VectorXd times;

  int items() const { return static_cast<int>(obs.size()); }
  int n_views() const { return obs.empty() ? 0 : static_cast<int>(obs[0].size()); }
  int steps() const { return static_cast<int>(times.size()); }
};

/* Damped 2-D rotation with process noise; the observed ground truth is the
   first component. Defaults give about three periods across 50 steps. */
struct OscillatorConfig {
  double rho = 0.999;
  double angle = 2.0 * 3.14159265358979323846 * 3.0 / 50.0;
  double noise_std = 0.05;
};

MatrixXd gen_oscillator(int n_items, int n_steps, const OscillatorConfig& cfg, std::uint64_t seed);

/* Bouncing-ball family: pixel intensities are driven by the oscillator
   latent. In the textured variant every pixel is a two-component Gaussian
   mixture whose weights and component positions depend on the latent while
   its mean stays 0 and variance stays 1 for every latent value, so only
   higher-order statistics carry the signal. */
struct TexturedBallConfig {
  int items = 50;
  int steps = 50;
  int pixels = 16;
  double component_var = 0.25;
  OscillatorConfig oscillator;
};

SequenceDataset gen_textured_ball(const TexturedBallConfig& cfg, std::uint64_t seed);

// Structured variant: drifting stripes plus a Gaussian intensity bump whose
// column tracks the latent.
struct StructuredBallConfig {
  int items = 50;
  int steps = 50;
  int pixels = 16;
  double stripe_amp = 0.3;
  double stripe_freq = 0.2;   // cycles per pixel
  double stripe_speed = 0.11;  // cycles per step
  double bump_amp = 1.0;
  double bump_width = 1.5;
  double noise_std = 0.1;
  double latent_lo = -2.0;  // latent value mapped to column 0
  double latent_hi = 2.0;   // latent value mapped to the last column
  OscillatorConfig oscillator;
};

SequenceDataset gen_structured_ball(const StructuredBallConfig& cfg, std::uint64_t seed);
double bump_center_column(const StructuredBallConfig& cfg, double z);

struct PeerPairs {
  DiscreteDataset data;  // two views, one image per view
  std::vector<std::string> warnings;
};

// Pairs same-class images without replacement; odd class counts drop one
// image and record a warning.
PeerPairs gen_peer_pairs(const MatrixXd& images, const std::vector<int>& labels,
                         std::uint64_t seed);

struct LabeledImages {
  MatrixXd images;  // n x dim, row-major pixels
  std::vector<int> labels;
  int rows = 0, cols = 0;
};

/* Synthetic digit stand-in: smooth per-class templates plus white noise.
   The default noise keeps nearest-template classification above 0.95. */
LabeledImages gen_synthetic_digits(int n_classes, int per_class, int dim, double noise_std,
                                   std::uint64_t seed);

// Three-texture corpus for topic-model experiments. Images are grids of
// patches; every patch carries one texture drawn from a per-image mixture.
struct TextureCorpusConfig {
  int images = 60;
  int grid = 4;        // patches per side
  int patch_side = 8;  // pixels per patch side
  double mix_alpha = 0.4;
  double noise_std = 0.35;
  int n_textures = 3;
};

struct TextureCorpus {
  std::vector<MatrixXd> images;         // (grid*side) square images
  std::vector<std::vector<int>> patch_labels;  // per image, row-major patch order
  int patch_side = 0;
};

TextureCorpus gen_texture_corpus(const TextureCorpusConfig& cfg, std::uint64_t seed);

// IDX (big-endian) readers; pixel images are scaled to [0, 1].
LabeledImages load_idx_images(const std::string& path);
std::vector<int> load_idx_labels(const std::string& path);

// Binary 8-bit PGM (P5), scaled to [0, 1].
MatrixXd read_pgm(const std::string& path);

// "RPMD" container: named float64 arrays with explicit shapes, little-endian.
struct NamedArray {
  std::string name;
  std::vector<std::uint64_t> dims;
  VectorXd data;  // C-order flat
};

void save_rpmd(const std::string& path, const std::vector<NamedArray>& arrays);
std::vector<NamedArray> load_rpmd(const std::string& path);

}  // namespace rpm::datagen
