#pragma once

#include <Eigen/Dense>
#include <vector>

#include "rpm/fit.hpp"
#include "rpm/nets.hpp"

namespace rpm {

// Topic-style model over image patches: each image mixes a small set of
// texture classes with Dirichlet(alpha) proportions, and every patch carries
// one categorical texture latent scored by a shared recognition net.
// digamma (used by the closed-form E-step below) lives in rpm/common.hpp.
struct LdaModel {
  int n_textures = 0;
  double alpha = 1.0;  // scalar symmetric Dirichlet concentration
  nets::Net net;       // categorical head of size n_textures
};

LdaModel make_lda_model(int n_textures, double alpha, int patch_dim,
                        const std::vector<int>& hidden, Rng& rng);

// Variational state: per image a Dirichlet over proportions and one
// categorical row per patch.
struct LdaVariational {
  std::vector<Eigen::VectorXd> alpha;  // per image, length K, entries > 0
  std::vector<Eigen::MatrixXd> gamma;  // per image, patches x K, rows stochastic
  bool converged = false;
  double residual = 0.0;  // max abs gamma change in the last sweep, over images
};

// Non-overlapping square patches in row-major grid order, each flattened
// row-major; the image is cropped to a multiple of the patch side.
Eigen::MatrixXd patchify(const Eigen::MatrixXd& image, int patch_side);

// Recognition scores for a patch corpus. log_f[n] is patches x K; log_mix
// pools every patch of every image into one length-K mixture.
struct LdaScores {
  std::vector<Eigen::MatrixXd> log_f;
  Eigen::VectorXd log_mix;
};

LdaScores lda_scores(const LdaModel& model, const std::vector<Eigen::MatrixXd>& patch_sets);

// Closed-form coordinate ascent: per sweep, all gamma rows given alpha_n,
// then alpha_n = alpha + colsum(gamma). Stops when the sweep changes gamma
// by less than tol everywhere, or after max_sweeps (converged = false).
LdaVariational e_step_lda(const LdaModel& model, const std::vector<Eigen::MatrixXd>& log_f,
                          const Eigen::VectorXd& log_mix, int max_sweeps = 200,
                          double tol = 1e-8);

double free_energy_lda(const LdaModel& model, const std::vector<Eigen::MatrixXd>& log_f,
                       const Eigen::VectorXd& log_mix, const LdaVariational& v);

// Gradient of the free energy w.r.t. net parameters at fixed variational state.
nets::Grads lda_mstep_grad(const LdaModel& model,
                           const std::vector<Eigen::MatrixXd>& patch_sets,
                           const LdaVariational& v);

// Alternates the coordinate-ascent E-step with Adam ascent on the net.
// patch_labels (optional, flattened image-major) drive the matched-accuracy
// metric. final_state, if given, receives an E-step at the fitted parameters.
FitReport fit_lda(LdaModel& model, const std::vector<Eigen::MatrixXd>& patch_sets,
                  const std::vector<int>& patch_labels, const FitOptions& opts,
                  LdaVariational* final_state = nullptr);

// Mean topic proportions per image, alpha_n / sum(alpha_n).
Eigen::MatrixXd mean_topic_weights(const LdaVariational& v);

// Indices (into the flattened image-major patch sequence) of the m patches
// scoring highest under texture k, descending, ties broken by index.
std::vector<int> representative_patches(const LdaModel& model,
                                        const std::vector<Eigen::MatrixXd>& patch_sets,
                                        int k, int top_m);

}  // namespace rpm
