#pragma once

#include <Eigen/Dense>
#include <vector>

#include "rpm/datagen.hpp"
#include "rpm/fit.hpp"
#include "rpm/nets.hpp"

namespace rpm {

using datagen::DiscreteDataset;

// Multi-view model with one discrete latent shared across views. All views
// are scored by the same recognition net, so every view must have the same
// observation dimension.
struct PeerModel {
  int n_classes = 0;
  int n_views = 0;
  Eigen::VectorXd prior_logits;  // length n_classes
  nets::Net net;                 // categorical head of size n_classes
  bool learn_prior = false;
};

PeerModel make_peer_model(int n_classes, int n_views, int input_dim,
                          const std::vector<int>& hidden, Rng& rng);

struct DiscretePosterior {
  Eigen::MatrixXd q;           // N x K, rows on the simplex
  Eigen::VectorXd log_weight;  // length N, log of the per-item normaliser
};

// Recognition log-probabilities for one view: N x K rows of log f(k | x_j).
Eigen::MatrixXd recognition_log_probs(const PeerModel& model,
                                      const DiscreteDataset& data, int view);

// Empirical mixture of the recognition factor over the dataset,
// F_j(k) = (1/N) sum_n f(k | x_j^(n)). Throws if any component underflows
// to zero, since the model divides by it.
Eigen::VectorXd mixture_probs(const PeerModel& model,
                              const DiscreteDataset& data, int view);

// Core posterior computation on precomputed scores. log_f[j] is N x K,
// log_mix[j] is length K. Exposed separately so small instances can be
// checked against direct enumeration.
DiscretePosterior e_step_from_scores(
    const Eigen::VectorXd& prior_logits,
    const std::vector<Eigen::MatrixXd>& log_f,
    const std::vector<Eigen::VectorXd>& log_mix);

DiscretePosterior e_step_exact(const PeerModel& model,
                               const DiscreteDataset& data);

double free_energy_from_scores(const Eigen::VectorXd& prior_logits,
                               const std::vector<Eigen::MatrixXd>& log_f,
                               const std::vector<Eigen::VectorXd>& log_mix,
                               const Eigen::MatrixXd& q);

// Free energy of the discrete model at an arbitrary responsibility matrix q.
// Equals sum_n log_weight[n] when q comes from e_step_exact.
double free_energy_discrete(const PeerModel& model, const DiscreteDataset& data,
                            const Eigen::MatrixXd& q);

// Gradient of the free energy with respect to the net parameters at fixed q.
nets::Grads mstep_grad(const PeerModel& model, const DiscreteDataset& data,
                       const Eigen::MatrixXd& q);

// Alternates exact E-steps with Adam ascent M-steps on the recognition net.
// Records one trace point per phase. If labels are present, fills the
// "matched_accuracy" metric via a permutation-optimal label matching.
FitReport fit_peer(PeerModel& model, const DiscreteDataset& data,
                   const FitOptions& opts);

}  // namespace rpm
