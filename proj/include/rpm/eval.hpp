#pragma once

#include "rpm/common.hpp"

namespace rpm::eval {

struct Assignment {
  std::vector<int> row_to_col;
  double cost = 0.0;
};

/* Minimum-cost perfect assignment on a square cost matrix, potentials plus
   augmenting paths. Among minimum-cost solutions the lexicographically
   smallest row->col permutation is returned. */
Assignment hungarian(const MatrixXd& cost);

struct MatchedAccuracy {
  double accuracy = 0.0;
  std::vector<int> pred_to_true;  // label permutation actually used
};

// Best label-permutation accuracy of predictions against ground truth.
MatchedAccuracy matched_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                                 int n_labels);

/* Least-squares affine regression from inferred latents (rows = samples,
   cols = latent dims) onto each ground-truth dimension; returns the mean
   over truth dimensions of SS_res / SS_tot. */
double nmse_regression(const MatrixXd& inferred, const MatrixXd& truth);

// Mean over rows of the Shannon entropy (nats) of each posterior row.
double mean_posterior_entropy(const MatrixXd& q);

}  // namespace rpm::eval
