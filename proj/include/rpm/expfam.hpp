#pragma once

#include "rpm/common.hpp"

namespace rpm::expfam {

/* Families are carried as plain parameter structs. Gaussian natural
   parameters follow t(z) = (z, vec(z z^T)), so eta = (h, J) with
   h = S^-1 m and J = -1/2 S^-1; the 2*pi constant lives inside the
   log normalizer. */

struct CategoricalNat {
  VectorXd logits;
};

struct CategoricalMoment {
  VectorXd probs;
};

struct GaussianNat {
  VectorXd h;
  MatrixXd J;
};

struct GaussianMoment {
  VectorXd m;
  MatrixXd S;
};

struct DirichletParams {
  VectorXd alpha;
};

// Mean and covariance of the stacked statistic (z, vec(z z^T)) under a Gaussian.
struct SuffStatMoments {
  VectorXd mu;  // K + K^2
  MatrixXd V;   // (K + K^2) square
};

void validate(const CategoricalNat& p);
void validate(const GaussianNat& p);
void validate(const GaussianMoment& p);
void validate(const DirichletParams& p);

double log_normalizer(const CategoricalNat& p);
double log_normalizer(const GaussianNat& p);
double log_normalizer(const DirichletParams& p);

GaussianMoment nat_to_moment(const GaussianNat& p);
GaussianNat moment_to_nat(const GaussianMoment& p);
CategoricalMoment nat_to_moment(const CategoricalNat& p);
CategoricalNat moment_to_nat(const CategoricalMoment& p);

double kl(const CategoricalNat& q, const CategoricalNat& p);
double kl(const GaussianMoment& q, const GaussianMoment& p);
double kl(const GaussianNat& q, const GaussianNat& p);
double kl(const DirichletParams& q, const DirichletParams& p);

double entropy(const CategoricalNat& p);
double entropy(const GaussianMoment& p);
double entropy(const DirichletParams& p);

double log_prob(const CategoricalNat& p, Eigen::Index k);
double log_prob(const GaussianNat& p, const VectorXd& z);
double log_prob(const GaussianMoment& p, const VectorXd& z);
double log_prob(const DirichletParams& p, const VectorXd& x);

SuffStatMoments suffstat_moments(const GaussianMoment& q);

// z = m + chol(S) * eps
VectorXd sample_reparam(const GaussianMoment& q, const VectorXd& eps);

// Stacked forms used by the continuous E-step machinery.
VectorXd stack_nat(const GaussianNat& p);            // (h, vec(J))
GaussianNat unstack_nat(const VectorXd& v, Eigen::Index k);
VectorXd stacked_mean(const GaussianMoment& q);      // (m, vec(S + m m^T))
double dot_nat_stat(const GaussianNat& p, const VectorXd& z);  // eta^T t(z)

}  // namespace rpm::expfam
