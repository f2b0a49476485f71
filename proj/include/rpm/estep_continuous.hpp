#pragma once

#include <vector>

#include "rpm/expfam.hpp"

namespace rpm {

// All recognition factors of one view, as Gaussian natural parameters with
// their log-normalizers. The empirical mixture over these components is what
// the three estimators below integrate against the posterior marginal.
struct FactorBank {
  std::vector<expfam::GaussianNat> eta;
  VectorXd log_norm;

  int size() const { return static_cast<int>(eta.size()); }
  Eigen::Index dim() const { return eta.empty() ? 0 : eta[0].h.size(); }
};

FactorBank make_factor_bank(const std::vector<expfam::GaussianNat>& etas);

// Unnormalized exponent parameters tilde_eta. Only the differences
// eta_m - tilde_eta need to be valid natural parameters; validate_aux
// enforces that jointly over the bank.
struct AuxFactor {
  VectorXd h;
  MatrixXd J;
};

enum class EstepMethod { Mc, SecondOrder, InteriorBound };

struct MixtureExpectation {
  double value = 0.0;
  EstepMethod method = EstepMethod::Mc;
  // mc: mean posterior responsibilities over draws; second-order: the pi
  // weights; interior: the softmax over shifted log-normalizer gaps.
  VectorXd weights;
  double log_gamma = 0.0;  // interior bound only
};

// d(value)/d(posterior marginal) and d(value)/d(bank component), the latter
// as free gradients in (h, J).
struct MixtureGrad {
  VectorXd d_m;
  MatrixXd d_S;
  std::vector<VectorXd> d_h;
  std::vector<MatrixXd> d_J;
};

// Shifts and whitens draws (columns) so the empirical mean is exactly zero
// and, when there are more draws than dimensions, the empirical covariance
// is exactly the identity. Makes the Monte-Carlo estimator exact for
// integrands linear in the sufficient statistic.
void standardize_eps(MatrixXd& eps);

// (1/S) sum_s log[(1/N) sum_m exp(eta_m^T t(z_s) - Phi_m)] over reparametrised
// draws z_s = m + chol(S) eps_s. Deterministic given eps; gradients flow
// through the draws into (m, S) by Cholesky reverse mode.
MixtureExpectation mc_log_mixture(const FactorBank& bank, const expfam::GaussianMoment& q,
                                  const MatrixXd& eps, MixtureGrad* grad = nullptr);

// log[(1/N) sum_m exp(eta_m^T mu - Phi_m)] plus the curvature correction
// (1/2) tr(etabar^T V etabar (diag(pi) - pi pi^T)) over the stacked
// sufficient statistic (z, vec(z z^T)).
MixtureExpectation second_order_log_mixture(const FactorBank& bank,
                                            const expfam::SuffStatMoments& moments);

// Same value with the moments derived from q, plus gradients w.r.t. q and
// the bank.
MixtureExpectation second_order_with_grad(const FactorBank& bank,
                                          const expfam::GaussianMoment& q, MixtureGrad* grad);

bool aux_is_valid(const FactorBank& bank, const AuxFactor& aux);

// Raises tilde_J uniformly until the smallest eigenvalue over m of
// -2(J_m - tilde_J) reaches 1e-4; already-valid inputs pass through
// untouched, so the map is idempotent.
AuxFactor validate_aux(const FactorBank& bank, const AuxFactor& aux);

// Closed-form lower bound on <log f(.|x^(n)) / F>_q for one item:
// -KL(q || normalized member at eta_n - tilde_eta) + log Gamma_n.
MixtureExpectation interior_bound_terms(const FactorBank& bank, const expfam::GaussianMoment& q,
                                        const AuxFactor& aux, int n);

// Bound plus gradients w.r.t. q, the bank, and the auxiliary parameters.
MixtureExpectation interior_with_grad(const FactorBank& bank, const expfam::GaussianMoment& q,
                                      const AuxFactor& aux, int n, MixtureGrad* grad,
                                      VectorXd* d_tilde_h, MatrixXd* d_tilde_J);

// Adam ascent of the interior bound over tilde_eta, re-validating every
// iterate; returns the best iterate seen. steps = 0 returns init unchanged.
AuxFactor optimize_aux(const FactorBank& bank, const expfam::GaussianMoment& q, int n,
                       const AuxFactor& init, int steps, double lr = 5e-2);

}  // namespace rpm
