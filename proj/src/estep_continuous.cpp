#include "rpm/estep_continuous.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "rpm/nets.hpp"

namespace rpm {

using expfam::GaussianMoment;
using expfam::GaussianNat;
using expfam::SuffStatMoments;

namespace {

constexpr double kEigFloor = 1e-4;

void check_q(const FactorBank& bank, const GaussianMoment& q) {
  if (q.m.size() != bank.dim() || q.S.rows() != bank.dim() || q.S.cols() != bank.dim())
    throw std::invalid_argument("mixture estimator: marginal dimension mismatch");
}

MixtureGrad zero_grad(Eigen::Index k, int n) {
  MixtureGrad g;
  g.d_m = VectorXd::Zero(k);
  g.d_S = MatrixXd::Zero(k, k);
  g.d_h.assign(static_cast<std::size_t>(n), VectorXd::Zero(k));
  g.d_J.assign(static_cast<std::size_t>(n), MatrixXd::Zero(k, k));
  return g;
}

MatrixXd unvec_square(const Eigen::Ref<const VectorXd>& v, Eigen::Index k) {
  return Eigen::Map<const MatrixXd>(v.data(), k, k);
}

// Reverse-mode map from d(value)/dL to d(value)/dS for S = L L^T: take the
// lower triangle of L^T Lbar with halved diagonal, then sandwich with
// inverse transposes and symmetrize.
MatrixXd chol_reverse(const Eigen::LLT<MatrixXd>& llt, const MatrixXd& lbar) {
  const Eigen::Index k = lbar.rows();
  MatrixXd p = (llt.matrixL().toDenseMatrix().transpose() * lbar).eval();
  for (Eigen::Index i = 0; i < k; ++i) {
    p(i, i) *= 0.5;
    for (Eigen::Index j = i + 1; j < k; ++j) p(i, j) = 0.0;
  }
  MatrixXd a = llt.matrixL().transpose().solve(p);
  MatrixXd x = llt.matrixL().transpose().solve(a.transpose()).transpose();
  return symmetrized(x);
}

}  // namespace

FactorBank make_factor_bank(const std::vector<GaussianNat>& etas) {
  if (etas.empty()) throw std::invalid_argument("factor bank: no components");
  FactorBank bank;
  bank.eta = etas;
  bank.log_norm.resize(static_cast<Eigen::Index>(etas.size()));
  const Eigen::Index k = etas[0].h.size();
  for (std::size_t m = 0; m < etas.size(); ++m) {
    if (etas[m].h.size() != k) throw std::invalid_argument("factor bank: mixed dimensions");
    expfam::validate(etas[m]);
    bank.log_norm[static_cast<Eigen::Index>(m)] = expfam::log_normalizer(etas[m]);
  }
  return bank;
}

void standardize_eps(MatrixXd& eps) {
  const Eigen::Index k = eps.rows(), s = eps.cols();
  if (s < 1) throw std::invalid_argument("standardize_eps: need at least one draw");
  eps.colwise() -= eps.rowwise().mean().eval();
  if (s > k) {
    const MatrixXd cov = eps * eps.transpose() / static_cast<double>(s);
    eps = chol_spd(cov).matrixL().solve(eps);
  }
}

MixtureExpectation mc_log_mixture(const FactorBank& bank, const GaussianMoment& q,
                                  const MatrixXd& eps, MixtureGrad* grad) {
  check_q(bank, q);
  const Eigen::Index k = bank.dim();
  const Eigen::Index s_draws = eps.cols();
  const int n = bank.size();
  if (eps.rows() != k || s_draws < 1)
    throw std::invalid_argument("mc_log_mixture: bad draw matrix");

  const Eigen::LLT<MatrixXd> llt = chol_spd(q.S);
  const MatrixXd l = llt.matrixL();

  // component moments, needed for the d eta terms
  std::vector<VectorXd> comp_mean;
  std::vector<MatrixXd> comp_m2;
  if (grad) {
    for (int m = 0; m < n; ++m) {
      const GaussianMoment mom = expfam::nat_to_moment(bank.eta[static_cast<std::size_t>(m)]);
      comp_mean.push_back(mom.m);
      comp_m2.push_back(mom.S + mom.m * mom.m.transpose());
    }
  }

  MixtureExpectation out;
  out.method = EstepMethod::Mc;
  out.weights = VectorXd::Zero(n);
  MatrixXd lbar = MatrixXd::Zero(k, k);
  if (grad) *grad = zero_grad(k, n);

  VectorXd a(n);
  double total = 0.0;
  for (Eigen::Index s = 0; s < s_draws; ++s) {
    const VectorXd z = q.m + l * eps.col(s);
    for (int m = 0; m < n; ++m)
      a[m] = expfam::dot_nat_stat(bank.eta[static_cast<std::size_t>(m)], z) - bank.log_norm[m];
    const double lse = log_sum_exp(a);
    total += lse;
    const VectorXd pi = (a.array() - lse).exp();
    out.weights += pi;

    if (grad) {
      VectorXd dz = VectorXd::Zero(k);
      for (int m = 0; m < n; ++m) {
        const auto& eta = bank.eta[static_cast<std::size_t>(m)];
        dz += pi[m] * (eta.h + 2.0 * eta.J * z);
        grad->d_h[static_cast<std::size_t>(m)] += pi[m] * (z - comp_mean[static_cast<std::size_t>(m)]);
        grad->d_J[static_cast<std::size_t>(m)] +=
            pi[m] * (z * z.transpose() - comp_m2[static_cast<std::size_t>(m)]);
      }
      grad->d_m += dz;
      lbar += dz * eps.col(s).transpose();
    }
  }

  const double inv_s = 1.0 / static_cast<double>(s_draws);
  out.value = total * inv_s - std::log(static_cast<double>(n));
  out.weights *= inv_s;
  if (grad) {
    grad->d_m *= inv_s;
    for (auto& g : grad->d_h) g *= inv_s;
    for (auto& g : grad->d_J) g *= inv_s;
    grad->d_S = chol_reverse(llt, lbar * inv_s);
  }
  return out;
}

namespace {

// Shared core of the second-order estimator. Never forms the N x N matrix
// B = etabar^T V etabar; only its diagonal and its action on pi are needed.
struct SecondOrderCore {
  MatrixXd etabar;  // D x N stacked natural parameters
  VectorXd pi;
  VectorXd diag_b;
  VectorXd b_pi;
  VectorXd u;   // etabar * pi
  VectorXd vu;  // V * u
  MatrixXd w;   // V * etabar
  double lse = 0.0;
  double value = 0.0;
};

SecondOrderCore second_order_core(const FactorBank& bank, const SuffStatMoments& moments) {
  const Eigen::Index k = bank.dim();
  const Eigen::Index d = k + k * k;
  const int n = bank.size();
  if (moments.mu.size() != d)
    throw std::invalid_argument("second order: moment dimension mismatch");

  SecondOrderCore core;
  core.etabar.resize(d, n);
  for (int m = 0; m < n; ++m)
    core.etabar.col(m) = expfam::stack_nat(bank.eta[static_cast<std::size_t>(m)]);

  VectorXd a = core.etabar.transpose() * moments.mu - bank.log_norm;
  core.lse = log_sum_exp(a);
  core.pi = (a.array() - core.lse).exp();

  core.w = moments.V * core.etabar;
  core.diag_b = (core.etabar.array() * core.w.array()).colwise().sum().transpose();
  core.u = core.etabar * core.pi;
  core.vu = moments.V * core.u;
  core.b_pi = core.etabar.transpose() * core.vu;

  const double correction = 0.5 * (core.pi.dot(core.diag_b) - core.u.dot(core.vu));
  core.value = core.lse - std::log(static_cast<double>(n)) + correction;
  return core;
}

}  // namespace

MixtureExpectation second_order_log_mixture(const FactorBank& bank,
                                            const SuffStatMoments& moments) {
  const SecondOrderCore core = second_order_core(bank, moments);
  MixtureExpectation out;
  out.method = EstepMethod::SecondOrder;
  out.value = core.value;
  out.weights = core.pi;
  return out;
}

MixtureExpectation second_order_with_grad(const FactorBank& bank, const GaussianMoment& q,
                                          MixtureGrad* grad) {
  check_q(bank, q);
  const SuffStatMoments moments = expfam::suffstat_moments(q);
  const SecondOrderCore core = second_order_core(bank, moments);

  MixtureExpectation out;
  out.method = EstepMethod::SecondOrder;
  out.value = core.value;
  out.weights = core.pi;
  if (!grad) return out;

  const Eigen::Index k = bank.dim();
  const int n = bank.size();
  *grad = zero_grad(k, n);

  // d(value)/d(a_m) beyond the plain softmax weight
  const VectorXd r = 0.5 * (core.diag_b - 2.0 * core.b_pi);
  const VectorXd cr = core.pi.cwiseProduct(r) - core.pi * core.pi.dot(r);

  const VectorXd gmu = core.u + core.etabar * cr;
  // d(value)/dV = (1/2) etabar (diag(pi) - pi pi^T) etabar^T
  const MatrixXd gv =
      0.5 * (core.etabar * core.pi.asDiagonal() * core.etabar.transpose() -
             core.u * core.u.transpose());

  // per-component stacked gradients
  for (int m = 0; m < n; ++m) {
    const GaussianMoment mom = expfam::nat_to_moment(bank.eta[static_cast<std::size_t>(m)]);
    const VectorXd stat = expfam::stacked_mean(mom);
    const VectorXd g_eta = (core.pi[m] + cr[m]) * (moments.mu - stat) +
                           core.pi[m] * (core.w.col(m) - core.vu);
    grad->d_h[static_cast<std::size_t>(m)] = g_eta.head(k);
    grad->d_J[static_cast<std::size_t>(m)] = unvec_square(g_eta.tail(k * k), k);
  }

  // chain mu = (m, vec(S + m m^T)) into (m, S)
  const VectorXd& m_vec = q.m;
  const MatrixXd& s_mat = q.S;
  grad->d_m = gmu.head(k);
  const MatrixXd g2 = unvec_square(gmu.tail(k * k), k);
  grad->d_m += (g2 + g2.transpose()) * m_vec;
  grad->d_S = g2;

  // chain the covariance of the stacked statistic into (m, S), entry by
  // entry: Cov(z, z) = S; Cov(z_a, z_k z_l) = m_k S_al + m_l S_ak;
  // Cov(z_i z_j, z_k z_l) = S_ik S_jl + S_il S_jk + the six mean-pair terms.
  grad->d_S += gv.topLeftCorner(k, k);

  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index kk = 0; kk < k; ++kk)
      for (Eigen::Index ll = 0; ll < k; ++ll) {
        const Eigen::Index beta = k + kk + k * ll;
        const double g = gv(a, beta) + gv(beta, a);
        grad->d_m[kk] += g * s_mat(a, ll);
        grad->d_S(a, ll) += g * m_vec[kk];
        grad->d_m[ll] += g * s_mat(a, kk);
        grad->d_S(a, kk) += g * m_vec[ll];
      }

  for (Eigen::Index i = 0; i < k; ++i)
    for (Eigen::Index j = 0; j < k; ++j)
      for (Eigen::Index kk = 0; kk < k; ++kk)
        for (Eigen::Index ll = 0; ll < k; ++ll) {
          const double g = gv(k + i + k * j, k + kk + k * ll);
          if (g == 0.0) continue;
          grad->d_S(i, kk) += g * s_mat(j, ll);
          grad->d_S(j, ll) += g * s_mat(i, kk);
          grad->d_S(i, ll) += g * s_mat(j, kk);
          grad->d_S(j, kk) += g * s_mat(i, ll);

          grad->d_m[i] += g * m_vec[kk] * s_mat(j, ll);
          grad->d_m[kk] += g * m_vec[i] * s_mat(j, ll);
          grad->d_S(j, ll) += g * m_vec[i] * m_vec[kk];

          grad->d_m[i] += g * m_vec[ll] * s_mat(j, kk);
          grad->d_m[ll] += g * m_vec[i] * s_mat(j, kk);
          grad->d_S(j, kk) += g * m_vec[i] * m_vec[ll];

          grad->d_m[j] += g * m_vec[kk] * s_mat(i, ll);
          grad->d_m[kk] += g * m_vec[j] * s_mat(i, ll);
          grad->d_S(i, ll) += g * m_vec[j] * m_vec[kk];

          grad->d_m[j] += g * m_vec[ll] * s_mat(i, kk);
          grad->d_m[ll] += g * m_vec[j] * s_mat(i, kk);
          grad->d_S(i, kk) += g * m_vec[j] * m_vec[ll];
        }
  return out;
}

bool aux_is_valid(const FactorBank& bank, const AuxFactor& aux) {
  const Eigen::Index k = bank.dim();
  if (aux.h.size() != k || aux.J.rows() != k || aux.J.cols() != k) return false;
  if (!aux.h.allFinite() || !aux.J.allFinite()) return false;
  for (const auto& eta : bank.eta) {
    const MatrixXd p = symmetrized(-2.0 * (eta.J - aux.J));
    Eigen::LLT<MatrixXd> llt(p);
    if (llt.info() != Eigen::Success) return false;
  }
  return true;
}

AuxFactor validate_aux(const FactorBank& bank, const AuxFactor& aux) {
  const Eigen::Index k = bank.dim();
  AuxFactor out = aux;
  if (out.h.size() != k) out.h = VectorXd::Zero(k);
  if (out.J.rows() != k || out.J.cols() != k) out.J = MatrixXd::Zero(k, k);
  out.J = symmetrized(out.J);

  double lam_min = std::numeric_limits<double>::infinity();
  for (const auto& eta : bank.eta) {
    const MatrixXd p = symmetrized(-2.0 * (eta.J - out.J));
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(p, Eigen::EigenvaluesOnly);
    lam_min = std::min(lam_min, es.eigenvalues().minCoeff());
  }
  if (lam_min >= kEigFloor) return out;

  // raising tilde_J by (delta/2) I raises every eigenvalue of
  // -2(J_m - tilde_J) by exactly delta
  const double delta = kEigFloor - lam_min;
  out.J.diagonal().array() += 0.5 * delta;
  return out;
}

namespace {

struct InteriorCore {
  double value = 0.0;
  double log_gamma = 0.0;
  VectorXd w;  // softmax over the shifted log-normalizer gaps
  std::vector<GaussianNat> shifted;
  VectorXd shifted_log_norm;
};

InteriorCore interior_core(const FactorBank& bank, const GaussianMoment& q,
                           const AuxFactor& aux, int n) {
  if (n < 0 || n >= bank.size())
    throw std::invalid_argument("interior bound: item index out of range");
  if (!aux_is_valid(bank, aux))
    throw std::runtime_error("auxiliary factor invalid for this bank; run validate_aux first");

  const int count = bank.size();
  InteriorCore core;
  core.shifted.resize(static_cast<std::size_t>(count));
  core.shifted_log_norm.resize(count);
  VectorXd dphi(count);
  for (int m = 0; m < count; ++m) {
    core.shifted[static_cast<std::size_t>(m)] =
        GaussianNat{bank.eta[static_cast<std::size_t>(m)].h - aux.h,
                    symmetrized(bank.eta[static_cast<std::size_t>(m)].J - aux.J)};
    core.shifted_log_norm[m] =
        expfam::log_normalizer(core.shifted[static_cast<std::size_t>(m)]);
    dphi[m] = core.shifted_log_norm[m] - bank.log_norm[m];
  }
  const double lse = log_sum_exp(dphi) - std::log(static_cast<double>(count));
  core.log_gamma = dphi[n] - lse;
  core.w = (dphi.array() - log_sum_exp(dphi)).exp();

  // -KL(q || normalized shifted member n) + log Gamma, written out so the
  // gradient paths share the exact same arithmetic
  const VectorXd mu_q = expfam::stacked_mean(q);
  const VectorXd stacked = expfam::stack_nat(core.shifted[static_cast<std::size_t>(n)]);
  core.value = expfam::entropy(q) + stacked.dot(mu_q) - core.shifted_log_norm[n] +
               core.log_gamma;
  return core;
}

}  // namespace

MixtureExpectation interior_bound_terms(const FactorBank& bank, const GaussianMoment& q,
                                        const AuxFactor& aux, int n) {
  check_q(bank, q);
  const InteriorCore core = interior_core(bank, q, aux, n);
  MixtureExpectation out;
  out.method = EstepMethod::InteriorBound;
  out.value = core.value;
  out.weights = core.w;
  out.log_gamma = core.log_gamma;
  return out;
}

MixtureExpectation interior_with_grad(const FactorBank& bank, const GaussianMoment& q,
                                      const AuxFactor& aux, int n, MixtureGrad* grad,
                                      VectorXd* d_tilde_h, MatrixXd* d_tilde_J) {
  check_q(bank, q);
  const InteriorCore core = interior_core(bank, q, aux, n);
  MixtureExpectation out;
  out.method = EstepMethod::InteriorBound;
  out.value = core.value;
  out.weights = core.w;
  out.log_gamma = core.log_gamma;

  const Eigen::Index k = bank.dim();
  const int count = bank.size();
  const std::size_t nn = static_cast<std::size_t>(n);
  const MatrixXd m2_q = q.S + q.m * q.m.transpose();

  if (grad) {
    *grad = zero_grad(k, count);
    grad->d_m = core.shifted[nn].h + 2.0 * core.shifted[nn].J * q.m;
    grad->d_S = core.shifted[nn].J + 0.5 * chol_spd(q.S).solve(MatrixXd::Identity(k, k));
  }

  if (d_tilde_h) *d_tilde_h = -q.m;
  if (d_tilde_J) *d_tilde_J = -m2_q;

  for (int m = 0; m < count; ++m) {
    const std::size_t mm = static_cast<std::size_t>(m);
    const GaussianMoment shifted_mom = expfam::nat_to_moment(core.shifted[mm]);
    const MatrixXd shifted_m2 = shifted_mom.S + shifted_mom.m * shifted_mom.m.transpose();
    if (d_tilde_h) *d_tilde_h += core.w[m] * shifted_mom.m;
    if (d_tilde_J) *d_tilde_J += core.w[m] * shifted_m2;

    if (grad) {
      const GaussianMoment mom = expfam::nat_to_moment(bank.eta[mm]);
      const MatrixXd comp_m2 = mom.S + mom.m * mom.m.transpose();
      grad->d_h[mm] = -core.w[m] * (shifted_mom.m - mom.m);
      grad->d_J[mm] = -core.w[m] * (shifted_m2 - comp_m2);
      if (m == n) {
        grad->d_h[mm] += q.m - mom.m;
        grad->d_J[mm] += m2_q - comp_m2;
      }
    }
  }
  if (d_tilde_J) *d_tilde_J = symmetrized(*d_tilde_J);
  return out;
}

AuxFactor optimize_aux(const FactorBank& bank, const GaussianMoment& q, int n,
                       const AuxFactor& init, int steps, double lr) {
  if (steps <= 0) return init;
  const Eigen::Index k = bank.dim();

  AuxFactor aux = validate_aux(bank, init);
  VectorXd ph = aux.h;
  MatrixXd pj = aux.J;
  VectorXd gh = VectorXd::Zero(k);
  MatrixXd gj = MatrixXd::Zero(k, k);

  std::vector<nets::ParamBlock> blocks = {
      {ph.data(), gh.data(), k, "aux.h"},
      {pj.data(), gj.data(), k * k, "aux.J"},
  };
  nets::AdamState adam;
  adam.lr = lr;
  adam.init(blocks);

  AuxFactor best = aux;
  double best_val = interior_bound_terms(bank, q, aux, n).value;

  for (int step = 0; step < steps; ++step) {
    VectorXd dth;
    MatrixXd dtj;
    interior_with_grad(bank, q, aux, n, nullptr, &dth, &dtj);
    gh = -dth;
    gj = -symmetrized(dtj);
    adam.step(blocks);

    aux = validate_aux(bank, AuxFactor{ph, symmetrized(pj)});
    const double val = interior_bound_terms(bank, q, aux, n).value;
    if (val > best_val) {
      best_val = val;
      best = aux;
    }
  }
  return best;
}

}  // namespace rpm
