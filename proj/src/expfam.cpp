#include "rpm/expfam.hpp"

namespace rpm::expfam {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

void require_finite(const VectorXd& v, const char* what) {
  if (!v.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

void require_finite(const MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw std::invalid_argument(std::string(what) + ": non-finite entries");
}

void require_symmetric(const MatrixXd& m, const char* what) {
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw std::invalid_argument(std::string(what) + ": matrix not symmetric");
}

// h(A,B) = A (x) B + (G^T (x) A (x) G) .* (G (x) B (x) G^T) with G the all-ones
// column, the building block of the covariance of vec(z z^T).
MatrixXd hadamard_kron_pair(const MatrixXd& a, const MatrixXd& b) {
  const Eigen::Index k = a.rows();
  const MatrixXd ones_col = MatrixXd::Ones(k, 1);
  const MatrixXd ones_row = MatrixXd::Ones(1, k);
  const MatrixXd left = kron(kron(ones_row, a), ones_col);
  const MatrixXd right = kron(kron(ones_col, b), ones_row);
  return kron(a, b) + left.cwiseProduct(right);
}

}  // namespace

void validate(const CategoricalNat& p) {
  if (p.logits.size() == 0) throw std::invalid_argument("categorical: empty logits");
  require_finite(p.logits, "categorical logits");
}

void validate(const GaussianNat& p) {
  require_finite(p.h, "gaussian h");
  require_finite(p.J, "gaussian J");
  if (p.J.rows() != p.J.cols() || p.J.rows() != p.h.size())
    throw std::invalid_argument("gaussian natural: shape mismatch");
  require_symmetric(p.J, "gaussian J");
  Eigen::LLT<MatrixXd> llt(symmetrized(-2.0 * p.J));
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("not a valid natural parameter: -2J not positive definite");
}

void validate(const GaussianMoment& p) {
  require_finite(p.m, "gaussian mean");
  require_finite(p.S, "gaussian cov");
  if (p.S.rows() != p.S.cols() || p.S.rows() != p.m.size())
    throw std::invalid_argument("gaussian moment: shape mismatch");
  require_symmetric(p.S, "gaussian cov");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrized(p.S), Eigen::EigenvaluesOnly);
  const double scale = std::max(1.0, p.S.cwiseAbs().maxCoeff());
  if (es.eigenvalues().minCoeff() < -1e-10 * scale)
    throw std::invalid_argument("gaussian moment: covariance not positive semidefinite");
}

void validate(const DirichletParams& p) {
  if (p.alpha.size() == 0) throw std::invalid_argument("dirichlet: empty alpha");
  require_finite(p.alpha, "dirichlet alpha");
  if (p.alpha.minCoeff() <= 0.0) throw std::invalid_argument("dirichlet: alpha must be positive");
}

double log_normalizer(const CategoricalNat& p) {
  validate(p);
  return log_sum_exp(p.logits);
}

double log_normalizer(const GaussianNat& p) {
  validate(p);
  const Eigen::Index k = p.h.size();
  const auto llt = chol_spd(-2.0 * p.J);
  const VectorXd sol = llt.solve(p.h);  // (-2J)^-1 h
  return 0.5 * p.h.dot(sol) - 0.5 * log_det_from_llt(llt) + 0.5 * k * kLog2Pi;
}

double log_normalizer(const DirichletParams& p) {
  validate(p);
  double s = 0.0;
  for (Eigen::Index i = 0; i < p.alpha.size(); ++i) s += std::lgamma(p.alpha[i]);
  return s - std::lgamma(p.alpha.sum());
}

GaussianMoment nat_to_moment(const GaussianNat& p) {
  validate(p);
  const auto llt = chol_spd(-2.0 * p.J);
  GaussianMoment out;
  out.S = symmetrized(llt.solve(MatrixXd::Identity(p.J.rows(), p.J.cols())));
  out.m = llt.solve(p.h);
  return out;
}

GaussianNat moment_to_nat(const GaussianMoment& p) {
  validate(p);
  const auto llt = chol_spd(p.S);
  GaussianNat out;
  const MatrixXd prec = symmetrized(llt.solve(MatrixXd::Identity(p.S.rows(), p.S.cols())));
  out.J = -0.5 * prec;
  out.h = prec * p.m;
  return out;
}

CategoricalMoment nat_to_moment(const CategoricalNat& p) {
  validate(p);
  return {softmax(p.logits)};
}

CategoricalNat moment_to_nat(const CategoricalMoment& p) {
  if (p.probs.size() == 0 || !p.probs.allFinite() || p.probs.minCoeff() <= 0.0)
    throw std::invalid_argument("categorical moment: probs must be positive");
  if (std::abs(p.probs.sum() - 1.0) > 1e-8)
    throw std::invalid_argument("categorical moment: probs must sum to 1");
  return {p.probs.array().log().matrix()};
}

double kl(const CategoricalNat& q, const CategoricalNat& p) {
  validate(q);
  validate(p);
  if (q.logits.size() != p.logits.size())
    throw std::invalid_argument("categorical kl: size mismatch");
  const VectorXd lq = q.logits.array() - log_sum_exp(q.logits);
  const VectorXd lp = p.logits.array() - log_sum_exp(p.logits);
  double out = 0.0;
  for (Eigen::Index i = 0; i < lq.size(); ++i) out += std::exp(lq[i]) * (lq[i] - lp[i]);
  return out;
}

double kl(const GaussianMoment& q, const GaussianMoment& p) {
  validate(q);
  validate(p);
  const Eigen::Index k = q.m.size();
  if (p.m.size() != k) throw std::invalid_argument("gaussian kl: size mismatch");
  const auto llt_p = chol_spd(p.S);
  const auto llt_q = chol_spd(q.S);
  const MatrixXd sol = llt_p.solve(q.S);
  const VectorXd d = p.m - q.m;
  return 0.5 * (sol.trace() + d.dot(llt_p.solve(d)) - static_cast<double>(k) +
                log_det_from_llt(llt_p) - log_det_from_llt(llt_q));
}

double kl(const GaussianNat& q, const GaussianNat& p) {
  return kl(nat_to_moment(q), nat_to_moment(p));
}

double kl(const DirichletParams& q, const DirichletParams& p) {
  validate(q);
  validate(p);
  if (q.alpha.size() != p.alpha.size()) throw std::invalid_argument("dirichlet kl: size mismatch");
  const double q0 = q.alpha.sum();
  double out = std::lgamma(q0) - std::lgamma(p.alpha.sum());
  const double dg0 = digamma(q0);
  for (Eigen::Index i = 0; i < q.alpha.size(); ++i) {
    out -= std::lgamma(q.alpha[i]) - std::lgamma(p.alpha[i]);
    out += (q.alpha[i] - p.alpha[i]) * (digamma(q.alpha[i]) - dg0);
  }
  return out;
}

double entropy(const CategoricalNat& p) {
  validate(p);
  const VectorXd lp = p.logits.array() - log_sum_exp(p.logits);
  double out = 0.0;
  for (Eigen::Index i = 0; i < lp.size(); ++i) out -= std::exp(lp[i]) * lp[i];
  return out;
}

double entropy(const GaussianMoment& p) {
  validate(p);
  const Eigen::Index k = p.m.size();
  const auto llt = chol_spd(p.S);
  return 0.5 * (static_cast<double>(k) * (1.0 + kLog2Pi) + log_det_from_llt(llt));
}

double entropy(const DirichletParams& p) {
  validate(p);
  const double a0 = p.alpha.sum();
  const Eigen::Index k = p.alpha.size();
  double out = log_normalizer(p) + (a0 - static_cast<double>(k)) * digamma(a0);
  for (Eigen::Index i = 0; i < k; ++i) out -= (p.alpha[i] - 1.0) * digamma(p.alpha[i]);
  return out;
}

double log_prob(const CategoricalNat& p, Eigen::Index k) {
  validate(p);
  if (k < 0 || k >= p.logits.size()) throw std::invalid_argument("categorical log_prob: bad index");
  return p.logits[k] - log_sum_exp(p.logits);
}

double log_prob(const GaussianNat& p, const VectorXd& z) {
  return dot_nat_stat(p, z) - log_normalizer(p);
}

double log_prob(const GaussianMoment& p, const VectorXd& z) {
  return log_prob(moment_to_nat(p), z);
}

double log_prob(const DirichletParams& p, const VectorXd& x) {
  validate(p);
  if (x.size() != p.alpha.size()) throw std::invalid_argument("dirichlet log_prob: size mismatch");
  if (x.minCoeff() <= 0.0 || std::abs(x.sum() - 1.0) > 1e-8)
    throw std::invalid_argument("dirichlet log_prob: x not in the open simplex");
  double out = -log_normalizer(p);
  for (Eigen::Index i = 0; i < x.size(); ++i) out += (p.alpha[i] - 1.0) * std::log(x[i]);
  return out;
}

SuffStatMoments suffstat_moments(const GaussianMoment& q) {
  validate(q);
  const Eigen::Index k = q.m.size();
  const MatrixXd mm = q.m * q.m.transpose();
  SuffStatMoments out;
  out.mu.resize(k + k * k);
  out.mu.head(k) = q.m;
  out.mu.tail(k * k) = vec(q.S + mm);

  const MatrixXd m_row = q.m.transpose();
  const MatrixXd cross_top = kron(m_row, q.S) + kron(q.S, m_row);  // k x k^2
  out.V.resize(k + k * k, k + k * k);
  out.V.topLeftCorner(k, k) = q.S;
  out.V.topRightCorner(k, k * k) = cross_top;
  out.V.bottomLeftCorner(k * k, k) = cross_top.transpose();
  out.V.bottomRightCorner(k * k, k * k) = hadamard_kron_pair(q.S, q.S) +
                                          hadamard_kron_pair(q.S, mm) +
                                          hadamard_kron_pair(mm, q.S);
  return out;
}

VectorXd sample_reparam(const GaussianMoment& q, const VectorXd& eps) {
  validate(q);
  if (eps.size() != q.m.size()) throw std::invalid_argument("sample_reparam: eps size mismatch");
  const auto llt = chol_spd(q.S);
  return q.m + MatrixXd(llt.matrixL()) * eps;
}

VectorXd stack_nat(const GaussianNat& p) {
  VectorXd out(p.h.size() + p.J.size());
  out.head(p.h.size()) = p.h;
  out.tail(p.J.size()) = vec(p.J);
  return out;
}

GaussianNat unstack_nat(const VectorXd& v, Eigen::Index k) {
  if (v.size() != k + k * k) throw std::invalid_argument("unstack_nat: size mismatch");
  return {v.head(k), unvec(v.tail(k * k), k, k)};
}

VectorXd stacked_mean(const GaussianMoment& q) {
  return suffstat_moments(q).mu;
}

double dot_nat_stat(const GaussianNat& p, const VectorXd& z) {
  if (z.size() != p.h.size()) throw std::invalid_argument("dot_nat_stat: size mismatch");
  return p.h.dot(z) + z.dot(p.J * z);
}

}  // namespace rpm::expfam
