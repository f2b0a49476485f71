#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "rpm/estep_continuous.hpp"
#include "rpm/expfam.hpp"

using namespace rpm;
using expfam::GaussianMoment;
using expfam::GaussianNat;

namespace {

GaussianMoment random_moment(Rng& rng, int k, double spread = 1.0) {
  const MatrixXd a = rng.normal_mat(k, k);
  GaussianMoment q;
  q.S = symmetrized(0.2 * a * a.transpose()) + 0.4 * MatrixXd::Identity(k, k);
  q.m = spread * rng.normal_vec(k);
  return q;
}

std::vector<GaussianNat> random_etas(Rng& rng, int k, int n, double spread = 1.5) {
  std::vector<GaussianNat> etas;
  for (int m = 0; m < n; ++m) etas.push_back(expfam::moment_to_nat(random_moment(rng, k, spread)));
  return etas;
}

FactorBank bank_k1(const std::vector<double>& means, const std::vector<double>& vars) {
  std::vector<GaussianNat> etas;
  for (std::size_t i = 0; i < means.size(); ++i) {
    GaussianMoment mom;
    mom.m = VectorXd::Constant(1, means[i]);
    mom.S = MatrixXd::Constant(1, 1, vars[i]);
    etas.push_back(expfam::moment_to_nat(mom));
  }
  return make_factor_bank(etas);
}

// E_q[log((1/N) sum_m f_m(z))] for scalar latents, by Gauss-Hermite.
double quad_log_mixture_k1(const FactorBank& bank, double m, double s, int nodes = 96) {
  return oracles::gh_expect(
      [&](double z) {
        VectorXd a(bank.size());
        for (int i = 0; i < bank.size(); ++i) {
          const auto& eta = bank.eta[static_cast<std::size_t>(i)];
          a[i] = eta.h[0] * z + eta.J(0, 0) * z * z - bank.log_norm[i];
        }
        return log_sum_exp(a) - std::log(static_cast<double>(bank.size()));
      },
      m, s, nodes);
}

double exact_log_factor(const GaussianNat& eta, const GaussianMoment& q) {
  return expfam::stack_nat(eta).dot(expfam::stacked_mean(q)) - expfam::log_normalizer(eta);
}

// FD of f under a symmetric-pair perturbation of entry (i, j). Compare the
// result against g_ij + g_ji off the diagonal and g_ii on it.
double fd_sym(const std::function<double(const MatrixXd&)>& f, const MatrixXd& s0,
              Eigen::Index i, Eigen::Index j, double h = 1e-5) {
  MatrixXd delta = MatrixXd::Zero(s0.rows(), s0.cols());
  delta(i, j) += h;
  if (i != j) delta(j, i) += h;
  return (f(s0 + delta) - f(s0 - delta)) / (2.0 * h);
}

double sym_entry(const MatrixXd& g, Eigen::Index i, Eigen::Index j) {
  return i == j ? g(i, i) : g(i, j) + g(j, i);
}

void check_grad_matrix(const std::function<double(const MatrixXd&)>& f, const MatrixXd& s0,
                       const MatrixXd& got, double tol = 1e-4) {
  for (Eigen::Index i = 0; i < s0.rows(); ++i)
    for (Eigen::Index j = i; j < s0.cols(); ++j) {
      const double fd = fd_sym(f, s0, i, j);
      const double denom = std::max(1e-4, std::abs(fd));
      CHECK(std::abs(sym_entry(got, i, j) - fd) / denom < tol);
    }
}

void check_grad_vector(const std::function<double(const VectorXd&)>& f, const VectorXd& x0,
                       const VectorXd& got, double tol = 1e-4) {
  const VectorXd fd = oracles::fd_gradient(f, x0);
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    const double denom = std::max(1e-4, std::abs(fd[i]));
    CHECK(std::abs(got[i] - fd[i]) / denom < tol);
  }
}

double min_gap_eigenvalue(const FactorBank& bank, const AuxFactor& aux) {
  double lam = std::numeric_limits<double>::infinity();
  for (const auto& eta : bank.eta) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(symmetrized(-2.0 * (eta.J - aux.J)),
                                               Eigen::EigenvaluesOnly);
    lam = std::min(lam, es.eigenvalues().minCoeff());
  }
  return lam;
}

}  // namespace

TEST_CASE("factor bank stores log normalizers; rejects bad input") {
  Rng rng(3);
  const auto etas = random_etas(rng, 2, 4);
  const FactorBank bank = make_factor_bank(etas);
  REQUIRE(bank.size() == 4);
  CHECK(bank.dim() == 2);
  for (int m = 0; m < 4; ++m)
    CHECK(bank.log_norm[m] ==
          doctest::Approx(expfam::log_normalizer(etas[static_cast<std::size_t>(m)])).epsilon(1e-14));

  CHECK_THROWS_AS(make_factor_bank({}), std::invalid_argument);
  auto mixed = etas;
  mixed.push_back(expfam::moment_to_nat(random_moment(rng, 3)));
  CHECK_THROWS_AS(make_factor_bank(mixed), std::invalid_argument);
}

TEST_CASE("standardize_eps centers always, whitens when draws exceed dimension") {
  Rng rng(11);

  SUBCASE("many draws: exact first and second empirical moments") {
    MatrixXd eps = rng.normal_mat(3, 40);
    standardize_eps(eps);
    CHECK(eps.rowwise().mean().norm() < 1e-12);
    const MatrixXd cov = eps * eps.transpose() / 40.0;
    CHECK((cov - MatrixXd::Identity(3, 3)).norm() < 1e-10);
  }

  SUBCASE("few draws: centered only") {
    MatrixXd eps = rng.normal_mat(4, 3);
    MatrixXd before = eps;
    standardize_eps(eps);
    CHECK(eps.rowwise().mean().norm() < 1e-12);
    // centering is the only change
    before.colwise() -= before.rowwise().mean().eval();
    CHECK((eps - before).norm() < 1e-13);
  }
}

TEST_CASE("single-component monte carlo with standardized draws is exact") {
  Rng rng(21);
  for (int trial = 0; trial < 12; ++trial) {
    const int k = 1 + (trial % 3);
    const GaussianMoment q = random_moment(rng, k);
    const FactorBank bank = make_factor_bank(random_etas(rng, k, 1));
    MatrixXd eps = rng.normal_mat(k, 50);
    standardize_eps(eps);

    // integrand is linear in (z, z z^T), so exact moments give the exact value
    const double want = exact_log_factor(bank.eta[0], q);
    const MixtureExpectation got = mc_log_mixture(bank, q, eps);
    CHECK(got.value == doctest::Approx(want).epsilon(1e-10));
    CHECK(got.weights.size() == 1);
    CHECK(got.weights[0] == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("identical components collapse to the single-component value") {
  Rng rng(22);
  const int k = 2;
  const GaussianMoment q = random_moment(rng, k);
  const auto eta = expfam::moment_to_nat(random_moment(rng, k));
  const FactorBank one = make_factor_bank({eta});
  const FactorBank three = make_factor_bank({eta, eta, eta});
  MatrixXd eps = rng.normal_mat(k, 30);
  standardize_eps(eps);

  // the 1/N prefactor cancels the log N from the repeated components
  const double v1 = mc_log_mixture(one, q, eps).value;
  const MixtureExpectation m3 = mc_log_mixture(three, q, eps);
  CHECK(m3.value == doctest::Approx(v1).epsilon(1e-12));
  for (int m = 0; m < 3; ++m) CHECK(m3.weights[m] == doctest::Approx(1.0 / 3.0).epsilon(1e-10));

  const auto moments = expfam::suffstat_moments(q);
  const double s1 = second_order_log_mixture(one, moments).value;
  const double s3 = second_order_log_mixture(three, moments).value;
  CHECK(std::abs(s3 - s1) < 1e-10);  // curvature correction cancels exactly
}

TEST_CASE("monte carlo tracks quadrature within three standard errors (K=1)") {
  Rng rng(23);
  const int draws = 20000;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> means, vars;
    const int n = 2 + static_cast<int>(rng.uniform_int(0, 2));
    for (int m = 0; m < n; ++m) {
      means.push_back(2.0 * rng.normal());
      vars.push_back(0.4 + rng.uniform());
    }
    const FactorBank bank = bank_k1(means, vars);
    GaussianMoment q;
    q.m = VectorXd::Constant(1, rng.normal());
    q.S = MatrixXd::Constant(1, 1, 0.3 + 0.7 * rng.uniform());

    MatrixXd eps = rng.normal_mat(1, draws);
    standardize_eps(eps);
    const double mc = mc_log_mixture(bank, q, eps).value;
    const double quad = quad_log_mixture_k1(bank, q.m[0], q.S(0, 0));

    // per-draw standard error from the same draws
    const double l = std::sqrt(q.S(0, 0));
    double sum = 0.0, sumsq = 0.0;
    for (int s = 0; s < draws; ++s) {
      const double z = q.m[0] + l * eps(0, s);
      VectorXd a(bank.size());
      for (int m = 0; m < bank.size(); ++m) {
        const auto& eta = bank.eta[static_cast<std::size_t>(m)];
        a[m] = eta.h[0] * z + eta.J(0, 0) * z * z - bank.log_norm[m];
      }
      const double v = log_sum_exp(a) - std::log(static_cast<double>(bank.size()));
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / draws;
    const double se = std::sqrt(std::max(0.0, sumsq / draws - mean * mean) / draws);
    CHECK(std::abs(mc - quad) <= 3.0 * se + 1e-9);
  }
}

TEST_CASE("second-order weights are a proper distribution") {
  Rng rng(24);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 1 + (trial % 3);
    const int n = 2 + (trial % 5);
    const FactorBank bank = make_factor_bank(random_etas(rng, k, n));
    const GaussianMoment q = random_moment(rng, k);
    const MixtureExpectation out = second_order_log_mixture(bank, expfam::suffstat_moments(q));
    CHECK(out.weights.minCoeff() >= 0.0);
    CHECK(out.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::isfinite(out.value));
  }
}

TEST_CASE("second-order estimator equals the expected second-order expansion") {
  // pinned scalar instance: three components at -1, 0, 1 and a narrow marginal
  const FactorBank bank = bank_k1({-1.0, 0.0, 1.0}, {1.0, 0.8, 1.3});
  GaussianMoment q;
  q.m = VectorXd::Constant(1, 0.2);
  q.S = MatrixXd::Constant(1, 1, 0.25);

  const auto moments = expfam::suffstat_moments(q);
  const double so = second_order_log_mixture(bank, moments).value;
  const double quad = quad_log_mixture_k1(bank, 0.2, 0.25, 128);

  // expansion of log F in the stacked statistic t = (z, z^2) around E[t]
  MatrixXd etabar(2, 3);
  for (int m = 0; m < 3; ++m) etabar.col(m) = expfam::stack_nat(bank.eta[static_cast<std::size_t>(m)]);
  const VectorXd a = etabar.transpose() * moments.mu - bank.log_norm;
  const double lse = log_sum_exp(a);
  const VectorXd pi = (a.array() - lse).exp();
  const VectorXd grad_t = etabar * pi;
  const MatrixXd hess =
      etabar * (MatrixXd(pi.asDiagonal()) - pi * pi.transpose()) * etabar.transpose();
  const double g_mu = lse - std::log(3.0);

  auto taylor_gap = [&](double z) {
    Eigen::Vector2d t(z, z * z);
    VectorXd av(3);
    for (int m = 0; m < 3; ++m) av[m] = etabar.col(m).dot(t) - bank.log_norm[m];
    const double g = log_sum_exp(av) - std::log(3.0);
    const Eigen::Vector2d d = t - moments.mu;
    const double t2 = g_mu + grad_t.dot(d) + 0.5 * d.dot(hess * d);
    return std::abs(g - t2);
  };
  const double remainder = oracles::gh_expect(taylor_gap, 0.2, 0.25, 128);

  CHECK(remainder > 0.0);
  CHECK(std::abs(so - quad) <= 10.0 * remainder + 1e-12);
  CHECK(std::abs(so - quad) <= 0.05);

  // and on a handful of random scalar instances the gap stays moderate
  Rng rng(25);
  for (int trial = 0; trial < 10; ++trial) {
    const FactorBank b =
        bank_k1({rng.normal(), rng.normal()}, {0.5 + rng.uniform(), 0.5 + rng.uniform()});
    GaussianMoment qq;
    qq.m = VectorXd::Constant(1, 0.5 * rng.normal());
    qq.S = MatrixXd::Constant(1, 1, 0.2 + 0.3 * rng.uniform());
    const double v = second_order_log_mixture(b, expfam::suffstat_moments(qq)).value;
    CHECK(std::abs(v - quad_log_mixture_k1(b, qq.m[0], qq.S(0, 0))) < 0.1);
  }
}

TEST_CASE("monte carlo gradients match finite differences") {
  Rng rng(26);
  const int k = 2, n = 3;
  const auto etas = random_etas(rng, k, n);
  const GaussianMoment q = random_moment(rng, k);
  MatrixXd eps = rng.normal_mat(k, 60);
  standardize_eps(eps);

  const FactorBank bank = make_factor_bank(etas);
  MixtureGrad grad;
  mc_log_mixture(bank, q, eps, &grad);

  check_grad_vector(
      [&](const VectorXd& m) {
        return mc_log_mixture(bank, GaussianMoment{m, q.S}, eps).value;
      },
      q.m, grad.d_m);
  check_grad_matrix(
      [&](const MatrixXd& s) {
        return mc_log_mixture(bank, GaussianMoment{q.m, s}, eps).value;
      },
      q.S, grad.d_S);

  for (int m = 0; m < n; ++m) {
    const std::size_t mm = static_cast<std::size_t>(m);
    check_grad_vector(
        [&](const VectorXd& h) {
          auto e2 = etas;
          e2[mm].h = h;
          return mc_log_mixture(make_factor_bank(e2), q, eps).value;
        },
        etas[mm].h, grad.d_h[mm]);
    check_grad_matrix(
        [&](const MatrixXd& j) {
          auto e2 = etas;
          e2[mm].J = j;
          return mc_log_mixture(make_factor_bank(e2), q, eps).value;
        },
        etas[mm].J, grad.d_J[mm]);
  }
}

TEST_CASE("second-order gradients match finite differences") {
  Rng rng(27);
  const int k = 2, n = 3;
  const auto etas = random_etas(rng, k, n);
  const GaussianMoment q = random_moment(rng, k);
  const FactorBank bank = make_factor_bank(etas);

  MixtureGrad grad;
  second_order_with_grad(bank, q, &grad);

  auto value_at = [&](const std::vector<GaussianNat>& e, const VectorXd& m, const MatrixXd& s) {
    return second_order_log_mixture(make_factor_bank(e), expfam::suffstat_moments({m, s})).value;
  };

  check_grad_vector([&](const VectorXd& m) { return value_at(etas, m, q.S); }, q.m, grad.d_m);
  check_grad_matrix([&](const MatrixXd& s) { return value_at(etas, q.m, s); }, q.S, grad.d_S);

  for (int m = 0; m < n; ++m) {
    const std::size_t mm = static_cast<std::size_t>(m);
    check_grad_vector(
        [&](const VectorXd& h) {
          auto e2 = etas;
          e2[mm].h = h;
          return value_at(e2, q.m, q.S);
        },
        etas[mm].h, grad.d_h[mm]);
    check_grad_matrix(
        [&](const MatrixXd& j) {
          auto e2 = etas;
          e2[mm].J = j;
          return value_at(e2, q.m, q.S);
        },
        etas[mm].J, grad.d_J[mm]);
  }

  SUBCASE("value from with-grad entry point matches the moments entry point") {
    const double direct = second_order_log_mixture(bank, expfam::suffstat_moments(q)).value;
    CHECK(second_order_with_grad(bank, q, nullptr).value == doctest::Approx(direct).epsilon(1e-14));
  }
}

TEST_CASE("aux validation enforces the eigenvalue floor and is idempotent") {
  Rng rng(28);
  const int k = 2;
  const FactorBank bank = make_factor_bank(random_etas(rng, k, 3));

  SUBCASE("zero aux on a regular bank passes through untouched") {
    AuxFactor zero{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    CHECK(aux_is_valid(bank, zero));
    const AuxFactor out = validate_aux(bank, zero);
    CHECK((out.h - zero.h).norm() == 0.0);
    CHECK((out.J - zero.J).norm() == 0.0);
  }

  SUBCASE("an aux that overshoots a component gets shifted onto the floor") {
    AuxFactor bad{rng.normal_vec(k), MatrixXd(bank.eta[0].J - 0.05 * MatrixXd::Identity(k, k))};
    CHECK_FALSE(aux_is_valid(bank, bad));

    const AuxFactor fixed = validate_aux(bank, bad);
    CHECK(aux_is_valid(bank, fixed));
    CHECK((fixed.h - bad.h).norm() == 0.0);
    const double lam = min_gap_eigenvalue(bank, fixed);
    CHECK(lam >= 1e-4 - 1e-9);
    CHECK(lam <= 1e-4 + 1e-6);  // hinge lands exactly on the floor

    const AuxFactor again = validate_aux(bank, fixed);
    CHECK((again.J - fixed.J).norm() < 1e-12);
    CHECK((again.h - fixed.h).norm() == 0.0);
  }

  SUBCASE("interior bound refuses an invalid aux") {
    AuxFactor bad{VectorXd::Zero(k), MatrixXd(bank.eta[0].J - 0.05 * MatrixXd::Identity(k, k))};
    const GaussianMoment q = random_moment(rng, k);
    CHECK_THROWS_AS(interior_bound_terms(bank, q, bad, 0), std::runtime_error);
  }
}

TEST_CASE("interior bound closed forms") {
  Rng rng(29);
  const int k = 2;

  SUBCASE("single conjugate factor with zero aux is exactly tight") {
    const GaussianMoment q = random_moment(rng, k);
    const FactorBank bank = make_factor_bank({expfam::moment_to_nat(q)});
    const AuxFactor zero{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    const MixtureExpectation out = interior_bound_terms(bank, q, zero, 0);
    CHECK(std::abs(out.value) < 1e-10);
    CHECK(out.log_gamma == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("single factor, mismatched marginal: bound equals minus the divergence") {
    const GaussianMoment q = random_moment(rng, k);
    const GaussianNat eta = expfam::moment_to_nat(random_moment(rng, k));
    const FactorBank bank = make_factor_bank({eta});
    const AuxFactor zero{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    const double v = interior_bound_terms(bank, q, zero, 0).value;
    CHECK(v <= 0.0);
    CHECK(v == doctest::Approx(-expfam::kl(q, expfam::nat_to_moment(eta))).epsilon(1e-10));
  }

  SUBCASE("weights and log_gamma are consistent") {
    const FactorBank bank = make_factor_bank(random_etas(rng, k, 4));
    const GaussianMoment q = random_moment(rng, k);
    const AuxFactor zero{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    for (int n = 0; n < 4; ++n) {
      const MixtureExpectation out = interior_bound_terms(bank, q, zero, n);
      CHECK(out.weights.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK(out.log_gamma ==
            doctest::Approx(std::log(out.weights[n]) + std::log(4.0)).epsilon(1e-10));
    }
  }

  SUBCASE("bound never exceeds the true bracket (K=1)") {
    const FactorBank bank = bank_k1({-0.8, 0.3, 1.1}, {0.9, 1.2, 0.7});
    GaussianMoment q;
    q.m = VectorXd::Constant(1, 0.4);
    q.S = MatrixXd::Constant(1, 1, 0.5);
    const double quad_mix = quad_log_mixture_k1(bank, 0.4, 0.5, 128);
    const AuxFactor zero{VectorXd::Zero(1), MatrixXd::Zero(1, 1)};
    for (int n = 0; n < 3; ++n) {
      const double bracket =
          exact_log_factor(bank.eta[static_cast<std::size_t>(n)], q) - quad_mix;
      const double plain = interior_bound_terms(bank, q, zero, n).value;
      CHECK(plain <= bracket + 1e-8);
      const AuxFactor tuned = optimize_aux(bank, q, n, zero, 200, 5e-2);
      const double best = interior_bound_terms(bank, q, tuned, n).value;
      CHECK(best <= bracket + 1e-8);
      CHECK(best >= plain - 1e-12);  // optimizer returns the best visited iterate
    }
  }
}

TEST_CASE("interior gradients match finite differences") {
  Rng rng(30);
  const int k = 2, n_comp = 3;
  const auto etas = random_etas(rng, k, n_comp);
  const GaussianMoment q = random_moment(rng, k);
  const AuxFactor aux{0.1 * rng.normal_vec(k),
                      MatrixXd(-0.05 * MatrixXd::Identity(k, k))};
  const FactorBank bank = make_factor_bank(etas);
  REQUIRE(aux_is_valid(bank, aux));
  const int target = 1;

  MixtureGrad grad;
  VectorXd d_th;
  MatrixXd d_tj;
  interior_with_grad(bank, q, aux, target, &grad, &d_th, &d_tj);

  auto value_at = [&](const std::vector<GaussianNat>& e, const GaussianMoment& qq,
                      const AuxFactor& a) {
    return interior_bound_terms(make_factor_bank(e), qq, a, target).value;
  };

  check_grad_vector(
      [&](const VectorXd& m) { return value_at(etas, GaussianMoment{m, q.S}, aux); }, q.m,
      grad.d_m);
  check_grad_matrix(
      [&](const MatrixXd& s) { return value_at(etas, GaussianMoment{q.m, s}, aux); }, q.S,
      grad.d_S);
  check_grad_vector(
      [&](const VectorXd& h) { return value_at(etas, q, AuxFactor{h, aux.J}); }, aux.h, d_th);
  check_grad_matrix(
      [&](const MatrixXd& j) { return value_at(etas, q, AuxFactor{aux.h, j}); }, aux.J, d_tj);

  for (int m = 0; m < n_comp; ++m) {
    const std::size_t mm = static_cast<std::size_t>(m);
    check_grad_vector(
        [&](const VectorXd& h) {
          auto e2 = etas;
          e2[mm].h = h;
          return value_at(e2, q, aux);
        },
        etas[mm].h, grad.d_h[mm]);
    check_grad_matrix(
        [&](const MatrixXd& j) {
          auto e2 = etas;
          e2[mm].J = j;
          return value_at(e2, q, aux);
        },
        etas[mm].J, grad.d_J[mm]);
  }
}

TEST_CASE("all three estimators agree on the conjugate single-factor bracket") {
  Rng rng(31);
  for (int trial = 0; trial < 8; ++trial) {
    const int k = 1 + (trial % 3);
    const GaussianMoment q = random_moment(rng, k);
    const GaussianNat eta = expfam::moment_to_nat(q);
    const FactorBank bank = make_factor_bank({eta});
    MatrixXd eps = rng.normal_mat(k, 40);
    standardize_eps(eps);

    const double exact = exact_log_factor(eta, q);
    const double br_mc = exact - mc_log_mixture(bank, q, eps).value;
    const double br_so = exact - second_order_log_mixture(bank, expfam::suffstat_moments(q)).value;
    const AuxFactor zero{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    const double br_ib = interior_bound_terms(bank, q, zero, 0).value;

    CHECK(std::abs(br_mc) < 1e-8);
    CHECK(std::abs(br_so) < 1e-8);
    CHECK(std::abs(br_ib) < 1e-8);
    CHECK(std::abs(br_mc - br_so) < 1e-6);
    CHECK(std::abs(br_mc - br_ib) < 1e-6);
  }
}

TEST_CASE("aux optimization improves the bound and respects the step budget") {
  Rng rng(32);
  const int k = 2;
  const FactorBank bank = make_factor_bank(random_etas(rng, k, 3));
  const GaussianMoment q = random_moment(rng, k);

  SUBCASE("zero steps returns the initial aux untouched, even an invalid one") {
    const AuxFactor bad{rng.normal_vec(k),
                        MatrixXd(bank.eta[0].J - 0.05 * MatrixXd::Identity(k, k))};
    const AuxFactor out = optimize_aux(bank, q, 0, bad, 0);
    CHECK((out.h - bad.h).norm() == 0.0);
    CHECK((out.J - bad.J).norm() == 0.0);
  }

  SUBCASE("optimized bound dominates the validated initial bound") {
    const AuxFactor init{VectorXd::Zero(k), MatrixXd::Zero(k, k)};
    const double before = interior_bound_terms(bank, q, validate_aux(bank, init), 1).value;
    const AuxFactor tuned = optimize_aux(bank, q, 1, init, 80, 5e-2);
    const double after = interior_bound_terms(bank, q, tuned, 1).value;
    CHECK(after >= before - 1e-12);
  }

  SUBCASE("conjugate single factor: optimizer closes the gap to zero") {
    const GaussianNat eta = expfam::moment_to_nat(q);
    const FactorBank one = make_factor_bank({eta});
    const AuxFactor init{0.3 * rng.normal_vec(k),
                         MatrixXd(-0.1 * MatrixXd::Identity(k, k))};
    REQUIRE(aux_is_valid(one, init));
    const AuxFactor tuned = optimize_aux(one, q, 0, init, 400, 5e-2);
    const double v = interior_bound_terms(one, q, tuned, 0).value;
    CHECK(v <= 1e-10);
    CHECK(v >= -1e-4);
  }
}
