#include "rpm/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "rpm/datagen.hpp"
#include "rpm/eval.hpp"
#include "rpm/expfam.hpp"
#include "rpm/nets.hpp"
#include "rpm/rp_gpfa.hpp"

namespace rpm::selftest {

namespace {

using expfam::GaussianMoment;
using expfam::GaussianNat;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

GaussianMoment random_gaussian(Rng& rng, int k) {
  GaussianMoment q;
  q.m = rng.normal_vec(k);
  const MatrixXd a = rng.normal_mat(k, k);
  q.S = symmetrized(0.3 * a * a.transpose()) + 0.5 * MatrixXd::Identity(k, k);
  return q;
}

CheckResult expfam_properties() {
  CheckResult r{"expfam round-trip, KL, entropy", true, ""};
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
    const GaussianMoment q = random_gaussian(rng, k);
    const GaussianMoment back = expfam::nat_to_moment(expfam::moment_to_nat(q));
    worst = std::max(worst, (back.m - q.m).cwiseAbs().maxCoeff());
    worst = std::max(worst, (back.S - q.S).cwiseAbs().maxCoeff());

    const GaussianMoment p = random_gaussian(rng, k);
    if (expfam::kl(q, p) < -1e-10) r.pass = false;
    worst = std::max(worst, std::abs(expfam::kl(q, q)));

    const double want_ent =
        0.5 * std::log((2.0 * M_PI * M_E * q.S).determinant());
    worst = std::max(worst, std::abs(expfam::entropy(q) - want_ent));

    expfam::CategoricalNat c{rng.normal_vec(4)};
    const expfam::CategoricalNat cback = expfam::moment_to_nat(expfam::nat_to_moment(c));
    // logits round-trip up to an additive constant
    const VectorXd diff = (cback.logits - c.logits).array() - (cback.logits[0] - c.logits[0]);
    worst = std::max(worst, diff.cwiseAbs().maxCoeff());
    worst = std::max(worst, std::abs(expfam::kl(c, c)));

    expfam::DirichletParams d{(rng.normal_vec(3).array().abs() + 0.5).matrix()};
    worst = std::max(worst, std::abs(expfam::kl(d, d)));
  }
  if (worst > 1e-9) r.pass = false;
  r.detail = "max deviation " + fmt(worst);
  return r;
}

CheckResult hungarian_vs_brute_force() {
  CheckResult r{"assignment matching vs exhaustive search", true, ""};
  Rng rng(103);
  for (int trial = 0; trial < 10; ++trial) {
    MatrixXd cost = rng.normal_mat(6, 6).cwiseAbs();
    const eval::Assignment got = eval::hungarian(cost);

    std::vector<int> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (int i = 0; i < 6; ++i) c += cost(i, perm[static_cast<std::size_t>(i)]);
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));

    if (std::abs(got.cost - best) > 1e-10) {
      r.pass = false;
      r.detail = "cost " + fmt(got.cost) + " vs brute force " + fmt(best);
      return r;
    }
  }
  r.detail = "10 random 6x6 instances";
  return r;
}

CheckResult nmse_affine_invariance() {
  CheckResult r{"nMSE affine invariance", true, ""};
  Rng rng(107);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const MatrixXd truth = rng.normal_mat(200, 1);
    const MatrixXd scaled = (3.0 * truth.array() - 7.0).matrix();
    worst = std::max(worst, eval::nmse_regression(scaled, truth));
  }
  if (worst > 1e-10) r.pass = false;
  r.detail = "max nMSE " + fmt(worst) + " for exact affine images";
  return r;
}

CheckResult generator_determinism() {
  CheckResult r{"generator determinism", true, ""};
  datagen::TexturedBallConfig ball;
  ball.items = 4;
  ball.steps = 10;
  ball.pixels = 8;
  const auto a = datagen::gen_textured_ball(ball, 11);
  const auto b = datagen::gen_textured_ball(ball, 11);
  const auto c = datagen::gen_textured_ball(ball, 12);
  bool same = (a.z_true.array() == b.z_true.array()).all();
  for (int n = 0; n < ball.items && same; ++n)
    same = (a.obs[static_cast<std::size_t>(n)][0].array() ==
            b.obs[static_cast<std::size_t>(n)][0].array()).all();
  if (!same) {
    r.pass = false;
    r.detail = "same seed produced different textured-ball data";
    return r;
  }
  if ((a.z_true.array() == c.z_true.array()).all()) {
    r.pass = false;
    r.detail = "different seeds produced identical latents";
    return r;
  }
  const auto d1 = datagen::gen_synthetic_digits(3, 4, 16, 0.3, 21);
  const auto d2 = datagen::gen_synthetic_digits(3, 4, 16, 0.3, 21);
  if (!(d1.images.array() == d2.images.array()).all() || d1.labels != d2.labels) {
    r.pass = false;
    r.detail = "same seed produced different synthetic digits";
    return r;
  }
  r.detail = "bitwise stable across repeats, seeds separate";
  return r;
}

CheckResult net_gradients() {
  CheckResult r{"net gradients vs finite differences", true, ""};
  Rng rng(109);
  double worst = 0.0;
  {
    nets::Net net = nets::make_mlp(5, {6, 4}, nets::HeadKind::CategoricalLogits, 3, rng);
    worst = std::max(worst, nets::grad_check(net, rng.normal_vec(5), rng));
  }
  {
    nets::Net net = nets::make_mlp(4, {5}, nets::HeadKind::GaussianNatural, 2, rng);
    worst = std::max(worst, nets::grad_check(net, rng.normal_vec(4), rng));
  }
  if (worst > 1e-4) r.pass = false;
  r.detail = "max relative error " + fmt(worst) + " (tolerance 1e-4)";
  return r;
}

CheckResult gpfa_gradients() {
  CheckResult r{"GP factor model gradients vs finite differences", true, ""};
  const int n = 2, t_count = 4, p = 2, m_pts = 3;

  Rng drng(111);
  SequenceDataset data;
  data.times.resize(t_count);
  for (int t = 0; t < t_count; ++t) data.times[t] = t;
  data.z_true.resize(n, t_count);
  data.obs.resize(n);
  for (int item = 0; item < n; ++item) {
    MatrixXd block(t_count, p);
    for (int t = 0; t < t_count; ++t) {
      const double z = std::sin(0.5 * t + item);
      data.z_true(item, t) = z;
      for (int d = 0; d < p; ++d) block(t, d) = (d ? -0.6 : 1.0) * z + 0.2 * drng.normal();
    }
    data.obs[static_cast<std::size_t>(item)] = {block};
  }

  Rng rng(113);
  GpfaModel model = make_gpfa_model(1, 1, p, {3}, EstepMethod::SecondOrder, rng);
  model.kernels[0].log_lengthscale = std::log(1.5);
  InducingState inducing = make_inducing_state(model.kernels, data.times, n, m_pts);
  for (auto& row : inducing.site) {
    const MatrixXd a = rng.normal_mat(m_pts, m_pts);
    row[0] = make_site(0.5 * rng.normal_vec(m_pts),
                       symmetrized(0.3 * a * a.transpose()) + 0.4 * MatrixXd::Identity(m_pts, m_pts));
  }
  GpfaEstepState state;

  GpfaGrads grads;
  free_energy_with_grad(model, data, inducing, state, &grads);

  double worst = 0.0;
  const double step = 1e-5;
  const auto fd = [&](double* slot, double got) {
    const double orig = *slot;
    *slot = orig + step;
    const double up = free_energy_gpfa(model, data, inducing, state);
    *slot = orig - step;
    const double dn = free_energy_gpfa(model, data, inducing, state);
    *slot = orig;
    const double want = (up - dn) / (2.0 * step);
    worst = std::max(worst, std::abs(got - want) / std::max(1e-4, std::abs(want)));
  };

  fd(&model.kernels[0].log_variance, grads.g_log_variance[0]);
  fd(&model.kernels[0].log_lengthscale, grads.g_log_lengthscale[0]);
  for (int item = 0; item < n; ++item) {
    auto& site = inducing.site[static_cast<std::size_t>(item)][0];
    for (Eigen::Index i = 0; i < m_pts; ++i)
      fd(&site.mu[i], grads.g_mu[static_cast<std::size_t>(item)][0][i]);
    fd(&site.l_raw(0, 0), grads.g_l_raw[static_cast<std::size_t>(item)][0](0, 0));
    fd(&site.l_raw(2, 1), grads.g_l_raw[static_cast<std::size_t>(item)][0](2, 1));
  }
  nets::Grads dummy = nets::zero_grads(model.nets[0]);
  auto blocks = nets::param_blocks(model.nets[0], dummy);
  auto gblocks = nets::param_blocks(model.nets[0], grads.g_net[0]);
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(blocks[b].size, 4); ++i)
      fd(&blocks[b].value[i], gblocks[b].grad[i]);

  if (worst > 1e-3) r.pass = false;
  r.detail = "max relative error " + fmt(worst) + " (tolerance 1e-3)";
  return r;
}

CheckResult guarded(const std::function<CheckResult()>& fn, const std::string& name) {
  try {
    return fn();
  } catch (const std::exception& e) {
    return {name, false, std::string("threw: ") + e.what()};
  }
}

}  // namespace

std::vector<CheckResult> run_all() {
  std::vector<CheckResult> out;
  out.push_back(guarded(expfam_properties, "expfam round-trip, KL, entropy"));
  out.push_back(guarded(hungarian_vs_brute_force, "assignment matching vs exhaustive search"));
  out.push_back(guarded(nmse_affine_invariance, "nMSE affine invariance"));
  out.push_back(guarded(generator_determinism, "generator determinism"));
  out.push_back(guarded(net_gradients, "net gradients vs finite differences"));
  out.push_back(guarded(gpfa_gradients, "GP factor model gradients vs finite differences"));
  return out;
}

bool all_pass(const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    if (!r.pass) return false;
  return true;
}

}  // namespace rpm::selftest
