#include "rpm/rp_gpfa.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <string>

#include "rpm/eval.hpp"

namespace rpm {

using expfam::GaussianMoment;
using expfam::GaussianNat;

namespace {

constexpr double kVarFloor = 1e-10;

int net_input_dim(const nets::Net& net) {
  if (net.layers.empty()) return 0;
  if (const auto* dense = std::get_if<nets::DenseLayer>(&net.layers.front()))
    return static_cast<int>(dense->W.cols());
  const auto& conv = std::get<nets::ConvLayer>(net.layers.front());
  return conv.in_c * conv.in_h * conv.in_w;
}

MatrixXd squared_dist(const VectorXd& ta, const VectorXd& tb) {
  MatrixXd d2(ta.size(), tb.size());
  for (Eigen::Index i = 0; i < ta.size(); ++i)
    for (Eigen::Index j = 0; j < tb.size(); ++j) {
      const double d = ta[i] - tb[j];
      d2(i, j) = d * d;
    }
  return d2;
}

bool same_locations(const VectorXd& ta, const VectorXd& tb) {
  return ta.size() == tb.size() && (ta.array() == tb.array()).all();
}

void check_gpfa(const GpfaModel& model, const SequenceDataset& data,
                const InducingState& inducing, const GpfaEstepState& state) {
  const int k = model.n_latents;
  const int j_count = data.n_views();
  const int n = data.items();
  const int t_count = data.steps();
  if (k < 1) throw std::invalid_argument("gpfa: need at least one latent dimension");
  if (static_cast<int>(model.kernels.size()) != k)
    throw std::invalid_argument("gpfa: one kernel per latent dimension required");
  if (n < 1 || j_count < 1 || t_count < 1) throw std::invalid_argument("gpfa: empty dataset");
  if (static_cast<int>(model.nets.size()) != j_count)
    throw std::invalid_argument("gpfa: one recognition net per observed factor required");
  for (int j = 0; j < j_count; ++j) {
    const auto& net = model.nets[static_cast<std::size_t>(j)];
    if (net.head != nets::HeadKind::GaussianNatural || net.head_dim != k)
      throw std::invalid_argument("gpfa: recognition nets must emit K-dim Gaussian parameters");
  }
  for (int item = 0; item < n; ++item) {
    if (static_cast<int>(data.obs[static_cast<std::size_t>(item)].size()) != j_count)
      throw std::invalid_argument("gpfa: ragged factor count across items");
    for (int j = 0; j < j_count; ++j) {
      const MatrixXd& block = data.obs[static_cast<std::size_t>(item)][static_cast<std::size_t>(j)];
      if (block.rows() != t_count)
        throw std::invalid_argument("gpfa: observation block with wrong number of time steps");
      if (static_cast<int>(block.cols()) != net_input_dim(model.nets[static_cast<std::size_t>(j)]))
        throw std::invalid_argument("gpfa: observation dimension does not match its net");
    }
  }
  if (inducing.items() != n || inducing.dims() != k)
    throw std::invalid_argument("gpfa: inducing state shape mismatch");
  if (inducing.points() < 1 || inducing.points() > t_count)
    throw std::invalid_argument("gpfa: need 1 <= M <= T inducing points");
  if (model.method == EstepMethod::Mc &&
      (state.eps.rows() != k || state.eps.cols() < 1))
    throw std::invalid_argument("gpfa: Monte-Carlo method needs a K x S draw matrix");
  if (model.method == EstepMethod::InteriorBound &&
      state.aux.size() != static_cast<std::size_t>(n) * j_count * t_count)
    throw std::invalid_argument("gpfa: interior bound needs one aux factor per (item, factor, time)");
}

// everything reusable about one latent dimension's kernel on the grids
struct KernelCache {
  MatrixXd a;  // M x M, jittered
  Eigen::LLT<MatrixXd> llt;
  double log_det_a = 0.0;
  MatrixXd b;  // M x T
  MatrixXd w;  // M x T, A^{-1} B
  double kappa = 0.0;
  // gradient-only pieces
  MatrixXd a_inv;
  MatrixXd d2a, d2b;
  MatrixXd rbf_a, rbf_b;  // jitter-free kernel values
};

KernelCache make_kernel_cache(const RbfKernel& kernel, const VectorXd& tau,
                              const VectorXd& times, bool for_grads) {
  KernelCache kc;
  kc.a = kernel_gram(kernel, tau, tau);
  kc.llt = chol_spd(kc.a);
  kc.log_det_a = log_det_from_llt(kc.llt);
  kc.b = kernel_gram(kernel, tau, times);
  kc.w = kc.llt.solve(kc.b);
  kc.kappa = kernel_prior_var(kernel);
  if (for_grads) {
    const Eigen::Index m = tau.size();
    kc.a_inv = kc.llt.solve(MatrixXd::Identity(m, m));
    kc.d2a = squared_dist(tau, tau);
    kc.d2b = squared_dist(tau, times);
    const double var = kernel.variance();
    const double len2 = kernel.lengthscale() * kernel.lengthscale();
    kc.rbf_a = var * (-kc.d2a / (2.0 * len2)).array().exp();
    kc.rbf_b = var * (-kc.d2b / (2.0 * len2)).array().exp();
  }
  return kc;
}

// per (item, latent dim) propagation results plus gradient intermediates
struct SiteCache {
  MatrixXd l, sigma;
  VectorXd alpha;        // A^{-1} mu
  MatrixXd a_inv_sigma;  // A^{-1} Sigma
  MatrixXd vt;           // M x T, columns A^{-1} Sigma w_t
  VectorXd mean, var;    // per time, var floored
  VectorXd active;       // 1 where the floor did not bind
  double kl = 0.0;
};

SiteCache make_site_cache(const KernelCache& kc, const InducingSite& site, bool for_grads) {
  SiteCache sc;
  sc.l = inducing_chol(site);
  sc.sigma = sc.l * sc.l.transpose();
  sc.alpha = kc.llt.solve(site.mu);
  sc.a_inv_sigma = kc.llt.solve(sc.sigma);

  const MatrixXd sw = sc.sigma * kc.w;
  sc.mean = (kc.w.transpose() * site.mu).eval();
  const VectorXd quad = (kc.w.array() * sw.array()).colwise().sum().transpose();
  const VectorXd cross = (kc.b.array() * kc.w.array()).colwise().sum().transpose();
  const VectorXd raw_var = quad - cross + VectorXd::Constant(quad.size(), kc.kappa);
  sc.var = raw_var.cwiseMax(kVarFloor);
  sc.active = (raw_var.array() > kVarFloor).cast<double>();

  const double log_det_sigma = 2.0 * sc.l.diagonal().array().log().sum();
  sc.kl = 0.5 * (sc.a_inv_sigma.trace() + site.mu.dot(sc.alpha) -
                 static_cast<double>(site.mu.size()) + kc.log_det_a - log_det_sigma);
  if (for_grads) sc.vt = sc.a_inv_sigma * kc.w;
  return sc;
}

GpfaGrads alloc_grads(const GpfaModel& model, const SequenceDataset& data,
                      const InducingState& inducing) {
  const int k = model.n_latents;
  const int n = data.items();
  const Eigen::Index m = inducing.points();
  GpfaGrads g;
  g.g_log_variance = VectorXd::Zero(k);
  g.g_log_lengthscale = VectorXd::Zero(k);
  g.g_mu.assign(static_cast<std::size_t>(n),
                std::vector<VectorXd>(static_cast<std::size_t>(k), VectorXd::Zero(m)));
  g.g_l_raw.assign(static_cast<std::size_t>(n),
                   std::vector<MatrixXd>(static_cast<std::size_t>(k), MatrixXd::Zero(m, m)));
  for (const auto& net : model.nets) g.g_net.push_back(nets::zero_grads(net));
  if (model.method == EstepMethod::InteriorBound) {
    const std::size_t total =
        static_cast<std::size_t>(n) * data.n_views() * data.steps();
    g.g_aux_h.assign(total, VectorXd::Zero(k));
    g.g_aux_j.assign(total, MatrixXd::Zero(k, k));
  }
  return g;
}

}  // namespace

MatrixXd kernel_gram(const RbfKernel& kernel, const VectorXd& ta, const VectorXd& tb) {
  if (ta.size() < 1 || tb.size() < 1) throw std::invalid_argument("kernel_gram: empty locations");
  const double var = kernel.variance();
  const double len2 = kernel.lengthscale() * kernel.lengthscale();
  MatrixXd out(ta.size(), tb.size());
  for (Eigen::Index i = 0; i < ta.size(); ++i)
    for (Eigen::Index j = 0; j < tb.size(); ++j) {
      const double d = ta[i] - tb[j];
      out(i, j) = var * std::exp(-d * d / (2.0 * len2));
    }
  if (same_locations(ta, tb)) out.diagonal().array() += 1e-6 * var;
  return out;
}

double kernel_prior_var(const RbfKernel& kernel) { return kernel.variance() * (1.0 + 1e-6); }

MatrixXd inducing_chol(const InducingSite& site) {
  const Eigen::Index m = site.l_raw.rows();
  MatrixXd l = MatrixXd::Zero(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    l(i, i) = softplus(site.l_raw(i, i));
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = site.l_raw(i, j);
  }
  return l;
}

MatrixXd inducing_cov(const InducingSite& site) {
  const MatrixXd l = inducing_chol(site);
  return l * l.transpose();
}

InducingSite make_site(const VectorXd& mu, const MatrixXd& sigma) {
  if (sigma.rows() != mu.size() || sigma.cols() != mu.size())
    throw std::invalid_argument("make_site: shape mismatch");
  const MatrixXd l = chol_spd(sigma).matrixL();
  InducingSite site;
  site.mu = mu;
  site.l_raw = MatrixXd::Zero(mu.size(), mu.size());
  for (Eigen::Index i = 0; i < mu.size(); ++i) {
    site.l_raw(i, i) = inv_softplus(l(i, i));
    for (Eigen::Index j = 0; j < i; ++j) site.l_raw(i, j) = l(i, j);
  }
  return site;
}

InducingState make_inducing_state(const std::vector<RbfKernel>& kernels, const VectorXd& times,
                                  int n_items, int m_points) {
  if (times.size() < 1) throw std::invalid_argument("inducing state: empty time grid");
  if (m_points < 1 || m_points > times.size())
    throw std::invalid_argument("inducing state: need 1 <= M <= T");
  if (n_items < 1 || kernels.empty())
    throw std::invalid_argument("inducing state: need items and kernels");

  const double lo = times.minCoeff(), hi = times.maxCoeff();
  InducingState out;
  out.tau.resize(m_points);
  if (m_points == 1) {
    out.tau[0] = 0.5 * (lo + hi);
  } else {
    if (!(hi > lo)) throw std::invalid_argument("inducing state: degenerate time span");
    for (int i = 0; i < m_points; ++i)
      out.tau[i] = lo + (hi - lo) * static_cast<double>(i) / (m_points - 1);
  }

  out.site.resize(static_cast<std::size_t>(n_items));
  std::vector<InducingSite> prototype;
  for (const auto& kernel : kernels)
    prototype.push_back(make_site(VectorXd::Zero(m_points), kernel_gram(kernel, out.tau, out.tau)));
  for (auto& row : out.site) row = prototype;
  return out;
}

MarginalSlice latent_marginals(const RbfKernel& kernel, const InducingSite& site,
                               const VectorXd& tau, const VectorXd& times) {
  const KernelCache kc = make_kernel_cache(kernel, tau, times, false);
  const SiteCache sc = make_site_cache(kc, site, false);
  return MarginalSlice{sc.mean, sc.var};
}

double kl_inducing(const RbfKernel& kernel, const InducingSite& site, const VectorXd& tau) {
  const KernelCache kc = make_kernel_cache(kernel, tau, tau, false);
  const SiteCache sc = make_site_cache(kc, site, false);
  return sc.kl;
}

GpfaModel make_gpfa_model(int n_latents, int n_factors, int input_dim,
                          const std::vector<int>& hidden, EstepMethod method, Rng& rng) {
  if (n_latents < 1 || n_factors < 1) throw std::invalid_argument("gpfa model: bad shape");
  GpfaModel model;
  model.n_latents = n_latents;
  model.method = method;
  model.kernels.assign(static_cast<std::size_t>(n_latents), RbfKernel{});
  for (int j = 0; j < n_factors; ++j)
    model.nets.push_back(
        nets::make_mlp(input_dim, hidden, nets::HeadKind::GaussianNatural, n_latents, rng));
  return model;
}

GpfaEstepState make_estep_state(const GpfaModel& model, int n_items, int n_steps,
                                int mc_samples, Rng& rng) {
  GpfaEstepState state;
  if (model.method == EstepMethod::Mc) {
    if (mc_samples < 1) throw std::invalid_argument("estep state: need at least one draw");
    state.eps = rng.normal_mat(model.n_latents, mc_samples);
    standardize_eps(state.eps);
  } else if (model.method == EstepMethod::InteriorBound) {
    const std::size_t total = static_cast<std::size_t>(n_items) *
                              static_cast<std::size_t>(model.nets.size()) *
                              static_cast<std::size_t>(n_steps);
    state.aux.assign(total, AuxFactor{VectorXd::Zero(model.n_latents),
                                      MatrixXd::Zero(model.n_latents, model.n_latents)});
  }
  return state;
}

double free_energy_with_grad(const GpfaModel& model, const SequenceDataset& data,
                             const InducingState& inducing, GpfaEstepState& state,
                             GpfaGrads* grads) {
  check_gpfa(model, data, inducing, state);
  const int k = model.n_latents;
  const int j_count = data.n_views();
  const int n = data.items();
  const int t_count = data.steps();
  const Eigen::Index m_pts = inducing.points();
  if (grads) {
    // keep existing buffers when shapes already match: optimizer blocks hold
    // pointers into them
    const bool shaped = grads->g_log_variance.size() == k &&
                        grads->g_log_lengthscale.size() == k &&
                        grads->g_mu.size() == static_cast<std::size_t>(n) &&
                        grads->g_l_raw.size() == static_cast<std::size_t>(n) &&
                        grads->g_net.size() == model.nets.size() &&
                        grads->g_aux_h.size() == state.aux.size() &&
                        grads->g_aux_j.size() == state.aux.size();
    if (!shaped)
      *grads = alloc_grads(model, data, inducing);
    else
      for (auto& g : grads->g_net) g.setZero();
  }

  std::vector<KernelCache> kernel_cache;
  for (int kk = 0; kk < k; ++kk)
    kernel_cache.push_back(
        make_kernel_cache(model.kernels[static_cast<std::size_t>(kk)], inducing.tau, data.times,
                          grads != nullptr));

  std::vector<std::vector<SiteCache>> site_cache(static_cast<std::size_t>(n));
  double kl_total = 0.0;
  for (int item = 0; item < n; ++item) {
    auto& row = site_cache[static_cast<std::size_t>(item)];
    for (int kk = 0; kk < k; ++kk) {
      row.push_back(make_site_cache(kernel_cache[static_cast<std::size_t>(kk)],
                                    inducing.site[static_cast<std::size_t>(item)]
                                                 [static_cast<std::size_t>(kk)],
                                    grads != nullptr));
      kl_total += row.back().kl;
    }
  }

  // recognition forwards for every (factor, time, item)
  std::vector<std::vector<GaussianNat>> nat(static_cast<std::size_t>(j_count));
  std::vector<std::vector<VectorXd>> raw(static_cast<std::size_t>(j_count));
  std::vector<std::vector<nets::Workspace>> ws(static_cast<std::size_t>(j_count));
  std::vector<std::vector<FactorBank>> banks(static_cast<std::size_t>(j_count));
  for (int j = 0; j < j_count; ++j) {
    const std::size_t jj = static_cast<std::size_t>(j);
    nat[jj].resize(static_cast<std::size_t>(t_count) * n);
    raw[jj].resize(static_cast<std::size_t>(t_count) * n);
    if (grads) ws[jj].resize(static_cast<std::size_t>(t_count) * n);
    const auto& net = model.nets[jj];
    parallel_for(static_cast<Eigen::Index>(t_count) * n, [&](Eigen::Index idx) {
      const int t = static_cast<int>(idx / n);
      const int item = static_cast<int>(idx % n);
      const VectorXd x =
          data.obs[static_cast<std::size_t>(item)][jj].row(t).transpose();
      nets::Workspace* wsp = grads ? &ws[jj][static_cast<std::size_t>(idx)] : nullptr;
      nat[jj][static_cast<std::size_t>(idx)] = nets::forward_gaussian(net, x, wsp);
      if (wsp) raw[jj][static_cast<std::size_t>(idx)] = wsp->post.back();
    });
    banks[jj].reserve(static_cast<std::size_t>(t_count));
    for (int t = 0; t < t_count; ++t) {
      std::vector<GaussianNat> slice(nat[jj].begin() + static_cast<std::ptrdiff_t>(t) * n,
                                     nat[jj].begin() + static_cast<std::ptrdiff_t>(t + 1) * n);
      banks[jj].push_back(make_factor_bank(slice));
    }
  }

  // per-(n,j,t) brackets; every slot written by exactly one worker
  std::vector<MatrixXd> gm_all, gs_all;  // [item]: T x K
  std::vector<std::vector<VectorXd>> gh_acc(static_cast<std::size_t>(j_count));
  std::vector<std::vector<MatrixXd>> gj_acc(static_cast<std::size_t>(j_count));
  if (grads) {
    gm_all.assign(static_cast<std::size_t>(n), MatrixXd::Zero(t_count, k));
    gs_all.assign(static_cast<std::size_t>(n), MatrixXd::Zero(t_count, k));
    for (int j = 0; j < j_count; ++j) {
      gh_acc[static_cast<std::size_t>(j)].assign(static_cast<std::size_t>(t_count) * n,
                                                 VectorXd::Zero(k));
      gj_acc[static_cast<std::size_t>(j)].assign(static_cast<std::size_t>(t_count) * n,
                                                 MatrixXd::Zero(k, k));
    }
  }

  double bracket_total = 0.0;
  std::vector<double> terms(static_cast<std::size_t>(t_count) * n);
  for (int j = 0; j < j_count; ++j) {
    const std::size_t jj = static_cast<std::size_t>(j);
    parallel_for(t_count, [&](Eigen::Index t_idx) {
      const int t = static_cast<int>(t_idx);
      const FactorBank& bank = banks[jj][static_cast<std::size_t>(t)];
      for (int item = 0; item < n; ++item) {
        const std::size_t ii = static_cast<std::size_t>(item);
        GaussianMoment q;
        q.m.resize(k);
        VectorXd var(k);
        for (int kk = 0; kk < k; ++kk) {
          q.m[kk] = site_cache[ii][static_cast<std::size_t>(kk)].mean[t];
          var[kk] = site_cache[ii][static_cast<std::size_t>(kk)].var[t];
        }
        q.S = MatrixXd(var.asDiagonal());

        const std::size_t slot = static_cast<std::size_t>(t) * n + ii;
        const GaussianNat& eta_self = bank.eta[ii];
        MixtureGrad g;
        double term = 0.0;
        VectorXd d_m;
        VectorXd d_sdiag;

        if (model.method == EstepMethod::InteriorBound) {
          const std::size_t aux_idx = GpfaEstepState::aux_index(item, j, t, j_count, t_count);
          const AuxFactor auxv = validate_aux(bank, state.aux[aux_idx]);
          state.aux[aux_idx] = auxv;
          if (grads) {
            VectorXd dth;
            MatrixXd dtj;
            term = interior_with_grad(bank, q, auxv, item, &g, &dth, &dtj).value;
            d_m = g.d_m;
            d_sdiag = g.d_S.diagonal();
            grads->g_aux_h[aux_idx] = dth;
            grads->g_aux_j[aux_idx] = dtj;
          } else {
            term = interior_bound_terms(bank, q, auxv, item).value;
          }
        } else {
          MixtureGrad* gp = grads ? &g : nullptr;
          const double mix_value =
              model.method == EstepMethod::Mc
                  ? mc_log_mixture(bank, q, state.eps, gp).value
                  : (grads ? second_order_with_grad(bank, q, gp).value
                           : second_order_log_mixture(bank, expfam::suffstat_moments(q)).value);
          const double exact_self = expfam::stack_nat(eta_self).dot(expfam::stacked_mean(q)) -
                                    bank.log_norm[item];
          term = exact_self - mix_value;
          if (grads) {
            d_m = (eta_self.h + 2.0 * eta_self.J * q.m) - g.d_m;
            d_sdiag = eta_self.J.diagonal() - g.d_S.diagonal();
            // flip the mixture-component gradients; the n-th component also
            // carries the closed-form <log f> term
            const GaussianMoment self_mom = expfam::nat_to_moment(eta_self);
            for (int comp = 0; comp < n; ++comp) {
              g.d_h[static_cast<std::size_t>(comp)] *= -1.0;
              g.d_J[static_cast<std::size_t>(comp)] *= -1.0;
            }
            g.d_h[ii] += q.m - self_mom.m;
            g.d_J[ii] += (q.S + q.m * q.m.transpose()) -
                         (self_mom.S + self_mom.m * self_mom.m.transpose());
          }
        }

        terms[slot] = term;
        if (grads) {
          for (int kk = 0; kk < k; ++kk) {
            gm_all[ii](t, kk) += d_m[kk];
            gs_all[ii](t, kk) += d_sdiag[kk];
          }
          for (int comp = 0; comp < n; ++comp) {
            const std::size_t cslot = static_cast<std::size_t>(t) * n + comp;
            gh_acc[jj][cslot] += g.d_h[static_cast<std::size_t>(comp)];
            gj_acc[jj][cslot] += g.d_J[static_cast<std::size_t>(comp)];
          }
        }
      }
    });

    for (int t = 0; t < t_count; ++t)
      for (int item = 0; item < n; ++item) {
        const double term = terms[static_cast<std::size_t>(t) * n + item];
        if (!std::isfinite(term))
          throw std::runtime_error("free energy non-finite at item " + std::to_string(item) +
                                   ", factor " + std::to_string(j) + ", time " +
                                   std::to_string(t));
        bracket_total += term;
      }
  }

  const double value = bracket_total -
                       static_cast<double>(n) * j_count * t_count *
                           std::log(static_cast<double>(n)) -
                       kl_total;
  if (!std::isfinite(value))
    throw std::runtime_error("free energy non-finite in the prior terms");
  if (!grads) return value;

  // recognition nets: head adjoint then body backprop, fixed order
  for (int j = 0; j < j_count; ++j) {
    const std::size_t jj = static_cast<std::size_t>(j);
    const auto& net = model.nets[jj];
    for (std::size_t idx = 0; idx < nat[jj].size(); ++idx) {
      const VectorXd grad_raw =
          nets::head_backward_gaussian(net, raw[jj][idx], gh_acc[jj][idx], gj_acc[jj][idx]);
      nets::backward_raw(net, ws[jj][idx], grad_raw, &grads->g_net[jj]);
    }
  }

  // chain marginal gradients into inducing sites, then kernels
  for (int kk = 0; kk < k; ++kk) {
    const std::size_t kks = static_cast<std::size_t>(kk);
    const KernelCache& kc = kernel_cache[kks];
    MatrixXd g_a = MatrixXd::Zero(m_pts, m_pts);
    MatrixXd g_b = MatrixXd::Zero(m_pts, t_count);
    double g_kappa = 0.0;

    for (int item = 0; item < n; ++item) {
      const std::size_t ii = static_cast<std::size_t>(item);
      const SiteCache& sc = site_cache[ii][kks];
      const VectorXd gm = gm_all[ii].col(kk);
      const VectorXd gs = (gs_all[ii].col(kk).array() * sc.active.array()).matrix();

      grads->g_mu[ii][kks] = kc.w * gm - sc.alpha;

      const MatrixXd l_inv =
          sc.l.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(m_pts, m_pts));
      const MatrixXd sigma_inv = l_inv.transpose() * l_inv;
      const MatrixXd g_sigma =
          kc.w * gs.asDiagonal() * kc.w.transpose() - 0.5 * (kc.a_inv - sigma_inv);
      MatrixXd g_l = (g_sigma + g_sigma.transpose()) * sc.l;
      for (Eigen::Index r = 0; r < m_pts; ++r) {
        g_l(r, r) *= sigmoid(inducing.site[ii][kks].l_raw(r, r));
        for (Eigen::Index c = r + 1; c < m_pts; ++c) g_l(r, c) = 0.0;
      }
      grads->g_l_raw[ii][kks] = g_l;

      const MatrixXd a_sigma_a = kc.llt.solve(sc.a_inv_sigma.transpose());
      g_a.noalias() -= (kc.w * gm) * sc.alpha.transpose();
      g_a.noalias() -= kc.w * gs.asDiagonal() * sc.vt.transpose();
      g_a.noalias() -= sc.vt * gs.asDiagonal() * kc.w.transpose();
      g_a.noalias() += kc.w * gs.asDiagonal() * kc.w.transpose();
      g_a -= 0.5 * (kc.a_inv - a_sigma_a - sc.alpha * sc.alpha.transpose());

      g_b.noalias() += sc.alpha * gm.transpose();
      g_b.noalias() += 2.0 * (sc.vt - kc.w) * gs.asDiagonal();

      g_kappa += gs.sum();
    }

    const double len2 = model.kernels[kks].lengthscale() * model.kernels[kks].lengthscale();
    grads->g_log_variance[kk] = (g_a.array() * kc.a.array()).sum() +
                                (g_b.array() * kc.b.array()).sum() + g_kappa * kc.kappa;
    grads->g_log_lengthscale[kk] =
        ((g_a.array() * kc.rbf_a.array() * kc.d2a.array()).sum() +
         (g_b.array() * kc.rbf_b.array() * kc.d2b.array()).sum()) /
        len2;
  }
  return value;
}

double free_energy_gpfa(const GpfaModel& model, const SequenceDataset& data,
                        const InducingState& inducing, const GpfaEstepState& state) {
  GpfaEstepState scratch = state;
  return free_energy_with_grad(model, data, inducing, scratch, nullptr);
}

std::vector<LatentMarginals> posterior_marginals(const GpfaModel& model,
                                                 const InducingState& inducing,
                                                 const VectorXd& times) {
  std::vector<LatentMarginals> out;
  for (int item = 0; item < inducing.items(); ++item) {
    LatentMarginals lm;
    lm.mean.resize(times.size(), model.n_latents);
    lm.var.resize(times.size(), model.n_latents);
    for (int kk = 0; kk < model.n_latents; ++kk) {
      const MarginalSlice slice = latent_marginals(
          model.kernels[static_cast<std::size_t>(kk)],
          inducing.site[static_cast<std::size_t>(item)][static_cast<std::size_t>(kk)],
          inducing.tau, times);
      lm.mean.col(kk) = slice.mean;
      lm.var.col(kk) = slice.var;
    }
    out.push_back(std::move(lm));
  }
  return out;
}

FitReport fit_gpfa(GpfaModel& model, const SequenceDataset& data, int m_points,
                   const FitOptions& opts, InducingState* inducing_out,
                   std::vector<LatentMarginals>* marginals_out) {
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  FitReport report;
  InducingState inducing = make_inducing_state(model.kernels, data.times, data.items(), m_points);
  Rng rng(opts.seed);
  GpfaEstepState state =
      make_estep_state(model, data.items(), data.steps(), opts.mc_samples, rng);
  GpfaGrads grads = alloc_grads(model, data, inducing);

  // one flat parameter vector view over every group
  std::vector<nets::ParamBlock> blocks;
  for (std::size_t kk = 0; kk < model.kernels.size(); ++kk) {
    blocks.push_back({&model.kernels[kk].log_variance, &grads.g_log_variance[kk], 1,
                      "kernel" + std::to_string(kk) + ".log_variance"});
    blocks.push_back({&model.kernels[kk].log_lengthscale, &grads.g_log_lengthscale[kk], 1,
                      "kernel" + std::to_string(kk) + ".log_lengthscale"});
  }
  for (std::size_t item = 0; item < inducing.site.size(); ++item)
    for (std::size_t kk = 0; kk < inducing.site[item].size(); ++kk) {
      auto& site = inducing.site[item][kk];
      const std::string tag = "site" + std::to_string(item) + "." + std::to_string(kk);
      blocks.push_back({site.mu.data(), grads.g_mu[item][kk].data(), site.mu.size(), tag + ".mu"});
      blocks.push_back(
          {site.l_raw.data(), grads.g_l_raw[item][kk].data(), site.l_raw.size(), tag + ".L"});
    }
  for (std::size_t j = 0; j < model.nets.size(); ++j) {
    auto nb = nets::param_blocks(model.nets[j], grads.g_net[j], "net" + std::to_string(j));
    blocks.insert(blocks.end(), nb.begin(), nb.end());
  }
  for (std::size_t a = 0; a < state.aux.size(); ++a) {
    blocks.push_back({state.aux[a].h.data(), grads.g_aux_h[a].data(), state.aux[a].h.size(),
                      "aux" + std::to_string(a) + ".h"});
    blocks.push_back({state.aux[a].J.data(), grads.g_aux_j[a].data(), state.aux[a].J.size(),
                      "aux" + std::to_string(a) + ".J"});
  }

  nets::AdamState adam;
  adam.lr = opts.lr;
  adam.init(blocks);

  GpfaModel last_model = model;
  InducingState last_inducing = inducing;
  GpfaEstepState last_state = state;

  for (int iter = 0; iter < opts.iters && !report.aborted; ++iter) {
    double value = 0.0;
    try {
      value = free_energy_with_grad(model, data, inducing, state, &grads);
    } catch (const std::exception& e) {
      model = last_model;
      inducing = last_inducing;
      state = last_state;
      report.aborted = true;
      report.abort_reason = e.what();
      break;
    }
    report.trace.push_back({iter, 'M', value, elapsed()});
    last_model = model;
    last_inducing = inducing;
    last_state = state;

    for (auto& blk : blocks)
      Eigen::Map<VectorXd>(blk.grad, blk.size) = -Eigen::Map<VectorXd>(blk.grad, blk.size);
    adam.step(blocks);
  }

  if (!report.aborted) {
    try {
      const double final_value = free_energy_with_grad(model, data, inducing, state, nullptr);
      report.trace.push_back({opts.iters, 'E', final_value, elapsed()});
      report.metrics["free_energy"] = final_value;
    } catch (const std::exception& e) {
      model = last_model;
      inducing = last_inducing;
      state = last_state;
      report.aborted = true;
      report.abort_reason = e.what();
    }
  }

  std::vector<LatentMarginals> marginals =
      posterior_marginals(model, inducing, data.times);
  if (data.z_true.size() > 0) {
    MatrixXd inferred(static_cast<Eigen::Index>(data.items()) * data.steps(), model.n_latents);
    MatrixXd truth(inferred.rows(), 1);
    for (int item = 0; item < data.items(); ++item)
      for (int t = 0; t < data.steps(); ++t) {
        inferred.row(static_cast<Eigen::Index>(item) * data.steps() + t) =
            marginals[static_cast<std::size_t>(item)].mean.row(t);
        truth(static_cast<Eigen::Index>(item) * data.steps() + t, 0) = data.z_true(item, t);
      }
    report.metrics["nmse"] = eval::nmse_regression(inferred, truth);
  }
  if (inducing_out) *inducing_out = std::move(inducing);
  if (marginals_out) *marginals_out = std::move(marginals);
  return report;
}

}  // namespace rpm
