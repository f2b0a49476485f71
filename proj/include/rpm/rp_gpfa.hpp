#pragma once

#include <vector>

#include "rpm/datagen.hpp"
#include "rpm/estep_continuous.hpp"
#include "rpm/fit.hpp"
#include "rpm/nets.hpp"

namespace rpm {

using datagen::SequenceDataset;

// Squared-exponential kernel; both parameters live on the log scale so the
// optimizer never has to respect a positivity constraint.
struct RbfKernel {
  double log_variance = 0.0;
  double log_lengthscale = 0.0;

  double variance() const { return std::exp(log_variance); }
  double lengthscale() const { return std::exp(log_lengthscale); }
};

// sigma^2 exp(-(t - t')^2 / (2 l^2)). When the two location vectors are
// value-identical the result is a self-covariance and gets +1e-6 sigma^2 on
// the diagonal, so prior variances and cross-covariances against the same
// grid stay mutually consistent.
MatrixXd kernel_gram(const RbfKernel& kernel, const VectorXd& ta, const VectorXd& tb);

// prior variance at a single location, jitter included
double kernel_prior_var(const RbfKernel& kernel);

// Variational factor over one latent dimension's inducing values for one
// item: mean plus a raw Cholesky factor whose diagonal passes through
// softplus, so any raw matrix yields an SPD covariance.
struct InducingSite {
  VectorXd mu;
  MatrixXd l_raw;  // lower triangle used; entries above the diagonal ignored
};

MatrixXd inducing_chol(const InducingSite& site);
MatrixXd inducing_cov(const InducingSite& site);

// site whose covariance reproduces the given SPD matrix
InducingSite make_site(const VectorXd& mu, const MatrixXd& sigma);

struct InducingState {
  VectorXd tau;  // M shared, strictly increasing locations
  std::vector<std::vector<InducingSite>> site;  // [item][latent dim]

  int items() const { return static_cast<int>(site.size()); }
  int dims() const { return site.empty() ? 0 : static_cast<int>(site[0].size()); }
  Eigen::Index points() const { return tau.size(); }
};

// tau spans [min(times), max(times)] uniformly; every site starts at the
// prior (mu = 0, Sigma = prior gram), so the initial KL terms vanish.
InducingState make_inducing_state(const std::vector<RbfKernel>& kernels, const VectorXd& times,
                                  int n_items, int m_points);

// Per-time posterior marginals of one latent dimension, propagated from the
// inducing values by the conditional prior.
struct MarginalSlice {
  VectorXd mean;
  VectorXd var;  // floored at 1e-10
};

MarginalSlice latent_marginals(const RbfKernel& kernel, const InducingSite& site,
                               const VectorXd& tau, const VectorXd& times);

// KL(N(mu, Sigma) || N(0, prior gram)) for one site.
double kl_inducing(const RbfKernel& kernel, const InducingSite& site, const VectorXd& tau);

struct GpfaModel {
  int n_latents = 0;
  std::vector<RbfKernel> kernels;  // one per latent dimension
  std::vector<nets::Net> nets;     // one per observed factor, Gaussian heads
  EstepMethod method = EstepMethod::SecondOrder;
};

GpfaModel make_gpfa_model(int n_latents, int n_factors, int input_dim,
                          const std::vector<int>& hidden, EstepMethod method, Rng& rng);

// Method-specific evaluation state: shared standardized draws for the
// Monte-Carlo estimator, one auxiliary factor per (item, factor, time) for
// the interior bound. Second order needs neither.
struct GpfaEstepState {
  MatrixXd eps;
  std::vector<AuxFactor> aux;

  static std::size_t aux_index(int n, int j, int t, int n_factors, int n_steps) {
    return (static_cast<std::size_t>(n) * n_factors + j) * n_steps + t;
  }
};

GpfaEstepState make_estep_state(const GpfaModel& model, int n_items, int n_steps,
                                int mc_samples, Rng& rng);

// Full variational objective: per-(n,j,t) recognition brackets under the
// model's estimator, the empirical-measure constant N J T log(1/N), minus
// the inducing KL terms. Throws on non-finite intermediates, naming the
// (item, factor, time) that produced them.
double free_energy_gpfa(const GpfaModel& model, const SequenceDataset& data,
                        const InducingState& inducing, const GpfaEstepState& state);

// Ascent gradients for every parameter group, shapes mirroring the model
// and state. Upper-triangular l_raw entries always get zero.
struct GpfaGrads {
  VectorXd g_log_variance;
  VectorXd g_log_lengthscale;
  std::vector<std::vector<VectorXd>> g_mu;     // [item][latent dim]
  std::vector<std::vector<MatrixXd>> g_l_raw;  // [item][latent dim]
  std::vector<nets::Grads> g_net;              // [factor]
  std::vector<VectorXd> g_aux_h;               // interior bound only
  std::vector<MatrixXd> g_aux_j;
};

// Same objective; also projects interior-bound aux factors onto the valid
// region in place and, when grads is non-null, fills every gradient block.
double free_energy_with_grad(const GpfaModel& model, const SequenceDataset& data,
                             const InducingState& inducing, GpfaEstepState& state,
                             GpfaGrads* grads);

// marginals for every item, as T x K mean/variance matrices
struct LatentMarginals {
  MatrixXd mean;
  MatrixXd var;
};

std::vector<LatentMarginals> posterior_marginals(const GpfaModel& model,
                                                 const InducingState& inducing,
                                                 const VectorXd& times);

// Joint Adam ascent over kernel parameters, inducing sites, recognition
// nets and (for the interior bound) auxiliary factors. opts.iters steps,
// opts.mc_samples draws, opts.seed fixes the draw matrix for the whole fit.
FitReport fit_gpfa(GpfaModel& model, const SequenceDataset& data, int m_points,
                   const FitOptions& opts, InducingState* inducing_out = nullptr,
                   std::vector<LatentMarginals>* marginals_out = nullptr);

}  // namespace rpm
