#include "rpm/rp_lda.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "rpm/eval.hpp"
#include "rpm/expfam.hpp"

namespace rpm {

namespace {

void check_patches(const LdaModel& model, const std::vector<MatrixXd>& patch_sets) {
  if (patch_sets.empty()) throw std::invalid_argument("lda: empty corpus");
  const Eigen::Index dim = patch_sets[0].cols();
  for (const auto& p : patch_sets) {
    if (p.rows() < 1 || p.cols() != dim) throw std::invalid_argument("lda: ragged patch sets");
  }
  (void)model;
}

Eigen::Index total_patches(const std::vector<MatrixXd>& patch_sets) {
  Eigen::Index total = 0;
  for (const auto& p : patch_sets) total += p.rows();
  return total;
}

}  // namespace

LdaModel make_lda_model(int n_textures, double alpha, int patch_dim,
                        const std::vector<int>& hidden, Rng& rng) {
  if (n_textures < 2) throw std::invalid_argument("lda model: need at least two textures");
  if (!(alpha > 0.0)) throw std::invalid_argument("lda model: alpha must be positive");
  LdaModel model;
  model.n_textures = n_textures;
  model.alpha = alpha;
  model.net =
      nets::make_mlp(patch_dim, hidden, nets::HeadKind::CategoricalLogits, n_textures, rng);
  return model;
}

Eigen::MatrixXd patchify(const Eigen::MatrixXd& image, int patch_side) {
  if (patch_side <= 0) throw std::invalid_argument("patchify: patch side must be positive");
  const int rows = static_cast<int>(image.rows()) / patch_side;
  const int cols = static_cast<int>(image.cols()) / patch_side;
  if (rows < 1 || cols < 1) throw std::invalid_argument("patchify: image smaller than one patch");

  MatrixXd out(rows * cols, patch_side * patch_side);
  for (int gi = 0; gi < rows; ++gi)
    for (int gj = 0; gj < cols; ++gj)
      for (int pu = 0; pu < patch_side; ++pu)
        for (int pv = 0; pv < patch_side; ++pv)
          out(gi * cols + gj, pu * patch_side + pv) =
              image(gi * patch_side + pu, gj * patch_side + pv);
  return out;
}

LdaScores lda_scores(const LdaModel& model, const std::vector<MatrixXd>& patch_sets) {
  check_patches(model, patch_sets);
  const int k = model.n_textures;
  const Eigen::Index total = total_patches(patch_sets);

  LdaScores scores;
  scores.log_f.resize(patch_sets.size());
  for (std::size_t n = 0; n < patch_sets.size(); ++n)
    scores.log_f[n].resize(patch_sets[n].rows(), k);

  // Flat (image, patch) index so every patch forward runs in parallel.
  std::vector<std::pair<std::size_t, Eigen::Index>> flat;
  flat.reserve(static_cast<std::size_t>(total));
  for (std::size_t n = 0; n < patch_sets.size(); ++n)
    for (Eigen::Index j = 0; j < patch_sets[n].rows(); ++j) flat.emplace_back(n, j);

  parallel_for(flat.size(), [&](std::size_t i) {
    const auto [n, j] = flat[i];
    VectorXd logits =
        nets::forward_categorical(model.net, patch_sets[n].row(j).transpose()).logits;
    scores.log_f[n].row(j) = (logits.array() - log_sum_exp(logits)).matrix().transpose();
  });

  // One mixture pooled over the whole corpus, log F(k) = log mean_p f(k|x_p).
  scores.log_mix.resize(k);
  VectorXd col(total);
  for (int c = 0; c < k; ++c) {
    Eigen::Index at = 0;
    for (const auto& lf : scores.log_f) {
      col.segment(at, lf.rows()) = lf.col(c);
      at += lf.rows();
    }
    scores.log_mix[c] = log_sum_exp(col) - std::log(static_cast<double>(total));
    if (!(scores.log_mix[c] > -690.0)) throw std::runtime_error("degenerate mixture component");
  }
  return scores;
}

LdaVariational e_step_lda(const LdaModel& model, const std::vector<MatrixXd>& log_f,
                          const Eigen::VectorXd& log_mix, int max_sweeps, double tol) {
  const int k = model.n_textures;
  const double alpha0 = model.alpha;
  const std::size_t n_images = log_f.size();
  if (n_images == 0) throw std::invalid_argument("lda e-step: empty corpus");

  LdaVariational v;
  v.alpha.resize(n_images);
  v.gamma.resize(n_images);
  std::vector<double> residuals(n_images, 0.0);
  std::vector<char> ok(n_images, 0);

  parallel_for(n_images, [&](std::size_t n) {
    const Eigen::Index j_n = log_f[n].rows();
    const MatrixXd ratio = log_f[n].rowwise() - log_mix.transpose();

    MatrixXd gamma = MatrixXd::Constant(j_n, k, 1.0 / k);
    VectorXd a = VectorXd::Constant(
        k, alpha0 + static_cast<double>(j_n) / static_cast<double>(k));

    double delta = 0.0;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      VectorXd dig(k);
      for (int c = 0; c < k; ++c) dig[c] = digamma(a[c]);

      delta = 0.0;
      for (Eigen::Index j = 0; j < j_n; ++j) {
        VectorXd row = softmax(VectorXd(dig + ratio.row(j).transpose()));
        delta = std::max(delta, (row.transpose() - gamma.row(j)).cwiseAbs().maxCoeff());
        gamma.row(j) = row.transpose();
      }
      a = (gamma.colwise().sum().transpose().array() + alpha0).matrix();
      if (delta < tol) {
        ok[n] = 1;
        break;
      }
    }
    residuals[n] = delta;
    v.alpha[n] = a;
    v.gamma[n] = gamma;
  });

  v.converged = std::all_of(ok.begin(), ok.end(), [](char c) { return c != 0; });
  v.residual = *std::max_element(residuals.begin(), residuals.end());
  return v;
}

double free_energy_lda(const LdaModel& model, const std::vector<MatrixXd>& log_f,
                       const Eigen::VectorXd& log_mix, const LdaVariational& v) {
  const int k = model.n_textures;
  if (v.alpha.size() != log_f.size() || v.gamma.size() != log_f.size())
    throw std::invalid_argument("lda free energy: variational state shape mismatch");

  const expfam::DirichletParams prior{VectorXd::Constant(k, model.alpha)};
  double total = 0.0;
  for (std::size_t n = 0; n < log_f.size(); ++n) {
    const VectorXd& a = v.alpha[n];
    const MatrixXd& gamma = v.gamma[n];
    const double digsum = digamma(a.sum());

    total -= expfam::kl(expfam::DirichletParams{a}, prior);

    VectorXd elogw(k);
    for (int c = 0; c < k; ++c) elogw[c] = digamma(a[c]) - digsum;

    const MatrixXd ratio = log_f[n].rowwise() - log_mix.transpose();
    for (Eigen::Index j = 0; j < gamma.rows(); ++j) {
      for (int c = 0; c < k; ++c) {
        const double g = gamma(j, c);
        if (g > 0.0) total += g * (elogw[c] + ratio(j, c) - std::log(g));
      }
    }
  }
  return total;
}

nets::Grads lda_mstep_grad(const LdaModel& model, const std::vector<MatrixXd>& patch_sets,
                           const LdaVariational& v) {
  check_patches(model, patch_sets);
  const int k = model.n_textures;
  const Eigen::Index total = total_patches(patch_sets);

  // Forward every patch once, keeping workspaces for the backward pass.
  std::vector<std::pair<std::size_t, Eigen::Index>> flat;
  flat.reserve(static_cast<std::size_t>(total));
  for (std::size_t n = 0; n < patch_sets.size(); ++n)
    for (Eigen::Index j = 0; j < patch_sets[n].rows(); ++j) flat.emplace_back(n, j);

  MatrixXd probs(total, k);
  std::vector<nets::Workspace> ws(flat.size());
  parallel_for(flat.size(), [&](std::size_t i) {
    const auto [n, j] = flat[i];
    VectorXd logits =
        nets::forward_categorical(model.net, patch_sets[n].row(j).transpose(), &ws[i]).logits;
    probs.row(static_cast<Eigen::Index>(i)) = softmax(logits).transpose();
  });

  VectorXd mix = probs.colwise().mean().transpose();
  for (int c = 0; c < k; ++c)
    if (!(mix[c] > 0.0)) throw std::runtime_error("degenerate mixture component");

  VectorXd mass = VectorXd::Zero(k);
  for (const auto& g : v.gamma) mass += g.colwise().sum().transpose();
  const VectorXd r = mass.array() / (static_cast<double>(total) * mix.array());

  // Same shape as the single-latent case, one term per patch: the direct
  // factor pull gamma - f and the mixture correction through log F.
  nets::Grads grads = nets::zero_grads(model.net);
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const auto [n, j] = flat[i];
    const VectorXd f = probs.row(static_cast<Eigen::Index>(i)).transpose();
    const double rf = r.dot(f);
    const VectorXd g =
        v.gamma[n].row(j).transpose() - f - (f.array() * (r.array() - rf)).matrix();
    nets::backward_raw(model.net, ws[i], nets::head_backward_categorical(g), &grads);
  }
  return grads;
}

FitReport fit_lda(LdaModel& model, const std::vector<MatrixXd>& patch_sets,
                  const std::vector<int>& patch_labels, const FitOptions& opts,
                  LdaVariational* final_state) {
  check_patches(model, patch_sets);
  const Eigen::Index total = total_patches(patch_sets);
  if (!patch_labels.empty() && static_cast<Eigen::Index>(patch_labels.size()) != total)
    throw std::invalid_argument("lda fit: patch label count mismatch");

  FitReport report;
  nets::Grads grads = nets::zero_grads(model.net);
  auto blocks = nets::param_blocks(model.net, grads);
  nets::AdamState adam;
  adam.lr = opts.lr;
  adam.init(blocks);

  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  LdaVariational v;
  LdaModel last_good = model;
  bool warned = false;
  for (int it = 0; it < opts.iters; ++it) {
    LdaScores scores;
    try {
      scores = lda_scores(model, patch_sets);
    } catch (const std::runtime_error& err) {
      model = last_good;
      report.aborted = true;
      report.abort_reason = err.what();
      break;
    }
    v = e_step_lda(model, scores.log_f, scores.log_mix, opts.estep_sweeps, opts.estep_tol);
    if (!v.converged && !warned) {
      report.warnings.push_back("e-step hit the sweep budget at iteration " +
                                std::to_string(it));
      warned = true;
    }

    const double f_e = free_energy_lda(model, scores.log_f, scores.log_mix, v);
    report.trace.push_back({it, 'E', f_e, elapsed()});
    if (!std::isfinite(f_e)) {
      model = last_good;
      report.aborted = true;
      report.abort_reason = "non-finite free energy after E-step";
      report.trace.pop_back();
      break;
    }
    last_good = model;

    for (int s = 0; s < opts.msteps_per_estep; ++s) {
      nets::Grads g = lda_mstep_grad(model, patch_sets, v);
      grads.setZero();
      grads.add(g);
      for (auto& blk : blocks) Eigen::Map<VectorXd>(blk.grad, blk.size) *= -1.0;
      adam.step(blocks);
    }

    double f_m;
    try {
      LdaScores after = lda_scores(model, patch_sets);
      f_m = free_energy_lda(model, after.log_f, after.log_mix, v);
    } catch (const std::runtime_error& err) {
      model = last_good;
      report.aborted = true;
      report.abort_reason = err.what();
      break;
    }
    report.trace.push_back({it, 'M', f_m, elapsed()});
    if (!std::isfinite(f_m)) {
      model = last_good;
      report.aborted = true;
      report.abort_reason = "non-finite free energy after M-step";
      report.trace.pop_back();
      break;
    }
  }

  if (!report.trace.empty()) report.metrics["free_energy"] = report.trace.back().value;

  if (!report.aborted) {
    LdaScores scores = lda_scores(model, patch_sets);
    LdaVariational final_v =
        e_step_lda(model, scores.log_f, scores.log_mix, opts.estep_sweeps, opts.estep_tol);
    if (!patch_labels.empty()) {
      std::vector<int> pred;
      pred.reserve(static_cast<std::size_t>(total));
      for (const auto& gamma : final_v.gamma)
        for (Eigen::Index j = 0; j < gamma.rows(); ++j) {
          Eigen::Index arg = 0;
          gamma.row(j).maxCoeff(&arg);
          pred.push_back(static_cast<int>(arg));
        }
      report.metrics["matched_accuracy"] =
          eval::matched_accuracy(pred, patch_labels, model.n_textures).accuracy;
    }
    if (final_state) *final_state = std::move(final_v);
  }
  return report;
}

Eigen::MatrixXd mean_topic_weights(const LdaVariational& v) {
  if (v.alpha.empty()) return MatrixXd();
  MatrixXd out(static_cast<Eigen::Index>(v.alpha.size()), v.alpha[0].size());
  for (std::size_t n = 0; n < v.alpha.size(); ++n)
    out.row(static_cast<Eigen::Index>(n)) = (v.alpha[n] / v.alpha[n].sum()).transpose();
  return out;
}

std::vector<int> representative_patches(const LdaModel& model,
                                        const std::vector<MatrixXd>& patch_sets, int k,
                                        int top_m) {
  if (k < 0 || k >= model.n_textures)
    throw std::invalid_argument("representative patches: texture index out of range");
  LdaScores scores = lda_scores(model, patch_sets);

  std::vector<double> score;
  for (const auto& lf : scores.log_f)
    for (Eigen::Index j = 0; j < lf.rows(); ++j) score.push_back(lf(j, k));

  std::vector<int> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return score[a] > score[b]; });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(0, top_m))));
  return idx;
}

}  // namespace rpm
