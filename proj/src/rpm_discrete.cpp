#include "rpm/rpm_discrete.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "rpm/eval.hpp"

namespace rpm {

namespace {

void check_dataset(const PeerModel& model, const DiscreteDataset& data) {
  if (data.n_views() != model.n_views)
    throw std::invalid_argument("peer model: dataset view count mismatch");
  if (data.items() < 1) throw std::invalid_argument("peer model: empty dataset");
  const Eigen::Index dim = data.views[0].cols();
  for (const auto& view : data.views) {
    if (view.rows() != data.items() || view.cols() != dim)
      throw std::invalid_argument("peer model: ragged views");
  }
}

// Column-wise log of the empirical factor mixture, log F_j(k).
VectorXd log_mixture(const MatrixXd& log_f) {
  const Eigen::Index n = log_f.rows(), k = log_f.cols();
  VectorXd out(k);
  for (Eigen::Index i = 0; i < k; ++i) {
    VectorXd col = log_f.col(i);
    out[i] = log_sum_exp(col) - std::log(static_cast<double>(n));
    if (!(out[i] > -690.0))  // exp would underflow and the model divides by F
      throw std::runtime_error("degenerate mixture component");
  }
  return out;
}

VectorXd log_prior(const Eigen::VectorXd& prior_logits) {
  VectorXd lp = prior_logits;
  return lp.array() - log_sum_exp(lp);
}

}  // namespace

PeerModel make_peer_model(int n_classes, int n_views, int input_dim,
                          const std::vector<int>& hidden, Rng& rng) {
  if (n_classes < 2) throw std::invalid_argument("peer model: need at least two classes");
  if (n_views < 2) throw std::invalid_argument("peer model: need at least two views");
  PeerModel model;
  model.n_classes = n_classes;
  model.n_views = n_views;
  model.prior_logits = VectorXd::Zero(n_classes);
  model.net = nets::make_mlp(input_dim, hidden, nets::HeadKind::CategoricalLogits, n_classes, rng);
  return model;
}

Eigen::MatrixXd recognition_log_probs(const PeerModel& model,
                                      const DiscreteDataset& data, int view) {
  check_dataset(model, data);
  if (view < 0 || view >= model.n_views)
    throw std::invalid_argument("peer model: view index out of range");
  const Eigen::Index n = data.items();
  MatrixXd out(n, model.n_classes);
  const MatrixXd& x = data.views[view];
  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    VectorXd logits = nets::forward_categorical(model.net, x.row(i).transpose()).logits;
    out.row(static_cast<Eigen::Index>(i)) =
        (logits.array() - log_sum_exp(logits)).matrix().transpose();
  });
  return out;
}

Eigen::VectorXd mixture_probs(const PeerModel& model, const DiscreteDataset& data, int view) {
  return log_mixture(recognition_log_probs(model, data, view)).array().exp();
}

DiscretePosterior e_step_from_scores(const Eigen::VectorXd& prior_logits,
                                     const std::vector<Eigen::MatrixXd>& log_f,
                                     const std::vector<Eigen::VectorXd>& log_mix) {
  const Eigen::Index n = log_f.at(0).rows(), k = prior_logits.size();
  MatrixXd score = log_prior(prior_logits).transpose().replicate(n, 1);
  for (std::size_t j = 0; j < log_f.size(); ++j)
    score += log_f[j].rowwise() - log_mix.at(j).transpose();

  DiscretePosterior post;
  post.q.resize(n, k);
  post.log_weight.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    VectorXd row = score.row(i).transpose();
    post.log_weight[i] = log_sum_exp(row);
    post.q.row(i) = (row.array() - post.log_weight[i]).exp().matrix().transpose();
  }
  return post;
}

DiscretePosterior e_step_exact(const PeerModel& model, const DiscreteDataset& data) {
  std::vector<MatrixXd> log_f(model.n_views);
  std::vector<VectorXd> log_mix(model.n_views);
  for (int j = 0; j < model.n_views; ++j) {
    log_f[j] = recognition_log_probs(model, data, j);
    log_mix[j] = log_mixture(log_f[j]);
  }
  return e_step_from_scores(model.prior_logits, log_f, log_mix);
}

double free_energy_from_scores(const Eigen::VectorXd& prior_logits,
                               const std::vector<Eigen::MatrixXd>& log_f,
                               const std::vector<Eigen::VectorXd>& log_mix,
                               const Eigen::MatrixXd& q) {
  const Eigen::Index n = log_f.at(0).rows(), k = prior_logits.size();
  if (q.rows() != n || q.cols() != k)
    throw std::invalid_argument("free energy: responsibility shape mismatch");
  MatrixXd score = log_prior(prior_logits).transpose().replicate(n, 1);
  for (std::size_t j = 0; j < log_f.size(); ++j)
    score += log_f[j].rowwise() - log_mix.at(j).transpose();

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index c = 0; c < k; ++c)
      if (q(i, c) > 0.0) total += q(i, c) * (score(i, c) - std::log(q(i, c)));
  return total;
}

double free_energy_discrete(const PeerModel& model, const DiscreteDataset& data,
                            const Eigen::MatrixXd& q) {
  std::vector<MatrixXd> log_f(model.n_views);
  std::vector<VectorXd> log_mix(model.n_views);
  for (int j = 0; j < model.n_views; ++j) {
    log_f[j] = recognition_log_probs(model, data, j);
    log_mix[j] = log_mixture(log_f[j]);
  }
  return free_energy_from_scores(model.prior_logits, log_f, log_mix, q);
}

nets::Grads mstep_grad(const PeerModel& model, const DiscreteDataset& data,
                       const Eigen::MatrixXd& q) {
  check_dataset(model, data);
  const Eigen::Index n = data.items();
  const int k = model.n_classes;
  if (q.rows() != n || q.cols() != k)
    throw std::invalid_argument("m-step: responsibility shape mismatch");

  nets::Grads grads = nets::zero_grads(model.net);
  const VectorXd class_mass = q.colwise().sum().transpose();

  // Per view: f holds the recognition probabilities, F their mean over items.
  // d(free energy)/d(logit_i) for one item splits into the direct factor term
  // q_i - f_i and the mixture term -(f_i / N) (r_i - <r, f>), r = class_mass / (N F).
  for (int j = 0; j < model.n_views; ++j) {
    const MatrixXd& x = data.views[j];
    MatrixXd probs(n, k);
    std::vector<nets::Workspace> ws(static_cast<std::size_t>(n));
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      VectorXd logits =
          nets::forward_categorical(model.net, x.row(static_cast<Eigen::Index>(i)).transpose(),
                                    &ws[i])
              .logits;
      probs.row(static_cast<Eigen::Index>(i)) = softmax(logits).transpose();
    });

    VectorXd mix = probs.colwise().mean().transpose();
    for (int c = 0; c < k; ++c)
      if (!(mix[c] > 0.0)) throw std::runtime_error("degenerate mixture component");
    VectorXd r = class_mass.array() / (static_cast<double>(n) * mix.array());

    for (Eigen::Index i = 0; i < n; ++i) {
      VectorXd f = probs.row(i).transpose();
      double rf = r.dot(f);
      VectorXd g = q.row(i).transpose() - f - (f.array() * (r.array() - rf)).matrix();
      nets::backward_raw(model.net, ws[static_cast<std::size_t>(i)],
                         nets::head_backward_categorical(g), &grads);
    }
  }
  return grads;
}

FitReport fit_peer(PeerModel& model, const DiscreteDataset& data, const FitOptions& opts) {
  check_dataset(model, data);
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

  MatrixXd q;
  PeerModel last_good = model;
  for (int it = 0; it < opts.iters; ++it) {
    DiscretePosterior post;
    try {
      post = e_step_exact(model, data);
    } catch (const std::runtime_error& err) {
      model = last_good;
      report.aborted = true;
      report.abort_reason = err.what();
      break;
    }
    q = post.q;
    const double f_e = post.log_weight.sum();
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
      nets::Grads g = mstep_grad(model, data, q);
      grads.setZero();
      grads.add(g);
      for (auto& blk : blocks)
        Eigen::Map<VectorXd>(blk.grad, blk.size) *= -1.0;  // ascend
      adam.step(blocks);
    }
    if (model.learn_prior) {
      VectorXd p = q.colwise().mean().transpose();
      model.prior_logits = (p.array() + 1e-300).log();
    }

    const double f_m = free_energy_discrete(model, data, q);
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
  if (q.size() > 0) {
    report.metrics["mean_posterior_entropy"] = eval::mean_posterior_entropy(q);
    if (!data.labels.empty()) {
      std::vector<int> pred(static_cast<std::size_t>(q.rows()));
      for (Eigen::Index i = 0; i < q.rows(); ++i) {
        Eigen::Index arg = 0;
        q.row(i).maxCoeff(&arg);
        pred[static_cast<std::size_t>(i)] = static_cast<int>(arg);
      }
      report.metrics["matched_accuracy"] =
          eval::matched_accuracy(pred, data.labels, model.n_classes).accuracy;
    }
  }
  return report;
}

}  // namespace rpm
