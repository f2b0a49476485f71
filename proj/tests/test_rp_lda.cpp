#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "rpm/datagen.hpp"
#include "rpm/rp_lda.hpp"

using namespace rpm;

namespace {

LdaModel hand_model(int k, double alpha) {
  LdaModel model;
  model.n_textures = k;
  model.alpha = alpha;
  return model;  // net unused by the scores-level entry points
}

// Random normalized scores for a corpus with one patch count per image.
void random_scores(int k, const std::vector<int>& patches_per_image, Rng& rng,
                   std::vector<MatrixXd>* log_f, VectorXd* log_mix) {
  log_f->clear();
  for (int j_n : patches_per_image) {
    MatrixXd lf(j_n, k);
    for (int j = 0; j < j_n; ++j) {
      VectorXd logits = 1.5 * rng.normal_vec(k);
      lf.row(j) = (logits.array() - log_sum_exp(logits)).matrix().transpose();
    }
    log_f->push_back(lf);
  }
  VectorXd mix = VectorXd::Zero(k);
  int total = 0;
  for (const auto& lf : *log_f) {
    mix += lf.array().exp().matrix().colwise().sum().transpose();
    total += static_cast<int>(lf.rows());
  }
  *log_mix = (mix / total).array().log();
}

// Both stationarity conditions of the coordinate ascent, evaluated at the
// returned state: gamma rows must equal the softmax update from alpha, and
// alpha must equal the prior plus the gamma column sums.
double fixed_point_residual(const LdaModel& model, const std::vector<MatrixXd>& log_f,
                            const VectorXd& log_mix, const LdaVariational& v) {
  double worst = 0.0;
  for (std::size_t n = 0; n < log_f.size(); ++n) {
    const VectorXd& a = v.alpha[n];
    VectorXd dig(a.size());
    for (Eigen::Index c = 0; c < a.size(); ++c) dig[c] = digamma(a[c]);
    const MatrixXd ratio = log_f[n].rowwise() - log_mix.transpose();
    for (Eigen::Index j = 0; j < v.gamma[n].rows(); ++j) {
      VectorXd row = softmax(VectorXd(dig + ratio.row(j).transpose()));
      worst = std::max(worst, (row.transpose() - v.gamma[n].row(j)).cwiseAbs().maxCoeff());
    }
    VectorXd a_check =
        (v.gamma[n].colwise().sum().transpose().array() + model.alpha).matrix();
    worst = std::max(worst, (a_check - a).cwiseAbs().maxCoeff());
  }
  return worst;
}

/* Midpoint quadrature of the K=2, J=1, single-image bound over the topic
   proportion t: E_q[log prior - log q + gamma . log(t, 1-t)] plus the
   theta-dependent ratio term and the patch entropy. */
double bound_quadrature(double alpha0, const VectorXd& a, const VectorXd& gamma,
                        const VectorXd& ratio) {
  const int cells = 400000;
  const double log_b_prior = 2.0 * std::lgamma(alpha0) - std::lgamma(2.0 * alpha0);
  const double log_b_q = std::lgamma(a[0]) + std::lgamma(a[1]) - std::lgamma(a[0] + a[1]);
  double total = 0.0;
  for (int i = 0; i < cells; ++i) {
    const double t = (i + 0.5) / cells;
    const double lt = std::log(t), l1t = std::log1p(-t);
    const double log_q = (a[0] - 1.0) * lt + (a[1] - 1.0) * l1t - log_b_q;
    const double log_p = (alpha0 - 1.0) * (lt + l1t) - log_b_prior;
    total += std::exp(log_q) * (log_p - log_q + gamma[0] * lt + gamma[1] * l1t) / cells;
  }
  total += gamma.dot(ratio);
  for (int c = 0; c < 2; ++c)
    if (gamma[c] > 0.0) total -= gamma[c] * std::log(gamma[c]);
  return total;
}

std::vector<MatrixXd> corpus_patches(const datagen::TextureCorpus& corpus) {
  std::vector<MatrixXd> out;
  for (const auto& image : corpus.images) out.push_back(patchify(image, corpus.patch_side));
  return out;
}

std::vector<int> flat_labels(const datagen::TextureCorpus& corpus) {
  std::vector<int> out;
  for (const auto& labels : corpus.patch_labels) out.insert(out.end(), labels.begin(), labels.end());
  return out;
}

}  // namespace

TEST_CASE("digamma satisfies the defining recurrence") {
  Rng rng(31);
  for (int i = 0; i < 1000; ++i) {
    const double x = std::exp(rng.uniform() * 10.0 - 3.0);
    CHECK(digamma(x + 1.0) - digamma(x) == doctest::Approx(1.0 / x).epsilon(1e-12));
  }
  CHECK(digamma(1.0) == doctest::Approx(-0.577215664).epsilon(1e-9));
  CHECK(digamma(2.0) == doctest::Approx(digamma(1.0) + 1.0).epsilon(1e-14));
}

TEST_CASE("patch extraction order and cropping") {
  MatrixXd image(5, 5);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) image(i, j) = 10.0 * i + j;

  MatrixXd patches = patchify(image, 2);  // crops to 4x4
  REQUIRE(patches.rows() == 4);
  REQUIRE(patches.cols() == 4);
  // top-left patch, row-major pixels
  CHECK(patches(0, 0) == 0.0);
  CHECK(patches(0, 1) == 1.0);
  CHECK(patches(0, 2) == 10.0);
  CHECK(patches(0, 3) == 11.0);
  // grid is row-major: second patch starts at column 2
  CHECK(patches(1, 0) == 2.0);
  // third patch starts at row 2
  CHECK(patches(2, 0) == 20.0);

  CHECK_THROWS_AS((void)patchify(MatrixXd::Zero(1, 1), 2), std::invalid_argument);
}

TEST_CASE("uniform recognition outputs give the symmetric fixed point") {
  const int k = 3, j_n = 5;
  LdaModel model = hand_model(k, 0.7);
  std::vector<MatrixXd> log_f = {MatrixXd::Constant(j_n, k, std::log(1.0 / k))};
  VectorXd log_mix = VectorXd::Constant(k, std::log(1.0 / k));

  LdaVariational v = e_step_lda(model, log_f, log_mix);
  CHECK(v.converged);
  CHECK((v.gamma[0].array() - 1.0 / k).abs().maxCoeff() < 1e-12);
  CHECK((v.alpha[0].array() - (0.7 + static_cast<double>(j_n) / k)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("coordinate ascent reaches a genuine fixed point") {
  Rng rng(32);
  for (int trial = 0; trial < 20; ++trial) {
    const int k = 2 + static_cast<int>(rng.uniform_int(0, 2));
    std::vector<int> sizes;
    const int images = 1 + static_cast<int>(rng.uniform_int(0, 2));
    for (int n = 0; n < images; ++n) sizes.push_back(1 + static_cast<int>(rng.uniform_int(0, 29)));

    LdaModel model = hand_model(k, 1.0);
    std::vector<MatrixXd> log_f;
    VectorXd log_mix;
    random_scores(k, sizes, rng, &log_f, &log_mix);

    LdaVariational v = e_step_lda(model, log_f, log_mix);
    CHECK(v.converged);
    CHECK(v.residual < 1e-8);
    CHECK(fixed_point_residual(model, log_f, log_mix, v) < 1e-8);

    for (std::size_t n = 0; n < log_f.size(); ++n) {
      CHECK((v.alpha[n].array() > 0.0).all());
      for (Eigen::Index j = 0; j < v.gamma[n].rows(); ++j)
        CHECK(std::abs(v.gamma[n].row(j).sum() - 1.0) < 1e-12);
      // summing the alpha update telescopes the gamma rows
      CHECK(v.alpha[n].sum() ==
            doctest::Approx(k * model.alpha + static_cast<double>(v.gamma[n].rows()))
                .epsilon(1e-12));
    }
  }
}

TEST_CASE("single-patch fixed point satisfies both update equations") {
  LdaModel model = hand_model(2, 1.0);
  std::vector<MatrixXd> log_f = {(MatrixXd(1, 2) << std::log(0.8), std::log(0.2)).finished()};
  VectorXd log_mix = VectorXd::Constant(2, std::log(0.2));  // ratio (4, 1)

  LdaVariational v = e_step_lda(model, log_f, log_mix);
  CHECK(v.converged);
  CHECK(fixed_point_residual(model, log_f, log_mix, v) < 1e-8);
  CHECK(v.gamma[0](0, 0) > 0.7);  // the strong factor dominates
}

TEST_CASE("free energy matches simplex quadrature") {
  LdaModel model = hand_model(2, 1.0);

  SUBCASE("uniform recognition outputs") {
    std::vector<MatrixXd> log_f = {MatrixXd::Constant(1, 2, std::log(0.5))};
    VectorXd log_mix = VectorXd::Constant(2, std::log(0.5));
    LdaVariational v = e_step_lda(model, log_f, log_mix);
    const double closed = free_energy_lda(model, log_f, log_mix, v);
    const VectorXd ratio = (log_f[0].row(0).transpose() - log_mix);
    const double quad = bound_quadrature(1.0, v.alpha[0], v.gamma[0].row(0).transpose(), ratio);
    CHECK(closed == doctest::Approx(quad).epsilon(1e-4));
  }

  SUBCASE("skewed recognition outputs") {
    std::vector<MatrixXd> log_f = {(MatrixXd(1, 2) << std::log(0.8), std::log(0.2)).finished()};
    VectorXd log_mix = VectorXd::Constant(2, std::log(0.2));
    LdaVariational v = e_step_lda(model, log_f, log_mix);
    const double closed = free_energy_lda(model, log_f, log_mix, v);
    const VectorXd ratio = (log_f[0].row(0).transpose() - log_mix);
    const double quad = bound_quadrature(1.0, v.alpha[0], v.gamma[0].row(0).transpose(), ratio);
    CHECK(closed == doctest::Approx(quad).epsilon(1e-4));
  }
}

TEST_CASE("every coordinate sweep raises the bound") {
  Rng rng(33);
  LdaModel model = hand_model(3, 1.0);
  std::vector<MatrixXd> log_f;
  VectorXd log_mix;
  random_scores(3, {12, 7}, rng, &log_f, &log_mix);

  double prev = -1e300;
  for (int sweeps = 1; sweeps <= 12; ++sweeps) {
    LdaVariational v = e_step_lda(model, log_f, log_mix, sweeps);
    const double fe = free_energy_lda(model, log_f, log_mix, v);
    CHECK(fe >= prev - 1e-12);
    prev = fe;
  }
}

TEST_CASE("free energy ignores a global logit shift") {
  Rng rng(34);
  LdaModel model = make_lda_model(3, 1.0, 6, {5}, rng);
  std::vector<MatrixXd> patch_sets = {rng.normal_mat(4, 6), rng.normal_mat(7, 6)};

  LdaScores scores = lda_scores(model, patch_sets);
  LdaVariational v = e_step_lda(model, scores.log_f, scores.log_mix);
  const double before = free_energy_lda(model, scores.log_f, scores.log_mix, v);

  std::get<nets::DenseLayer>(model.net.layers.back()).b.array() += 3.7;
  LdaScores shifted = lda_scores(model, patch_sets);
  const double after = free_energy_lda(model, shifted.log_f, shifted.log_mix, v);
  CHECK(after == doctest::Approx(before).epsilon(1e-10));
}

TEST_CASE("m-step gradient agrees with finite differences") {
  Rng rng(35);
  LdaModel model = make_lda_model(3, 1.0, 5, {4}, rng);
  std::vector<MatrixXd> patch_sets = {rng.normal_mat(4, 5), rng.normal_mat(3, 5)};

  LdaScores scores = lda_scores(model, patch_sets);
  const LdaVariational v = e_step_lda(model, scores.log_f, scores.log_mix);

  nets::Grads analytic = lda_mstep_grad(model, patch_sets, v);
  nets::Grads scratch = nets::zero_grads(model.net);
  auto val_blocks = nets::param_blocks(model.net, scratch);
  auto grad_blocks = nets::param_blocks(model.net, analytic);

  auto objective = [&] {
    LdaScores s = lda_scores(model, patch_sets);
    return free_energy_lda(model, s.log_f, s.log_mix, v);
  };

  double worst = 0.0;
  const double h = 1e-5;
  for (std::size_t b = 0; b < val_blocks.size(); ++b) {
    for (Eigen::Index i = 0; i < val_blocks[b].size; ++i) {
      double& x = val_blocks[b].value[i];
      const double saved = x;
      x = saved + h;
      const double up = objective();
      x = saved - h;
      const double down = objective();
      x = saved;
      const double fd = (up - down) / (2.0 * h);
      worst = std::max(worst,
                       std::abs(fd - grad_blocks[b].grad[i]) / std::max(std::abs(fd), 1e-4));
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("fitting recovers three synthetic textures") {
  std::vector<double> accuracies;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    datagen::TextureCorpusConfig cfg;
    cfg.images = 30;
    datagen::TextureCorpus corpus = datagen::gen_texture_corpus(cfg, 500 + seed);

    Rng rng(900 + seed);
    const int dim = corpus.patch_side * corpus.patch_side;
    LdaModel model = make_lda_model(3, 1.0, dim, {24}, rng);
    FitOptions opts;
    opts.iters = 40;
    opts.msteps_per_estep = 3;
    opts.lr = 1e-2;

    FitReport report = fit_lda(model, corpus_patches(corpus), flat_labels(corpus), opts);
    REQUIRE(!report.aborted);
    for (const auto& point : report.trace) CHECK(std::isfinite(point.value));
    accuracies.push_back(report.metrics.at("matched_accuracy"));
  }
  std::sort(accuracies.begin(), accuracies.end());
  CHECK(accuracies[2] >= 0.9);  // median of five seeds
}

TEST_CASE("single-texture degenerate model runs") {
  Rng rng(36);
  LdaModel model;
  model.n_textures = 1;
  model.alpha = 1.0;
  model.net = nets::make_mlp(4, {}, nets::HeadKind::CategoricalLogits, 1, rng);

  std::vector<MatrixXd> patch_sets = {rng.normal_mat(3, 4), rng.normal_mat(2, 4)};
  FitOptions opts;
  opts.iters = 3;
  opts.msteps_per_estep = 1;
  LdaVariational v;
  FitReport report = fit_lda(model, patch_sets, {}, opts, &v);
  REQUIRE(!report.aborted);
  CHECK(std::isfinite(report.metrics.at("free_energy")));
  for (const auto& gamma : v.gamma) CHECK((gamma.array() == 1.0).all());
}

TEST_CASE("zero m-steps leave the trace flat") {
  Rng rng(37);
  LdaModel model = make_lda_model(2, 1.0, 4, {}, rng);
  std::vector<MatrixXd> patch_sets = {rng.normal_mat(5, 4)};
  FitOptions opts;
  opts.iters = 4;
  opts.msteps_per_estep = 0;
  FitReport report = fit_lda(model, patch_sets, {}, opts);
  for (const auto& point : report.trace)
    CHECK(point.value == doctest::Approx(report.trace.front().value).epsilon(1e-12));
}

TEST_CASE("representative patches") {
  Rng rng(38);

  SUBCASE("constant net keeps corpus order") {
    LdaModel model = make_lda_model(3, 1.0, 4, {}, rng);
    auto& layer = std::get<nets::DenseLayer>(model.net.layers[0]);
    layer.W.setZero();
    layer.b.setZero();
    std::vector<MatrixXd> patch_sets = {rng.normal_mat(4, 4), rng.normal_mat(3, 4)};
    const std::vector<int> top = representative_patches(model, patch_sets, 1, 5);
    CHECK(top == std::vector<int>{0, 1, 2, 3, 4});
  }

  SUBCASE("a dominant patch ranks first") {
    LdaModel model = hand_model(2, 1.0);
    nets::DenseLayer layer;
    layer.W = MatrixXd::Identity(2, 2);
    layer.b = VectorXd::Zero(2);
    model.net.layers = {layer};
    model.net.head = nets::HeadKind::CategoricalLogits;
    model.net.head_dim = 2;

    MatrixXd patches(3, 2);
    patches << 0.0, 0.0, 8.0, -8.0, 1.0, -1.0;  // row 1 is near-certain class 0
    const std::vector<int> top = representative_patches(model, {patches}, 0, 3);
    CHECK(top == std::vector<int>{1, 2, 0});
  }

  SUBCASE("seeded ranking matches a full sort") {
    LdaModel model = make_lda_model(3, 1.0, 5, {6}, rng);
    std::vector<MatrixXd> patch_sets = {rng.normal_mat(9, 5), rng.normal_mat(6, 5)};
    LdaScores scores = lda_scores(model, patch_sets);

    std::vector<double> flat;
    for (const auto& lf : scores.log_f)
      for (Eigen::Index j = 0; j < lf.rows(); ++j) flat.push_back(lf(j, 2));
    std::vector<int> expect(flat.size());
    std::iota(expect.begin(), expect.end(), 0);
    std::stable_sort(expect.begin(), expect.end(),
                     [&](int a, int b) { return flat[a] > flat[b]; });
    expect.resize(4);
    CHECK(representative_patches(model, patch_sets, 2, 4) == expect);
  }
}

TEST_CASE("mean topic weights are row-stochastic") {
  Rng rng(39);
  LdaModel model = hand_model(3, 1.0);
  std::vector<MatrixXd> log_f;
  VectorXd log_mix;
  random_scores(3, {5, 8}, rng, &log_f, &log_mix);
  LdaVariational v = e_step_lda(model, log_f, log_mix);
  MatrixXd w = mean_topic_weights(v);
  REQUIRE(w.rows() == 2);
  for (Eigen::Index n = 0; n < w.rows(); ++n)
    CHECK(std::abs(w.row(n).sum() - 1.0) < 1e-12);
}
