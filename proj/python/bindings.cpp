#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "rpm/datagen.hpp"
#include "rpm/estep_continuous.hpp"
#include "rpm/eval.hpp"
#include "rpm/rp_gpfa.hpp"
#include "rpm/rp_lda.hpp"
#include "rpm/rpm_discrete.hpp"
#include "rpm/selftest.hpp"

namespace py = pybind11;
using namespace rpm;

namespace {

FitOptions make_opts(int iters, double lr, int mc_samples, std::uint64_t seed) {
  FitOptions opts;
  opts.iters = iters;
  opts.lr = lr;
  opts.mc_samples = mc_samples;
  opts.seed = seed;
  return opts;
}

py::dict report_to_dict(const FitReport& report) {
  py::dict out;
  out["aborted"] = report.aborted;
  out["abort_reason"] = report.abort_reason;
  out["warnings"] = report.warnings;
  out["final_free_energy"] = report.final_free_energy();
  py::dict metrics;
  for (const auto& [name, value] : report.metrics) metrics[py::str(name)] = value;
  out["metrics"] = metrics;
  std::vector<double> trace;
  for (const auto& p : report.trace) trace.push_back(p.value);
  out["trace"] = trace;
  return out;
}

FactorBank bank_from_params(const std::vector<VectorXd>& hs, const std::vector<MatrixXd>& js) {
  if (hs.size() != js.size()) throw std::invalid_argument("need one J per h");
  std::vector<expfam::GaussianNat> etas;
  for (std::size_t i = 0; i < hs.size(); ++i) etas.push_back({hs[i], js[i]});
  return make_factor_bank(etas);
}

}  // namespace

PYBIND11_MODULE(_rpm, m) {
  m.doc() = "recognition-parametrised models: EM fits, variational estimators, generators";

  m.def("selftest", [] {
    py::list out;
    for (const auto& r : selftest::run_all())
      out.append(py::make_tuple(r.name, r.pass, r.detail));
    return out;
  });

  m.def(
      "gen_synthetic_digits",
      [](int classes, int per_class, int dim, double noise_std, std::uint64_t seed) {
        const auto imgs = datagen::gen_synthetic_digits(classes, per_class, dim, noise_std, seed);
        return py::make_tuple(imgs.images, imgs.labels);
      },
      py::arg("classes") = 10, py::arg("per_class") = 40, py::arg("dim") = 64,
      py::arg("noise_std") = 0.35, py::arg("seed") = 0);

  m.def(
      "gen_textured_ball",
      [](int items, int steps, int pixels, std::uint64_t seed) {
        datagen::TexturedBallConfig cfg;
        cfg.items = items;
        cfg.steps = steps;
        cfg.pixels = pixels;
        const auto data = datagen::gen_textured_ball(cfg, seed);
        std::vector<MatrixXd> obs;
        for (const auto& item : data.obs) obs.push_back(item[0]);
        py::dict out;
        out["obs"] = obs;
        out["z_true"] = data.z_true;
        out["times"] = data.times;
        return out;
      },
      py::arg("items") = 50, py::arg("steps") = 50, py::arg("pixels") = 16, py::arg("seed") = 0);

  m.def(
      "fit_peer",
      [](const MatrixXd& images, const std::vector<int>& labels, int k,
         const std::vector<int>& hidden, int iters, double lr, std::uint64_t seed) {
        auto pairs = datagen::gen_peer_pairs(images, labels, seed);
        Rng rng(seed);
        PeerModel model = make_peer_model(k, pairs.data.n_views(),
                                          static_cast<int>(pairs.data.views[0].cols()), hidden, rng);
        const FitReport report = fit_peer(model, pairs.data, make_opts(iters, lr, 20, seed));
        return report_to_dict(report);
      },
      py::arg("images"), py::arg("labels"), py::arg("k"),
      py::arg("hidden") = std::vector<int>{50, 50}, py::arg("iters") = 100,
      py::arg("lr") = 1e-3, py::arg("seed") = 0);

  m.def(
      "fit_gpfa",
      [](const std::vector<std::vector<MatrixXd>>& obs, const VectorXd& times,
         const MatrixXd& z_true, int k, int m_points, const std::string& method,
         const std::vector<int>& hidden, int iters, double lr, int mc_samples,
         std::uint64_t seed) {
        SequenceDataset data;
        data.obs = obs;
        data.times = times;
        data.z_true = z_true;
        EstepMethod em = EstepMethod::SecondOrder;
        if (method == "mc") em = EstepMethod::Mc;
        else if (method == "interior-bound") em = EstepMethod::InteriorBound;
        else if (method != "second-order")
          throw std::invalid_argument("method: expected mc, second-order or interior-bound");
        Rng rng(seed);
        const int input_dim = static_cast<int>(obs.at(0).at(0).cols());
        GpfaModel model =
            make_gpfa_model(k, static_cast<int>(obs[0].size()), input_dim, hidden, em, rng);
        std::vector<LatentMarginals> marginals;
        const FitReport report = fit_gpfa(model, data, m_points,
                                          make_opts(iters, lr, mc_samples, seed), nullptr,
                                          &marginals);
        py::dict out = report_to_dict(report);
        std::vector<MatrixXd> means, vars;
        for (const auto& lm : marginals) {
          means.push_back(lm.mean);
          vars.push_back(lm.var);
        }
        out["latent_mean"] = means;
        out["latent_var"] = vars;
        return out;
      },
      py::arg("obs"), py::arg("times"), py::arg("z_true"), py::arg("k") = 1,
      py::arg("m_points") = 10, py::arg("method") = "second-order",
      py::arg("hidden") = std::vector<int>{32}, py::arg("iters") = 100, py::arg("lr") = 1e-3,
      py::arg("mc_samples") = 20, py::arg("seed") = 0);

  m.def(
      "fit_lda",
      [](const std::vector<MatrixXd>& images, int patch_side, int k, double alpha,
         const std::vector<int>& hidden, int iters, double lr, std::uint64_t seed) {
        std::vector<MatrixXd> patch_sets;
        for (const auto& image : images) patch_sets.push_back(patchify(image, patch_side));
        Rng rng(seed);
        LdaModel model = make_lda_model(k, alpha, patch_side * patch_side, hidden, rng);
        const FitReport report =
            fit_lda(model, patch_sets, {}, make_opts(iters, lr, 20, seed));
        return report_to_dict(report);
      },
      py::arg("images"), py::arg("patch_side"), py::arg("k"), py::arg("alpha") = 1.0,
      py::arg("hidden") = std::vector<int>{32}, py::arg("iters") = 50, py::arg("lr") = 1e-3,
      py::arg("seed") = 0);

  // mixture-bracket estimators over an explicit Gaussian factor bank
  m.def(
      "log_mixture_mc",
      [](const std::vector<VectorXd>& hs, const std::vector<MatrixXd>& js, const VectorXd& m_q,
         const MatrixXd& s_q, int samples, std::uint64_t seed) {
        const FactorBank bank = bank_from_params(hs, js);
        Rng rng(seed);
        MatrixXd eps = rng.normal_mat(m_q.size(), samples);
        standardize_eps(eps);
        return mc_log_mixture(bank, {m_q, s_q}, eps).value;
      },
      py::arg("hs"), py::arg("js"), py::arg("m"), py::arg("S"), py::arg("samples") = 1000,
      py::arg("seed") = 0);

  m.def(
      "log_mixture_second_order",
      [](const std::vector<VectorXd>& hs, const std::vector<MatrixXd>& js, const VectorXd& m_q,
         const MatrixXd& s_q) {
        return second_order_log_mixture(bank_from_params(hs, js),
                                        expfam::suffstat_moments({m_q, s_q}))
            .value;
      },
      py::arg("hs"), py::arg("js"), py::arg("m"), py::arg("S"));

  m.def(
      "interior_bound",
      [](const std::vector<VectorXd>& hs, const std::vector<MatrixXd>& js, const VectorXd& m_q,
         const MatrixXd& s_q, int n, int aux_steps) {
        const FactorBank bank = bank_from_params(hs, js);
        AuxFactor aux{VectorXd::Zero(m_q.size()), MatrixXd::Zero(m_q.size(), m_q.size())};
        aux = validate_aux(bank, aux);
        if (aux_steps > 0) aux = optimize_aux(bank, {m_q, s_q}, n, aux, aux_steps, 1e-2);
        return interior_bound_terms(bank, {m_q, s_q}, aux, n).value;
      },
      py::arg("hs"), py::arg("js"), py::arg("m"), py::arg("S"), py::arg("n") = 0,
      py::arg("aux_steps") = 0);

  m.def("nmse_regression", &eval::nmse_regression, py::arg("inferred"), py::arg("truth"));

  m.def(
      "matched_accuracy",
      [](const std::vector<int>& pred, const std::vector<int>& truth, int n_labels) {
        const auto res = eval::matched_accuracy(pred, truth, n_labels);
        return py::make_tuple(res.accuracy, res.pred_to_true);
      },
      py::arg("pred"), py::arg("truth"), py::arg("n_labels"));

  m.def(
      "hungarian",
      [](const MatrixXd& cost) {
        const auto res = eval::hungarian(cost);
        return py::make_tuple(res.row_to_col, res.cost);
      },
      py::arg("cost"));
}
