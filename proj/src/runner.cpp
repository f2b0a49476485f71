#include "rpm/runner.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "rpm/datagen.hpp"
#include "rpm/rp_gpfa.hpp"
#include "rpm/rp_lda.hpp"
#include "rpm/rpm_discrete.hpp"
#include "rpm/selftest.hpp"

namespace rpm::runner {

namespace {

namespace fs = std::filesystem;
using config::ConfigError;
using config::ExperimentConfig;
using config::ExperimentKind;

std::string json_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size() + 8);
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          std::ostringstream os;
          os << "\\u" << std::hex << std::setw(4) << std::setfill('0') << static_cast<int>(c);
          out += os.str();
        } else {
          out += c;
        }
    }
  }
  return out;
}

std::string json_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot write " + path.string());
  return f;
}

void write_resolved(const ExperimentConfig& cfg) {
  open_out(fs::path(cfg.out_dir) / "resolved.cfg") << config::render(cfg);
}

void write_report(const ExperimentConfig& cfg, const FitReport& report, double elapsed) {
  auto f = open_out(fs::path(cfg.out_dir) / "report.json");
  const std::string hash = config::config_hash(cfg);
  f << "{\n";
  f << "  \"experiment\": \"" << config::kind_name(cfg.kind) << "\",\n";
  f << "  \"seed\": " << cfg.seed << ",\n";
  f << "  \"config_hash\": \"" << hash << "\",\n";
  f << "  \"aborted\": " << (report.aborted ? "true" : "false") << ",\n";
  f << "  \"abort_reason\": \"" << json_escape(report.abort_reason) << "\",\n";
  f << "  \"iterations\": " << report.trace.size() << ",\n";
  f << "  \"final_free_energy\": " << json_num(report.final_free_energy()) << ",\n";
  f << "  \"warnings\": [";
  for (std::size_t i = 0; i < report.warnings.size(); ++i)
    f << (i ? ", " : "") << "\"" << json_escape(report.warnings[i]) << "\"";
  f << "],\n";
  f << "  \"metrics\": [";
  std::size_t i = 0;
  for (const auto& [name, value] : report.metrics) {
    f << (i++ ? ",\n    " : "\n    ");
    f << "{\"metric\": \"" << json_escape(name) << "\", \"value\": " << json_num(value)
      << ", \"seed\": " << cfg.seed << ", \"config_hash\": \"" << hash << "\"}";
  }
  f << (i ? "\n  ]" : "]") << ",\n";
  f << "  \"elapsed_seconds\": " << json_num(elapsed) << "\n";
  f << "}\n";
}

void write_trace_csv(const ExperimentConfig& cfg, const FitReport& report) {
  auto f = open_out(fs::path(cfg.out_dir) / "free_energy.csv");
  f << "iteration,phase,value,seconds\n";
  f.precision(17);
  for (const auto& p : report.trace)
    f << p.iteration << "," << p.phase << "," << p.value << "," << p.seconds << "\n";
}

datagen::LabeledImages peer_images(const ExperimentConfig& cfg) {
  const auto& ds = cfg.dataset;
  if (ds.generator == "idx") {
    datagen::LabeledImages imgs = datagen::load_idx_images(ds.images_path);
    imgs.labels = datagen::load_idx_labels(ds.labels_path);
    if (static_cast<Eigen::Index>(imgs.labels.size()) != imgs.images.rows())
      throw ConfigError("dataset.labels_path: " + std::to_string(imgs.labels.size()) +
                        " labels for " + std::to_string(imgs.images.rows()) + " images");
    return imgs;
  }
  return datagen::gen_synthetic_digits(ds.classes, ds.per_class, ds.dim, ds.noise_std, cfg.seed);
}

int run_peer(const ExperimentConfig& cfg, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const datagen::LabeledImages imgs = peer_images(cfg);
  datagen::PeerPairs pairs = datagen::gen_peer_pairs(imgs.images, imgs.labels, cfg.seed);
  auto& data = pairs.data;
  if (cfg.dataset.max_pairs > 0 && data.items() > cfg.dataset.max_pairs) {
    for (auto& view : data.views)
      view = MatrixXd(view.topRows(cfg.dataset.max_pairs));
    data.labels.resize(static_cast<std::size_t>(cfg.dataset.max_pairs));
  }

  Rng rng(cfg.seed);
  PeerModel model = make_peer_model(cfg.model.k, data.n_views(),
                                    static_cast<int>(data.views[0].cols()), cfg.model.hidden, rng);
  FitReport report = fit_peer(model, data, cfg.opts);
  report.warnings.insert(report.warnings.end(), pairs.warnings.begin(), pairs.warnings.end());

  nets::save_checkpoint(model.net, (fs::path(cfg.out_dir) / "net.rpmw").string());
  datagen::save_rpmd((fs::path(cfg.out_dir) / "model.rpmd").string(),
                     {{"prior_logits",
                       {static_cast<std::uint64_t>(model.prior_logits.size())},
                       model.prior_logits}});
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(cfg, report, elapsed);
  write_trace_csv(cfg, report);
  for (const auto& [name, value] : report.metrics)
    out << name << " = " << value << "\n";
  return report.aborted ? 3 : 0;
}

int run_lda(const ExperimentConfig& cfg, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<MatrixXd> patch_sets;
  std::vector<int> patch_labels;
  if (cfg.dataset.generator == "pgm") {
    for (const std::string& path : cfg.dataset.pgm_paths)
      patch_sets.push_back(patchify(datagen::read_pgm(path), cfg.dataset.patch_side));
  } else {
    datagen::TextureCorpusConfig cc;
    cc.images = cfg.dataset.images;
    cc.grid = cfg.dataset.grid;
    cc.patch_side = cfg.dataset.patch_side;
    cc.mix_alpha = cfg.dataset.mix_alpha;
    cc.noise_std = cfg.dataset.noise_std;
    cc.n_textures = cfg.model.k;
    const datagen::TextureCorpus corpus = datagen::gen_texture_corpus(cc, cfg.seed);
    for (std::size_t n = 0; n < corpus.images.size(); ++n) {
      patch_sets.push_back(patchify(corpus.images[n], corpus.patch_side));
      patch_labels.insert(patch_labels.end(), corpus.patch_labels[n].begin(),
                          corpus.patch_labels[n].end());
    }
  }

  Rng rng(cfg.seed);
  LdaModel model =
      make_lda_model(cfg.model.k, cfg.model.alpha,
                     cfg.dataset.patch_side * cfg.dataset.patch_side, cfg.model.hidden, rng);
  const FitReport report = fit_lda(model, patch_sets, patch_labels, cfg.opts);

  nets::save_checkpoint(model.net, (fs::path(cfg.out_dir) / "net.rpmw").string());
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(cfg, report, elapsed);
  write_trace_csv(cfg, report);
  for (const auto& [name, value] : report.metrics)
    out << name << " = " << value << "\n";
  return report.aborted ? 3 : 0;
}

SequenceDataset sequence_dataset(const ExperimentConfig& cfg) {
  const auto& ds = cfg.dataset;
  if (ds.generator == "structured_ball") {
    datagen::StructuredBallConfig sc;
    sc.items = ds.items;
    sc.steps = ds.steps;
    sc.pixels = ds.pixels;
    sc.stripe_amp = ds.stripe_amp;
    sc.bump_amp = ds.bump_amp;
    sc.noise_std = ds.noise_std;
    return datagen::gen_structured_ball(sc, cfg.seed);
  }
  datagen::TexturedBallConfig tc;
  tc.items = ds.items;
  tc.steps = ds.steps;
  tc.pixels = ds.pixels;
  tc.component_var = ds.component_var;
  return datagen::gen_textured_ball(tc, cfg.seed);
}

EstepMethod method_from_tag(const std::string& tag) {
  if (tag == "mc") return EstepMethod::Mc;
  if (tag == "interior-bound") return EstepMethod::InteriorBound;
  return EstepMethod::SecondOrder;
}

int run_gpfa(const ExperimentConfig& cfg, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const SequenceDataset data = sequence_dataset(cfg);

  Rng rng(cfg.seed);
  GpfaModel model = make_gpfa_model(cfg.model.k, data.n_views(), cfg.dataset.pixels,
                                    cfg.model.hidden, method_from_tag(cfg.model.method), rng);
  for (auto& kernel : model.kernels) {
    kernel.log_variance = std::log(cfg.model.kernel_variance);
    kernel.log_lengthscale = std::log(cfg.model.kernel_lengthscale);
  }

  InducingState inducing;
  std::vector<LatentMarginals> marginals;
  const FitReport report =
      fit_gpfa(model, data, cfg.model.inducing_points, cfg.opts, &inducing, &marginals);

  {
    auto f = open_out(fs::path(cfg.out_dir) / "latents.csv");
    f << "n,t,k,mean,variance\n";
    f.precision(17);
    for (std::size_t n = 0; n < marginals.size(); ++n)
      for (Eigen::Index t = 0; t < marginals[n].mean.rows(); ++t)
        for (Eigen::Index k = 0; k < marginals[n].mean.cols(); ++k)
          f << n << "," << t << "," << k << "," << marginals[n].mean(t, k) << ","
            << marginals[n].var(t, k) << "\n";
  }

  for (std::size_t j = 0; j < model.nets.size(); ++j)
    nets::save_checkpoint(model.nets[j],
                          (fs::path(cfg.out_dir) / ("net" + std::to_string(j) + ".rpmw")).string());
  if (inducing.items() > 0) {
    std::vector<datagen::NamedArray> arrays;
    const auto scalar_vec = [&](const std::string& name, const VectorXd& v) {
      arrays.push_back({name, {static_cast<std::uint64_t>(v.size())}, v});
    };
    VectorXd lv(model.n_latents), ll(model.n_latents);
    for (int k = 0; k < model.n_latents; ++k) {
      lv[k] = model.kernels[static_cast<std::size_t>(k)].log_variance;
      ll[k] = model.kernels[static_cast<std::size_t>(k)].log_lengthscale;
    }
    scalar_vec("kernel_log_variance", lv);
    scalar_vec("kernel_log_lengthscale", ll);
    scalar_vec("tau", inducing.tau);
    const auto m = static_cast<std::uint64_t>(inducing.points());
    for (int n = 0; n < inducing.items(); ++n)
      for (int k = 0; k < inducing.dims(); ++k) {
        const auto& site = inducing.site[static_cast<std::size_t>(n)][static_cast<std::size_t>(k)];
        const std::string tag = std::to_string(n) + "_" + std::to_string(k);
        arrays.push_back({"mu_" + tag, {m}, site.mu});
        // row-major flatten to match the container's C-order contract
        MatrixXd lt = site.l_raw.transpose();
        arrays.push_back({"l_raw_" + tag, {m, m},
                          Eigen::Map<VectorXd>(lt.data(), lt.size())});
      }
    datagen::save_rpmd((fs::path(cfg.out_dir) / "gp_state.rpmd").string(), arrays);
  }

  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(cfg, report, elapsed);
  write_trace_csv(cfg, report);
  for (const auto& [name, value] : report.metrics)
    out << name << " = " << value << "\n";
  return report.aborted ? 3 : 0;
}

int run_datagen(const ExperimentConfig& cfg, std::ostream& out) {
  const auto& ds = cfg.dataset;
  std::vector<datagen::NamedArray> arrays;
  if (ds.generator == "textured_ball" || ds.generator == "structured_ball") {
    const SequenceDataset data = sequence_dataset(cfg);
    const auto n = static_cast<std::uint64_t>(data.items());
    const auto t = static_cast<std::uint64_t>(data.steps());
    const auto p = static_cast<std::uint64_t>(data.obs[0][0].cols());
    arrays.push_back({"times", {t}, data.times});
    MatrixXd zt = data.z_true.transpose();
    arrays.push_back({"z_true", {n, t}, Eigen::Map<VectorXd>(zt.data(), zt.size())});
    VectorXd flat(static_cast<Eigen::Index>(n * t * p));
    Eigen::Index at = 0;
    for (int item = 0; item < data.items(); ++item) {
      MatrixXd block = data.obs[static_cast<std::size_t>(item)][0].transpose();
      flat.segment(at, block.size()) = Eigen::Map<VectorXd>(block.data(), block.size());
      at += block.size();
    }
    arrays.push_back({"obs", {n, t, p}, flat});
  } else if (ds.generator == "synthetic_digits") {
    const datagen::LabeledImages imgs =
        datagen::gen_synthetic_digits(ds.classes, ds.per_class, ds.dim, ds.noise_std, cfg.seed);
    MatrixXd it = imgs.images.transpose();
    arrays.push_back({"images",
                      {static_cast<std::uint64_t>(imgs.images.rows()),
                       static_cast<std::uint64_t>(imgs.images.cols())},
                      Eigen::Map<VectorXd>(it.data(), it.size())});
    VectorXd labels(static_cast<Eigen::Index>(imgs.labels.size()));
    for (Eigen::Index i = 0; i < labels.size(); ++i)
      labels[i] = imgs.labels[static_cast<std::size_t>(i)];
    arrays.push_back({"labels", {static_cast<std::uint64_t>(labels.size())}, labels});
  } else {
    datagen::TextureCorpusConfig cc;
    cc.images = ds.images;
    cc.grid = ds.grid;
    cc.patch_side = ds.patch_side;
    cc.mix_alpha = ds.mix_alpha;
    cc.noise_std = ds.noise_std;
    const datagen::TextureCorpus corpus = datagen::gen_texture_corpus(cc, cfg.seed);
    const auto side = static_cast<std::uint64_t>(corpus.images[0].rows());
    for (std::size_t n = 0; n < corpus.images.size(); ++n) {
      MatrixXd im = corpus.images[n].transpose();
      arrays.push_back({"image_" + std::to_string(n), {side, side},
                        Eigen::Map<VectorXd>(im.data(), im.size())});
      VectorXd labels(static_cast<Eigen::Index>(corpus.patch_labels[n].size()));
      for (Eigen::Index i = 0; i < labels.size(); ++i)
        labels[i] = corpus.patch_labels[n][static_cast<std::size_t>(i)];
      arrays.push_back({"patch_labels_" + std::to_string(n),
                        {static_cast<std::uint64_t>(labels.size())}, labels});
    }
  }
  const fs::path path = fs::path(cfg.out_dir) / "dataset.rpmd";
  datagen::save_rpmd(path.string(), arrays);
  out << "wrote " << path.string() << " (" << arrays.size() << " arrays)\n";
  return 0;
}

int run_selftest(std::ostream& out) {
  const auto results = selftest::run_all();
  for (const auto& r : results)
    out << (r.pass ? "[PASS] " : "[FAIL] ") << r.name
        << (r.detail.empty() ? "" : ": " + r.detail) << "\n";
  return selftest::all_pass(results) ? 0 : 1;
}

struct CliArgs {
  std::string command;
  std::string config_path;
  std::map<std::string, std::string> overrides;  // full config keys
};

CliArgs parse_args(const std::vector<std::string>& args) {
  if (args.empty()) throw ConfigError("usage: rpm <run|validate|datagen|selftest> [config] [flags]");
  CliArgs out;
  out.command = args[0];
  if (out.command != "run" && out.command != "validate" && out.command != "datagen" &&
      out.command != "selftest")
    throw ConfigError("unknown command '" + out.command +
                      "'; expected run, validate, datagen or selftest");
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    const auto flag_value = [&](const char* name) {
      if (i + 1 >= args.size()) throw ConfigError(std::string(name) + " requires a value");
      return args[++i];
    };
    if (a == "--seed") out.overrides["experiment.seed"] = flag_value("--seed");
    else if (a == "--out") out.overrides["experiment.out"] = flag_value("--out");
    else if (a == "--iters") out.overrides["optimizer.iters"] = flag_value("--iters");
    else if (!a.empty() && a[0] == '-') throw ConfigError("unknown flag '" + a + "'");
    else if (out.config_path.empty()) out.config_path = a;
    else throw ConfigError("unexpected argument '" + a + "'");
  }
  if (out.command != "selftest" && out.config_path.empty())
    throw ConfigError(out.command + " requires a config file path");
  return out;
}

}  // namespace

int run_experiment(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  if (cfg.kind == ExperimentKind::Selftest) return run_selftest(out);
  try {
    std::filesystem::create_directories(cfg.out_dir);
  } catch (const std::exception& e) {
    err << "config error: experiment.out: " << e.what() << "\n";
    return 2;
  }
  try {
    write_resolved(cfg);
    switch (cfg.kind) {
      case ExperimentKind::Peer: return run_peer(cfg, out);
      case ExperimentKind::Lda: return run_lda(cfg, out);
      case ExperimentKind::Gpfa: return run_gpfa(cfg, out);
      case ExperimentKind::Datagen: return run_datagen(cfg, out);
      case ExperimentKind::Selftest: break;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "numerical abort: " << e.what() << "\n";
    return 3;
  }
  return 0;
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CliArgs cli;
  try {
    cli = parse_args(args);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  if (cli.command == "selftest" && cli.config_path.empty()) return run_selftest(out);

  config::ParsedConfig parsed;
  try {
    parsed = config::parse_config_file(cli.config_path);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  }
  if (cli.command == "datagen") parsed.values["experiment.kind"] = "datagen";
  for (const auto& [key, value] : cli.overrides) parsed.values[key] = value;

  const config::Resolution res = config::resolve(parsed);
  if (!res.diagnostics.empty()) {
    for (const auto& d : res.diagnostics) err << "config error: " << d << "\n";
    return 2;
  }
  if (cli.command == "validate") {
    out << config::render(res.config);
    out << "\n# config_hash = " << config::config_hash(res.config) << "\n";
    return 0;
  }
  return run_experiment(res.config, out, err);
}

}  // namespace rpm::runner
