#include "rpm/datagen.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace rpm::datagen {

namespace {

void advance_oscillator(Eigen::Vector2d& state, const OscillatorConfig& cfg, Rng& rng) {
  const double c = std::cos(cfg.angle), s = std::sin(cfg.angle);
  const Eigen::Vector2d rotated(c * state[0] - s * state[1], s * state[0] + c * state[1]);
  state = cfg.rho * rotated + cfg.noise_std * Eigen::Vector2d(rng.normal(), rng.normal());
}

}  // namespace

MatrixXd gen_oscillator(int n_items, int n_steps, const OscillatorConfig& cfg,
                        std::uint64_t seed) {
  if (n_items <= 0 || n_steps <= 0) throw std::invalid_argument("gen_oscillator: bad shape");
  Rng rng(seed);
  MatrixXd z(n_items, n_steps);
  for (int n = 0; n < n_items; ++n) {
    const double phase = rng.uniform() * 2.0 * M_PI;
    Eigen::Vector2d state(std::cos(phase), std::sin(phase));
    for (int t = 0; t < n_steps; ++t) {
      z(n, t) = state[0];
      advance_oscillator(state, cfg, rng);
    }
  }
  return z;
}

SequenceDataset gen_textured_ball(const TexturedBallConfig& cfg, std::uint64_t seed) {
  if (cfg.pixels <= 0 || cfg.component_var <= 0.0 || cfg.component_var >= 1.0)
    throw std::invalid_argument("gen_textured_ball: need pixels > 0 and component_var in (0,1)");
  SequenceDataset out;
  out.z_true = gen_oscillator(cfg.items, cfg.steps, cfg.oscillator, seed);
  out.times = VectorXd::LinSpaced(cfg.steps, 0.0, cfg.steps - 1.0);

  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  // fixed random projection that turns (latent, pixel) into a mixture weight
  const VectorXd proj = 2.5 * rng.normal_vec(cfg.pixels);
  const VectorXd bias = rng.normal_vec(cfg.pixels);
  const double c = std::sqrt(1.0 - cfg.component_var);
  const double sd = std::sqrt(cfg.component_var);

  out.obs.resize(cfg.items);
  for (int n = 0; n < cfg.items; ++n) {
    MatrixXd frames(cfg.steps, cfg.pixels);
    for (int t = 0; t < cfg.steps; ++t) {
      const double z = out.z_true(n, t);
      for (int i = 0; i < cfg.pixels; ++i) {
        const double w = std::clamp(sigmoid(proj[i] * z + bias[i]), 0.03, 0.97);
        // component positions solve w*a + (1-w)*b = 0 and w*a^2 + (1-w)*b^2 = 1 - var
        const double a = c * std::sqrt((1.0 - w) / w);
        const double b = -c * std::sqrt(w / (1.0 - w));
        const double center = rng.uniform() < w ? a : b;
        frames(t, i) = center + sd * rng.normal();
      }
    }
    out.obs[n].push_back(std::move(frames));
  }
  return out;
}

double bump_center_column(const StructuredBallConfig& cfg, double z) {
  const double unit = (z - cfg.latent_lo) / (cfg.latent_hi - cfg.latent_lo);
  return std::clamp(unit, 0.0, 1.0) * (cfg.pixels - 1.0);
}

SequenceDataset gen_structured_ball(const StructuredBallConfig& cfg, std::uint64_t seed) {
  if (cfg.pixels <= 0) throw std::invalid_argument("gen_structured_ball: bad pixel count");
  SequenceDataset out;
  out.z_true = gen_oscillator(cfg.items, cfg.steps, cfg.oscillator, seed);
  out.times = VectorXd::LinSpaced(cfg.steps, 0.0, cfg.steps - 1.0);
  Rng rng(seed ^ 0xbf58476d1ce4e5b9ull);

  out.obs.resize(cfg.items);
  for (int n = 0; n < cfg.items; ++n) {
    MatrixXd frames(cfg.steps, cfg.pixels);
    for (int t = 0; t < cfg.steps; ++t) {
      const double center = bump_center_column(cfg, out.z_true(n, t));
      for (int i = 0; i < cfg.pixels; ++i) {
        const double stripe =
            cfg.stripe_amp * std::sin(2.0 * M_PI * (cfg.stripe_freq * i - cfg.stripe_speed * t));
        const double d = i - center;
        const double bump = cfg.bump_amp * std::exp(-d * d / (2.0 * cfg.bump_width * cfg.bump_width));
        frames(t, i) = stripe + bump + cfg.noise_std * rng.normal();
      }
    }
    out.obs[n].push_back(std::move(frames));
  }
  return out;
}

PeerPairs gen_peer_pairs(const MatrixXd& images, const std::vector<int>& labels,
                         std::uint64_t seed) {
  if (static_cast<std::size_t>(images.rows()) != labels.size() || labels.empty())
    throw std::invalid_argument("gen_peer_pairs: images/labels mismatch");
  Rng rng(seed);
  std::map<int, std::vector<int>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(static_cast<int>(i));

  std::vector<std::pair<int, int>> pairs;
  PeerPairs out;
  for (auto& [cls, idx] : by_class) {
    rng.shuffle(idx);
    if (idx.size() % 2 != 0) {
      out.warnings.push_back("class " + std::to_string(cls) +
                             ": odd image count, dropping one image");
      idx.pop_back();
    }
    for (std::size_t i = 0; i + 1 < idx.size(); i += 2) pairs.emplace_back(idx[i], idx[i + 1]);
  }
  if (pairs.empty()) throw std::invalid_argument("gen_peer_pairs: no complete pairs");

  const Eigen::Index dim = images.cols();
  MatrixXd v0(static_cast<Eigen::Index>(pairs.size()), dim);
  MatrixXd v1(static_cast<Eigen::Index>(pairs.size()), dim);
  out.data.labels.resize(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    v0.row(static_cast<Eigen::Index>(p)) = images.row(pairs[p].first);
    v1.row(static_cast<Eigen::Index>(p)) = images.row(pairs[p].second);
    out.data.labels[p] = labels[pairs[p].first];
  }
  out.data.views = {std::move(v0), std::move(v1)};
  return out;
}

LabeledImages gen_synthetic_digits(int n_classes, int per_class, int dim, double noise_std,
                                   std::uint64_t seed) {
  if (n_classes <= 0 || per_class <= 0 || dim <= 0)
    throw std::invalid_argument("gen_synthetic_digits: bad shape");
  Rng rng(seed);
  // smooth class templates: a few random low-frequency harmonics, unit power
  MatrixXd templates(n_classes, dim);
  for (int k = 0; k < n_classes; ++k) {
    VectorXd t = VectorXd::Zero(dim);
    for (int f = 1; f <= 4; ++f) {
      const double amp = rng.normal();
      const double phase = rng.uniform() * 2.0 * M_PI;
      for (int i = 0; i < dim; ++i) t[i] += amp * std::sin(2.0 * M_PI * f * i / dim + phase);
    }
    t.array() -= t.mean();
    templates.row(k) = t / std::max(1e-12, std::sqrt(t.squaredNorm() / dim));
  }
  LabeledImages out;
  out.images.resize(static_cast<Eigen::Index>(n_classes) * per_class, dim);
  out.labels.resize(static_cast<std::size_t>(n_classes) * per_class);
  Eigen::Index row = 0;
  for (int k = 0; k < n_classes; ++k) {
    for (int s = 0; s < per_class; ++s, ++row) {
      out.images.row(row) = templates.row(k) + noise_std * rng.normal_vec(dim).transpose();
      out.labels[static_cast<std::size_t>(row)] = k;
    }
  }
  return out;
}

TextureCorpus gen_texture_corpus(const TextureCorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.n_textures < 2 || cfg.grid <= 0 || cfg.patch_side <= 0)
    throw std::invalid_argument("gen_texture_corpus: bad config");
  Rng rng(seed);
  const int side = cfg.patch_side;
  const int dim = side * side;

  // distinct mean patterns: gratings at texture-specific orientation/frequency
  std::vector<VectorXd> patterns;
  for (int k = 0; k < cfg.n_textures; ++k) {
    VectorXd pat(dim);
    const double theta = M_PI * k / cfg.n_textures;
    const double freq = 0.25 + 0.08 * k;
    for (int u = 0; u < side; ++u)
      for (int v = 0; v < side; ++v)
        pat[u * side + v] =
            std::sin(2.0 * M_PI * freq * (u * std::cos(theta) + v * std::sin(theta)));
    patterns.push_back(pat);
  }

  TextureCorpus out;
  out.patch_side = side;
  std::gamma_distribution<double> gamma(cfg.mix_alpha, 1.0);
  for (int img = 0; img < cfg.images; ++img) {
    // per-image texture proportions from a symmetric Dirichlet
    VectorXd omega(cfg.n_textures);
    for (int k = 0; k < cfg.n_textures; ++k) omega[k] = std::max(1e-12, gamma(rng.engine()));
    omega /= omega.sum();

    MatrixXd image(cfg.grid * side, cfg.grid * side);
    std::vector<int> labels;
    for (int gi = 0; gi < cfg.grid; ++gi) {
      for (int gj = 0; gj < cfg.grid; ++gj) {
        double u = rng.uniform();
        int z = 0;
        while (z + 1 < cfg.n_textures && u >= omega[z]) {
          u -= omega[z];
          ++z;
        }
        labels.push_back(z);
        for (int pu = 0; pu < side; ++pu)
          for (int pv = 0; pv < side; ++pv)
            image(gi * side + pu, gj * side + pv) =
                patterns[z][pu * side + pv] + cfg.noise_std * rng.normal();
      }
    }
    out.images.push_back(std::move(image));
    out.patch_labels.push_back(std::move(labels));
  }
  return out;
}

namespace {

std::uint32_t read_be_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
         std::uint32_t(b[3]);
}

}  // namespace

LabeledImages load_idx_images(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_idx_images: cannot open " + path);
  if (read_be_u32(in) != 0x00000803u)
    throw std::runtime_error("load_idx_images: bad magic in " + path);
  const std::uint32_t n = read_be_u32(in);
  const std::uint32_t rows = read_be_u32(in);
  const std::uint32_t cols = read_be_u32(in);
  LabeledImages out;
  out.rows = static_cast<int>(rows);
  out.cols = static_cast<int>(cols);
  out.images.resize(n, static_cast<Eigen::Index>(rows) * cols);
  std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
  for (std::uint32_t i = 0; i < n; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!in) throw std::runtime_error("load_idx_images: truncated file " + path);
    for (std::size_t p = 0; p < buf.size(); ++p)
      out.images(i, static_cast<Eigen::Index>(p)) = buf[p] / 255.0;
  }
  return out;
}

std::vector<int> load_idx_labels(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_idx_labels: cannot open " + path);
  if (read_be_u32(in) != 0x00000801u)
    throw std::runtime_error("load_idx_labels: bad magic in " + path);
  const std::uint32_t n = read_be_u32(in);
  std::vector<unsigned char> buf(n);
  in.read(reinterpret_cast<char*>(buf.data()), n);
  if (!in) throw std::runtime_error("load_idx_labels: truncated file " + path);
  return std::vector<int>(buf.begin(), buf.end());
}

MatrixXd read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P5") throw std::runtime_error("read_pgm: expected binary P5 in " + path);
  const auto next_int = [&in, &path]() {
    // skips whitespace and '#' comment lines
    while (true) {
      int c = in.peek();
      if (c == '#') {
        std::string line;
        std::getline(in, line);
      } else if (std::isspace(c)) {
        in.get();
      } else {
        break;
      }
    }
    long v = -1;
    in >> v;
    if (!in || v < 0) throw std::runtime_error("read_pgm: malformed header in " + path);
    return v;
  };
  const long width = next_int();
  const long height = next_int();
  const long maxval = next_int();
  if (maxval <= 0 || maxval > 255)
    throw std::runtime_error("read_pgm: only 8-bit maxval supported in " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> buf(static_cast<std::size_t>(width) * height);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) throw std::runtime_error("read_pgm: truncated pixel data in " + path);
  MatrixXd img(height, width);
  for (long r = 0; r < height; ++r)
    for (long c = 0; c < width; ++c)
      img(r, c) = buf[static_cast<std::size_t>(r) * width + c] / double(maxval);
  return img;
}

namespace {

constexpr std::uint32_t kRpmdVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void save_rpmd(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_rpmd: cannot open " + path);
  out.write("RPMD", 4);
  write_u32(out, kRpmdVersion);
  write_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& arr : arrays) {
    std::uint64_t total = 1;
    for (auto d : arr.dims) total *= d;
    if (total != static_cast<std::uint64_t>(arr.data.size()))
      throw std::invalid_argument("save_rpmd: dims do not match data size for " + arr.name);
    write_u32(out, static_cast<std::uint32_t>(arr.name.size()));
    out.write(arr.name.data(), static_cast<std::streamsize>(arr.name.size()));
    write_u32(out, static_cast<std::uint32_t>(arr.dims.size()));
    for (auto d : arr.dims) write_u64(out, d);
    out.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_rpmd: write failed for " + path);
}

std::vector<NamedArray> load_rpmd(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_rpmd: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RPMD", 4) != 0)
    throw std::runtime_error("load_rpmd: bad magic in " + path);
  if (read_u32(in) != kRpmdVersion) throw std::runtime_error("load_rpmd: unsupported version");
  const std::uint32_t count = read_u32(in);
  std::vector<NamedArray> arrays;
  for (std::uint32_t a = 0; a < count; ++a) {
    NamedArray arr;
    const std::uint32_t name_len = read_u32(in);
    arr.name.resize(name_len);
    in.read(arr.name.data(), name_len);
    const std::uint32_t rank = read_u32(in);
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      arr.dims.push_back(read_u64(in));
      total *= arr.dims.back();
    }
    arr.data.resize(static_cast<Eigen::Index>(total));
    in.read(reinterpret_cast<char*>(arr.data.data()),
            static_cast<std::streamsize>(total * sizeof(double)));
    if (!in) throw std::runtime_error("load_rpmd: truncated file " + path);
    arrays.push_back(std::move(arr));
  }
  return arrays;
}

}  // namespace rpm::datagen
