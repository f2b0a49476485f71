#include "rpm/nets.hpp"

#include <bit>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace rpm::nets {

namespace {

constexpr double kPrecisionFloor = 1e-4;

double glorot_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / (fan_in + fan_out));
}

MatrixXd uniform_mat(Rng& rng, int rows, int cols, double bound) {
  MatrixXd m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = (2.0 * rng.uniform() - 1.0) * bound;
  return m;
}

int layer_input_dim(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return static_cast<int>(d->W.cols());
  const auto& c = std::get<ConvLayer>(layer);
  return c.in_c * c.in_h * c.in_w;
}

int layer_output_dim(const Layer& layer) {
  if (const auto* d = std::get_if<DenseLayer>(&layer)) return static_cast<int>(d->W.rows());
  const auto& c = std::get<ConvLayer>(layer);
  return c.out_c * c.out_h() * c.out_w();
}

VectorXd conv_forward(const ConvLayer& c, const VectorXd& x) {
  const int oh = c.out_h(), ow = c.out_w();
  VectorXd out(c.out_c * oh * ow);
  for (int oc = 0; oc < c.out_c; ++oc) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        double acc = c.b[oc];
        for (int ic = 0; ic < c.in_c; ++ic) {
          const auto& ker = c.kernels[oc * c.in_c + ic];
          const double* plane = x.data() + ic * c.in_h * c.in_w;
          for (int u = 0; u < c.kh; ++u)
            for (int v = 0; v < c.kw; ++v)
              acc += ker(u, v) * plane[(i + u) * c.in_w + (j + v)];
        }
        out[oc * oh * ow + i * ow + j] = acc;
      }
    }
  }
  return out;
}

void conv_backward(const ConvLayer& c, const VectorXd& x, const VectorXd& gout, ConvLayer* gc,
                   VectorXd* gin) {
  const int oh = c.out_h(), ow = c.out_w();
  gin->setZero(x.size());
  for (int oc = 0; oc < c.out_c; ++oc) {
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const double g = gout[oc * oh * ow + i * ow + j];
        gc->b[oc] += g;
        for (int ic = 0; ic < c.in_c; ++ic) {
          auto& gker = gc->kernels[oc * c.in_c + ic];
          const auto& ker = c.kernels[oc * c.in_c + ic];
          const double* plane = x.data() + ic * c.in_h * c.in_w;
          double* gplane = gin->data() + ic * c.in_h * c.in_w;
          for (int u = 0; u < c.kh; ++u) {
            for (int v = 0; v < c.kw; ++v) {
              gker(u, v) += g * plane[(i + u) * c.in_w + (j + v)];
              gplane[(i + u) * c.in_w + (j + v)] += g * ker(u, v);
            }
          }
        }
      }
    }
  }
}

// unpack raw tail into lower-triangular L (column-packed order)
MatrixXd unpack_lower(const VectorXd& raw, int k) {
  MatrixXd L = MatrixXd::Zero(k, k);
  int idx = k;
  for (int j = 0; j < k; ++j)
    for (int i = j; i < k; ++i) L(i, j) = raw[idx++];
  return L;
}

}  // namespace

Net make_mlp(int input_dim, const std::vector<int>& hidden, HeadKind head, int head_dim,
             Rng& rng) {
  if (input_dim <= 0 || head_dim <= 0) throw std::invalid_argument("make_mlp: bad dimensions");
  Net net;
  net.head = head;
  net.head_dim = head_dim;
  int prev = input_dim;
  for (int width : hidden) {
    if (width <= 0) throw std::invalid_argument("make_mlp: bad hidden width");
    DenseLayer layer;
    layer.W = uniform_mat(rng, width, prev, glorot_bound(prev, width));
    layer.b = VectorXd::Zero(width);
    layer.relu = true;
    net.layers.emplace_back(std::move(layer));
    prev = width;
  }
  DenseLayer out;
  const int out_dim = net.raw_output_dim();
  out.W = uniform_mat(rng, out_dim, prev, glorot_bound(prev, out_dim));
  out.b = VectorXd::Zero(out_dim);
  out.relu = false;
  net.layers.emplace_back(std::move(out));
  return net;
}

VectorXd forward_raw(const Net& net, const VectorXd& x, Workspace* ws) {
  if (net.layers.empty()) throw std::invalid_argument("forward_raw: empty net");
  if (x.size() != layer_input_dim(net.layers.front()))
    throw std::invalid_argument("forward_raw: input dimension mismatch");
  if (ws) {
    ws->input = x;
    ws->pre.clear();
    ws->post.clear();
  }
  VectorXd cur = x;
  for (const auto& layer : net.layers) {
    VectorXd pre;
    bool relu;
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      pre = d->W * cur + d->b;
      relu = d->relu;
    } else {
      const auto& c = std::get<ConvLayer>(layer);
      pre = conv_forward(c, cur);
      relu = c.relu;
    }
    VectorXd post = relu ? pre.cwiseMax(0.0) : pre;
    if (ws) {
      ws->pre.push_back(pre);
      ws->post.push_back(post);
    }
    cur = std::move(post);
  }
  return cur;
}

CategoricalNat forward_categorical(const Net& net, const VectorXd& x, Workspace* ws) {
  if (net.head != HeadKind::CategoricalLogits)
    throw std::invalid_argument("forward_categorical: head mismatch");
  return {forward_raw(net, x, ws)};
}

GaussianNat forward_gaussian(const Net& net, const VectorXd& x, Workspace* ws) {
  if (net.head != HeadKind::GaussianNatural)
    throw std::invalid_argument("forward_gaussian: head mismatch");
  const VectorXd raw = forward_raw(net, x, ws);
  const int k = net.head_dim;
  const MatrixXd L = unpack_lower(raw, k);
  const MatrixXd P = L * L.transpose() + kPrecisionFloor * MatrixXd::Identity(k, k);
  GaussianNat out;
  out.h = P * raw.head(k);
  out.J = -0.5 * P;
  return out;
}

void Grads::setZero() {
  for (auto& layer : layers) {
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      d->W.setZero();
      d->b.setZero();
    } else {
      auto& c = std::get<ConvLayer>(layer);
      for (auto& ker : c.kernels) ker.setZero();
      c.b.setZero();
    }
  }
}

void Grads::add(const Grads& other) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (auto* d = std::get_if<DenseLayer>(&layers[i])) {
      const auto& o = std::get<DenseLayer>(other.layers[i]);
      d->W += o.W;
      d->b += o.b;
    } else {
      auto& c = std::get<ConvLayer>(layers[i]);
      const auto& o = std::get<ConvLayer>(other.layers[i]);
      for (std::size_t kidx = 0; kidx < c.kernels.size(); ++kidx) c.kernels[kidx] += o.kernels[kidx];
      c.b += o.b;
    }
  }
}

Grads zero_grads(const Net& net) {
  Grads g;
  g.layers = net.layers;
  g.setZero();
  return g;
}

void backward_raw(const Net& net, const Workspace& ws, const VectorXd& grad_raw, Grads* grads) {
  if (ws.post.size() != net.layers.size())
    throw std::invalid_argument("backward_raw: workspace does not match net");
  VectorXd g = grad_raw;
  for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
    const VectorXd& in = li == 0 ? ws.input : ws.post[li - 1];
    const auto& layer = net.layers[li];
    const bool relu = std::holds_alternative<DenseLayer>(layer)
                          ? std::get<DenseLayer>(layer).relu
                          : std::get<ConvLayer>(layer).relu;
    if (relu) {
      const VectorXd& pre = ws.pre[li];
      for (Eigen::Index i = 0; i < g.size(); ++i)
        if (pre[i] <= 0.0) g[i] = 0.0;
    }
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      auto& gd = std::get<DenseLayer>(grads->layers[li]);
      gd.W += g * in.transpose();
      gd.b += g;
      g = d->W.transpose() * g;
    } else {
      const auto& c = std::get<ConvLayer>(layer);
      auto& gc = std::get<ConvLayer>(grads->layers[li]);
      VectorXd gin;
      conv_backward(c, in, g, &gc, &gin);
      g = std::move(gin);
    }
  }
}

VectorXd head_backward_categorical(const VectorXd& grad_logits) { return grad_logits; }

VectorXd head_backward_gaussian(const Net& net, const VectorXd& raw, const VectorXd& gh,
                                const MatrixXd& gJ) {
  const int k = net.head_dim;
  const MatrixXd L = unpack_lower(raw, k);
  const MatrixXd P = L * L.transpose() + kPrecisionFloor * MatrixXd::Identity(k, k);
  const VectorXd mean = raw.head(k);
  // h = P mean, J = -P/2
  const MatrixXd gP = gh * mean.transpose() - 0.5 * symmetrized(gJ);
  const MatrixXd gL = (gP + gP.transpose()) * L;
  VectorXd out(raw.size());
  out.head(k) = P * gh;
  int idx = k;
  for (int j = 0; j < k; ++j)
    for (int i = j; i < k; ++i) out[idx++] = gL(i, j);
  return out;
}

std::vector<ParamBlock> param_blocks(Net& net, Grads& grads, const std::string& prefix) {
  std::vector<ParamBlock> blocks;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const std::string base = prefix + ".layer" + std::to_string(li);
    if (auto* d = std::get_if<DenseLayer>(&net.layers[li])) {
      auto& gd = std::get<DenseLayer>(grads.layers[li]);
      blocks.push_back({d->W.data(), gd.W.data(), d->W.size(), base + ".W"});
      blocks.push_back({d->b.data(), gd.b.data(), d->b.size(), base + ".b"});
    } else {
      auto& c = std::get<ConvLayer>(net.layers[li]);
      auto& gc = std::get<ConvLayer>(grads.layers[li]);
      for (std::size_t kidx = 0; kidx < c.kernels.size(); ++kidx)
        blocks.push_back({c.kernels[kidx].data(), gc.kernels[kidx].data(), c.kernels[kidx].size(),
                          base + ".k" + std::to_string(kidx)});
      blocks.push_back({c.b.data(), gc.b.data(), c.b.size(), base + ".b"});
    }
  }
  return blocks;
}

void AdamState::init(const std::vector<ParamBlock>& blocks) {
  step_count = 0;
  m.clear();
  v.clear();
  for (const auto& blk : blocks) {
    m.push_back(VectorXd::Zero(blk.size));
    v.push_back(VectorXd::Zero(blk.size));
  }
}

void AdamState::step(std::vector<ParamBlock>& blocks) {
  if (m.size() != blocks.size()) throw std::invalid_argument("adam: state/block mismatch");
  ++step_count;
  const double c1 = 1.0 - std::pow(beta1, step_count);
  const double c2 = 1.0 - std::pow(beta2, step_count);
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    auto& blk = blocks[bi];
    for (Eigen::Index i = 0; i < blk.size; ++i) {
      const double g = blk.grad[i];
      if (!std::isfinite(g))
        throw std::runtime_error("adam: non-finite gradient in block " + blk.name);
      m[bi][i] = beta1 * m[bi][i] + (1.0 - beta1) * g;
      v[bi][i] = beta2 * v[bi][i] + (1.0 - beta2) * g * g;
      const double mhat = m[bi][i] / c1;
      const double vhat = v[bi][i] / c2;
      blk.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

double grad_check(Net& net, const VectorXd& x, Rng& rng) {
  // scalar probe: fixed random linear functional of the emitted parameters
  const int k = net.head_dim;
  const VectorXd probe_h = rng.normal_vec(k);
  const MatrixXd probe_J = rng.normal_mat(k, k);
  const VectorXd probe_logits = rng.normal_vec(k);

  const auto loss = [&](const Net& n) {
    if (n.head == HeadKind::CategoricalLogits) {
      return probe_logits.dot(forward_raw(n, x));
    }
    const GaussianNat eta = forward_gaussian(n, x);
    return probe_h.dot(eta.h) + probe_J.cwiseProduct(eta.J).sum();
  };

  Grads grads = zero_grads(net);
  Workspace ws;
  if (net.head == HeadKind::CategoricalLogits) {
    forward_raw(net, x, &ws);
    backward_raw(net, ws, head_backward_categorical(probe_logits), &grads);
  } else {
    const VectorXd raw = forward_raw(net, x, &ws);
    backward_raw(net, ws, head_backward_gaussian(net, raw, probe_h, probe_J), &grads);
  }

  auto blocks = param_blocks(net, grads);
  double worst = 0.0;
  const double step = 1e-5;
  for (auto& blk : blocks) {
    for (Eigen::Index i = 0; i < blk.size; ++i) {
      const double orig = blk.value[i];
      blk.value[i] = orig + step;
      const double up = loss(net);
      blk.value[i] = orig - step;
      const double dn = loss(net);
      blk.value[i] = orig;
      const double fd = (up - dn) / (2.0 * step);
      const double err = std::abs(fd - blk.grad[i]) / std::max(1e-4, std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

namespace {

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

void write_f64(std::ostream& out, const double* data, std::size_t n) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

void read_f64(std::istream& in, double* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(double)));
}

// matrices are stored row-major
void write_mat(std::ostream& out, const MatrixXd& m) {
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  write_f64(out, rm.data(), static_cast<std::size_t>(rm.size()));
}

MatrixXd read_mat(std::istream& in, Eigen::Index rows, Eigen::Index cols) {
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
  read_f64(in, rm.data(), static_cast<std::size_t>(rm.size()));
  return rm;
}

constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const Net& net, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out.write("RPMW", 4);
  write_u32(out, kCheckpointVersion);
  write_u32(out, static_cast<std::uint32_t>(net.layers.size()));
  write_u32(out, net.head == HeadKind::CategoricalLogits ? 0u : 1u);
  write_u32(out, static_cast<std::uint32_t>(net.head_dim));
  for (const auto& layer : net.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      write_u32(out, 0);
      write_u32(out, d->relu ? 1 : 0);
      write_u32(out, static_cast<std::uint32_t>(d->W.rows()));
      write_u32(out, static_cast<std::uint32_t>(d->W.cols()));
      write_mat(out, d->W);
      write_f64(out, d->b.data(), static_cast<std::size_t>(d->b.size()));
    } else {
      const auto& c = std::get<ConvLayer>(layer);
      write_u32(out, 1);
      write_u32(out, c.relu ? 1 : 0);
      for (int v : {c.in_c, c.in_h, c.in_w, c.out_c, c.kh, c.kw})
        write_u32(out, static_cast<std::uint32_t>(v));
      for (const auto& ker : c.kernels) write_mat(out, ker);
      write_f64(out, c.b.data(), static_cast<std::size_t>(c.b.size()));
    }
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

Net load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RPMW", 4) != 0)
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("load_checkpoint: unsupported version");
  const std::uint32_t n_layers = read_u32(in);
  Net net;
  net.head = read_u32(in) == 0 ? HeadKind::CategoricalLogits : HeadKind::GaussianNatural;
  net.head_dim = static_cast<int>(read_u32(in));
  for (std::uint32_t li = 0; li < n_layers; ++li) {
    const std::uint32_t type = read_u32(in);
    const bool relu = read_u32(in) != 0;
    if (type == 0) {
      DenseLayer d;
      const auto rows = static_cast<Eigen::Index>(read_u32(in));
      const auto cols = static_cast<Eigen::Index>(read_u32(in));
      d.W = read_mat(in, rows, cols);
      d.b.resize(rows);
      read_f64(in, d.b.data(), static_cast<std::size_t>(rows));
      d.relu = relu;
      net.layers.emplace_back(std::move(d));
    } else if (type == 1) {
      ConvLayer c;
      c.in_c = static_cast<int>(read_u32(in));
      c.in_h = static_cast<int>(read_u32(in));
      c.in_w = static_cast<int>(read_u32(in));
      c.out_c = static_cast<int>(read_u32(in));
      c.kh = static_cast<int>(read_u32(in));
      c.kw = static_cast<int>(read_u32(in));
      c.relu = relu;
      for (int kidx = 0; kidx < c.out_c * c.in_c; ++kidx)
        c.kernels.push_back(read_mat(in, c.kh, c.kw));
      c.b.resize(c.out_c);
      read_f64(in, c.b.data(), static_cast<std::size_t>(c.out_c));
      net.layers.emplace_back(std::move(c));
    } else {
      throw std::runtime_error("load_checkpoint: unknown layer type");
    }
  }
  if (!in) throw std::runtime_error("load_checkpoint: truncated file " + path);
  return net;
}

}  // namespace rpm::nets
