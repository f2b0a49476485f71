#pragma once

#include <variant>

#include "rpm/expfam.hpp"

namespace rpm::nets {

using expfam::CategoricalNat;
using expfam::GaussianNat;

struct DenseLayer {
  MatrixXd W;  // out x in
  VectorXd b;
  bool relu = false;
};

/* Valid-padding, stride-1 convolution over channel-major flattened inputs.
   Kept behind the same layer interface as DenseLayer; the experiments use
   the flatten+MLP path. */
struct ConvLayer {
  int in_c = 1, in_h = 0, in_w = 0;
  int out_c = 1, kh = 1, kw = 1;
  std::vector<MatrixXd> kernels;  // [out_c * in_c], each kh x kw
  VectorXd b;                     // per output channel
  bool relu = false;

  int out_h() const { return in_h - kh + 1; }
  int out_w() const { return in_w - kw + 1; }
};

using Layer = std::variant<DenseLayer, ConvLayer>;

enum class HeadKind { CategoricalLogits, GaussianNatural };

/* Network body plus a weightless output head. The Gaussian head reads the
   raw output as (mean, packed lower-triangular L) and emits
   h = P mean, J = -P/2 with P = L L^T + 1e-4 I, so every parameter setting
   yields a valid natural parameter. */
struct Net {
  std::vector<Layer> layers;
  HeadKind head = HeadKind::CategoricalLogits;
  int head_dim = 0;  // K

  int raw_output_dim() const {
    return head == HeadKind::CategoricalLogits ? head_dim
                                               : head_dim + head_dim * (head_dim + 1) / 2;
  }
};

// Uniform +-sqrt(6 / (fan_in + fan_out)) initialisation throughout.
Net make_mlp(int input_dim, const std::vector<int>& hidden, HeadKind head, int head_dim, Rng& rng);

struct Workspace {
  VectorXd input;
  std::vector<VectorXd> pre;   // pre-activation per layer
  std::vector<VectorXd> post;  // post-activation per layer
};

VectorXd forward_raw(const Net& net, const VectorXd& x, Workspace* ws = nullptr);
CategoricalNat forward_categorical(const Net& net, const VectorXd& x, Workspace* ws = nullptr);
GaussianNat forward_gaussian(const Net& net, const VectorXd& x, Workspace* ws = nullptr);

struct Grads {
  std::vector<Layer> layers;  // same shapes as the net, holding gradients

  void setZero();
  void add(const Grads& other);
};

Grads zero_grads(const Net& net);

// Backward from d(loss)/d(raw output); the workspace must come from the
// matching forward call.
void backward_raw(const Net& net, const Workspace& ws, const VectorXd& grad_raw, Grads* grads);

// Head adjoints: map gradients w.r.t. emitted parameters back to raw outputs.
VectorXd head_backward_categorical(const VectorXd& grad_logits);
VectorXd head_backward_gaussian(const Net& net, const VectorXd& raw, const VectorXd& gh,
                                const MatrixXd& gJ);

// Flat views over every learnable scalar, paired net/grads.
struct ParamBlock {
  double* value;
  double* grad;
  Eigen::Index size;
  std::string name;
};

std::vector<ParamBlock> param_blocks(Net& net, Grads& grads, const std::string& prefix = "net");

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step_count = 0;
  std::vector<VectorXd> m, v;

  void init(const std::vector<ParamBlock>& blocks);
  // gradient-descent step on block->grad; pass the negated gradient to ascend
  void step(std::vector<ParamBlock>& blocks);
};

// Central-difference check of backward_raw + head adjoints against a fixed
// random linear functional of the emitted parameters. Returns max relative error.
double grad_check(Net& net, const VectorXd& x, Rng& rng);

// "RPMW" checkpoint: magic, version u32, layer count u32, then per-layer
// dims and row-major float64, little-endian.
void save_checkpoint(const Net& net, const std::string& path);
Net load_checkpoint(const std::string& path);

}  // namespace rpm::nets
