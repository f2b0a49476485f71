#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>

#include "oracles.hpp"
#include "rpm/nets.hpp"

using namespace rpm;
using namespace rpm::nets;

TEST_CASE("zero-weight heads emit the documented parameters") {
  Rng rng(1);
  Net cat = make_mlp(4, {8}, HeadKind::CategoricalLogits, 3, rng);
  for (auto& layer : cat.layers) {
    auto& d = std::get<DenseLayer>(layer);
    d.W.setZero();
    d.b.setZero();
  }
  const auto logits = forward_categorical(cat, VectorXd::Ones(4));
  CHECK(logits.logits.cwiseAbs().maxCoeff() == 0.0);

  Net gauss = make_mlp(4, {8}, HeadKind::GaussianNatural, 2, rng);
  for (auto& layer : gauss.layers) {
    auto& d = std::get<DenseLayer>(layer);
    d.W.setZero();
    d.b.setZero();
  }
  const auto eta = forward_gaussian(gauss, VectorXd::Ones(4));
  CHECK(eta.h.cwiseAbs().maxCoeff() == 0.0);
  CHECK((eta.J + 0.5e-4 * MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-16);
  // the emitted parameter is always valid
  expfam::validate(eta);
}

TEST_CASE("gaussian head is valid for random weights") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    Net net = make_mlp(5, {16, 16}, HeadKind::GaussianNatural, 3, rng);
    const auto eta = forward_gaussian(net, rng.normal_vec(5) * 2.0);
    expfam::validate(eta);
  }
}

TEST_CASE("backward matches finite differences") {
  Rng rng(3);
  SUBCASE("categorical head") {
    Net net = make_mlp(6, {10, 7}, HeadKind::CategoricalLogits, 4, rng);
    CHECK(grad_check(net, rng.normal_vec(6), rng) < 1e-4);
  }
  SUBCASE("gaussian head") {
    Net net = make_mlp(6, {10, 7}, HeadKind::GaussianNatural, 2, rng);
    CHECK(grad_check(net, rng.normal_vec(6), rng) < 1e-4);
  }
  SUBCASE("conv front end") {
    Net net;
    ConvLayer conv;
    conv.in_c = 1;
    conv.in_h = 5;
    conv.in_w = 5;
    conv.out_c = 2;
    conv.kh = 3;
    conv.kw = 3;
    conv.relu = true;
    for (int i = 0; i < 2; ++i) conv.kernels.push_back(rng.normal_mat(3, 3) * 0.4);
    conv.b = rng.normal_vec(2) * 0.1;
    net.layers.emplace_back(std::move(conv));
    DenseLayer dense;
    dense.W = rng.normal_mat(3, 2 * 3 * 3) * 0.3;
    dense.b = VectorXd::Zero(3);
    net.layers.emplace_back(std::move(dense));
    net.head = HeadKind::CategoricalLogits;
    net.head_dim = 3;
    CHECK(grad_check(net, rng.normal_vec(25), rng) < 1e-4);
  }
}

TEST_CASE("conv forward against a hand-built reference") {
  ConvLayer conv;
  conv.in_c = 1;
  conv.in_h = 3;
  conv.in_w = 3;
  conv.out_c = 1;
  conv.kh = 2;
  conv.kw = 2;
  conv.kernels.push_back(MatrixXd::Ones(2, 2));
  conv.b = VectorXd::Zero(1);
  Net net;
  net.layers.emplace_back(conv);
  net.head = HeadKind::CategoricalLogits;
  net.head_dim = 4;
  VectorXd x(9);
  x << 1, 2, 3, 4, 5, 6, 7, 8, 9;  // row-major 3x3
  const VectorXd out = forward_raw(net, x);
  // each output = sum of a 2x2 window
  CHECK(out[0] == doctest::Approx(1 + 2 + 4 + 5));
  CHECK(out[1] == doctest::Approx(2 + 3 + 5 + 6));
  CHECK(out[2] == doctest::Approx(4 + 5 + 7 + 8));
  CHECK(out[3] == doctest::Approx(5 + 6 + 8 + 9));
}

TEST_CASE("adam converges on a quadratic and starts at lr-sized steps") {
  Rng rng(4);
  Net net = make_mlp(1, {}, HeadKind::CategoricalLogits, 3, rng);
  auto& d = std::get<DenseLayer>(net.layers[0]);
  d.W.setZero();
  d.b.setZero();
  Grads grads = zero_grads(net);
  auto blocks = param_blocks(net, grads);
  AdamState adam;
  adam.lr = 0.05;
  adam.init(blocks);

  const VectorXd target = (VectorXd(3) << 1.0, -2.0, 0.5).finished();
  const VectorXd x = VectorXd::Ones(1);
  // first step has magnitude ~lr in each coordinate
  {
    grads.setZero();
    Workspace ws;
    const VectorXd raw = forward_raw(net, x, &ws);
    backward_raw(net, ws, raw - target, &grads);
    const VectorXd before = std::get<DenseLayer>(net.layers[0]).b;
    adam.step(blocks);
    const VectorXd after = std::get<DenseLayer>(net.layers[0]).b;
    for (int i = 0; i < 3; ++i)
      CHECK(std::abs(std::abs(after[i] - before[i]) - adam.lr) < 1e-6);
  }
  for (int it = 0; it < 3000; ++it) {
    grads.setZero();
    Workspace ws;
    const VectorXd raw = forward_raw(net, x, &ws);
    backward_raw(net, ws, raw - target, &grads);
    adam.step(blocks);
  }
  CHECK((forward_raw(net, x) - target).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("non-finite gradients abort with the block name") {
  Rng rng(5);
  Net net = make_mlp(2, {}, HeadKind::CategoricalLogits, 2, rng);
  Grads grads = zero_grads(net);
  auto blocks = param_blocks(net, grads);
  AdamState adam;
  adam.init(blocks);
  std::get<DenseLayer>(grads.layers[0]).W(0, 0) = std::nan("");
  CHECK_THROWS_WITH_AS(adam.step(blocks), doctest::Contains("layer0.W"), std::runtime_error);
}

TEST_CASE("checkpoint round trip is bitwise") {
  Rng rng(6);
  Net net = make_mlp(7, {5, 4}, HeadKind::GaussianNatural, 2, rng);
  const std::string path = "ckpt_roundtrip.rpmw";
  save_checkpoint(net, path);
  Net back = load_checkpoint(path);
  REQUIRE(back.layers.size() == net.layers.size());
  CHECK(back.head == net.head);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& a = std::get<DenseLayer>(net.layers[i]);
    const auto& b = std::get<DenseLayer>(back.layers[i]);
    CHECK(a.W == b.W);  // exact: doubles survive the file unchanged
    CHECK(a.b == b.b);
    CHECK(a.relu == b.relu);
  }
  // resave must produce identical bytes
  const std::string path2 = "ckpt_roundtrip2.rpmw";
  save_checkpoint(back, path2);
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  const std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
  const std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(bytes1 == bytes2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const std::string path = "ckpt_corrupt.rpmw";
  {
    std::ofstream out(path, std::ios::binary);
    out.write("NOPE", 4);
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_checkpoint("does_not_exist.rpmw"), std::runtime_error);
}

TEST_CASE("seeded construction is deterministic") {
  Rng a(42), b(42);
  Net na = make_mlp(4, {6}, HeadKind::CategoricalLogits, 3, a);
  Net nb = make_mlp(4, {6}, HeadKind::CategoricalLogits, 3, b);
  for (std::size_t i = 0; i < na.layers.size(); ++i) {
    CHECK(std::get<DenseLayer>(na.layers[i]).W == std::get<DenseLayer>(nb.layers[i]).W);
  }
}
