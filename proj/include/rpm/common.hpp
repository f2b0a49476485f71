#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace rpm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Max-shifted log-sum-exp; the only sanctioned route for log/exp reductions.
inline double log_sum_exp(const VectorXd& a) {
  if (a.size() == 0) throw std::invalid_argument("log_sum_exp: empty input");
  const double mx = a.maxCoeff();
  if (!std::isfinite(mx)) return mx;  // all -inf stays -inf
  double s = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) s += std::exp(a[i] - mx);
  return mx + std::log(s);
}

inline VectorXd softmax(const VectorXd& a) {
  const double lz = log_sum_exp(a);
  return (a.array() - lz).exp().matrix();
}

inline MatrixXd symmetrized(const MatrixXd& a) { return 0.5 * (a + a.transpose()); }

inline double softplus(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
inline double inv_softplus(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/* Cholesky for SPD solves. Tries the matrix as given, then adds jitter
   1e-8 * I doubling up to 1e-4 before giving up, so degradation under
   near-singular input is deterministic. */
inline Eigen::LLT<MatrixXd> chol_spd(const MatrixXd& a, double* jitter_used = nullptr) {
  const MatrixXd sym = symmetrized(a);
  Eigen::LLT<MatrixXd> llt(sym);
  if (llt.info() == Eigen::Success) {
    if (jitter_used) *jitter_used = 0.0;
    return llt;
  }
  for (double jitter = 1e-8; jitter <= 1e-4; jitter *= 2.0) {
    MatrixXd bumped = sym;
    bumped.diagonal().array() += jitter;
    llt.compute(bumped);
    if (llt.info() == Eigen::Success) {
      if (jitter_used) *jitter_used = jitter;
      return llt;
    }
  }
  throw std::runtime_error("chol_spd: matrix not positive definite within jitter budget");
}

inline double log_det_from_llt(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
}

inline MatrixXd kron(const MatrixXd& a, const MatrixXd& b) {
  MatrixXd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

// Column-major flatten, matching the vec() convention used for sufficient stats.
inline VectorXd vec(const MatrixXd& a) {
  return Eigen::Map<const VectorXd>(a.data(), a.size());
}

inline MatrixXd unvec(const VectorXd& v, Eigen::Index rows, Eigen::Index cols) {
  if (v.size() != rows * cols) throw std::invalid_argument("unvec: size mismatch");
  return Eigen::Map<const MatrixXd>(v.data(), rows, cols);
}

// Seeded RNG wrapper so every sampling site goes through one deterministic stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  double normal() { return normal_(gen_); }
  double uniform() { return uniform_(gen_); }
  // inclusive bounds
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(gen_);
  }

  VectorXd normal_vec(Eigen::Index n) {
    VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = normal();
    return v;
  }

  MatrixXd normal_mat(Eigen::Index r, Eigen::Index c) {
    MatrixXd m(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) m(i, j) = normal();
    return m;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Thread cap: RPM_THREADS, else hardware concurrency.
inline int thread_count() {
  if (const char* env = std::getenv("RPM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

/* Runs fn(i) for i in [0, n). Work items must write to disjoint slots;
   callers do any reduction serially afterwards so results never depend on
   the thread count. */
template <typename Fn>
void parallel_for(Eigen::Index n, Fn&& fn) {
  const int workers = std::min<Eigen::Index>(thread_count(), n);
  if (workers <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  std::atomic<Eigen::Index> next{0};
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const Eigen::Index i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
    });
  }
  for (auto& t : pool) t.join();
}

/* Digamma on x > 0: recurrence lifts the argument to >= 6, then the
   asymptotic series through x^-14. Absolute error stays below 1e-12 on
   [1e-3, 1e6]. */
inline double digamma(double x) {
  if (!(x > 0.0)) throw std::invalid_argument("digamma: requires x > 0");
  double acc = 0.0;
  while (x < 6.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  double series = -1.0 / 12.0;
  series = series * inv2 + 691.0 / 32760.0;
  series = series * inv2 - 1.0 / 132.0;
  series = series * inv2 + 1.0 / 240.0;
  series = series * inv2 - 1.0 / 252.0;
  series = series * inv2 + 1.0 / 120.0;
  series = series * inv2 - 1.0 / 12.0;
  return acc + std::log(x) - 0.5 * inv + series * inv2;
}

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace rpm
