#include "rpm/eval.hpp"

#include <limits>

namespace rpm::eval {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// O(n^3) shortest augmenting path core; returns row->col.
std::vector<int> assign_min_cost(const MatrixXd& a) {
  const int n = static_cast<int>(a.rows());
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), kInf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] != 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

double assignment_cost(const MatrixXd& a, const std::vector<int>& perm) {
  double c = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) c += a(static_cast<int>(i), perm[i]);
  return c;
}

}  // namespace

Assignment hungarian(const MatrixXd& cost) {
  if (cost.rows() != cost.cols() || cost.rows() == 0)
    throw std::invalid_argument("hungarian: cost matrix must be square and non-empty");
  if (!cost.allFinite()) throw std::invalid_argument("hungarian: non-finite costs");
  const int n = static_cast<int>(cost.rows());
  const std::vector<int> initial = assign_min_cost(cost);
  const double best = assignment_cost(cost, initial);
  const double tol = 1e-9 * (1.0 + cost.cwiseAbs().maxCoeff());

  /* Tie-break pass: greedily fix each row to the smallest column index that
     still admits a completion at minimum cost, which yields the
     lexicographically smallest optimal permutation. */
  std::vector<int> fixed(n, -1);
  std::vector<bool> col_used(n, false);
  double fixed_cost = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < n; ++c) {
      if (col_used[c]) continue;
      const int rem = n - i - 1;
      double completion = 0.0;
      if (rem > 0) {
        MatrixXd sub(rem, rem);
        int cj = 0;
        std::vector<int> cols;
        for (int j = 0; j < n; ++j)
          if (!col_used[j] && j != c) cols.push_back(j);
        for (int r = 0; r < rem; ++r)
          for (cj = 0; cj < rem; ++cj) sub(r, cj) = cost(i + 1 + r, cols[cj]);
        completion = assignment_cost(sub, assign_min_cost(sub));
      }
      if (fixed_cost + cost(i, c) + completion <= best + tol) {
        fixed[i] = c;
        col_used[c] = true;
        fixed_cost += cost(i, c);
        break;
      }
    }
    if (fixed[i] < 0) throw std::runtime_error("hungarian: tie-break pass failed");
  }
  return {fixed, fixed_cost};
}

MatchedAccuracy matched_accuracy(const std::vector<int>& pred, const std::vector<int>& truth,
                                 int n_labels) {
  if (pred.size() != truth.size() || pred.empty())
    throw std::invalid_argument("matched_accuracy: label vectors must be non-empty, same length");
  MatrixXd counts = MatrixXd::Zero(n_labels, n_labels);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= n_labels || truth[i] < 0 || truth[i] >= n_labels)
      throw std::invalid_argument("matched_accuracy: label out of range");
    counts(pred[i], truth[i]) += 1.0;
  }
  const Assignment a = hungarian(-counts);  // maximize matches
  double hits = 0.0;
  for (int k = 0; k < n_labels; ++k) hits += counts(k, a.row_to_col[k]);
  return {hits / static_cast<double>(pred.size()), a.row_to_col};
}

double nmse_regression(const MatrixXd& inferred, const MatrixXd& truth) {
  if (inferred.rows() != truth.rows() || inferred.rows() == 0)
    throw std::invalid_argument("nmse_regression: row mismatch");
  const Eigen::Index rows = inferred.rows();
  MatrixXd design(rows, inferred.cols() + 1);
  design.leftCols(inferred.cols()) = inferred;
  design.col(inferred.cols()).setOnes();
  const auto qr = design.colPivHouseholderQr();
  double total = 0.0;
  for (Eigen::Index d = 0; d < truth.cols(); ++d) {
    const VectorXd y = truth.col(d);
    const double mean = y.mean();
    const double ss_tot = (y.array() - mean).square().sum();
    if (ss_tot <= 0.0)
      throw std::invalid_argument("nmse_regression: ground-truth dimension is constant");
    const VectorXd beta = qr.solve(y);
    const double ss_res = (y - design * beta).squaredNorm();
    total += ss_res / ss_tot;
  }
  return total / static_cast<double>(truth.cols());
}

double mean_posterior_entropy(const MatrixXd& q) {
  if (q.rows() == 0) throw std::invalid_argument("mean_posterior_entropy: empty");
  double total = 0.0;
  for (Eigen::Index i = 0; i < q.rows(); ++i) {
    double h = 0.0;
    for (Eigen::Index k = 0; k < q.cols(); ++k) {
      const double p = q(i, k);
      if (p < -1e-12 || p > 1.0 + 1e-12)
        throw std::invalid_argument("mean_posterior_entropy: rows must be distributions");
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(q.rows());
}

}  // namespace rpm::eval
