#include "modprobe/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>

#include "modprobe/errors.hpp"
#include "modprobe/rng.hpp"

namespace modprobe {
namespace {

// Householder reduction of a symmetric matrix to tridiagonal form, with the
// orthogonal transform accumulated in z. Classic EISPACK tred2 scheme.
void tred2(Matrix& z, std::vector<double>& d, std::vector<double>& e) {
  const int n = static_cast<int>(z.rows);
  for (int j = 0; j < n; ++j) d[j] = z(n - 1, j);

  for (int i = n - 1; i > 0; --i) {
    double scale = 0.0, h = 0.0;
    for (int k = 0; k < i; ++k) scale += std::abs(d[k]);
    if (scale == 0.0) {
      e[i] = d[i - 1];
      for (int j = 0; j < i; ++j) {
        d[j] = z(i - 1, j);
        z(i, j) = 0.0;
        z(j, i) = 0.0;
      }
    } else {
      for (int k = 0; k < i; ++k) {
        d[k] /= scale;
        h += d[k] * d[k];
      }
      double f = d[i - 1];
      double g = std::sqrt(h);
      if (f > 0.0) g = -g;
      e[i] = scale * g;
      h -= f * g;
      d[i - 1] = f - g;
      for (int j = 0; j < i; ++j) e[j] = 0.0;

      for (int j = 0; j < i; ++j) {
        f = d[j];
        z(j, i) = f;
        g = e[j] + z(j, j) * f;
        for (int k = j + 1; k < i; ++k) {
          g += z(k, j) * d[k];
          e[k] += z(k, j) * f;
        }
        e[j] = g;
      }
      f = 0.0;
      for (int j = 0; j < i; ++j) {
        e[j] /= h;
        f += e[j] * d[j];
      }
      const double hh = f / (h + h);
      for (int j = 0; j < i; ++j) e[j] -= hh * d[j];
      for (int j = 0; j < i; ++j) {
        f = d[j];
        g = e[j];
        for (int k = j; k < i; ++k) z(k, j) -= f * e[k] + g * d[k];
        d[j] = z(i - 1, j);
        z(i, j) = 0.0;
      }
    }
    d[i] = h;
  }

  // Accumulate the Householder transformations.
  for (int i = 0; i < n - 1; ++i) {
    z(n - 1, i) = z(i, i);
    z(i, i) = 1.0;
    const double h = d[i + 1];
    if (h != 0.0) {
      for (int k = 0; k <= i; ++k) d[k] = z(k, i + 1) / h;
      for (int j = 0; j <= i; ++j) {
        double g = 0.0;
        for (int k = 0; k <= i; ++k) g += z(k, i + 1) * z(k, j);
        for (int k = 0; k <= i; ++k) z(k, j) -= g * d[k];
      }
    }
    for (int k = 0; k <= i; ++k) z(k, i + 1) = 0.0;
  }
  for (int j = 0; j < n; ++j) {
    d[j] = z(n - 1, j);
    z(n - 1, j) = 0.0;
  }
  z(n - 1, n - 1) = 1.0;
  e[0] = 0.0;
}

// Implicit-shift QL iteration on the tridiagonal (d, e), rotations folded
// into the columns of z. Throws after 50 sweeps on any single eigenvalue.
void tql2(Matrix& z, std::vector<double>& d, std::vector<double>& e) {
  const int n = static_cast<int>(z.rows);
  for (int i = 1; i < n; ++i) e[i - 1] = e[i];
  e[n - 1] = 0.0;

  double f = 0.0, tst1 = 0.0;
  const double eps = std::numeric_limits<double>::epsilon();
  for (int l = 0; l < n; ++l) {
    tst1 = std::max(tst1, std::abs(d[l]) + std::abs(e[l]));
    int m = l;
    while (m < n && std::abs(e[m]) > eps * tst1) ++m;

    if (m > l) {
      int iter = 0;
      do {
        if (++iter > 50)
          throw NumericFailure("eigenvalue iteration did not converge within 50 sweeps");

        double g = d[l];
        double p = (d[l + 1] - g) / (2.0 * e[l]);
        double r = std::hypot(p, 1.0);
        if (p < 0.0) r = -r;
        d[l] = e[l] / (p + r);
        d[l + 1] = e[l] * (p + r);
        const double dl1 = d[l + 1];
        double h = g - d[l];
        for (int i = l + 2; i < n; ++i) d[i] -= h;
        f += h;

        p = d[m];
        double c = 1.0, c2 = c, c3 = c;
        const double el1 = e[l + 1];
        double s = 0.0, s2 = 0.0;
        for (int i = m - 1; i >= l; --i) {
          c3 = c2;
          c2 = c;
          s2 = s;
          g = c * e[i];
          h = c * p;
          r = std::hypot(p, e[i]);
          e[i + 1] = s * r;
          s = e[i] / r;
          c = p / r;
          p = c * d[i] - s * g;
          d[i + 1] = h + s * (c * g + s * d[i]);

          for (int k = 0; k < n; ++k) {
            h = z(k, i + 1);
            z(k, i + 1) = s * z(k, i) + c * h;
            z(k, i) = c * z(k, i) - s * h;
          }
        }
        p = -s * s2 * c3 * el1 * e[l] / dl1;
        e[l] = s * p;
        d[l] = c * p;
      } while (std::abs(e[l]) > eps * tst1);
    }
    d[l] += f;
    e[l] = 0.0;
  }
}

double dist2(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

struct KmeansRun {
  std::vector<int> labels;
  double inertia = std::numeric_limits<double>::infinity();
};

KmeansRun kmeans_once(const Matrix& points, int k, Rng& rng) {
  const std::size_t n = points.rows, d = points.cols;
  Matrix centers(k, d);
  std::vector<bool> is_center(n, false);

  // k-means++ seeding: first center uniform, then D^2-weighted picks. When no
  // distance mass remains (fewer distinct points than k so far), fall back to
  // the lowest-index point not already chosen.
  {
    const int first = rng.index(static_cast<int>(n));
    std::copy_n(points.row(first), d, centers.row(0));
    is_center[first] = true;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = dist2(points.row(i), centers.row(0), d);
    for (int c = 1; c < k; ++c) {
      const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
      std::size_t pick = n;
      if (total > 0.0) {
        const double threshold = rng.u01() * total;
        double cum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          cum += d2[i];
          if (cum >= threshold) {
            pick = i;
            break;
          }
        }
        if (pick == n) pick = n - 1;  // guard against rounding in the prefix sum
      } else {
        for (std::size_t i = 0; i < n; ++i)
          if (!is_center[i]) {
            pick = i;
            break;
          }
        if (pick == n) pick = 0;
      }
      std::copy_n(points.row(pick), d, centers.row(c));
      is_center[pick] = true;
      for (std::size_t i = 0; i < n; ++i)
        d2[i] = std::min(d2[i], dist2(points.row(i), centers.row(c), d));
    }
  }

  std::vector<int> labels(n, 0);
  std::vector<int> counts(k, 0);
  for (int sweep = 0; sweep < 300; ++sweep) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = dist2(points.row(i), centers.row(0), d);
      for (int c = 1; c < k; ++c) {
        const double dd = dist2(points.row(i), centers.row(c), d);
        if (dd < bd) {
          bd = dd;
          best = c;
        }
      }
      if (labels[i] != best) {
        labels[i] = best;
        changed = true;
      }
    }
    if (!changed && sweep > 0) break;

    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) ++counts[labels[i]];

    // Re-home empty clusters to the point farthest from its current center.
    for (int c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t worst = n;
      double worst_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (counts[labels[i]] <= 1) continue;
        const double dd = dist2(points.row(i), centers.row(labels[i]), d);
        if (dd > worst_d) {
          worst_d = dd;
          worst = i;
        }
      }
      if (worst == n) break;  // fewer points than clusters with mass
      --counts[labels[worst]];
      labels[worst] = c;
      counts[c] = 1;
      changed = true;
    }

    std::fill(centers.values.begin(), centers.values.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* cr = centers.row(labels[i]);
      const double* pr = points.row(i);
      for (std::size_t j = 0; j < d; ++j) cr[j] += pr[j];
    }
    for (int c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t j = 0; j < d; ++j) centers(c, j) /= counts[c];
  }

  KmeansRun run;
  run.labels = std::move(labels);
  run.inertia = kmeans_inertia(points, k, run.labels);
  return run;
}

}  // namespace

EigenResult sym_eig(const Matrix& a) {
  const std::size_t n = a.rows;
  detail::require(n > 0 && a.cols == n, "sym_eig: matrix must be square and non-empty");
  if (!a.all_finite()) throw InvalidArgument("sym_eig: matrix entries must be finite");
  double amax = 0.0;
  for (double v : a.values) amax = std::max(amax, std::abs(v));
  const double tol = 1e-9 * std::max(1.0, amax);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(a(i, j) - a(j, i)) > tol)
        throw InvalidArgument("sym_eig: matrix is not symmetric");

  // Work on the symmetrized copy so tiny asymmetries within tolerance cannot
  // leak into the result.
  Matrix z(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) z(i, j) = 0.5 * (a(i, j) + a(j, i));

  std::vector<double> d(n), e(n);
  if (n == 1) {
    d[0] = z(0, 0);
    z(0, 0) = 1.0;
  } else {
    tred2(z, d, e);
    tql2(z, d, e);
  }

  // Ascending eigenvalues; stable order for repeated values.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return d[x] < d[y]; });

  EigenResult res;
  res.eigenvalues.resize(n);
  res.eigenvectors = Matrix(n, n);
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t src = order[jj];
    res.eigenvalues[jj] = d[src];
    // Fix the sign: the largest-magnitude entry (first on ties) is positive.
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double av = std::abs(z(i, src));
      if (av > best) {
        best = av;
        arg = i;
      }
    }
    const double sign = z(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) res.eigenvectors(i, jj) = sign * z(i, src);
  }
  return res;
}

std::vector<int> kmeans(const Matrix& points, int k, std::uint64_t seed) {
  const std::size_t n = points.rows;
  detail::require(n > 0 && points.cols > 0, "kmeans: points must be non-empty");
  detail::require(k >= 1 && static_cast<std::size_t>(k) <= n,
                  "kmeans: need 1 <= k <= number of points");
  if (!points.all_finite()) throw InvalidArgument("kmeans: points must be finite");

  KmeansRun best;
  for (int restart = 0; restart < 10; ++restart) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(restart)));
    KmeansRun run = kmeans_once(points, k, rng);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  return best.labels;
}

double kmeans_inertia(const Matrix& points, int k, const std::vector<int>& labels) {
  const std::size_t n = points.rows, d = points.cols;
  detail::require(labels.size() == n, "kmeans_inertia: one label per point");
  Matrix centers(k, d);
  std::vector<int> counts(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    detail::require(labels[i] >= 0 && labels[i] < k, "kmeans_inertia: label out of range");
    ++counts[labels[i]];
    double* cr = centers.row(labels[i]);
    const double* pr = points.row(i);
    for (std::size_t j = 0; j < d; ++j) cr[j] += pr[j];
  }
  for (int c = 0; c < k; ++c)
    if (counts[c] > 0)
      for (std::size_t j = 0; j < d; ++j) centers(c, j) /= counts[c];
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) sse += dist2(points.row(i), centers.row(labels[i]), d);
  return sse;
}

std::vector<double> midranks(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && x[idx[j]] == x[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j + 1);  // mean of ranks i+1 .. j
    for (std::size_t t = i; t < j; ++t) ranks[idx[t]] = mid;
    i = j;
  }
  return ranks;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  detail::require(x.size() == y.size(), "pearson: length mismatch");
  detail::require(x.size() >= 2, "pearson: need at least two observations");
  const std::size_t n = x.size();
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw UndefinedCorrelation("correlation of a constant sequence is undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double spearman_rho(std::span<const double> x, std::span<const double> y) {
  detail::require(x.size() == y.size(), "spearman_rho: length mismatch");
  const std::vector<double> rx = midranks(x);
  const std::vector<double> ry = midranks(y);
  return pearson(rx, ry);
}

RankRows standardized_rank_rows(const Matrix& series) {
  const std::size_t n = series.rows, w = series.cols;
  detail::require(n >= 2, "standardized_rank_rows: need at least two observations");
  RankRows out;
  out.rows = Matrix(w, n);
  out.constant.assign(w, false);
  std::vector<double> column(n);
  for (std::size_t j = 0; j < w; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = series(i, j);
    const std::vector<double> ranks = midranks(column);
    double mean = 0.0;
    for (double r : ranks) mean += r;
    mean /= static_cast<double>(n);
    double norm2 = 0.0;
    double* row = out.rows.row(j);
    for (std::size_t i = 0; i < n; ++i) {
      row[i] = ranks[i] - mean;
      norm2 += row[i] * row[i];
    }
    if (norm2 == 0.0) {
      out.constant[j] = true;
      std::fill_n(row, n, 0.0);
    } else {
      const double inv = 1.0 / std::sqrt(norm2);
      for (std::size_t i = 0; i < n; ++i) row[i] *= inv;
    }
  }
  return out;
}

namespace {

// Regularized lower incomplete gamma P(a, x) by series, for x < a + 1.
double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 10000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(a * std::log(x) - x - std::lgamma(a));
}

// Regularized upper incomplete gamma Q(a, x) by continued fraction (modified
// Lentz), for x >= a + 1.
double gamma_q_cf(double a, double x) {
  const double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 10000; ++i) {
    const double an = -static_cast<double>(i) * (static_cast<double>(i) - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return h * std::exp(a * std::log(x) - x - std::lgamma(a));
}

}  // namespace

double chi2_sf(double x, int dof) {
  detail::require(dof >= 1, "chi2_sf: dof must be positive");
  if (!(x >= 0.0) || !std::isfinite(x))
    throw InvalidArgument("chi2_sf: x must be finite and non-negative");
  const double a = 0.5 * dof;
  const double xx = 0.5 * x;
  if (xx == 0.0) return 1.0;
  const double q = (xx < a + 1.0) ? 1.0 - gamma_p_series(a, xx) : gamma_q_cf(a, xx);
  return std::clamp(q, 0.0, 1.0);
}

double bates_cdf(double x, int n) {
  detail::require(n >= 1 && n <= 25, "bates_cdf: supported for 1 <= n <= 25");
  if (!(x >= 0.0 && x <= 1.0))
    throw InvalidArgument("bates_cdf: x must lie in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  if (x == 0.5) return 0.5;
  // Evaluate on the lower half and reflect; this keeps the alternating sum
  // short and makes the symmetry F(x) + F(1-x) = 1 hold exactly.
  if (x > 0.5) return 1.0 - bates_cdf(1.0 - x, n);

  // Irwin-Hall CDF at y = n*x: F(x) = (1/n!) * sum_k (-1)^k C(n,k) (y-k)^n.
  const double y = n * x;
  const int kmax = static_cast<int>(std::floor(y));
  std::vector<double> choose(n + 1, 0.0);
  choose[0] = 1.0;
  for (int row = 1; row <= n; ++row)
    for (int k = row; k >= 1; --k) choose[k] += choose[k - 1];
  double fact = 1.0;
  for (int i = 2; i <= n; ++i) fact *= i;
  double sum = 0.0;
  for (int k = 0; k <= kmax; ++k) {
    const double base = y - k;
    if (base <= 0.0) continue;
    const double term = choose[k] * std::pow(base, n);
    sum += (k % 2 == 0) ? term : -term;
  }
  return std::clamp(sum / fact, 0.0, 1.0);
}

}  // namespace modprobe
