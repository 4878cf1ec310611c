#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "modprobe/matrix.hpp"

namespace modprobe {

struct EigenResult {
  std::vector<double> eigenvalues;  // ascending
  Matrix eigenvectors;              // column j pairs with eigenvalues[j]
};

// Full eigendecomposition of a symmetric matrix: Householder reduction to
// tridiagonal form followed by implicit-shift QL, with eigenvalues sorted
// ascending and each eigenvector's largest-magnitude entry made positive.
// Throws InvalidArgument if `a` is not square, not finite, or not symmetric
// within 1e-9 (relative to its infinity norm); NumericFailure if QL does not
// converge within 50 sweeps for some eigenvalue.
EigenResult sym_eig(const Matrix& a);

// Lloyd's algorithm with k-means++ seeding, 10 restarts, best-inertia result.
// `points` holds one point per row. Ties (nearest center, D^2 seeding with all
// mass at zero, equal inertia) break toward the lowest index so results are a
// pure function of (points, k, seed).
std::vector<int> kmeans(const Matrix& points, int k, std::uint64_t seed);

// Sum of squared distances from each point to its assigned center.
double kmeans_inertia(const Matrix& points, int k, const std::vector<int>& labels);

// Midranks: ranks in 1..n with ties replaced by the mean rank of the tied run.
std::vector<double> midranks(std::span<const double> x);

double pearson(std::span<const double> x, std::span<const double> y);

// Spearman rank correlation (midrank ties). Throws UndefinedCorrelation when
// either input is constant.
double spearman_rho(std::span<const double> x, std::span<const double> y);

// Rank-standardization of the columns of `series`: output row j holds the
// midranks of column j, centered and scaled to unit norm, so pairwise dot
// products of rows are Spearman correlations. Constant columns are zeroed
// and flagged.
struct RankRows {
  Matrix rows;  // (series.cols x series.rows)
  std::vector<bool> constant;
};
RankRows standardized_rank_rows(const Matrix& series);

// Upper tail of the chi-squared distribution, P[X >= x] with `dof` degrees of
// freedom, via the regularized incomplete gamma function.
double chi2_sf(double x, int dof);

// CDF of the mean of n independent U(0,1) variables, exact piecewise
// polynomial form. Supported for 1 <= n <= 25, where the alternating sum is
// stable in double precision.
double bates_cdf(double x, int n);

}  // namespace modprobe
