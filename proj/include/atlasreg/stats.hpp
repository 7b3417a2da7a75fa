#pragma once

// Small statistical kernels: chi-square and binomial tail probabilities,
// 1-D earth mover's distance, percentiles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace atlasreg::stats {

/// Upper tail of the chi-square distribution with one degree of freedom.
inline double chi2_sf_1df(double x)
{
    if (!(x >= 0))
        throw std::invalid_argument("chi2_sf_1df: statistic must be nonnegative");
    return std::erfc(std::sqrt(0.5 * x));
}

/// Goodness-of-fit statistic of one cell against the rest of a total of
/// `total` observations: cells (observed, total - observed) against
/// (expected, total - expected).
inline double chi2_cell_vs_rest(double observed, double expected, double total)
{
    if (!(expected > 0) || !(total > expected))
        throw std::invalid_argument("chi2_cell_vs_rest: need 0 < expected < total");
    const double d = observed - expected;
    return d * d / expected + d * d / (total - expected);
}

inline double log_binomial_pmf(std::int64_t k, std::int64_t n, double p)
{
    if (p <= 0)
        return k == 0 ? 0.0 : -INFINITY;
    if (p >= 1)
        return k == n ? 0.0 : -INFINITY;
    return std::lgamma(double(n) + 1) - std::lgamma(double(k) + 1) - std::lgamma(double(n - k) + 1) +
           double(k) * std::log(p) + double(n - k) * std::log1p(-p);
}

/// Two-sided exact binomial test: total probability of outcomes no more
/// likely than the observed one.
inline double binomial_two_sided(std::int64_t k, std::int64_t n, double p)
{
    if (n < 0 || k < 0 || k > n)
        throw std::invalid_argument("binomial_two_sided: need 0 <= k <= n");
    if (!(p >= 0 && p <= 1))
        throw std::invalid_argument("binomial_two_sided: p must lie in [0, 1]");
    const double lk = log_binomial_pmf(k, n, p);
    const double tol = 1e-7;
    double total = 0;
    for (std::int64_t i = 0; i <= n; ++i) {
        const double li = log_binomial_pmf(i, n, p);
        if (li <= lk + std::log1p(tol))
            total += std::exp(li);
    }
    return std::min(1.0, total);
}

/// Wasserstein-1 distance between the empirical distributions of two
/// samples: the integral of |F_a - F_b|.
inline double emd_1d(std::vector<double> a, std::vector<double> b)
{
    if (a.empty() || b.empty())
        throw std::invalid_argument("emd_1d: samples must be nonempty");
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    const double na = double(a.size()), nb = double(b.size());
    std::size_t i = 0, j = 0;
    double x = std::min(a[0], b[0]), out = 0;
    while (i < a.size() || j < b.size()) {
        double next;
        if (j == b.size() || (i < a.size() && a[i] <= b[j]))
            next = a[i];
        else
            next = b[j];
        out += std::abs(double(i) / na - double(j) / nb) * (next - x);
        x = next;
        while (i < a.size() && a[i] == x)
            ++i;
        while (j < b.size() && b[j] == x)
            ++j;
    }
    return out;
}

/// Linear-interpolation percentile, q in [0, 100].
inline double percentile(std::vector<double> v, double q)
{
    if (v.empty())
        throw std::invalid_argument("percentile: empty sample");
    std::sort(v.begin(), v.end());
    const double pos = std::clamp(q, 0.0, 100.0) / 100.0 * double(v.size() - 1);
    const auto lo = std::size_t(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

inline double median(std::vector<double> v) { return percentile(std::move(v), 50.0); }

} // namespace atlasreg::stats
