#ifndef SUPERMARKET_STATS_HPP
#define SUPERMARKET_STATS_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "supermarket/error.hpp"

namespace supermarket::stats {

/// Two-sided 95% Student-t quantile with the given degrees of freedom.
inline double t975(std::size_t dof) {
    if (dof < 1) throw DomainError("t975: need at least one degree of freedom");
    boost::math::students_t dist(static_cast<double>(dof));
    return boost::math::quantile(dist, 0.975);
}

struct MeanCI {
    double mean = 0.0;
    double halfwidth = 0.0;
};

/// Mean of the samples with a 95% t-interval treating them as i.i.d.
/// (batch means or independent replications).
inline MeanCI mean_ci(std::span<const double> xs) {
    const std::size_t b = xs.size();
    if (b < 2) throw DomainError("mean_ci: need at least two samples");
    double mean = 0.0;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(b);
    double ss = 0.0;
    for (double v : xs) ss += (v - mean) * (v - mean);
    const double var = ss / static_cast<double>(b - 1);
    return {mean, t975(b - 1) * std::sqrt(var / static_cast<double>(b))};
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double slope_stderr = 0.0;
};

/// Ordinary least squares y = intercept + slope * x.
inline LinearFit ols(std::span<const double> x, std::span<const double> y) {
    const std::size_t n = x.size();
    if (n != y.size() || n < 2) throw DomainError("ols: need matching inputs with at least two points");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    if (sxx == 0.0) throw DomainError("ols: degenerate abscissae");
    LinearFit fit;
    fit.slope = sxy / sxx;
    fit.intercept = my - fit.slope * mx;
    if (n > 2) {
        double rss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = y[i] - fit.intercept - fit.slope * x[i];
            rss += r * r;
        }
        fit.slope_stderr = std::sqrt(rss / static_cast<double>(n - 2) / sxx);
    } else {
        fit.slope_stderr = std::numeric_limits<double>::quiet_NaN();
    }
    return fit;
}

}  // namespace supermarket::stats

#endif  // SUPERMARKET_STATS_HPP
