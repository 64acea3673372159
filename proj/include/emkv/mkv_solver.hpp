#pragma once

#include "emkv/error.hpp"
#include "emkv/paths.hpp"
#include "emkv/rng.hpp"
#include "emkv/sampling.hpp"

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <type_traits>
#include <variant>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emkv {

/// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

struct PicardConfig {
    std::size_t n_iter_max = 50;
    std::size_t mc_samples = 100'000;
    bool bridge_correction = true;
    /// Sup-distance between successive iterates below which iteration stops;
    /// non-positive selects the Monte Carlo noise level 2/sqrt(mc_samples).
    double stop_tol = 0.0;
    int threads = 1;

    [[nodiscard]] double effective_stop_tol() const {
        return stop_tol > 0.0 ? stop_tol : 2.0 / std::sqrt(static_cast<double>(mc_samples));
    }

    void validate() const {
        require(n_iter_max >= 1, "PicardConfig: n_iter_max must be >= 1");
        require(mc_samples >= 1, "PicardConfig: mc_samples must be >= 1");
        require(mc_samples <= std::numeric_limits<std::uint32_t>::max(), "PicardConfig: mc_samples too large");
    }
};

struct SolveReport {
    std::vector<LossCurve> iterates;  ///< iterates[0] is the zero curve
    std::vector<double> distances;    ///< distances[n] = sup |iterates[n+1] - iterates[n]|
    bool converged = false;

    [[nodiscard]] const LossCurve& final() const { return iterates.back(); }
    [[nodiscard]] std::size_t applications() const { return iterates.size() - 1; }
};

/// Monte Carlo evaluation of Gamma_kappa[l]_t = P(tau <= t) for the process
/// X = X0 + xi + B - alpha l killed at 0. Sample s draws (X0, xi, B) from
/// child_stream(stream, s), the same cells particle s of the particle system
/// uses. Within a step the drift is frozen at the left node, so X is
/// driftless there and the bridge crossing probability exp(-2ab/dt) is exact.
inline LossCurve gamma_apply(const LossCurve& l, const ModelParams& params, const PicardConfig& config,
                             const RngStream& stream) {
    params.validate();
    config.validate();
    require(l.grid == params.grid, "gamma_apply: loss curve and model use different grids");

    const TimeGrid& grid = params.grid;
    const std::size_t n_steps = grid.n_steps();
    const double dt = grid.dt();
    const double sqrt_dt = std::sqrt(dt);
    const double alpha = params.alpha;
    const auto samples = static_cast<std::ptrdiff_t>(config.mc_samples);
    const bool bridge = config.bridge_correction;
    const int threads = std::max(1, config.threads);

    std::vector<double> drift(grid.n_nodes());
    for (std::size_t k = 0; k < drift.size(); ++k) drift[k] = alpha * l.values[k];

    // One kill-node histogram per thread; integer merge keeps results
    // independent of the schedule.
    std::vector<std::vector<std::uint64_t>> hist(static_cast<std::size_t>(threads),
                                                 std::vector<std::uint64_t>(grid.n_nodes(), 0));

#pragma omp parallel num_threads(threads)
    {
#ifdef _OPENMP
        auto& local = hist[static_cast<std::size_t>(omp_get_thread_num())];
#else
        auto& local = hist[0];
#endif
#pragma omp for schedule(static)
        for (std::ptrdiff_t s = 0; s < samples; ++s) {
            const RngStream rs = child_stream(stream, static_cast<std::uint64_t>(s));
            const double x0 = draw_initial(params.law, rs, 0);
            const double xi = params.kappa > 0.0 ? rs.unit_exponential(Purpose::threshold, 0) / params.kappa
                                                 : std::numeric_limits<double>::infinity();
            if (!std::isfinite(xi)) continue;
            double v = x0 + xi;
            double a = v - drift[0];
            if (a <= 0.0) {
                ++local[0];
                continue;
            }
            std::array<double, 4> z{};
            for (std::size_t k = 1; k <= n_steps; ++k) {
                const std::size_t step = k - 1;
                if (step % 4 == 0) z = rs.normal4(Purpose::brownian, static_cast<std::uint32_t>(step / 4));
                v += sqrt_dt * z[step % 4];
                const double pre = v - drift[k - 1];
                bool killed = pre <= 0.0;
                if (!killed && bridge) {
                    const double exponent = 2.0 * a * pre / dt;
                    if (exponent < 40.0) {
                        killed = rs.uniform(Purpose::bridge, static_cast<std::uint32_t>(k)) < std::exp(-exponent);
                    }
                }
                const double post = v - drift[k];
                if (killed || post <= 0.0) {
                    ++local[k];
                    break;
                }
                a = post;
            }
        }
    }

    LossCurve out(grid);
    std::uint64_t cumulative = 0;
    for (std::size_t k = 0; k < grid.n_nodes(); ++k) {
        for (const auto& h : hist) cumulative += h[k];
        out.values[k] = static_cast<double>(cumulative) / static_cast<double>(config.mc_samples);
    }
    return out;
}

/// Picard iteration l^{n+1} = Gamma[l^n] from l^0 = 0 with one fixed sample
/// bank, so iterates increase nodewise and converge to the smallest fixed
/// point of the sampled operator.
inline SolveReport picard_solve(const ModelParams& params, const PicardConfig& config, const RngStream& stream) {
    config.validate();
    const double tol = config.effective_stop_tol();
    SolveReport report;
    report.iterates.emplace_back(params.grid);
    for (std::size_t n = 0; n < config.n_iter_max; ++n) {
        LossCurve next = gamma_apply(report.iterates.back(), params, config, stream);
        const double d = sup_distance(next, report.iterates.back());
        report.iterates.push_back(std::move(next));
        report.distances.push_back(d);
        if (d < tol) {
            report.converged = true;
            break;
        }
    }
    return report;
}

namespace detail {

using Quadrature = boost::math::quadrature::gauss_kronrod<double, 61>;
inline constexpr unsigned kQuadDepth = 20;
inline constexpr double kQuadTol = 1e-12;

/// P(first passage of x + xi + B below 0 before t), xi ~ Exp(kappa):
/// E[2 Phi(-(x + xi)/sqrt t)] with xi = -log(s)/kappa, s uniform on (0,1).
inline double elastic_passage_probability(double x, double t, double kappa) {
    const double root_t = std::sqrt(t);
    auto integrand = [=](double s) {
        if (s <= 0.0) return 0.0;
        return 2.0 * normal_cdf(-(x - std::log(s) / kappa) / root_t);
    };
    return Quadrature::integrate(integrand, 0.0, 1.0, kQuadDepth, kQuadTol);
}

}  // namespace detail

/// Gamma_kappa[0]_t, the loss without feedback, by deterministic quadrature
/// of the reflection-principle formula over xi and the initial law.
inline double gamma_zero_analytic(double t, const InitialLaw& l, double kappa) {
    require(std::isfinite(t) && t > 0.0, "gamma_zero_analytic: t must be positive");
    require(std::isfinite(kappa) && kappa > 0.0, "gamma_zero_analytic: kappa must be positive");
    validate(l);
    using detail::elastic_passage_probability;
    using detail::Quadrature;
    const double value = std::visit(
        [&](const auto& v) -> double {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) {
                return elastic_passage_probability(v.x0, t, kappa);
            } else if constexpr (std::is_same_v<T, law::Uniform>) {
                auto f = [&](double x) { return elastic_passage_probability(x, t, kappa); };
                return Quadrature::integrate(f, v.a, v.b, detail::kQuadDepth, detail::kQuadTol) / (v.b - v.a);
            } else if constexpr (std::is_same_v<T, law::Gamma>) {
                const boost::math::gamma_distribution<double> dist(v.shape, v.scale);
                auto f = [&](double x) {
                    return x <= 0.0 ? 0.0 : elastic_passage_probability(x, t, kappa) * boost::math::pdf(dist, x);
                };
                return Quadrature::integrate(f, 0.0, std::numeric_limits<double>::infinity(), detail::kQuadDepth,
                                             detail::kQuadTol);
            } else {
                auto f = [&](double s) {
                    if (s <= 0.0) return 0.0;
                    return elastic_passage_probability(v.shift - std::log(s) / v.rate, t, kappa);
                };
                return Quadrature::integrate(f, 0.0, 1.0, detail::kQuadDepth, detail::kQuadTol);
            }
        },
        l);
    return std::clamp(value, 0.0, 1.0);
}

/// Sufficient condition for a discontinuous loss: alpha > 2 (m_{0-} + 1/kappa).
/// A false result says nothing about continuity.
inline bool blowup_guaranteed(double alpha, const InitialLaw& l, double kappa) {
    require(alpha > 0.0, "blowup_guaranteed: alpha must be positive");
    require(kappa > 0.0, "blowup_guaranteed: kappa must be positive");
    return alpha > 2.0 * (mean_initial(l) + 1.0 / kappa);
}

}  // namespace emkv
