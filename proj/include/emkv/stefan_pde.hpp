#pragma once

#include "emkv/error.hpp"
#include "emkv/mkv_solver.hpp"
#include "emkv/paths.hpp"
#include "emkv/sampling.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <type_traits>
#include <variant>
#include <vector>

namespace emkv {

/// Spatial/temporal discretization of the half line [0, x_max].
struct PdeGrid {
    double x_max = 8.0;
    std::size_t nx = 800;
    double dt = 2.5e-4;
    double t_end = 1.0;
    /// Mass allowed within the outermost 5% of the domain before the
    /// truncation warning fires.
    double tail_tolerance = 1e-6;

    [[nodiscard]] double dx() const { return x_max / static_cast<double>(nx); }
    [[nodiscard]] std::size_t n_nodes() const { return nx + 1; }
    [[nodiscard]] double x(std::size_t j) const { return x_max * static_cast<double>(j) / static_cast<double>(nx); }
    [[nodiscard]] std::size_t n_steps() const {
        return static_cast<std::size_t>(std::ceil(t_end / dt - 1e-9));
    }

    void validate() const {
        require(std::isfinite(x_max) && x_max > 0.0, "PdeGrid: x_max must be positive");
        require(nx >= 4, "PdeGrid: need at least 4 cells");
        require(std::isfinite(dt) && dt > 0.0, "PdeGrid: dt must be positive");
        require(std::isfinite(t_end) && t_end > 0.0, "PdeGrid: t_end must be positive");
    }
};

/// Density V(t, .) of the surviving mass on the grid nodes plus the
/// accumulated loss and the net mass that left through x = x_max.
struct DensityState {
    std::vector<double> v;
    double loss = 0.0;
    double time = 0.0;
    double outflow = 0.0;
};

/// Trapezoidal mass of nodal values with spacing dx.
inline double trapezoid_mass(std::span<const double> v, double dx) {
    double s = 0.5 * (v.front() + v.back());
    for (std::size_t j = 1; j + 1 < v.size(); ++j) s += v[j];
    return s * dx;
}

/// |mass + loss + outflow - 1|.
inline double mass_defect(const DensityState& s, double dx) {
    return std::abs(trapezoid_mass(s.v, dx) + s.loss + s.outflow - 1.0);
}

/// One step of
///   V_t = V_xx / 2 + alpha Ldot V_x,   V_x(0)/2 = (kappa/2 - alpha Ldot) V(0),
/// with the loss rate Ldot = (kappa/2) V(t, 0). The drift is explicit and
/// upwinded (it transports mass toward the boundary), the diffusion is
/// backward Euler with a ghost node enforcing the Robin condition, and
/// Neumann conditions close the domain at x_max.
inline DensityState pde_step(const DensityState& state, const ModelParams& params, const PdeGrid& grid) {
    const std::size_t n = grid.n_nodes();
    require(state.v.size() == n, "pde_step: density does not match the grid");
    const double dx = grid.dx();
    const double dt = grid.dt;
    const double kappa = params.kappa;

    const double rate = 0.5 * kappa * state.v[0];
    const double speed = params.alpha * rate;
    const double courant = speed * dt / dx;
    require(courant <= 1.0, "pde_step: drift CFL condition violated (reduce dt)");

    std::vector<double> rhs(n);
    for (std::size_t j = 0; j + 1 < n; ++j) rhs[j] = state.v[j] + courant * (state.v[j + 1] - state.v[j]);
    rhs[n - 1] = state.v[n - 1];

    // Tridiagonal system, solved with the Thomas algorithm.
    const double lambda = dt / (2.0 * dx * dx);
    const double robin = kappa - 2.0 * speed;  // V_x(0) = robin * V(0)
    std::vector<double> lower(n, -lambda);
    std::vector<double> diag(n, 1.0 + 2.0 * lambda);
    std::vector<double> upper(n, -lambda);
    diag[0] = 1.0 + 2.0 * lambda * (1.0 + dx * robin);
    upper[0] = -2.0 * lambda;
    lower[n - 1] = -2.0 * lambda;

    std::vector<double> c_prime(n);
    std::vector<double> d_prime(n);
    c_prime[0] = upper[0] / diag[0];
    d_prime[0] = rhs[0] / diag[0];
    for (std::size_t j = 1; j < n; ++j) {
        const double denom = diag[j] - lower[j] * c_prime[j - 1];
        c_prime[j] = j + 1 < n ? upper[j] / denom : 0.0;
        d_prime[j] = (rhs[j] - lower[j] * d_prime[j - 1]) / denom;
    }
    DensityState next;
    next.v.resize(n);
    next.v[n - 1] = d_prime[n - 1];
    for (std::size_t j = n - 1; j-- > 0;) next.v[j] = d_prime[j] - c_prime[j] * next.v[j + 1];

    for (double& x : next.v) {
        require(x >= -1e-12, "pde_step: negative density (scheme violation)");
        x = std::max(x, 0.0);
    }
    next.loss = state.loss + dt * 0.5 * kappa * next.v[0];
    next.outflow = state.outflow - dt * speed * state.v[n - 1];
    next.time = state.time + dt;
    return next;
}

struct PdeResult {
    std::vector<DensityState> snapshots;
    LossCurve loss_curve;                 ///< on the model TimeGrid
    std::vector<double> step_times;       ///< time of every PDE step (including 0)
    std::vector<double> step_losses;
    double max_mass_defect = 0.0;
    double max_tail_mass = 0.0;
    bool tail_warning = false;
};

/// Integrates from t = 0 to grid.t_end, keeping every `snapshot_every`-th
/// state (0 keeps only the first and last) and resampling the loss onto
/// params.grid by linear interpolation in time.
inline PdeResult pde_solve(const ModelParams& params, const PdeGrid& grid, std::span<const double> initial_density,
                           std::size_t snapshot_every = 0) {
    grid.validate();
    require(params.alpha >= 0.0 && params.kappa >= 0.0, "pde_solve: invalid model parameters");
    require(initial_density.size() == grid.n_nodes(), "pde_solve: initial density does not match the grid");
    for (double x : initial_density) require(x >= 0.0 && std::isfinite(x), "pde_solve: initial density must be >= 0");
    const double dx = grid.dx();
    require(std::abs(trapezoid_mass(initial_density, dx) - 1.0) <= 1e-8, "pde_solve: initial mass must be 1");
    require(grid.t_end >= params.grid.t_end() - 1e-12, "pde_solve: PDE horizon shorter than the model grid");

    const std::size_t tail_begin = grid.n_nodes() - std::max<std::size_t>(2, grid.n_nodes() / 20);
    auto tail_mass = [&](const DensityState& s) {
        return trapezoid_mass(std::span<const double>(s.v).subspan(tail_begin), dx);
    };

    PdeResult result{{}, LossCurve(params.grid), {}, {}, 0.0, 0.0, false};
    DensityState state;
    state.v.assign(initial_density.begin(), initial_density.end());
    result.snapshots.push_back(state);
    result.step_times.push_back(0.0);
    result.step_losses.push_back(0.0);
    result.max_tail_mass = tail_mass(state);

    const std::size_t steps = grid.n_steps();
    for (std::size_t n = 1; n <= steps; ++n) {
        state = pde_step(state, params, grid);
        result.step_times.push_back(state.time);
        result.step_losses.push_back(std::min(state.loss, 1.0));
        result.max_mass_defect = std::max(result.max_mass_defect, mass_defect(state, dx));
        result.max_tail_mass = std::max(result.max_tail_mass, tail_mass(state));
        if ((snapshot_every > 0 && n % snapshot_every == 0) || n == steps) {
            if (result.snapshots.back().time != state.time) result.snapshots.push_back(state);
        }
    }
    result.tail_warning = result.max_tail_mass > grid.tail_tolerance;

    const auto& times = result.step_times;
    for (std::size_t k = 0; k < params.grid.n_nodes(); ++k) {
        const double t = params.grid.time(k);
        const auto it = std::upper_bound(times.begin(), times.end(), t);
        if (it == times.end()) {
            result.loss_curve.values[k] = result.step_losses.back();
            continue;
        }
        const auto hi = static_cast<std::size_t>(it - times.begin());
        const std::size_t lo = hi - 1;
        const double w = (t - times[lo]) / (times[hi] - times[lo]);
        result.loss_curve.values[k] = (1.0 - w) * result.step_losses[lo] + w * result.step_losses[hi];
    }
    for (std::size_t k = 1; k < params.grid.n_nodes(); ++k) {
        result.loss_curve.values[k] = std::max(result.loss_curve.values[k], result.loss_curve.values[k - 1]);
    }
    return result;
}

/// Nodal initial density for `law`, smoothed by a Gaussian kernel of
/// standard deviation `mollify_width` (0 = use the density as is; required
/// > 0 for PointMass) and renormalized to unit trapezoidal mass.
inline std::vector<double> initial_density(const InitialLaw& l, const PdeGrid& grid, double mollify_width) {
    grid.validate();
    validate(l);
    require(mollify_width >= 0.0, "initial_density: mollify_width must be >= 0");
    const double sigma = mollify_width;
    std::vector<double> v(grid.n_nodes());
    for (std::size_t j = 0; j < v.size(); ++j) {
        const double x = grid.x(j);
        v[j] = std::visit(
            [&](const auto& law_v) -> double {
                using T = std::decay_t<decltype(law_v)>;
                if constexpr (std::is_same_v<T, law::PointMass>) {
                    require(sigma > 0.0, "initial_density: PointMass needs a positive mollification width");
                    return normal_pdf((x - law_v.x0) / sigma) / sigma;
                } else if constexpr (std::is_same_v<T, law::Uniform>) {
                    if (sigma == 0.0) return law_density(l, x);
                    return (normal_cdf((x - law_v.a) / sigma) - normal_cdf((x - law_v.b) / sigma)) /
                           (law_v.b - law_v.a);
                } else {
                    if (sigma == 0.0) return law_density(l, x);
                    auto f = [&](double y) { return law_density(l, y) * normal_pdf((x - y) / sigma) / sigma; };
                    const double lo = std::max(0.0, x - 10.0 * sigma);
                    return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, lo, x + 10.0 * sigma, 15,
                                                                                         1e-12);
                }
            },
            l);
    }
    const double mass = trapezoid_mass(v, grid.dx());
    require(mass > 0.0, "initial_density: no mass on the grid");
    for (double& x : v) x /= mass;
    return v;
}

/// Snapshot in the moving-boundary variables: front F_t = alpha Lambda_t,
/// u(t, x) = V(t, x - F_t) on x >= F_t, epsilon = 2 / (alpha kappa).
struct StefanFrame {
    double time = 0.0;
    double front = 0.0;
    double front_speed = 0.0;
    double epsilon = 0.0;
    double u_at_front = 0.0;
    double u_x_at_front = 0.0;
    std::vector<double> x;
    std::vector<double> u;

    /// u(t, F_t) - epsilon * dF/dt (kinetic undercooling condition).
    [[nodiscard]] double undercooling_residual() const { return u_at_front - epsilon * front_speed; }
    /// (beta - 2u) dF/dt - u_x at the front, beta = kappa * epsilon.
    [[nodiscard]] double flux_residual(double beta) const {
        return (beta - 2.0 * u_at_front) * front_speed - u_x_at_front;
    }
};

/// Post-processing map from the density formulation to the supercooled
/// Stefan problem with kinetic undercooling. Front speeds come from
/// centered differences of the per-step loss series.
inline std::vector<StefanFrame> stefan_transform(const PdeResult& result, const ModelParams& params,
                                                 const PdeGrid& grid) {
    require(params.kappa > 0.0, "stefan_transform: needs kappa > 0");
    const double epsilon = 2.0 / (params.alpha * params.kappa);
    const double dx = grid.dx();
    const auto& times = result.step_times;
    const auto& losses = result.step_losses;

    std::vector<StefanFrame> frames;
    for (const auto& snap : result.snapshots) {
        const auto it = std::lower_bound(times.begin(), times.end(), snap.time - 1e-12);
        auto n = static_cast<std::size_t>(it - times.begin());
        n = std::min(n, times.size() - 1);
        const std::size_t lo = n > 0 ? n - 1 : 0;
        const std::size_t hi = std::min(n + 1, times.size() - 1);
        const double loss_rate = (losses[hi] - losses[lo]) / (times[hi] - times[lo]);

        StefanFrame f;
        f.time = snap.time;
        f.front = params.alpha * snap.loss;
        f.front_speed = params.alpha * loss_rate;
        f.epsilon = epsilon;
        f.u_at_front = snap.v[0];
        f.u_x_at_front = (-3.0 * snap.v[0] + 4.0 * snap.v[1] - snap.v[2]) / (2.0 * dx);
        f.x.resize(snap.v.size());
        for (std::size_t j = 0; j < snap.v.size(); ++j) f.x[j] = grid.x(j) + f.front;
        f.u = snap.v;
        frames.push_back(std::move(f));
    }
    return frames;
}

}  // namespace emkv
