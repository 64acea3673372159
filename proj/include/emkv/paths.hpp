#pragma once

#include "emkv/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace emkv {

/// Uniform time grid on [0, t_end]; node k sits at k * dt.
class TimeGrid {
public:
    TimeGrid(double t_end, std::size_t n_steps) : t_end_(t_end), n_steps_(n_steps) {
        require(std::isfinite(t_end) && t_end > 0.0, "TimeGrid: t_end must be positive");
        require(n_steps >= 1, "TimeGrid: n_steps must be >= 1");
    }

    [[nodiscard]] double t_end() const noexcept { return t_end_; }
    [[nodiscard]] std::size_t n_steps() const noexcept { return n_steps_; }
    [[nodiscard]] std::size_t n_nodes() const noexcept { return n_steps_ + 1; }
    [[nodiscard]] double dt() const noexcept { return t_end_ / static_cast<double>(n_steps_); }
    [[nodiscard]] double time(std::size_t k) const noexcept {
        return t_end_ * static_cast<double>(k) / static_cast<double>(n_steps_);
    }

    /// Node with the closest time to t (clamped to the grid).
    [[nodiscard]] std::size_t node_at(double t) const noexcept {
        const double q = std::round(t / dt());
        if (!(q > 0.0)) return 0;
        return std::min(n_steps_, static_cast<std::size_t>(q));
    }

    friend bool operator==(const TimeGrid&, const TimeGrid&) = default;

private:
    double t_end_;
    std::size_t n_steps_;
};

/// Path sampled at the nodes of a TimeGrid, read right-continuously.
struct GridPath {
    TimeGrid grid;
    std::vector<double> values;

    GridPath(TimeGrid g, std::vector<double> v) : grid(g), values(std::move(v)) {
        require(values.size() == grid.n_nodes(), "GridPath: need exactly n_steps+1 values");
        for (double x : values) require(std::isfinite(x), "GridPath: non-finite value");
    }

    explicit GridPath(TimeGrid g) : grid(g), values(g.n_nodes(), 0.0) {}

    [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
    double operator[](std::size_t k) const { return values[k]; }
};

/// Grid restriction of a loss function: nondecreasing, [0,1]-valued, zero at 0-.
struct LossCurve {
    TimeGrid grid;
    std::vector<double> values;
    double pre_value = 0.0;

    LossCurve(TimeGrid g, std::vector<double> v) : grid(g), values(std::move(v)) {
        require(values.size() == grid.n_nodes(), "LossCurve: need exactly n_steps+1 values");
        for (std::size_t k = 0; k < values.size(); ++k) {
            require(values[k] >= 0.0 && values[k] <= 1.0, "LossCurve: value outside [0,1]");
            require(k == 0 || values[k] >= values[k - 1], "LossCurve: values must be nondecreasing");
        }
    }

    explicit LossCurve(TimeGrid g) : grid(g), values(g.n_nodes(), 0.0) {}

    [[nodiscard]] std::size_t size() const noexcept { return values.size(); }
    double operator[](std::size_t k) const { return values[k]; }
    [[nodiscard]] double back() const { return values.back(); }
};

/// Skorokhod map on a sampled path: l_k = max(0, -min_{j<=k} y_j), x = y + l.
inline std::pair<GridPath, GridPath> skorokhod_reflect(const GridPath& y) {
    GridPath x(y.grid);
    GridPath l(y.grid);
    double regulator = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) {
        regulator = std::max(regulator, -y.values[k]);
        l.values[k] = regulator;
        x.values[k] = y.values[k] + regulator;
    }
    return {std::move(x), std::move(l)};
}

namespace detail {

inline void require_same_grid(const TimeGrid& a, const TimeGrid& b, const char* what) {
    require(a == b, std::string(what) + ": curves live on different grids");
}

inline double sup_abs_diff(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) d = std::max(d, std::abs(a[k] - b[k]));
    return d;
}

/// Whether eps satisfies F(t-eps)-eps <= G(t) <= F(t+eps)+eps for every real t,
/// with F, G right-continuous step functions on the grid, extended constantly
/// outside [0, t_end]. G is constant on [t_k, t_{k+1}), so it suffices to test
/// F(t_k + eps) on the right and the left limit F((t_{k+1} - eps)-) on the left.
inline bool levy_band_holds(std::span<const double> f, std::span<const double> g, double eps,
                            double dt) {
    const std::size_t n = f.size() - 1;
    const double q = eps / dt;
    const std::size_t shift = q >= static_cast<double>(n) ? n : static_cast<std::size_t>(q);
    if (std::abs(f[0] - g[0]) > eps || std::abs(f[n] - g[n]) > eps) return false;
    for (std::size_t k = 0; k <= n; ++k) {
        const double upper = f[std::min(n, k + shift)] + eps;
        const double lower = (k == n ? f[n] : f[k >= shift ? k - shift : 0]) - eps;
        if (g[k] > upper || g[k] < lower) return false;
    }
    return true;
}

}  // namespace detail

inline double sup_distance(const GridPath& a, const GridPath& b) {
    detail::require_same_grid(a.grid, b.grid, "sup_distance");
    return detail::sup_abs_diff(a.values, b.values);
}

inline double sup_distance(const LossCurve& a, const LossCurve& b) {
    detail::require_same_grid(a.grid, b.grid, "sup_distance");
    return detail::sup_abs_diff(a.values, b.values);
}

/// Levy distance between two loss curves viewed as step distribution
/// functions; bisection on eps to absolute tolerance `tol`.
inline double levy_metric(const LossCurve& a, const LossCurve& b, double tol = 1e-9) {
    detail::require_same_grid(a.grid, b.grid, "levy_metric");
    const double sup = detail::sup_abs_diff(a.values, b.values);
    if (sup == 0.0) return 0.0;
    const double dt = a.grid.dt();
    double lo = 0.0;
    double hi = sup;
    while (hi - lo > tol) {
        const double mid = 0.5 * (lo + hi);
        // The band condition is symmetric in exact arithmetic; check both
        // orientations so rounding cannot make the result order-dependent.
        if (detail::levy_band_holds(a.values, b.values, mid, dt) &&
            detail::levy_band_holds(b.values, a.values, mid, dt)) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    return hi;
}

struct Jump {
    std::size_t node;
    double size;

    friend bool operator==(const Jump&, const Jump&) = default;
};

/// Nodes where the loss increases by at least `threshold` in one step
/// (node 0 counts as a jump from the pre-value 0).
inline std::vector<Jump> jump_detect(const LossCurve& l, double threshold) {
    require(threshold > 0.0, "jump_detect: threshold must be positive");
    std::vector<Jump> jumps;
    double previous = l.pre_value;
    for (std::size_t k = 0; k < l.size(); ++k) {
        const double inc = l.values[k] - previous;
        if (inc >= threshold) jumps.push_back({k, inc});
        previous = l.values[k];
    }
    return jumps;
}

inline double largest_jump(const LossCurve& l) {
    double best = l.values[0] - l.pre_value;
    for (std::size_t k = 1; k < l.size(); ++k) best = std::max(best, l.values[k] - l.values[k - 1]);
    return best;
}

}  // namespace emkv
