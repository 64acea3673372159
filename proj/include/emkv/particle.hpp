#pragma once

#include "emkv/error.hpp"
#include "emkv/paths.hpp"
#include "emkv/rng.hpp"
#include "emkv/sampling.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace emkv {

// ---------------------------------------------------------------------------
// Cascade resolution
// ---------------------------------------------------------------------------

namespace detail {

/// Least c >= base with c == base + #{v in values : v <= threshold(c)},
/// for `threshold` nondecreasing in c. Only the values below the threshold
/// of a guessed upper bound are sorted; the bound doubles until the
/// fixed-point walk stays inside it.
template <class Threshold>
std::size_t least_fixed_point(std::span<const double> values, std::size_t base, Threshold&& threshold,
                              std::vector<double>& scratch) {
    const std::size_t m = values.size();
    std::size_t extra = std::min<std::size_t>(m, 64);
    for (;;) {
        const std::size_t limit = base + extra;
        const double limit_value = threshold(limit);
        scratch.clear();
        for (double v : values) {
            if (v <= limit_value) scratch.push_back(v);
        }
        std::sort(scratch.begin(), scratch.end());

        std::size_t c = base;
        while (c <= limit) {
            const auto below = static_cast<std::size_t>(
                std::upper_bound(scratch.begin(), scratch.end(), threshold(c)) - scratch.begin());
            const std::size_t next = base + below;
            if (next == c) return c;
            c = next;
        }
        // The walk left the sorted window; widen it (c - base <= m always).
        extra = std::min(m, std::max(2 * extra, 2 * (c - base)));
    }
}

}  // namespace detail

struct CascadeResult {
    double jump = 0.0;                 ///< D, a multiple of 1/N
    std::vector<std::size_t> killed;   ///< indices into the headroom array, ascending
};

/// Physical cascade on the headrooms of the currently alive particles:
/// D is the least fixed point of F(x) = #{i : h_i <= alpha x} / N, reached by
/// iterating F from 0. Ties (h_i == alpha D) are killed.
inline CascadeResult resolve_cascade(std::span<const double> headrooms, double alpha, std::size_t n_total) {
    require(alpha > 0.0, "resolve_cascade: alpha must be positive");
    require(n_total >= headrooms.size() && n_total >= 1, "resolve_cascade: N must be >= number of headrooms");
    const double n = static_cast<double>(n_total);
    auto threshold = [alpha, n](std::size_t c) { return alpha * (static_cast<double>(c) / n); };
    std::vector<double> scratch;
    const std::size_t count = detail::least_fixed_point(headrooms, 0, threshold, scratch);

    CascadeResult out;
    out.jump = static_cast<double>(count) / n;
    const double limit = threshold(count);
    for (std::size_t i = 0; i < headrooms.size(); ++i) {
        if (headrooms[i] <= limit) out.killed.push_back(i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Particle system
// ---------------------------------------------------------------------------

enum class KillRule {
    headroom,         ///< h = X0 + xi + B - alpha Lambda crosses 0
    running_minimum,  ///< Skorokhod regulator L reaches xi (reference route)
};

struct SimOptions {
    /// Kill between nodes with the Brownian-bridge crossing probability
    /// exp(-2ab/dt) of the headroom; otherwise only grid crossings count.
    bool bridge_correction = true;
    KillRule kill_rule = KillRule::headroom;
    /// Keep the full Y path of every particle (frozen after death).
    bool store_paths = false;
    /// Nodes at which the reflected positions X = Theta(Y) are recorded.
    std::vector<std::size_t> snapshot_nodes;
    int threads = 1;
    /// Absorbing model only: per-particle shift Y_{0-} = X_{0-} + shift_i.
    /// All zeros gives the plain absorbing model.
    std::optional<std::vector<double>> explicit_shift;
    /// Per-particle stream ids; default is child_stream(base, i).
    std::optional<std::vector<std::uint64_t>> stream_ids;
};

struct Snapshot {
    std::size_t node = 0;
    std::vector<double> x;     ///< reflected position (value at death for dead particles)
    std::vector<bool> alive;
};

struct SimSummary {
    std::size_t cascade_events = 0;   ///< steps where killing propagated beyond the initial crossers
    double largest_jump = 0.0;
};

struct SimOutput {
    LossCurve loss_curve;
    std::vector<std::optional<std::size_t>> kill_nodes;
    std::vector<GridPath> y_paths;
    std::vector<Snapshot> snapshots;
    SimSummary summary;

    [[nodiscard]] std::size_t n_particles() const noexcept { return kill_nodes.size(); }
    [[nodiscard]] const Snapshot* snapshot_at(std::size_t node) const noexcept {
        for (const auto& s : snapshots) {
            if (s.node == node) return &s;
        }
        return nullptr;
    }
};

namespace detail {

struct ParticleInputs {
    std::vector<RngStream> streams;
    std::vector<double> x0;
    std::vector<double> shift;  ///< xi for the elastic model, +inf when kappa == 0
};

inline ParticleInputs draw_inputs(const ModelParams& params, const RngStream& base, const SimOptions& opts,
                                  bool absorbing) {
    const std::size_t n = params.n_particles;
    ParticleInputs in;
    in.streams.resize(n);
    if (opts.stream_ids) {
        require(opts.stream_ids->size() == n, "simulate: stream_ids must have one entry per particle");
        for (std::size_t i = 0; i < n; ++i) in.streams[i] = RngStream{base.seed, (*opts.stream_ids)[i]};
    } else {
        for (std::size_t i = 0; i < n; ++i) in.streams[i] = child_stream(base, i);
    }
    in.x0.resize(n);
    in.shift.resize(n);
    for (std::size_t i = 0; i < n; ++i) in.x0[i] = draw_initial(params.law, in.streams[i], 0);

    if (absorbing && opts.explicit_shift) {
        require(opts.explicit_shift->size() == n, "simulate_absorbing: explicit_shift must have one entry per particle");
        for (std::size_t i = 0; i < n; ++i) {
            const double s = (*opts.explicit_shift)[i];
            require(std::isfinite(s) && s >= 0.0, "simulate_absorbing: shifts must be finite and >= 0");
            in.shift[i] = s;
        }
    } else if (params.kappa > 0.0) {
        for (std::size_t i = 0; i < n; ++i) {
            in.shift[i] = in.streams[i].unit_exponential(Purpose::threshold, 0) / params.kappa;
        }
    } else {
        require(!absorbing, "simulate_absorbing: kappa = 0 needs an explicit shift");
        std::fill(in.shift.begin(), in.shift.end(), std::numeric_limits<double>::infinity());
    }
    return in;
}

inline std::vector<double> to_loss(std::span<const std::size_t> dead, std::size_t n) {
    std::vector<double> v(dead.size());
    for (std::size_t k = 0; k < dead.size(); ++k) {
        v[k] = static_cast<double>(dead[k]) / static_cast<double>(n);
    }
    return v;
}

/// Headroom route: the elastic particle is killed when
/// h = (X0 + xi + B) - alpha Lambda <= 0, the absorbing formulation with
/// shifted initial condition. Elastic and absorbing simulations both run
/// through here with the same draws.
inline SimOutput simulate_headroom(const ModelParams& params, const ParticleInputs& in, const SimOptions& opts) {
    const TimeGrid& grid = params.grid;
    const std::size_t n = params.n_particles;
    const std::size_t n_steps = grid.n_steps();
    const double dt = grid.dt();
    const double sqrt_dt = std::sqrt(dt);
    const double alpha = params.alpha;
    const double n_real = static_cast<double>(n);
    auto threshold = [alpha, n_real](std::size_t c) { return alpha * (static_cast<double>(c) / n_real); };

    const bool track_y = opts.store_paths || !opts.snapshot_nodes.empty();
    if (opts.store_paths) {
        require(static_cast<double>(n) * static_cast<double>(grid.n_nodes()) <= 2e8,
                "simulate: store_paths would need more than 2e8 samples; use snapshot_nodes");
    }
    for (std::size_t k : opts.snapshot_nodes) require(k <= n_steps, "simulate: snapshot node outside the grid");

    std::vector<double> base(n);
    std::vector<double> w;  // X0 + B
    std::vector<double> regulator;
    std::vector<double> reflected;
    if (track_y) {
        w = in.x0;
        regulator.assign(n, 0.0);
        reflected.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) base[i] = in.x0[i] + in.shift[i];

    SimOutput out{LossCurve(grid), std::vector<std::optional<std::size_t>>(n), {}, {}, {}};
    if (opts.store_paths) out.y_paths.assign(n, GridPath(grid));

    std::vector<std::size_t> dead_count(grid.n_nodes(), 0);
    std::vector<std::uint32_t> alive;
    alive.reserve(n);
    std::vector<std::array<double, 4>> normals(n);
    std::vector<unsigned char> pending;
    std::vector<double> candidates;
    std::vector<double> scratch;
    std::size_t dead = 0;

    auto record_node = [&](std::size_t k, std::span<const std::uint32_t> killed_now) {
        if (!track_y) return;
        const double thr = threshold(dead);
        auto update = [&](std::uint32_t i) {
            regulator[i] = std::max(regulator[i], thr - w[i]);
            reflected[i] = (w[i] - thr) + regulator[i];
            if (opts.store_paths) out.y_paths[i].values[k] = w[i] - thr;
        };
        for (std::uint32_t i : alive) update(i);
        for (std::uint32_t i : killed_now) update(i);
        if (std::find(opts.snapshot_nodes.begin(), opts.snapshot_nodes.end(), k) != opts.snapshot_nodes.end()) {
            Snapshot s{k, reflected, std::vector<bool>(n, false)};
            for (std::uint32_t i : alive) s.alive[i] = true;
            out.snapshots.push_back(std::move(s));
        }
    };

    // Resolves the cascade given the pending (already crossed) flags of the
    // alive list, removes the killed particles and returns them.
    std::vector<std::uint32_t> killed_now;
    auto resolve = [&](std::size_t k, std::size_t n_pending) {
        killed_now.clear();
        if (n_pending == 0) return;
        candidates.clear();
        for (std::size_t j = 0; j < alive.size(); ++j) {
            if (!pending[j]) candidates.push_back(base[alive[j]]);
        }
        const std::size_t first = dead + n_pending;
        const std::size_t total = least_fixed_point(candidates, first, threshold, scratch);
        if (total > first) ++out.summary.cascade_events;
        const double limit = threshold(total);
        std::size_t kept = 0;
        for (std::size_t j = 0; j < alive.size(); ++j) {
            const std::uint32_t i = alive[j];
            if (pending[j] || base[i] <= limit) {
                out.kill_nodes[i] = k;
                killed_now.push_back(i);
            } else {
                alive[kept++] = i;
            }
        }
        alive.resize(kept);
        dead = total;
    };

    // Node 0: no diffusion yet; particles starting at or below zero headroom die.
    for (std::uint32_t i = 0; i < n; ++i) alive.push_back(i);
    pending.assign(alive.size(), 0);
    std::size_t n_pending = 0;
    for (std::size_t j = 0; j < alive.size(); ++j) {
        if (base[alive[j]] <= 0.0) {
            pending[j] = 1;
            ++n_pending;
        }
    }
    resolve(0, n_pending);
    dead_count[0] = dead;
    record_node(0, killed_now);

    const bool bridge = opts.bridge_correction;
    const int threads = std::max(1, opts.threads);
    for (std::size_t k = 1; k <= n_steps; ++k) {
        const std::size_t step = k - 1;
        const auto block = static_cast<std::uint32_t>(step / 4);
        const std::size_t slot = step % 4;
        const double thr_prev = threshold(dead);
        const auto m = static_cast<std::ptrdiff_t>(alive.size());
        pending.assign(alive.size(), 0);
        std::size_t crossed = 0;

#pragma omp parallel for schedule(static) num_threads(threads) reduction(+ : crossed)
        for (std::ptrdiff_t j = 0; j < m; ++j) {
            const std::uint32_t i = alive[static_cast<std::size_t>(j)];
            if (slot == 0) normals[i] = in.streams[i].normal4(Purpose::brownian, block);
            const double dz = sqrt_dt * normals[i][slot];
            const double before = base[i] - thr_prev;
            base[i] += dz;
            if (track_y) w[i] += dz;
            const double after = base[i] - thr_prev;
            bool killed = after <= 0.0;
            if (!killed && bridge) {
                const double exponent = 2.0 * before * after / dt;
                if (exponent < 40.0) {
                    killed = in.streams[i].uniform(Purpose::bridge, static_cast<std::uint32_t>(k)) <
                             std::exp(-exponent);
                }
            }
            if (killed) {
                pending[static_cast<std::size_t>(j)] = 1;
                ++crossed;
            }
        }
        resolve(k, crossed);
        dead_count[k] = dead;
        record_node(k, killed_now);
    }

    out.loss_curve = LossCurve(grid, to_loss(dead_count, n));
    if (opts.store_paths) {
        for (std::size_t i = 0; i < n; ++i) {
            if (!out.kill_nodes[i]) continue;
            auto& v = out.y_paths[i].values;
            std::fill(v.begin() + static_cast<std::ptrdiff_t>(*out.kill_nodes[i]) + 1, v.end(),
                      v[*out.kill_nodes[i]]);
        }
    }
    out.summary.largest_jump = largest_jump(out.loss_curve);
    return out;
}

/// Reference route used to check the headroom representation: tracks the
/// running minimum of Y = X0 + B - alpha Lambda and kills once the
/// Skorokhod regulator L = max(0, -min Y) reaches xi. Serial and
/// quadratic in the cascade length, so meant for small systems.
inline SimOutput simulate_running_minimum(const ModelParams& params, const ParticleInputs& in,
                                          const SimOptions& opts) {
    const TimeGrid& grid = params.grid;
    const std::size_t n = params.n_particles;
    const double dt = grid.dt();
    const double sqrt_dt = std::sqrt(dt);
    const double alpha = params.alpha;
    const double n_real = static_cast<double>(n);
    auto threshold = [alpha, n_real](std::size_t c) { return alpha * (static_cast<double>(c) / n_real); };

    std::vector<double> w = in.x0;
    std::vector<double> reg(n, 0.0);
    std::vector<bool> alive(n, true);
    std::vector<std::array<double, 4>> normals(n);
    std::vector<std::size_t> dead_count(grid.n_nodes(), 0);
    SimOutput out{LossCurve(grid), std::vector<std::optional<std::size_t>>(n), {}, {}, {}};
    std::size_t dead = 0;

    auto cascade = [&](std::size_t k, const std::vector<bool>& bridged) {
        std::size_t first = dead;
        for (std::size_t i = 0; i < n; ++i) first += (alive[i] && bridged[i]) ? 1 : 0;
        auto hits = [&](std::size_t i, std::size_t c) {
            return std::max(reg[i], threshold(c) - w[i]) >= in.shift[i];
        };
        std::size_t c = first;
        for (;;) {
            std::size_t next = first;
            for (std::size_t i = 0; i < n; ++i) {
                if (alive[i] && !bridged[i] && hits(i, c)) ++next;
            }
            if (next == c) break;
            c = next;
        }
        if (c > first) ++out.summary.cascade_events;
        for (std::size_t i = 0; i < n; ++i) {
            if (!alive[i]) continue;
            if (bridged[i] || hits(i, c)) {
                alive[i] = false;
                out.kill_nodes[i] = k;
            }
        }
        dead = c;
        const double thr = threshold(dead);
        for (std::size_t i = 0; i < n; ++i) {
            if (alive[i]) reg[i] = std::max(reg[i], thr - w[i]);
        }
    };

    std::vector<bool> bridged(n, false);
    cascade(0, bridged);
    dead_count[0] = dead;
    for (std::size_t k = 1; k <= grid.n_steps(); ++k) {
        const std::size_t step = k - 1;
        const double thr_prev = threshold(dead);
        std::fill(bridged.begin(), bridged.end(), false);
        for (std::size_t i = 0; i < n; ++i) {
            if (!alive[i]) continue;
            if (step % 4 == 0) normals[i] = in.streams[i].normal4(Purpose::brownian, static_cast<std::uint32_t>(step / 4));
            const double y_before = w[i] - thr_prev;
            w[i] += sqrt_dt * normals[i][step % 4];
            const double y_after = w[i] - thr_prev;
            if (opts.bridge_correction && std::max(reg[i], -y_after) < in.shift[i]) {
                // Distance of Y above the killing level -xi at both ends.
                const double exponent = 2.0 * (y_before + in.shift[i]) * (y_after + in.shift[i]) / dt;
                if (exponent < 40.0) {
                    bridged[i] = in.streams[i].uniform(Purpose::bridge, static_cast<std::uint32_t>(k)) <
                                 std::exp(-exponent);
                }
            }
        }
        cascade(k, bridged);
        dead_count[k] = dead;
    }
    out.loss_curve = LossCurve(grid, to_loss(dead_count, n));
    out.summary.largest_jump = largest_jump(out.loss_curve);
    return out;
}

}  // namespace detail

/// Elastic particle system: each particle is reflected at 0 and killed once
/// its reflection term exceeds an independent Exp(kappa) threshold; the
/// empirical loss feeds back as drift -alpha Lambda^N. Each step diffuses
/// the alive particles and then resolves the physical cascade.
inline SimOutput simulate_elastic(const ModelParams& params, const RngStream& stream_base,
                                  const SimOptions& opts = {}) {
    params.validate();
    require(!opts.explicit_shift, "simulate_elastic: explicit_shift is only meaningful for the absorbing model");
    const auto in = detail::draw_inputs(params, stream_base, opts, false);
    if (opts.kill_rule == KillRule::running_minimum) {
        require(!opts.store_paths && opts.snapshot_nodes.empty(),
                "simulate_elastic: the running-minimum route records loss and kill nodes only");
        return detail::simulate_running_minimum(params, in, opts);
    }
    return detail::simulate_headroom(params, in, opts);
}

/// Absorbing particle system started from X0 + shift, killed at the first
/// time its position reaches 0. With the default shift xi ~ Exp(kappa),
/// drawn exactly as in simulate_elastic, both systems coincide.
inline SimOutput simulate_absorbing(const ModelParams& params, const RngStream& stream_base,
                                    const SimOptions& opts = {}) {
    params.validate();
    require(opts.kill_rule == KillRule::headroom, "simulate_absorbing: only the headroom rule applies");
    const auto in = detail::draw_inputs(params, stream_base, opts, true);
    return detail::simulate_headroom(params, in, opts);
}

/// Histogram of X_t over the particles alive at node k, with masses
/// counted in units of 1/N.
struct Histogram {
    double bin_width = 0.0;
    std::vector<std::size_t> counts;
    std::size_t n_total = 0;

    [[nodiscard]] double mass(std::size_t bin) const {
        return static_cast<double>(counts[bin]) / static_cast<double>(n_total);
    }
    [[nodiscard]] std::size_t total_count() const {
        std::size_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
    [[nodiscard]] double total_mass() const {
        return static_cast<double>(total_count()) / static_cast<double>(n_total);
    }
};

inline Histogram empirical_density(const SimOutput& output, std::size_t node, double bin_width) {
    require(bin_width > 0.0, "empirical_density: bin_width must be positive");
    std::vector<double> xs;
    if (const Snapshot* s = output.snapshot_at(node)) {
        for (std::size_t i = 0; i < s->x.size(); ++i) {
            if (s->alive[i]) xs.push_back(s->x[i]);
        }
    } else {
        require(!output.y_paths.empty(), "empirical_density: no stored paths or snapshot at this node");
        require(node < output.loss_curve.size(), "empirical_density: node outside the grid");
        for (std::size_t i = 0; i < output.y_paths.size(); ++i) {
            const auto& kill = output.kill_nodes[i];
            if (kill && *kill <= node) continue;
            const auto [x, l] = skorokhod_reflect(output.y_paths[i]);
            xs.push_back(x.values[node]);
        }
    }
    Histogram h;
    h.bin_width = bin_width;
    h.n_total = output.n_particles();
    if (xs.empty()) return h;
    const double top = *std::max_element(xs.begin(), xs.end());
    h.counts.assign(static_cast<std::size_t>(std::floor(top / bin_width)) + 1, 0);
    for (double x : xs) {
        const auto bin = std::min(h.counts.size() - 1, static_cast<std::size_t>(std::max(0.0, x) / bin_width));
        ++h.counts[bin];
    }
    return h;
}

}  // namespace emkv
