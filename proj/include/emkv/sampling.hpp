#pragma once

#include "emkv/error.hpp"
#include "emkv/paths.hpp"
#include "emkv/rng.hpp"

#include <boost/math/distributions/gamma.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace emkv {

namespace law {

struct PointMass {
    double x0 = 0.0;
};

struct Uniform {
    double a = 0.0;
    double b = 1.0;
};

struct Gamma {
    double shape = 1.0;
    double scale = 1.0;
};

struct ShiftedExponential {
    double shift = 0.0;
    double rate = 1.0;
};

}  // namespace law

/// Law of the initial position X_{0-}; all variants live on [0, inf).
using InitialLaw = std::variant<law::PointMass, law::Uniform, law::Gamma, law::ShiftedExponential>;

inline void validate(const InitialLaw& l) {
    std::visit(
        [](const auto& v) {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) {
                require(std::isfinite(v.x0) && v.x0 >= 0.0, "PointMass: x0 must be >= 0");
            } else if constexpr (std::is_same_v<T, law::Uniform>) {
                require(std::isfinite(v.b) && v.a >= 0.0 && v.a < v.b, "Uniform: need 0 <= a < b");
            } else if constexpr (std::is_same_v<T, law::Gamma>) {
                require(std::isfinite(v.shape) && std::isfinite(v.scale) && v.shape > 0.0 && v.scale > 0.0,
                        "Gamma: shape and scale must be positive");
            } else {
                require(std::isfinite(v.shift) && v.shift >= 0.0, "ShiftedExponential: shift must be >= 0");
                require(std::isfinite(v.rate) && v.rate > 0.0, "ShiftedExponential: rate must be positive");
            }
        },
        l);
}

/// Closed-form mean m_{0-}.
inline double mean_initial(const InitialLaw& l) {
    return std::visit(
        [](const auto& v) -> double {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) return v.x0;
            else if constexpr (std::is_same_v<T, law::Uniform>) return 0.5 * (v.a + v.b);
            else if constexpr (std::is_same_v<T, law::Gamma>) return v.shape * v.scale;
            else return v.shift + 1.0 / v.rate;
        },
        l);
}

/// PointMass has no density, so the uniqueness theory for physical
/// solutions does not cover it. Gamma with shape < 1 has an unbounded one.
inline bool has_bounded_density(const InitialLaw& l) {
    if (std::holds_alternative<law::PointMass>(l)) return false;
    if (const auto* g = std::get_if<law::Gamma>(&l)) return g->shape >= 1.0;
    return true;
}

inline std::string law_name(const InitialLaw& l) {
    static constexpr const char* names[] = {"point_mass", "uniform", "gamma", "shifted_exponential"};
    return names[l.index()];
}

/// CDF of the law, used by distributional regression tests.
inline double law_cdf(const InitialLaw& l, double x) {
    return std::visit(
        [x](const auto& v) -> double {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) {
                return x >= v.x0 ? 1.0 : 0.0;
            } else if constexpr (std::is_same_v<T, law::Uniform>) {
                return std::clamp((x - v.a) / (v.b - v.a), 0.0, 1.0);
            } else if constexpr (std::is_same_v<T, law::Gamma>) {
                if (x <= 0.0) return 0.0;
                return boost::math::cdf(boost::math::gamma_distribution<double>(v.shape, v.scale), x);
            } else {
                return x <= v.shift ? 0.0 : -std::expm1(-v.rate * (x - v.shift));
            }
        },
        l);
}

/// Density of the law (zero for PointMass, which has none).
inline double law_density(const InitialLaw& l, double x) {
    return std::visit(
        [x](const auto& v) -> double {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) {
                return 0.0;
            } else if constexpr (std::is_same_v<T, law::Uniform>) {
                return (x >= v.a && x <= v.b) ? 1.0 / (v.b - v.a) : 0.0;
            } else if constexpr (std::is_same_v<T, law::Gamma>) {
                if (x <= 0.0) return 0.0;
                return boost::math::pdf(boost::math::gamma_distribution<double>(v.shape, v.scale), x);
            } else {
                return x < v.shift ? 0.0 : v.rate * std::exp(-v.rate * (x - v.shift));
            }
        },
        l);
}

/// The i-th draw from `law` on `stream`.
inline double draw_initial(const InitialLaw& l, const RngStream& stream, std::uint32_t index) {
    return std::visit(
        [&](const auto& v) -> double {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, law::PointMass>) {
                return v.x0;
            } else if constexpr (std::is_same_v<T, law::Uniform>) {
                return v.a + (v.b - v.a) * stream.uniform(Purpose::initial, index);
            } else if constexpr (std::is_same_v<T, law::Gamma>) {
                PhiloxEngine engine(stream, Purpose::initial, index);
                return std::gamma_distribution<double>(v.shape, v.scale)(engine);
            } else {
                return v.shift + stream.unit_exponential(Purpose::initial, index) / v.rate;
            }
        },
        l);
}

inline std::vector<double> sample_initial(const InitialLaw& l, std::size_t n, const RngStream& stream) {
    require(n >= 1, "sample_initial: n must be >= 1");
    require(n <= std::numeric_limits<std::uint32_t>::max(), "sample_initial: n too large");
    validate(l);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = draw_initial(l, stream, static_cast<std::uint32_t>(i));
    return out;
}

/// Elastic thresholds xi_i = E_i / kappa. The unit exponentials E_i depend
/// only on (seed, stream_id, i), so every kappa sees the same E_i.
inline std::vector<double> sample_exponential(double kappa, std::size_t n, const RngStream& stream) {
    require(std::isfinite(kappa) && kappa > 0.0, "sample_exponential: kappa must be positive");
    require(n <= std::numeric_limits<std::uint32_t>::max(), "sample_exponential: n too large");
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = stream.unit_exponential(Purpose::threshold, static_cast<std::uint32_t>(i)) / kappa;
    }
    return out;
}

/// Physical parameters of the elastic McKean-Vlasov model.
/// kappa == 0 encodes the purely reflecting case (no elastic killing).
struct ModelParams {
    double alpha = 1.0;
    double kappa = 1.0;
    InitialLaw law = law::Uniform{0.2, 1.2};
    TimeGrid grid{1.0, 1000};
    std::size_t n_particles = 1000;

    void validate() const {
        require(std::isfinite(alpha) && alpha > 0.0, "ModelParams: alpha must be positive");
        require(std::isfinite(kappa) && kappa >= 0.0, "ModelParams: kappa must be >= 0");
        require(n_particles >= 1, "ModelParams: n_particles must be >= 1");
        require(n_particles <= std::numeric_limits<std::uint32_t>::max(), "ModelParams: n_particles too large");
        require(grid.n_steps() / 4 < std::numeric_limits<std::uint32_t>::max(), "ModelParams: too many steps");
        emkv::validate(law);
    }
};

}  // namespace emkv
