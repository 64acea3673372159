#include <catch2/catch_amalgamated.hpp>

#include "emkv/paths.hpp"
#include "property_checks.hpp"

#include <cmath>
#include <random>
#include <vector>

using namespace emkv;
using Catch::Approx;

namespace {

GridPath path(std::vector<double> v) {
    const std::size_t n = v.size() - 1;
    return GridPath(TimeGrid(static_cast<double>(n), n), std::move(v));
}

LossCurve curve(double t_end, std::vector<double> v) {
    const std::size_t n = v.size() - 1;
    return LossCurve(TimeGrid(t_end, n), std::move(v));
}

// Independent Levy oracle: evaluates both step functions at arbitrary real
// t (constant extension outside the grid) on a fine t set that includes
// every breakpoint shifted by +-eps, scanning eps upward in steps of `h`.
double levy_scan(const LossCurve& a, const LossCurve& b, double h) {
    const double dt = a.grid.dt();
    const double t_end = a.grid.t_end();
    auto at = [&](const LossCurve& c, double t) {
        if (t < 0.0) return c.values.front();
        const auto k = static_cast<std::size_t>(std::floor(t / dt + 1e-12));
        return c.values[std::min(k, c.size() - 1)];
    };
    auto holds = [&](const LossCurve& f, const LossCurve& g, double eps) {
        std::vector<double> ts;
        for (double t = -1.0; t <= t_end + 1.0; t += dt / 8.0) ts.push_back(t);
        for (std::size_t k = 0; k < f.size(); ++k) {
            for (double s : {-1e-9, 1e-9}) {
                ts.push_back(f.grid.time(k) + eps + s);
                ts.push_back(f.grid.time(k) - eps + s);
            }
        }
        for (double t : ts) {
            if (at(f, t - eps) - eps > at(g, t) + 1e-12 || at(g, t) > at(f, t + eps) + eps + 1e-12) {
                return false;
            }
        }
        return true;
    };
    for (double eps = 0.0;; eps += h) {
        if (holds(a, b, eps) && holds(b, a, eps)) return eps;
    }
}

}  // namespace

TEST_CASE("time grid nodes", "[paths]") {
    const TimeGrid g(2.0, 8);
    CHECK(g.dt() == 0.25);
    CHECK(g.n_nodes() == 9);
    CHECK(g.time(4) == 1.0);
    CHECK(g.node_at(1.1) == 4);
    CHECK(g.node_at(-3.0) == 0);
    CHECK(g.node_at(9.0) == 8);
    CHECK_THROWS_AS(TimeGrid(0.0, 4), Error);
    CHECK_THROWS_AS(TimeGrid(1.0, 0), Error);
}

TEST_CASE("grid path and loss curve invariants", "[paths]") {
    const TimeGrid g(1.0, 2);
    CHECK_THROWS_AS(GridPath(g, {0.0, 1.0}), Error);
    CHECK_THROWS_AS(GridPath(g, {0.0, NAN, 1.0}), Error);
    CHECK_THROWS_AS(LossCurve(g, {0.0, 0.5, 0.4}), Error);
    CHECK_THROWS_AS(LossCurve(g, {0.0, 0.5, 1.2}), Error);
    CHECK_THROWS_AS(LossCurve(g, {-0.1, 0.5, 0.6}), Error);
    CHECK_NOTHROW(LossCurve(g, {0.0, 0.5, 1.0}));
}

TEST_CASE("skorokhod_reflect examples", "[paths][skorokhod]") {
    {
        const auto [x, l] = skorokhod_reflect(path({1.0, 0.5, 2.0}));
        CHECK(x.values == std::vector<double>{1.0, 0.5, 2.0});
        CHECK(l.values == std::vector<double>{0.0, 0.0, 0.0});
    }
    {
        const auto [x, l] = skorokhod_reflect(path({1.0, -0.5, 0.25}));
        CHECK(l.values == std::vector<double>{0.0, 0.5, 0.5});
        CHECK(x.values == std::vector<double>{1.0, 0.0, 0.75});
    }
    {
        const auto [x, l] = skorokhod_reflect(path({-0.3, 0.1, -0.6}));
        CHECK(l.values == std::vector<double>{0.3, 0.3, 0.6});
        CHECK(x[0] == 0.0);
        CHECK(x[1] == Approx(0.4).margin(1e-15));
        CHECK(x[2] == 0.0);
    }
}

TEST_CASE("skorokhod map properties", "[paths][skorokhod][property]") {
    CHECK(checks::skorokhod_properties(20240601, 3000).empty());
}

TEST_CASE("sup_distance examples", "[paths]") {
    const TimeGrid g(2.0, 2);
    const GridPath a(g, {0.0, 0.0, 0.0});
    const GridPath b(g, {0.0, 0.2, 0.1});
    CHECK(sup_distance(a, a) == 0.0);
    CHECK(sup_distance(a, b) == Approx(0.2));
    CHECK(sup_distance(GridPath(g, {1, 2, 3}), GridPath(g, {1, 2, 3 - 1e-12})) <= 1e-11);
    CHECK_THROWS_AS(sup_distance(a, GridPath(TimeGrid(1.0, 2))), Error);
}

TEST_CASE("levy_metric examples", "[paths][levy]") {
    // Unit steps at t = 1 and t = 1.5 on dt = 0.25, t_end = 3.
    std::vector<double> s1(13, 0.0);
    std::vector<double> s2(13, 0.0);
    for (std::size_t k = 4; k < 13; ++k) s1[k] = 1.0;
    for (std::size_t k = 6; k < 13; ++k) s2[k] = 1.0;
    const LossCurve a = curve(3.0, s1);
    const LossCurve b = curve(3.0, s2);
    CHECK(levy_metric(a, a) == 0.0);
    const double d = levy_metric(a, b);
    CHECK(d == Approx(0.5).margin(2e-9));
    CHECK(d == Approx(levy_scan(a, b, 1e-4)).margin(2e-4));

    // Constants 0 and c: no time shift helps, so the distance is c.
    const LossCurve zero = curve(3.0, std::vector<double>(13, 0.0));
    const LossCurve c = curve(3.0, std::vector<double>(13, 0.3));
    CHECK(levy_metric(zero, c) == Approx(0.3).margin(2e-9));
    CHECK(levy_metric(zero, c) <= sup_distance(zero, c) + 1e-9);
    CHECK_THROWS_AS(levy_metric(a, curve(2.0, std::vector<double>(13, 0.0))), Error);
}

TEST_CASE("levy_metric agrees with a brute-force scan", "[paths][levy][property]") {
    std::mt19937_64 gen(77);
    std::uniform_real_distribution<double> u(0.0, 0.3);
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> va(11);
        std::vector<double> vb(11);
        double sa = 0.0;
        double sb = 0.0;
        for (std::size_t k = 0; k < 11; ++k) {
            va[k] = sa = std::min(1.0, sa + u(gen) * (trial % 2 ? 1.0 : 0.4));
            vb[k] = sb = std::min(1.0, sb + u(gen) * 0.6);
        }
        const LossCurve a = curve(1.0, va);
        const LossCurve b = curve(1.0, vb);
        CHECK(levy_metric(a, b) == Approx(levy_scan(a, b, 1e-4)).margin(2e-4));
    }
}

TEST_CASE("levy_metric is a pseudometric bounded by sup", "[paths][levy][property]") {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(0.0, 0.2);
    auto random_curve = [&] {
        std::vector<double> v(41);
        double s = 0.0;
        for (auto& x : v) x = s = std::min(1.0, s + (u(gen) < 0.02 ? 0.3 : u(gen) * 0.1));
        return curve(2.0, v);
    };
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_curve();
        const auto b = random_curve();
        const auto c = random_curve();
        const double ab = levy_metric(a, b);
        CHECK(ab >= 0.0);
        CHECK(ab == Approx(levy_metric(b, a)).margin(1e-9));
        CHECK(ab <= sup_distance(a, b) + 1e-9);
        CHECK(levy_metric(a, c) <= ab + levy_metric(b, c) + 3e-9);
    }
}

TEST_CASE("jump_detect examples", "[paths][jumps]") {
    const TimeGrid g(3.0, 3);
    CHECK(jump_detect(LossCurve(g), 0.1).empty());
    const auto jumps = jump_detect(LossCurve(g, {0.0, 0.01, 0.4, 0.41}), 0.1);
    REQUIRE(jumps.size() == 1);
    CHECK(jumps[0].node == 2);
    CHECK(jumps[0].size == Approx(0.39));
    const auto initial = jump_detect(LossCurve(TimeGrid(2.0, 2), {0.2, 0.2, 0.2}), 0.1);
    REQUIRE(initial.size() == 1);
    CHECK(initial[0].node == 0);
    CHECK(initial[0].size == Approx(0.2));
    CHECK_THROWS_AS(jump_detect(LossCurve(g), 0.0), Error);
    CHECK(largest_jump(LossCurve(g, {0.0, 0.01, 0.4, 0.41})) == Approx(0.39));
}
