#pragma once

#include "emkv/error.hpp"
#include "emkv/mkv_solver.hpp"
#include "emkv/particle.hpp"
#include "emkv/paths.hpp"
#include "emkv/rng.hpp"
#include "emkv/sampling.hpp"
#include "emkv/stefan_pde.hpp"

#include <json.hpp>
#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace emkv {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kConfigSchemaVersion = 1;

using Json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Formatting and CSV tables
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal representation.
inline std::string format_number(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    require(!std::isnan(x), "format_number: NaN");
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline double parse_number(std::string_view s) {
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    require(res.ec == std::errc{} && res.ptr == s.data() + s.size(), "parse_number: not a number: '" + std::string(s) + "'");
    return x;
}

struct Table {
    std::string file;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) {
        require(row.size() == header.size(), "Table " + file + ": row width does not match the header");
        rows.push_back(std::move(row));
    }

    [[nodiscard]] std::string to_csv() const {
        std::string out;
        auto line = [&out](const std::vector<std::string>& cells) {
            for (std::size_t i = 0; i < cells.size(); ++i) {
                if (i) out += ',';
                out += cells[i];
            }
            out += '\n';
        };
        line(header);
        for (const auto& r : rows) line(r);
        return out;
    }
};

inline Table parse_csv(const std::string& text, std::string file = {}) {
    Table t;
    t.file = std::move(file);
    std::istringstream in(text);
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (first) {
            t.header = std::move(cells);
            first = false;
        } else {
            t.add(std::move(cells));
        }
    }
    require(!first, "parse_csv: missing header in " + t.file);
    return t;
}

inline Table read_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), "read_csv: cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_csv(ss.str(), path.filename().string());
}

/// loss_<tag>.csv with header t,lambda. The curve is re-validated here.
inline Table loss_table(const std::string& tag, const LossCurve& curve) {
    const LossCurve checked(curve.grid, curve.values);
    Table t{"loss_" + tag + ".csv", {"t", "lambda"}, {}};
    for (std::size_t k = 0; k < checked.size(); ++k) {
        t.add({format_number(checked.grid.time(k)), format_number(checked.values[k])});
    }
    return t;
}

/// Inverse of loss_table: rebuilds the curve on a grid inferred from the t column.
inline LossCurve loss_from_table(const Table& t) {
    require(t.header == std::vector<std::string>{"t", "lambda"}, "loss_from_table: expected header t,lambda");
    require(t.rows.size() >= 2, "loss_from_table: need at least two rows");
    const TimeGrid grid(parse_number(t.rows.back()[0]), t.rows.size() - 1);
    std::vector<double> v;
    for (const auto& r : t.rows) v.push_back(parse_number(r[1]));
    return LossCurve(grid, std::move(v));
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    require(EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) == 1, "sha256: digest failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class ExperimentKind { kappa_sweep, n_sweep, pde_compare, blowup_demo, picard_vs_particle };

inline std::string kind_name(ExperimentKind k) {
    switch (k) {
        case ExperimentKind::kappa_sweep: return "kappa_sweep";
        case ExperimentKind::n_sweep: return "n_sweep";
        case ExperimentKind::pde_compare: return "pde_compare";
        case ExperimentKind::blowup_demo: return "blowup_demo";
        case ExperimentKind::picard_vs_particle: return "picard_vs_particle";
    }
    return "unknown";
}

struct PdeSettings {
    PdeGrid grid;
    double mollify_width = 0.02;
    std::size_t snapshot_every = 0;
};

struct ExperimentConfig {
    ExperimentKind kind = ExperimentKind::kappa_sweep;
    ModelParams params;
    bool bridge_correction = true;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    int threads = 1;

    std::vector<double> kappas;
    bool absorbing_limit = true;
    std::vector<std::size_t> n_list;
    std::size_t replications = 1;
    std::optional<double> jump_threshold;
    double histogram_bin_width = 0.05;
    bool shared_bank = false;
    PicardConfig picard;
    PdeSettings pde;

    Json source;  ///< the parsed document, echoed into the manifest

    /// Caller-supplied threshold or 10/N.
    [[nodiscard]] double jump_threshold_for(std::size_t n) const {
        return jump_threshold ? *jump_threshold : 10.0 / static_cast<double>(n);
    }
};

namespace detail {

inline void check_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
    require(j.is_object(), where + ": expected an object");
    for (const auto& [key, value] : j.items()) {
        require(allowed.count(key) == 1, where + ": unknown key '" + key + "'");
    }
}

template <class T>
T get_or(const Json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("config: bad value for '") + key + "': " + e.what());
    }
}

template <class T>
T get_required(const Json& j, const char* key, const std::string& where) {
    require(j.contains(key), where + ": missing required key '" + key + "'");
    return get_or<T>(j, key, T{});
}

inline InitialLaw law_from_json(const Json& j) {
    const auto type = get_required<std::string>(j, "type", "law");
    InitialLaw l;
    if (type == "point_mass") {
        check_keys(j, {"type", "x0"}, "law");
        l = law::PointMass{get_required<double>(j, "x0", "law")};
    } else if (type == "uniform") {
        check_keys(j, {"type", "a", "b"}, "law");
        l = law::Uniform{get_required<double>(j, "a", "law"), get_required<double>(j, "b", "law")};
    } else if (type == "gamma") {
        check_keys(j, {"type", "shape", "scale"}, "law");
        l = law::Gamma{get_required<double>(j, "shape", "law"), get_required<double>(j, "scale", "law")};
    } else if (type == "shifted_exponential") {
        check_keys(j, {"type", "shift", "rate"}, "law");
        l = law::ShiftedExponential{get_required<double>(j, "shift", "law"), get_required<double>(j, "rate", "law")};
    } else {
        throw Error("law: unknown type '" + type + "'");
    }
    validate(l);
    return l;
}

template <class T>
void require_sorted(const std::vector<T>& v, const std::string& what) {
    require(!v.empty(), what + " must be nonempty");
    for (std::size_t i = 1; i < v.size(); ++i) require(v[i - 1] < v[i], what + " must be strictly increasing");
}

}  // namespace detail

inline ExperimentConfig parse_config(const Json& j) {
    using detail::get_or;
    using detail::get_required;
    detail::check_keys(j,
                       {"schema_version", "kind", "seed", "output_dir", "threads", "params", "kappas",
                        "absorbing_limit", "n_list", "replications", "jump_threshold", "histogram_bin_width",
                        "shared_bank", "picard", "pde"},
                       "config");
    ExperimentConfig c;
    c.source = j;
    require(get_required<int>(j, "schema_version", "config") == kConfigSchemaVersion,
            "config: unsupported schema_version (expected 1)");
    const auto kind = get_required<std::string>(j, "kind", "config");
    bool known = false;
    for (auto k : {ExperimentKind::kappa_sweep, ExperimentKind::n_sweep, ExperimentKind::pde_compare,
                   ExperimentKind::blowup_demo, ExperimentKind::picard_vs_particle}) {
        if (kind_name(k) == kind) {
            c.kind = k;
            known = true;
        }
    }
    require(known, "config: unknown kind '" + kind + "'");
    require(j.contains("seed") && j.at("seed").is_number_integer() &&
                (j.at("seed").is_number_unsigned() || j.at("seed").get<std::int64_t>() >= 0),
            "config: seed must be an unsigned integer");
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
    c.threads = get_or<int>(j, "threads", 1);
    require(c.threads >= 1, "config: threads must be >= 1");

    require(j.contains("params"), "config: missing required key 'params'");
    const Json& p = j.at("params");
    detail::check_keys(p, {"alpha", "kappa", "law", "t_end", "n_steps", "n_particles", "bridge_correction"},
                       "params");
    c.params.alpha = get_required<double>(p, "alpha", "params");
    c.params.kappa = get_or<double>(p, "kappa", 1.0);
    c.params.law = detail::law_from_json(get_required<Json>(p, "law", "params"));
    c.params.grid = TimeGrid(get_or<double>(p, "t_end", 1.0), get_or<std::size_t>(p, "n_steps", 1000));
    c.params.n_particles = get_or<std::size_t>(p, "n_particles", 1000);
    c.bridge_correction = get_or<bool>(p, "bridge_correction", true);
    c.params.validate();

    c.absorbing_limit = get_or<bool>(j, "absorbing_limit", true);
    c.replications = get_or<std::size_t>(j, "replications", 1);
    require(c.replications >= 1, "config: replications must be >= 1");
    if (j.contains("jump_threshold")) {
        c.jump_threshold = get_or<double>(j, "jump_threshold", 0.0);
        require(*c.jump_threshold > 0.0 && *c.jump_threshold < 1.0, "config: jump_threshold must be in (0,1)");
    }
    c.histogram_bin_width = get_or<double>(j, "histogram_bin_width", c.histogram_bin_width);
    require(c.histogram_bin_width > 0.0, "config: histogram_bin_width must be positive");
    c.shared_bank = get_or<bool>(j, "shared_bank", false);

    if (j.contains("picard")) {
        const Json& q = j.at("picard");
        detail::check_keys(q, {"n_iter_max", "mc_samples", "bridge_correction", "stop_tol"}, "picard");
        c.picard.n_iter_max = get_or<std::size_t>(q, "n_iter_max", c.picard.n_iter_max);
        c.picard.mc_samples = get_or<std::size_t>(q, "mc_samples", c.picard.mc_samples);
        c.picard.bridge_correction = get_or<bool>(q, "bridge_correction", true);
        c.picard.stop_tol = get_or<double>(q, "stop_tol", 0.0);
        require(c.picard.stop_tol >= 0.0, "picard: stop_tol must be >= 0 (0 selects 2/sqrt(mc_samples))");
    }
    c.picard.threads = c.threads;
    c.picard.validate();

    c.pde.grid.t_end = c.params.grid.t_end();
    if (j.contains("pde")) {
        const Json& q = j.at("pde");
        detail::check_keys(q, {"x_max", "nx", "dt", "mollify_width", "snapshot_every", "tail_tolerance"}, "pde");
        c.pde.grid.x_max = get_or<double>(q, "x_max", c.pde.grid.x_max);
        c.pde.grid.nx = get_or<std::size_t>(q, "nx", c.pde.grid.nx);
        c.pde.grid.dt = get_or<double>(q, "dt", c.pde.grid.dt);
        c.pde.grid.tail_tolerance = get_or<double>(q, "tail_tolerance", c.pde.grid.tail_tolerance);
        c.pde.mollify_width = get_or<double>(q, "mollify_width", c.pde.mollify_width);
        c.pde.snapshot_every = get_or<std::size_t>(q, "snapshot_every", 0);
    }
    c.pde.grid.validate();
    require(c.pde.mollify_width >= 0.0, "pde: mollify_width must be >= 0");

    switch (c.kind) {
        case ExperimentKind::kappa_sweep:
            c.kappas = get_required<std::vector<double>>(j, "kappas", "config");
            detail::require_sorted(c.kappas, "kappas");
            require(c.kappas.front() >= 0.0, "kappas must be >= 0");
            break;
        case ExperimentKind::n_sweep:
            c.n_list = get_required<std::vector<std::size_t>>(j, "n_list", "config");
            detail::require_sorted(c.n_list, "n_list");
            require(c.n_list.front() >= 1, "n_list entries must be >= 1");
            require(c.n_list.back() <= std::numeric_limits<std::uint32_t>::max(), "n_list entries too large");
            break;
        case ExperimentKind::pde_compare:
            require(c.params.kappa > 0.0 || c.params.alpha > 0.0, "pde_compare: invalid parameters");
            break;
        default:
            break;
    }
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot open config " + path.string());
    Json j;
    try {
        j = Json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error("config " + path.string() + ": " + e.what());
    }
    return parse_config(j);
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct RunManifest {
    Json doc;

    [[nodiscard]] bool valid() const { return doc.value("status", "") == "valid"; }
    [[nodiscard]] const Json& files() const { return doc.at("files"); }
};

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Writes every table under `dir`, records name/size/sha256 in
/// manifest.doc["files"], then writes run.json. Returns the inventory.
inline Json write_outputs(const std::vector<Table>& tables, RunManifest& manifest, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    require(!ec, "write_outputs: cannot create " + dir.string() + ": " + ec.message());
    Json inventory = Json::array();
    for (const auto& t : tables) {
        const std::string body = t.to_csv();
        const auto path = dir / t.file;
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << body;
        out.close();
        require(static_cast<bool>(out), "write_outputs: failed writing " + path.string());
        inventory.push_back({{"path", t.file}, {"bytes", body.size()}, {"sha256", sha256_hex(body)}});
    }
    manifest.doc["files"] = inventory;
    const auto path = dir / "run.json";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << manifest.doc.dump(2) << '\n';
    out.close();
    require(static_cast<bool>(out), "write_outputs: failed writing " + path.string());
    return inventory;
}

namespace detail {

/// Error raised inside a named sub-run.
struct SubRunError : Error {
    std::string sub_run;
    SubRunError(std::string name, const std::string& what) : Error(what), sub_run(std::move(name)) {}
};

template <class F>
auto sub_run(const std::string& name, F&& f) {
    try {
        return f();
    } catch (const SubRunError&) {
        throw;
    } catch (const std::exception& e) {
        throw SubRunError(name, e.what());
    }
}

inline void add_jumps(Table& jumps, const LossCurve& l, double threshold, const std::string& param) {
    for (const auto& j : jump_detect(l, threshold)) {
        jumps.add({format_number(l.grid.time(j.node)), format_number(j.size), param});
    }
}

inline void add_distance(Table& d, const std::string& a, const std::string& b, const LossCurve& la,
                         const LossCurve& lb) {
    d.add({a, b, format_number(levy_metric(la, lb)), format_number(sup_distance(la, lb))});
}

inline Table distances_table() { return Table{"distances.csv", {"param_a", "param_b", "levy", "sup"}, {}}; }
inline Table jumps_table() { return Table{"jumps.csv", {"t", "size", "param"}, {}}; }

inline Table density_table(const std::string& tag) { return Table{"density_" + tag + ".csv", {"t", "x", "v"}, {}}; }

inline bool blowup_flag(const ModelParams& p) {
    return p.kappa > 0.0 && blowup_guaranteed(p.alpha, p.law, p.kappa);
}

struct RunState {
    const ExperimentConfig& config;
    std::vector<Table> tables;
    Json diagnostics = Json::object();
};

inline SimOptions particle_options(const ExperimentConfig& c) {
    SimOptions o;
    o.bridge_correction = c.bridge_correction;
    o.threads = c.threads;
    return o;
}

inline void run_kappa_sweep(RunState& st) {
    const auto& c = st.config;
    const RngStream stream{c.seed, 0};
    Table dist = distances_table();
    Table jumps = jumps_table();
    std::vector<LossCurve> curves;
    std::vector<std::string> tags;
    Json flags = Json::array();
    for (double kappa : c.kappas) {
        ModelParams p = c.params;
        p.kappa = kappa;
        const std::string tag = "kappa_" + format_number(kappa);
        auto out = sub_run(tag, [&] { return simulate_elastic(p, stream, particle_options(c)); });
        curves.push_back(out.loss_curve);
        tags.push_back(format_number(kappa));
        st.tables.push_back(loss_table(tag, out.loss_curve));
        add_jumps(jumps, out.loss_curve, c.jump_threshold_for(p.n_particles), tags.back());
        flags.push_back({{"kappa", kappa}, {"blowup_guaranteed", blowup_flag(p)}});
    }
    if (c.absorbing_limit) {
        SimOptions o = particle_options(c);
        o.explicit_shift = std::vector<double>(c.params.n_particles, 0.0);
        auto out = sub_run("absorbing", [&] { return simulate_absorbing(c.params, stream, o); });
        curves.push_back(out.loss_curve);
        tags.push_back("inf");
        st.tables.push_back(loss_table("absorbing", out.loss_curve));
        add_jumps(jumps, out.loss_curve, c.jump_threshold_for(c.params.n_particles), "inf");
    }
    bool monotone = true;
    for (std::size_t i = 0; i + 1 < curves.size(); ++i) {
        add_distance(dist, tags[i], tags[i + 1], curves[i], curves[i + 1]);
        for (std::size_t k = 0; k < curves[i].size(); ++k) monotone &= curves[i][k] <= curves[i + 1][k];
    }
    if (c.absorbing_limit) {
        for (std::size_t i = 0; i + 2 < curves.size(); ++i) add_distance(dist, tags[i], "inf", curves[i], curves.back());
    }
    st.tables.push_back(std::move(dist));
    st.tables.push_back(std::move(jumps));
    st.diagnostics["kappa_monotone"] = monotone;
    st.diagnostics["per_kappa"] = flags;
}

inline void run_n_sweep(RunState& st) {
    const auto& c = st.config;
    const RngStream stream{c.seed, 0};
    Table dist = distances_table();
    Table jumps = jumps_table();
    std::vector<LossCurve> curves;
    for (std::size_t n : c.n_list) {
        ModelParams p = c.params;
        p.n_particles = n;
        const std::string tag = "N_" + std::to_string(n);
        auto out = sub_run(tag, [&] { return simulate_elastic(p, stream, particle_options(c)); });
        curves.push_back(out.loss_curve);
        st.tables.push_back(loss_table(tag, out.loss_curve));
        add_jumps(jumps, out.loss_curve, c.jump_threshold_for(n), std::to_string(n));
    }
    Json levy = Json::array();
    bool decreasing = true;
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i + 1 < curves.size(); ++i) {
        add_distance(dist, std::to_string(c.n_list[i]), std::to_string(c.n_list.back()), curves[i], curves.back());
        const double d = levy_metric(curves[i], curves.back());
        decreasing &= d <= previous;
        previous = d;
        levy.push_back(d);
    }
    st.tables.push_back(std::move(dist));
    st.tables.push_back(std::move(jumps));
    st.diagnostics["levy_to_largest_n"] = levy;
    st.diagnostics["levy_decreasing_in_n"] = decreasing;
}

inline void run_blowup_demo(RunState& st) {
    const auto& c = st.config;
    Table jumps = jumps_table();
    Json largest = Json::array();
    for (std::size_t r = 0; r < c.replications; ++r) {
        const std::string tag = "rep_" + std::to_string(r);
        auto out = sub_run(tag, [&] { return simulate_elastic(c.params, RngStream{c.seed, r}, particle_options(c)); });
        st.tables.push_back(loss_table(tag, out.loss_curve));
        add_jumps(jumps, out.loss_curve, c.jump_threshold_for(c.params.n_particles), std::to_string(r));
        largest.push_back(out.summary.largest_jump);
    }
    st.tables.push_back(std::move(jumps));
    st.diagnostics["largest_jump"] = largest;
}

inline void run_picard_vs_particle(RunState& st) {
    const auto& c = st.config;
    const RngStream particle_stream{c.seed, 0};
    const RngStream picard_stream{c.seed, c.shared_bank ? 0u : 1u};
    auto particle = sub_run("particle", [&] { return simulate_elastic(c.params, particle_stream, particle_options(c)); });
    PicardConfig pc = c.picard;
    pc.threads = c.threads;
    auto report = sub_run("picard", [&] { return picard_solve(c.params, pc, picard_stream); });
    st.tables.push_back(loss_table("particle", particle.loss_curve));
    st.tables.push_back(loss_table("picard", report.final()));
    Table dist = distances_table();
    add_distance(dist, "particle", "picard", particle.loss_curve, report.final());
    Table jumps = jumps_table();
    add_jumps(jumps, particle.loss_curve, c.jump_threshold_for(c.params.n_particles), "particle");
    add_jumps(jumps, report.final(), c.jump_threshold_for(c.picard.mc_samples), "picard");
    bool monotone = true;
    for (std::size_t n = 0; n + 1 < report.iterates.size(); ++n) {
        for (std::size_t k = 0; k < report.iterates[n].size(); ++k) {
            monotone &= report.iterates[n][k] <= report.iterates[n + 1][k];
        }
    }
    st.tables.push_back(std::move(dist));
    st.tables.push_back(std::move(jumps));
    st.diagnostics["picard_applications"] = report.applications();
    st.diagnostics["picard_converged"] = report.converged;
    st.diagnostics["picard_distances"] = report.distances;
    st.diagnostics["picard_iterates_monotone"] = monotone;
}

inline void run_pde_compare(RunState& st) {
    const auto& c = st.config;
    const ModelParams& p = c.params;
    const PdeGrid& g = c.pde.grid;

    std::vector<double> snapshot_times;
    const std::size_t steps = g.n_steps();
    const std::size_t every = c.pde.snapshot_every;
    for (std::size_t n = 0; n <= steps; ++n) {
        if (n == 0 || n == steps || (every > 0 && n % every == 0)) snapshot_times.push_back(g.dt * static_cast<double>(n));
    }
    SimOptions opts = particle_options(c);
    for (double t : snapshot_times) {
        const std::size_t node = p.grid.node_at(t);
        if (std::find(opts.snapshot_nodes.begin(), opts.snapshot_nodes.end(), node) == opts.snapshot_nodes.end()) {
            opts.snapshot_nodes.push_back(node);
        }
    }
    auto particle = sub_run("particle", [&] { return simulate_elastic(p, RngStream{c.seed, 0}, opts); });
    st.tables.push_back(loss_table("particle", particle.loss_curve));

    Table hist = density_table("particle");
    for (const auto& snap : particle.snapshots) {
        const Histogram h = empirical_density(particle, snap.node, c.histogram_bin_width);
        for (std::size_t b = 0; b < h.counts.size(); ++b) {
            hist.add({format_number(p.grid.time(snap.node)), format_number((static_cast<double>(b) + 0.5) * h.bin_width),
                      format_number(h.mass(b) / h.bin_width)});
        }
    }
    st.tables.push_back(std::move(hist));

    auto pde = sub_run("pde", [&] {
        const auto v0 = initial_density(p.law, g, c.pde.mollify_width);
        return pde_solve(p, g, v0, every);
    });
    st.tables.push_back(loss_table("pde", pde.loss_curve));
    Table dens = density_table("pde");
    for (const auto& s : pde.snapshots) {
        for (std::size_t j = 0; j < s.v.size(); ++j) {
            dens.add({format_number(s.time), format_number(g.x(j)), format_number(s.v[j])});
        }
    }
    st.tables.push_back(std::move(dens));

    Table dist = distances_table();
    add_distance(dist, "particle", "pde", particle.loss_curve, pde.loss_curve);
    st.tables.push_back(std::move(dist));
    Table jumps = jumps_table();
    add_jumps(jumps, particle.loss_curve, c.jump_threshold_for(p.n_particles), "particle");
    add_jumps(jumps, pde.loss_curve, c.jump_threshold_for(p.n_particles), "pde");
    st.tables.push_back(std::move(jumps));

    const double sup = sup_distance(particle.loss_curve, pde.loss_curve);
    st.diagnostics["sup_particle_pde"] = sup;
    st.diagnostics["max_mass_defect"] = pde.max_mass_defect;
    st.diagnostics["max_tail_mass"] = pde.max_tail_mass;
    st.diagnostics["tail_warning"] = pde.tail_warning;
    st.diagnostics["mollify_width"] = c.pde.mollify_width;
    // The density solver is only meaningful while the loss stays continuous.
    st.diagnostics["pde_tracks_particle"] = !blowup_flag(p) && sup <= 0.02;
    if (p.kappa > 0.0) {
        double worst = 0.0;
        for (const auto& f : stefan_transform(pde, p, g)) {
            if (f.time > 0.0) worst = std::max(worst, std::abs(f.undercooling_residual()));
        }
        st.diagnostics["epsilon"] = 2.0 / (p.alpha * p.kappa);
        st.diagnostics["max_undercooling_residual"] = worst;
    }
}

}  // namespace detail

/// Runs the experiment described by `config`, writes its tables and
/// run.json under output_dir and returns the manifest. Sub-run failures do
/// not throw: whatever was produced is written and the manifest says
/// "invalid" with the failing sub-run.
inline RunManifest run_experiment(const ExperimentConfig& config) {
    RunManifest m;
    m.doc["tool"] = "elastic-mkv";
    m.doc["version"] = kVersion;
    m.doc["schema_version"] = kConfigSchemaVersion;
    m.doc["config"] = config.source;
    m.doc["effective"] = {{"seed", config.seed}, {"threads", config.threads}, {"output_dir", config.output_dir}};
    m.doc["started_at"] = utc_timestamp();
    m.doc["flags"] = {{"blowup_guaranteed", detail::blowup_flag(config.params)},
                      {"density_hypothesis", has_bounded_density(config.params.law)},
                      {"initial_law", law_name(config.params.law)},
                      {"bridge_correction", config.bridge_correction}};
    if (config.kind == ExperimentKind::pde_compare) m.doc["flags"]["mollify_width"] = config.pde.mollify_width;

    detail::RunState st{config, {}, Json::object()};
    m.doc["status"] = "valid";
    try {
        switch (config.kind) {
            case ExperimentKind::kappa_sweep: detail::run_kappa_sweep(st); break;
            case ExperimentKind::n_sweep: detail::run_n_sweep(st); break;
            case ExperimentKind::pde_compare: detail::run_pde_compare(st); break;
            case ExperimentKind::blowup_demo: detail::run_blowup_demo(st); break;
            case ExperimentKind::picard_vs_particle: detail::run_picard_vs_particle(st); break;
        }
    } catch (const detail::SubRunError& e) {
        m.doc["status"] = "invalid";
        m.doc["error"] = {{"sub_run", e.sub_run}, {"message", e.what()}};
    }
    m.doc["diagnostics"] = st.diagnostics;
    m.doc["finished_at"] = utc_timestamp();
    write_outputs(st.tables, m, config.output_dir);
    return m;
}

}  // namespace emkv
