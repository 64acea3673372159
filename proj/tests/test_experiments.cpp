#include <catch2/catch_amalgamated.hpp>

#include "emkv/experiments.hpp"

#include <filesystem>
#include <fstream>
#include <string>

using namespace emkv;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = EMKV_SOURCE_DIR;
const fs::path kWork = EMKV_WORK_DIR;

Json tiny(const std::string& kind) {
    Json j = {{"schema_version", 1},
              {"kind", kind},
              {"seed", 17},
              {"params",
               {{"alpha", 0.8},
                {"kappa", 1.0},
                {"law", {{"type", "uniform"}, {"a", 0.2}, {"b", 1.2}}},
                {"t_end", 1.0},
                {"n_steps", 100},
                {"n_particles", 800}}}};
    return j;
}

ExperimentConfig in_dir(Json j, const std::string& dir) {
    j["output_dir"] = (kWork / dir).string();
    return parse_config(j);
}

std::vector<std::string> digests(const RunManifest& m) {
    std::vector<std::string> out;
    for (const auto& f : m.files()) out.push_back(f.at("path").get<std::string>() + ":" + f.at("sha256").get<std::string>());
    return out;
}

bool has_file(const RunManifest& m, const std::string& name) {
    for (const auto& f : m.files()) {
        if (f.at("path") == name) return true;
    }
    return false;
}

}  // namespace

TEST_CASE("number formatting round-trips", "[experiments][io]") {
    for (double x : {0.0, 0.1, 1.0 / 3.0, 1e-300, 123456.789, 0.4768425, 1.0 - 1e-16}) {
        CHECK(parse_number(format_number(x)) == x);
    }
    CHECK(format_number(0.01) == "0.01");
    CHECK(format_number(100.0) == "100");
    CHECK(std::isinf(parse_number("inf")));
    CHECK_THROWS_AS(parse_number("1.5x"), Error);
}

TEST_CASE("loss table round-trip", "[experiments][io]") {
    const TimeGrid g(1.5, 6);
    const LossCurve l(g, {0.0, 1.0 / 3.0, 0.4, 0.4, 0.71, 0.9, 1.0});
    const Table t = loss_table("x", l);
    CHECK(t.file == "loss_x.csv");
    CHECK(t.to_csv().rfind("t,lambda\n", 0) == 0);
    const LossCurve back = loss_from_table(parse_csv(t.to_csv()));
    CHECK(back.values == l.values);
    CHECK(back.grid == l.grid);

    LossCurve broken(g);
    broken.values[3] = 0.5;  // not monotone once the next node is 0
    CHECK_THROWS_AS(loss_table("bad", broken), Error);
}

TEST_CASE("sha256 known answer", "[experiments][io]") {
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("write_outputs with no tables", "[experiments][io]") {
    RunManifest m;
    m.doc["status"] = "valid";
    const auto inventory = write_outputs({}, m, kWork / "empty");
    CHECK(inventory.empty());
    CHECK(m.files().empty());
    CHECK(fs::exists(kWork / "empty" / "run.json"));
}

TEST_CASE("config validation", "[experiments][config]") {
    CHECK_NOTHROW(parse_config(tiny("blowup_demo")));

    auto j = tiny("kappa_sweep");
    CHECK_THROWS_AS(parse_config(j), Error);  // kappas missing
    j["kappas"] = {1.0, 0.5};
    CHECK_THROWS_AS(parse_config(j), Error);
    j["kappas"] = Json::array();
    CHECK_THROWS_AS(parse_config(j), Error);
    j["kappas"] = {0.5, 1.0};
    CHECK_NOTHROW(parse_config(j));

    j = tiny("n_sweep");
    j["n_list"] = {1000, 100};
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j.erase("seed");
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["seed"] = -4;
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["colour"] = "blue";
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("no_such_kind");
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["schema_version"] = 2;
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["params"]["law"] = {{"type", "uniform"}, {"a", 1.0}, {"b", 0.5}};
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["params"]["alpha"] = 0.0;
    CHECK_THROWS_AS(parse_config(j), Error);

    j = tiny("blowup_demo");
    j["params"]["law"] = {{"type", "gamma"}, {"shape", 2.0}, {"scale", 0.5}};
    const auto c = parse_config(j);
    CHECK(std::get<law::Gamma>(c.params.law).shape == 2.0);
    CHECK(c.jump_threshold_for(800) == 10.0 / 800.0);
}

TEST_CASE("kappa sweep writes ordered curves and reproduces digests", "[experiments][run]") {
    auto j = tiny("kappa_sweep");
    j["kappas"] = {0.1, 1.0, 10.0};
    const auto first = run_experiment(in_dir(j, "ks_a"));
    REQUIRE(first.valid());
    CHECK(first.doc.at("diagnostics").at("kappa_monotone") == true);
    for (const char* f : {"loss_kappa_0.1.csv", "loss_kappa_1.csv", "loss_kappa_10.csv", "loss_absorbing.csv",
                          "distances.csv", "jumps.csv"}) {
        CHECK(has_file(first, f));
    }
    const auto again = run_experiment(in_dir(j, "ks_b"));
    CHECK(digests(first) == digests(again));

    j["threads"] = 4;
    const auto threaded = run_experiment(in_dir(j, "ks_c"));
    CHECK(digests(first) == digests(threaded));

    const auto dist = read_csv(kWork / "ks_a" / "distances.csv");
    CHECK(dist.header == std::vector<std::string>{"param_a", "param_b", "levy", "sup"});
    CHECK(dist.rows.size() == 5);
    const auto jumps = read_csv(kWork / "ks_a" / "jumps.csv");
    CHECK(jumps.header == std::vector<std::string>{"t", "size", "param"});

    const auto l = loss_from_table(read_csv(kWork / "ks_a" / "loss_kappa_1.csv"));
    CHECK(l.grid == TimeGrid(1.0, 100));

    std::ifstream manifest(kWork / "ks_a" / "run.json");
    const Json doc = Json::parse(manifest);
    CHECK(doc.at("config").at("kappas").size() == 3);
    CHECK(doc.at("flags").at("density_hypothesis") == true);
    CHECK(doc.contains("started_at"));
}

TEST_CASE("other experiment kinds", "[experiments][run]") {
    SECTION("n_sweep") {
        auto j = tiny("n_sweep");
        j["n_list"] = {100, 400, 1600};
        const auto m = run_experiment(in_dir(j, "ns"));
        REQUIRE(m.valid());
        CHECK(has_file(m, "loss_N_1600.csv"));
        CHECK(read_csv(kWork / "ns" / "distances.csv").rows.size() == 2);
    }
    SECTION("blowup_demo") {
        auto j = tiny("blowup_demo");
        j["params"]["alpha"] = 5.0;
        j["params"]["kappa"] = 2.0;
        j["params"]["t_end"] = 2.0;
        j["params"]["n_steps"] = 400;
        j["params"]["n_particles"] = 5000;
        j["replications"] = 2;
        const auto m = run_experiment(in_dir(j, "bd"));
        REQUIRE(m.valid());
        CHECK(m.doc.at("flags").at("blowup_guaranteed") == true);
        CHECK_FALSE(read_csv(kWork / "bd" / "jumps.csv").rows.empty());
    }
    SECTION("picard_vs_particle") {
        auto j = tiny("picard_vs_particle");
        j["params"]["alpha"] = 0.3;
        j["picard"] = {{"mc_samples", 5000}};
        const auto m = run_experiment(in_dir(j, "pp"));
        REQUIRE(m.valid());
        CHECK(m.doc.at("diagnostics").at("picard_iterates_monotone") == true);
        CHECK(has_file(m, "loss_picard.csv"));
    }
    SECTION("pde_compare") {
        auto j = tiny("pde_compare");
        j["params"]["alpha"] = 0.3;
        j["params"]["n_particles"] = 20000;
        j["pde"] = {{"nx", 400}, {"dt", 1e-3}, {"snapshot_every", 500}};
        const auto m = run_experiment(in_dir(j, "pc"));
        REQUIRE(m.valid());
        CHECK(m.doc.at("flags").at("mollify_width") == 0.02);
        CHECK(m.doc.at("diagnostics").at("pde_tracks_particle") == true);
        const auto dens = read_csv(kWork / "pc" / "density_pde.csv");
        CHECK(dens.header == std::vector<std::string>{"t", "x", "v"});
        CHECK(dens.rows.size() == 3 * 401);
        CHECK(has_file(m, "density_particle.csv"));
    }
}

TEST_CASE("failing sub-run marks the manifest invalid", "[experiments][run]") {
    auto j = tiny("pde_compare");
    j["params"]["alpha"] = 5.0;
    j["params"]["kappa"] = 2.0;
    j["params"]["t_end"] = 2.0;
    j["params"]["n_particles"] = 2000;
    j["pde"] = {{"nx", 800}, {"dt", 0.05}};
    const auto m = run_experiment(in_dir(j, "invalid"));
    CHECK_FALSE(m.valid());
    CHECK(m.doc.at("error").at("sub_run") == "pde");
    CHECK(has_file(m, "loss_particle.csv"));
    std::ifstream manifest(kWork / "invalid" / "run.json");
    CHECK(Json::parse(manifest).at("status") == "invalid");
}

TEST_CASE("shipped configs hold their invariants", "[experiments][configs]") {
    {
        auto c = load_config(kSource / "configs" / "kappa_sweep.json");
        c.output_dir = (kWork / "shipped_kappa").string();
        const auto m = run_experiment(c);
        REQUIRE(m.valid());
        CHECK(m.doc.at("diagnostics").at("kappa_monotone") == true);
    }
    {
        auto c = load_config(kSource / "configs" / "n_sweep.json");
        c.output_dir = (kWork / "shipped_n").string();
        const auto m = run_experiment(c);
        REQUIRE(m.valid());
        CHECK(m.doc.at("diagnostics").at("levy_decreasing_in_n") == true);
    }
    for (const auto& entry : fs::directory_iterator(kSource / "configs")) {
        INFO(entry.path().string());
        CHECK_NOTHROW(load_config(entry.path()));
    }
}
