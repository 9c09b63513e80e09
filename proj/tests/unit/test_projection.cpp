#include "doctest.h"

#include "hexfleet/projection.hpp"

#include <sstream>

using namespace hexfleet;

namespace {

struct Fixture {
    std::shared_ptr<HexGrid> grid;
    EnvModel model;
    ScenarioField field;
    SystemState state;

    explicit Fixture(int rows = 3, int cols = 3, int stations = 1) {
        grid = std::make_shared<HexGrid>(build_grid(rows, cols, 1.0, stations, 3));
        model.grid = grid;
        const int m = grid->size();
        field.demand = DemandMatrix::Zero(m, m);
        field.travel = TravelMatrix::Ones(m, m);
        for (int a = 0; a < m; ++a) {
            for (int b = 0; b < m; ++b) field.travel(a, b) = a == b ? 1 : 1 + grid->hop_distance(a, b);
        }
        state.feeder_cap_kw = model.config.feeder_cap_kw;
        for (CellId h : grid->stations()) {
            state.stations.push_back({h, model.config.station.ports, 0, 0, model.config.station.price,
                                      model.config.station.p_max_kw});
        }
    }
    void add_vehicle(CellId hex, double energy) {
        VehicleState v;
        v.hex = v.release_hex = hex;
        v.energy = v.release_energy = energy;
        state.vehicles.push_back(v);
    }
    void add_order(CellId o, CellId d) {
        Order ord;
        ord.id = state.next_order_id++;
        ord.origin = o;
        ord.dest = d;
        state.open_orders.push_back(ord);
    }
    std::vector<std::vector<Candidate>> cands() {
        state.agg = aggregate(state, field, grid->size());
        return all_candidates(model, state, field);
    }
};

}  // namespace

TEST_CASE("projection: empty epoch") {
    Fixture f;
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.5);
    CHECK(inst.empty());
    CHECK(inst.to_lp().prog.cols() == 0);
    auto p = solve(inst);
    CHECK(p.report.objective == 0.0);
    CHECK(p.action.per_vehicle.empty());
    CHECK(enumerate_oracle(inst).report.objective == 0.0);
}

TEST_CASE("projection: single order at mu = 0 is taken iff it pays") {
    Fixture f;
    const CellId home = 0;
    f.add_vehicle(home, 40);
    f.add_order(home, 8);
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.0);
    auto p = solve(inst);
    const double km = f.grid->distance_km(home, 8);
    const double margin = fare(f.model.fare_model, home, 8, *f.grid) - f.model.config.reward.c_drv * km;
    CHECK(p.report.objective == doctest::Approx(std::max(margin, 0.0)));
    CHECK(p.action.per_vehicle[0].choice.kind == ActionKind::serve);
}

TEST_CASE("projection: large mu reproduces a feasible integral intention") {
    Fixture f;
    f.add_vehicle(4, 30);
    f.add_vehicle(0, 30);
    f.add_order(1, 2);
    auto c = f.cands();
    std::vector<int> pick;
    for (const auto& cs : c) {
        int k = 0;
        while (cs[k].kind != ActionKind::reposition) ++k;
        pick.push_back(k);
    }
    Intention it = one_hot_intention(c, pick, {0, 0});
    auto p = project(f.model, f.state, it, c, 1e4);
    for (std::size_t k = 0; k < pick.size(); ++k) {
        CHECK(p.action.per_vehicle[k].choice.kind == ActionKind::reposition);
        CHECK(p.action.per_vehicle[k].choice.target == c[k][pick[k]].target);
    }
}

TEST_CASE("projection: feeder below p_min forbids charging") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    f.add_vehicle(st, 10);
    f.add_vehicle(st, 12);
    f.state.feeder_cap_kw = f.model.config.p_min_kw - 1e-3;
    auto c = f.cands();
    auto p = project(f.model, f.state, {}, c, 0.5);
    for (const auto& va : p.action.per_vehicle) CHECK(va.choice.kind != ActionKind::charge);
    CHECK(p.action.total_power_kw == 0.0);
}

TEST_CASE("projection: zero time budget returns the greedy incumbent") {
    Fixture f;
    f.add_vehicle(0, 30);
    f.add_order(0, 4);
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.5);
    SolveOptions opt;
    opt.time_limit_s = 0.0;
    auto p = solve(inst, opt);
    CHECK(p.report.status == SolveStatus::incumbent_timeout);
    CHECK(p.report.objective == doctest::Approx(inst.objective(greedy_fallback(inst))));
}

TEST_CASE("projection: greedy fallback charges the low vehicle first") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    f.model.config.station.p_max_kw = 30;
    f.state.stations[0].p_max_kw = 30;
    f.model.config.p_min_kw = 1;
    f.add_vehicle(st, 40);
    f.add_vehicle(st, 5);
    f.state.feeder_cap_kw = 20;
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.5);
    FeasibleAction a = greedy_fallback(inst);
    CHECK(check_feasible(inst, a).empty());
    CHECK(a.per_vehicle[1].choice.kind == ActionKind::charge);
    CHECK(a.per_vehicle[1].power_kw == doctest::Approx(20));
    CHECK(a.per_vehicle[0].choice.kind != ActionKind::charge);
}

TEST_CASE("projection: greedy gives a contested order to the lowest-SoC eligible vehicle") {
    Fixture f(3, 3, 0);
    f.add_vehicle(4, 45);
    f.add_vehicle(4, 25);
    f.add_order(4, 0);
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.5);
    FeasibleAction a = greedy_fallback(inst);
    CHECK(a.per_vehicle[1].choice.kind == ActionKind::serve);
    CHECK(a.per_vehicle[0].choice.kind != ActionKind::serve);
}

TEST_CASE("projection: full fleet with no orders draws no power in the fallback") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    f.add_vehicle(st, 50);
    f.add_vehicle(0, 50);
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.5);
    FeasibleAction a = greedy_fallback(inst);
    CHECK(a.total_power_kw == 0.0);
}

TEST_CASE("projection: single charge decision at mu = 0 against closed form") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    f.add_vehicle(st, 20);
    auto c = f.cands();
    MilpInstance inst = build_instance(f.model, f.state, {}, c, 0.0);
    auto o = enumerate_oracle(inst);
    const double charge_branch = -f.model.config.station.price * inst.dt_h * inst.p_min_kw;
    CHECK(o.report.objective == doctest::Approx(std::max(0.0, charge_branch)));
    CHECK(solve(inst).report.objective == doctest::Approx(o.report.objective));
}

TEST_CASE("projection: two vehicles, one order, one port matches enumeration") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    f.state.stations[0].ports_total = 1;
    f.add_vehicle(st, 30);
    f.add_vehicle(st == 0 ? 1 : 0, 30);
    f.add_order(st, (st + 4) % 9);
    f.state.feeder_cap_kw = 100;
    auto c = f.cands();
    for (double mu : {0.0, 0.5}) {
        MilpInstance inst = build_instance(f.model, f.state, {}, c, mu);
        auto a = solve(inst);
        auto o = enumerate_oracle(inst);
        CHECK(a.report.objective == doctest::Approx(o.report.objective).epsilon(1e-9));
    }
}

TEST_CASE("projection: branch-and-bound equals enumeration on random micro instances") {
    int nontrivial = 0;
    for (int seed = 0; seed < 250; ++seed) {
        const double mu = seed % 3 == 0 ? 0.0 : 0.05 * (seed % 17);
        MicroCase mc = random_micro_case(static_cast<std::uint64_t>(seed), mu);
        const MilpInstance& inst = mc.instance;
        std::vector<std::pair<double, double>> trace;
        SolveOptions opt;
        opt.bound_trace = &trace;
        auto bb = solve(inst, opt);
        auto oracle = enumerate_oracle(inst);
        INFO("seed " << seed);
        CHECK(bb.report.status == SolveStatus::optimal);
        CHECK(bb.report.objective == doctest::Approx(oracle.report.objective).epsilon(1e-6).scale(1.0));
        CHECK(std::abs(inst.objective(bb.action) - bb.report.objective) <= 1e-9);
        CHECK(check_feasible(inst, bb.action).empty());
        CHECK(check_feasible(inst, oracle.action).empty());
        CHECK(std::abs(inst.objective(oracle.action) - oracle.report.objective) <= 1e-9);
        CHECK(bb.report.objective >= inst.objective(greedy_fallback(inst)) - 1e-12);
        CHECK(bb.report.objective <= bb.report.best_bound + 1e-6);
        for (auto [parent, child] : trace) CHECK(child <= parent + 1e-9);
        nontrivial += trace.empty() ? 0 : 1;
    }
    MESSAGE("instances that branched: " << nontrivial);
}

TEST_CASE("projection: unprojected ablation ignores the feeder but respects ports") {
    Fixture f;
    const CellId st = f.grid->stations()[0];
    for (int i = 0; i < 8; ++i) f.add_vehicle(st, 10);
    f.state.feeder_cap_kw = 60;
    auto c = f.cands();
    std::vector<int> pick;
    for (const auto& cs : c) {
        int k = 0;
        while (cs[k].kind != ActionKind::charge) ++k;
        pick.push_back(k);
    }
    Intention it = one_hot_intention(c, pick, std::vector<double>(8, 50.0));
    MilpInstance inst = build_instance(f.model, f.state, it, c, 0.5);
    FeasibleAction raw = execute_unprojected(inst);
    int charging = 0;
    for (const auto& va : raw.per_vehicle) charging += va.choice.kind == ActionKind::charge;
    CHECK(charging == f.model.config.station.ports);
    CHECK(raw.total_power_kw > f.state.feeder_cap_kw);
    auto p = project(f.model, f.state, it, c, 0.5);
    CHECK(p.action.total_power_kw <= f.state.feeder_cap_kw + 1e-9);
    CHECK(check_feasible(inst, p.action).empty());
}

TEST_CASE("projection: lp export is readable text") {
    MicroCase mc = random_micro_case(5, 0.5);
    std::ostringstream os;
    write_lp(os, mc.instance);
    CHECK(os.str().find("Subject To") != std::string::npos);
    CHECK(os.str().find("task_") != std::string::npos);
}
