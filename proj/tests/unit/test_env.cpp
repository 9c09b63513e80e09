#include "doctest.h"

#include "hexfleet/env.hpp"
#include "hexfleet/projection.hpp"
#include "hexfleet/rng.hpp"

#include <algorithm>

using namespace hexfleet;

namespace {

struct World {
    std::shared_ptr<HexGrid> grid;
    EnvModel model;
    ScenarioField field;
    SystemState state;

    World(int rows, int cols, double pitch, int stations) {
        grid = std::make_shared<HexGrid>(build_grid(rows, cols, pitch, stations, 1));
        model.grid = grid;
        const int m = grid->size();
        field.demand = DemandMatrix::Zero(m, m);
        field.travel = TravelMatrix::Ones(m, m);
        for (int a = 0; a < m; ++a) {
            for (int b = 0; b < m; ++b) field.travel(a, b) = a == b ? 1 : 1 + grid->hop_distance(a, b);
        }
        state.feeder_cap_kw = model.config.feeder_cap_kw;
        for (CellId h : grid->stations()) {
            state.stations.push_back({h, 5, 0, 0, model.config.station.price, model.config.station.p_max_kw});
        }
    }
    int add_vehicle(CellId hex, double e) {
        VehicleState v;
        v.hex = v.release_hex = hex;
        v.energy = v.release_energy = e;
        state.vehicles.push_back(v);
        state.agg = aggregate(state, field, grid->size());
        return static_cast<int>(state.vehicles.size()) - 1;
    }
    int add_order(CellId o, CellId d) {
        Order ord;
        ord.id = state.next_order_id++;
        ord.origin = o;
        ord.dest = d;
        state.open_orders.push_back(ord);
        return ord.id;
    }
};

}  // namespace

TEST_CASE("env: SoC guard at E_min leaves only idle and co-located charging") {
    World w(3, 3, 1.0, 1);
    const CellId st = w.grid->stations()[0];
    w.add_vehicle(st, w.model.config.fleet.e_min);
    w.add_order(st, (st + 1) % 9);
    auto c = candidate_set(w.model, w.state, 0, w.field);
    for (const auto& x : c) CHECK((x.kind == ActionKind::idle || x.kind == ActionKind::charge));
    CHECK(c.back().kind == ActionKind::idle);
}

TEST_CASE("env: guard arithmetic admits the order") {
    // pickup 5 km + trip 20 km at 0.2 kWh/km plus E_min 2 needs 7 kWh.
    World w(1, 26, 1.0, 0);
    w.model.config.fleet.e_min = 2.0;
    w.add_vehicle(0, 10.0);
    w.add_order(5, 25);
    auto c = candidate_set(w.model, w.state, 0, w.field);
    CHECK(std::count_if(c.begin(), c.end(), [](const Candidate& x) { return x.kind == ActionKind::serve; }) == 1);
    w.state.vehicles[0].energy = 6.99;
    c = candidate_set(w.model, w.state, 0, w.field);
    CHECK(std::none_of(c.begin(), c.end(), [](const Candidate& x) { return x.kind == ActionKind::serve; }));
}

TEST_CASE("env: interior hex with ample energy has six repositions") {
    World w(3, 3, 1.0, 0);
    w.add_vehicle(4, 40);
    auto c = candidate_set(w.model, w.state, 0, w.field);
    CHECK(std::count_if(c.begin(), c.end(), [](const Candidate& x) { return x.kind == ActionKind::reposition; }) == 6);
}

TEST_CASE("env: featurize layout and normalization") {
    World w(3, 3, 1.0, 0);
    for (int i = 0; i < 4; ++i) w.add_vehicle(3, 30);
    w.state.step_of_day = 72;
    Eigen::MatrixXd phi = featurize(w.model, w.state);
    CHECK(phi.cols() == kFeatureCount);
    CHECK(phi(3, kNIdle) == 1.0);
    CHECK(phi(0, kNIdle) == 0.0);
    CHECK(phi(0, kStationPresent) == 0.0);
    CHECK(phi(0, kTimeSin) == doctest::Approx(1.0));
    std::reverse(w.state.vehicles.begin(), w.state.vehicles.end());
    w.state.agg = aggregate(w.state, w.field, 9);
    CHECK(featurize(w.model, w.state) == phi);
}

TEST_CASE("env: null action only advances time") {
    World w(3, 3, 1.0, 0);
    w.add_vehicle(2, 30);
    FeasibleAction a;
    a.per_vehicle.push_back({0, candidate_set(w.model, w.state, 0, w.field).back(), 0.0});
    a.recompute_totals(0);
    StepOutcome out = step(w.model, w.state, a, w.field, w.field, {});
    CHECK(out.reward == 0.0);
    CHECK(out.next.t == w.state.t + 1);
    CHECK(out.next.vehicles[0].hex == 2);
    CHECK(out.next.vehicles[0].energy == 30.0);
}

TEST_CASE("env: charging cap binds") {
    World w(3, 3, 1.0, 1);
    w.model.config.fleet.e_max = 50;
    w.model.config.energy.eta_c = 0.9;
    const CellId st = w.grid->stations()[0];
    w.add_vehicle(st, 48);
    Candidate c;
    c.kind = ActionKind::charge;
    c.station = 0;
    c.target = st;
    FeasibleAction a;
    a.per_vehicle.push_back({0, c, 30.0});
    a.recompute_totals(1);
    StepOutcome out = step(w.model, w.state, a, w.field, w.field, {});
    CHECK(out.next.vehicles[0].energy == 50.0);
    CHECK(out.parts.elec_cost == doctest::Approx(w.model.config.station.price * 30.0 / 12.0));
    CHECK(out.next.stations[0].ports_busy == 1);
}

TEST_CASE("env: serve reward and release timing") {
    World w(1, 4, 1.0, 0);
    w.model.config.reward.c_drv = 0.3;
    w.model.fare_model = {2.5, 1.0};
    w.add_vehicle(0, 40);
    const int id = w.add_order(0, 3);
    auto cands = candidate_set(w.model, w.state, 0, w.field);
    auto it = std::find_if(cands.begin(), cands.end(), [&](const Candidate& c) { return c.order_id == id; });
    REQUIRE(it != cands.end());
    FeasibleAction a;
    a.per_vehicle.push_back({0, *it, 0.0});
    a.recompute_totals(0);
    StepOutcome out = step(w.model, w.state, a, w.field, w.field, {});
    // fare 2.5 + 3 km, 3 km driven at 0.3 per km
    CHECK(out.reward == doctest::Approx(5.5 - 0.9));
    CHECK(out.parts.revenue - out.parts.drive_cost - out.parts.elec_cost - out.parts.penalty == doctest::Approx(out.reward));
    const int dur = w.field.travel(0, 0) + w.field.travel(0, 3);
    CHECK(out.durations[0] == dur);
    CHECK(out.next.vehicles[0].release_step == w.state.t + dur);
    CHECK(out.next.vehicles[0].energy == 40.0);
    SystemState s = out.next;
    FeasibleAction none;
    none.recompute_totals(0);
    while (s.t < w.state.t + dur) {
        CHECK(s.vehicles[0].status == VehicleStatus::busy);
        s = step(w.model, s, none, w.field, w.field, {}).next;
    }
    CHECK(s.vehicles[0].status == VehicleStatus::idle);
    CHECK(s.vehicles[0].hex == 3);
    CHECK(s.t == w.state.t + dur);
    CHECK(s.vehicles[0].energy == doctest::Approx(40.0 - 0.2 * 3.0));
}

TEST_CASE("env: bad references fail fast") {
    World w(3, 3, 1.0, 0);
    w.add_vehicle(0, 30);
    Candidate c;
    c.kind = ActionKind::serve;
    c.order_id = 42;
    FeasibleAction a;
    a.per_vehicle.push_back({0, c, 0.0});
    CHECK_THROWS_AS(step(w.model, w.state, a, w.field, w.field, {}), std::logic_error);
}

TEST_CASE("env: waiting orders accrue penalty and drop at the deadline") {
    World w(3, 3, 1.0, 0);
    w.add_order(0, 1);
    SystemState s = w.state;
    double penalty = 0.0;
    int dropped = 0;
    for (int k = 0; k < w.model.config.reward.w_max; ++k) {
        FeasibleAction none;
        StepOutcome o = step(w.model, s, none, w.field, w.field, {});
        penalty += o.parts.penalty;
        dropped += static_cast<int>(o.dropped_ids.size());
        s = o.next;
    }
    CHECK(dropped == 1);
    CHECK(s.open_orders.empty());
    const double lw = w.model.config.reward.lambda_wait;
    CHECK(penalty == doctest::Approx(lw * (1 + 2 + 3 + 4 + 5) + w.model.config.reward.lambda_drop));
}

TEST_CASE("env: projected fuzz keeps every invariant") {
    auto grid = std::make_shared<HexGrid>(build_grid(4, 4, 1.0, 2, 3));
    auto data = std::make_shared<ScenarioDataset>(synth_scenario(*grid, 1000, 3, 3.0, 5));
    auto model = std::make_shared<EnvModel>();
    model->grid = grid;
    model->config.fleet.n_vehicles = 10;
    model->config.fleet.init_soc_lo = 0.1;
    model->config.fleet.init_soc_hi = 0.4;
    model->config.feeder_cap_kw = 80.0;
    Episode ep(model, data, 0, 1000, 17);
    Rng rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<int> due(10, -1);
    while (!ep.done()) {
        const SystemState s = ep.state();
        auto cands = all_candidates(*model, s, ep.current_field());
        Intention it;
        for (const auto& cs : cands) {
            std::array<double, kModeCount> m{u(rng), u(rng), u(rng)};
            double z = m[0] + m[1] + m[2];
            for (double& x : m) x /= z;
            std::vector<double> t(cs.size());
            for (double& x : t) x = u(rng);
            it.mode.push_back(m);
            it.target.push_back(t);
            it.p_hat.push_back(50.0 * u(rng));
        }
        Projection p = project(*model, s, it, cands, 0.5, SolveOptions{0.5});
        StepOutcome out = ep.advance(p.action);
        CHECK_FALSE(out.feeder_violation);
        CHECK(out.reward == doctest::Approx(out.parts.total()).epsilon(1e-12));
        int idle = 0, busy = 0;
        for (std::size_t i = 0; i < out.next.vehicles.size(); ++i) {
            const auto& v = out.next.vehicles[i];
            CHECK(v.energy >= 0.0);
            CHECK(v.energy <= model->config.fleet.e_max + 1e-12);
            (v.status == VehicleStatus::idle ? idle : busy) += 1;
        }
        CHECK(idle + busy == 10);
        CHECK(out.next.agg.n_idle.sum() + out.next.agg.n_busy.sum() == doctest::Approx(10.0));
        for (std::size_t k = 0; k < out.acting_vehicles.size(); ++k) {
            CHECK(out.durations[k] >= 1);
            const auto& a = p.action.per_vehicle[k];
            if (a.choice.kind == ActionKind::serve || a.choice.kind == ActionKind::reposition) {
                due[a.vehicle] = s.t + out.durations[k];
            }
        }
        for (int i = 0; i < 10; ++i) {
            if (due[i] == out.next.t) {
                CHECK(out.next.vehicles[i].status == VehicleStatus::idle);
                due[i] = -1;
            } else if (due[i] > out.next.t) {
                CHECK(out.next.vehicles[i].status == VehicleStatus::busy);
            }
        }
    }
}
