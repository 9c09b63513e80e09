#include "hexfleet/env.hpp"

#include "hexfleet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace hexfleet {

std::string_view to_string(ActionKind k) {
    switch (k) {
        case ActionKind::serve: return "serve";
        case ActionKind::reposition: return "reposition";
        case ActionKind::charge: return "charge";
        case ActionKind::idle: return "idle";
    }
    return "?";
}

void FeasibleAction::recompute_totals(int n_stations) {
    station_power_kw.assign(static_cast<std::size_t>(n_stations), 0.0);
    total_power_kw = 0.0;
    for (const VehicleAction& va : per_vehicle) {
        if (va.choice.kind != ActionKind::charge) continue;
        station_power_kw.at(static_cast<std::size_t>(va.choice.station)) += va.power_kw;
        total_power_kw += va.power_kw;
    }
}

std::vector<int> SystemState::idle_vehicles() const {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(vehicles.size()); ++i) {
        if (vehicles[i].status == VehicleStatus::idle) out.push_back(i);
    }
    return out;
}

const Order* SystemState::find_order(int id) const {
    for (const Order& o : open_orders) {
        if (o.id == id) return &o;
    }
    return nullptr;
}

HexAggregates aggregate(const SystemState& state, const ScenarioField& field, int cells) {
    HexAggregates a;
    a.n_idle = Eigen::VectorXd::Zero(cells);
    a.n_busy = Eigen::VectorXd::Zero(cells);
    a.mean_busy_energy = Eigen::VectorXd::Zero(cells);
    for (const VehicleState& v : state.vehicles) {
        if (v.status == VehicleStatus::idle) {
            a.n_idle[v.hex] += 1.0;
        } else {
            a.n_busy[v.release_hex] += 1.0;
            a.mean_busy_energy[v.release_hex] += v.release_energy;
        }
    }
    for (int h = 0; h < cells; ++h) {
        if (a.n_busy[h] > 0) a.mean_busy_energy[h] /= a.n_busy[h];
    }
    a.demand_out = field.demand.rowwise().sum();
    a.demand_in = field.demand.colwise().sum().transpose();
    return a;
}

Eigen::MatrixXd featurize(const EnvModel& model, const SystemState& state) {
    const int m = model.grid->size();
    const double n = std::max<std::size_t>(1, state.vehicles.size());
    const HexAggregates& a = state.agg;
    Eigen::MatrixXd phi = Eigen::MatrixXd::Zero(m, kFeatureCount);
    phi.col(kNIdle) = a.n_idle / n;
    phi.col(kNBusy) = a.n_busy / n;
    phi.col(kBusyEnergy) = a.mean_busy_energy / model.config.fleet.e_max;
    const double scale = state.demand_scale > 0.0 ? state.demand_scale : 1.0;
    phi.col(kDemandOut) = a.demand_out / scale;
    phi.col(kDemandIn) = a.demand_in / scale;
    double p_max_ref = 0.0;
    for (const StationState& s : state.stations) p_max_ref = std::max(p_max_ref, s.p_max_kw);
    for (const StationState& s : state.stations) {
        phi(s.hex, kStationPresent) = 1.0;
        phi(s.hex, kPortFreeFrac) =
            s.ports_total > 0 ? static_cast<double>(s.ports_total - s.ports_busy) / s.ports_total : 0.0;
        phi(s.hex, kQueue) = s.queue / n;
        phi(s.hex, kPrice) = s.price;
        phi(s.hex, kPMaxFrac) = p_max_ref > 0.0 ? s.p_max_kw / p_max_ref : 0.0;
    }
    const double angle = 2.0 * std::numbers::pi * state.step_of_day / std::max(1, model.steps_per_day);
    phi.col(kTimeSin).setConstant(std::sin(angle));
    phi.col(kTimeCos).setConstant(std::cos(angle));
    return phi;
}

std::vector<Candidate> candidate_set(const EnvModel& model, const SystemState& state, int vehicle,
                                     const ScenarioField& field) {
    const HexGrid& grid = *model.grid;
    const VehicleState& v = state.vehicles.at(static_cast<std::size_t>(vehicle));
    if (v.status != VehicleStatus::idle) throw std::logic_error("candidate_set: vehicle is busy");
    const double eta = model.config.energy.eta_drv;
    const double e_min = model.config.fleet.e_min;
    std::vector<Candidate> out;

    for (const Order& o : state.open_orders) {
        const double km = grid.distance_km(v.hex, o.origin) + grid.distance_km(o.origin, o.dest);
        if (v.energy < eta * km + e_min) continue;
        Candidate c;
        c.kind = ActionKind::serve;
        c.order_id = o.id;
        c.pickup = o.origin;
        c.target = o.dest;
        c.km = km;
        c.energy_kwh = eta * km;
        c.duration = field.travel(v.hex, o.origin) + field.travel(o.origin, o.dest);
        c.revenue = fare(model.fare_model, o.origin, o.dest, grid);
        out.push_back(c);
    }
    for (CellId g : grid.neighbors(v.hex)) {
        const double km = grid.distance_km(v.hex, g);
        if (v.energy - eta * km < e_min) continue;
        Candidate c;
        c.kind = ActionKind::reposition;
        c.target = g;
        c.km = km;
        c.energy_kwh = eta * km;
        c.duration = field.travel(v.hex, g);
        out.push_back(c);
    }
    for (int s = 0; s < static_cast<int>(state.stations.size()); ++s) {
        if (state.stations[s].hex != v.hex) continue;
        Candidate c;
        c.kind = ActionKind::charge;
        c.station = s;
        c.target = v.hex;
        out.push_back(c);
    }
    Candidate idle;
    idle.kind = ActionKind::idle;
    idle.target = v.hex;
    out.push_back(idle);
    return out;
}

std::vector<std::vector<Candidate>> all_candidates(const EnvModel& model, const SystemState& state,
                                                   const ScenarioField& field) {
    std::vector<std::vector<Candidate>> out;
    for (int i : state.idle_vehicles()) out.push_back(candidate_set(model, state, i, field));
    return out;
}

int leg_duration(const TravelMatrix& travel, const Candidate& c, CellId from) {
    switch (c.kind) {
        case ActionKind::serve: return travel(from, c.pickup) + travel(c.pickup, c.target);
        case ActionKind::reposition: return travel(from, c.target);
        default: return 1;
    }
}

double StepOutcome::epoch_duration() const {
    if (durations.empty()) return 1.0;
    double s = 0.0;
    for (int d : durations) s += d;
    return s / static_cast<double>(durations.size());
}

StepOutcome step(const EnvModel& model, const SystemState& state, const FeasibleAction& action,
                 const ScenarioField& current, const ScenarioField& next, std::vector<Order> arrivals) {
    const HexGrid& grid = *model.grid;
    const EnvConfig& cfg = model.config;
    const double dt_h = model.dt_hours();
    StepOutcome out;
    out.next = state;
    SystemState& s = out.next;

    std::unordered_map<int, std::size_t> order_index;
    for (std::size_t k = 0; k < s.open_orders.size(); ++k) order_index[s.open_orders[k].id] = k;
    std::vector<bool> assigned(s.open_orders.size(), false);
    std::vector<bool> acted(s.vehicles.size(), false);
    std::vector<int> charged_at(s.stations.size(), 0);

    for (const VehicleAction& va : action.per_vehicle) {
        if (va.vehicle < 0 || va.vehicle >= static_cast<int>(s.vehicles.size())) {
            throw std::logic_error("step: action references unknown vehicle " + std::to_string(va.vehicle));
        }
        VehicleState& v = s.vehicles[static_cast<std::size_t>(va.vehicle)];
        if (v.status != VehicleStatus::idle || acted[va.vehicle]) {
            throw std::logic_error("step: vehicle " + std::to_string(va.vehicle) + " cannot act this tick");
        }
        acted[va.vehicle] = true;
        const Candidate& c = va.choice;
        int duration = 1;
        switch (c.kind) {
            case ActionKind::serve: {
                auto it = order_index.find(c.order_id);
                if (it == order_index.end() || assigned[it->second]) {
                    throw std::logic_error("step: action references unknown order " + std::to_string(c.order_id));
                }
                assigned[it->second] = true;
                const Order& o = s.open_orders[it->second];
                const double km = grid.distance_km(v.hex, o.origin) + grid.distance_km(o.origin, o.dest);
                duration = current.travel(v.hex, o.origin) + current.travel(o.origin, o.dest);
                out.parts.revenue += fare(model.fare_model, o.origin, o.dest, grid);
                out.parts.drive_cost += cfg.reward.c_drv * km;
                v.status = VehicleStatus::busy;
                v.release_step = s.t + duration;
                v.release_hex = o.dest;
                v.release_energy = std::clamp(v.energy - cfg.energy.eta_drv * km, 0.0, cfg.fleet.e_max);
                out.served_ids.push_back(o.id);
                break;
            }
            case ActionKind::reposition: {
                if (!grid.contains(c.target)) throw std::logic_error("step: reposition to unknown hex");
                const double km = grid.distance_km(v.hex, c.target);
                duration = current.travel(v.hex, c.target);
                out.parts.drive_cost += cfg.reward.c_drv * km;
                v.status = VehicleStatus::busy;
                v.release_step = s.t + duration;
                v.release_hex = c.target;
                v.release_energy = std::clamp(v.energy - cfg.energy.eta_drv * km, 0.0, cfg.fleet.e_max);
                break;
            }
            case ActionKind::charge: {
                if (c.station < 0 || c.station >= static_cast<int>(s.stations.size()) ||
                    s.stations[c.station].hex != v.hex) {
                    throw std::logic_error("step: action references unknown station " + std::to_string(c.station));
                }
                const double p = std::max(0.0, va.power_kw);
                v.energy = std::min(cfg.fleet.e_max, v.energy + cfg.energy.eta_c * p * dt_h);
                out.parts.elec_cost += s.stations[c.station].price * p * dt_h;
                out.total_power_kw += p;
                ++charged_at[c.station];
                break;
            }
            case ActionKind::idle: break;
        }
        out.acting_vehicles.push_back(va.vehicle);
        out.durations.push_back(duration);
    }
    out.feeder_violation = out.total_power_kw > s.feeder_cap_kw * (1.0 + 1e-9);

    std::vector<Order> still_open;
    double wait_sum = 0.0;
    for (std::size_t k = 0; k < s.open_orders.size(); ++k) {
        if (assigned[k]) continue;
        Order o = s.open_orders[k];
        ++o.wait_steps;
        if (o.wait_steps >= cfg.reward.w_max) {
            out.dropped_ids.push_back(o.id);
            continue;
        }
        wait_sum += o.wait_steps;
        still_open.push_back(o);
    }
    out.parts.penalty = cfg.reward.lambda_wait * wait_sum +
                        cfg.reward.lambda_drop * static_cast<double>(out.dropped_ids.size());
    out.reward = out.parts.total();

    s.t += 1;
    s.step_of_day = (s.step_of_day + 1) % std::max(1, model.steps_per_day);
    for (VehicleState& v : s.vehicles) {
        if (v.status == VehicleStatus::busy && v.release_step <= s.t) {
            v.status = VehicleStatus::idle;
            v.hex = v.release_hex;
            v.energy = v.release_energy;
        }
    }
    s.open_orders = std::move(still_open);
    for (Order& o : arrivals) {
        o.id = s.next_order_id++;
        o.arrival_step = s.t;
        o.wait_steps = 0;
        o.status = OrderStatus::open;
        s.open_orders.push_back(o);
    }
    s.agg = aggregate(s, next, grid.size());
    for (std::size_t k = 0; k < s.stations.size(); ++k) {
        StationState& st = s.stations[k];
        st.ports_busy = std::min(st.ports_total, charged_at[k]);
        st.queue = std::max(0, static_cast<int>(s.agg.n_idle[st.hex]) - st.ports_total);
    }
    s.demand_scale = std::max({s.demand_scale, s.agg.demand_out.maxCoeff(), s.agg.demand_in.maxCoeff()});
    return out;
}

SystemState initial_state(const EnvModel& model, const ScenarioField& field, int step_of_day,
                          std::uint64_t seed) {
    const HexGrid& grid = *model.grid;
    const EnvConfig& cfg = model.config;
    Rng rng(derive_seed(seed, 0x1417));
    SystemState s;
    s.t = 0;
    s.step_of_day = step_of_day;
    s.feeder_cap_kw = cfg.feeder_cap_kw;
    for (CellId h : grid.stations()) {
        StationState st;
        st.hex = h;
        st.ports_total = cfg.station.ports;
        st.price = cfg.station.price;
        st.p_max_kw = cfg.station.p_max_kw;
        s.stations.push_back(st);
    }
    std::uniform_int_distribution<int> cell(0, grid.size() - 1);
    std::uniform_real_distribution<double> soc(cfg.fleet.init_soc_lo, cfg.fleet.init_soc_hi);
    for (int i = 0; i < cfg.fleet.n_vehicles; ++i) {
        VehicleState v;
        if (cfg.fleet.placement == Placement::stations && !grid.stations().empty()) {
            v.hex = grid.stations()[static_cast<std::size_t>(i) % grid.stations().size()];
        } else {
            v.hex = cell(rng);
        }
        v.energy = soc(rng) * cfg.fleet.e_max;
        v.release_hex = v.hex;
        v.release_energy = v.energy;
        s.vehicles.push_back(v);
    }
    for (Order& o : sample_orders(field, 0, derive_seed(seed, 0), 0)) s.open_orders.push_back(o);
    s.next_order_id = static_cast<int>(s.open_orders.size());
    s.agg = aggregate(s, field, grid.size());
    for (StationState& st : s.stations) st.queue = std::max(0, static_cast<int>(s.agg.n_idle[st.hex]) - st.ports_total);
    s.demand_scale = std::max({1e-9, s.agg.demand_out.maxCoeff(), s.agg.demand_in.maxCoeff()});
    return s;
}

Episode::Episode(std::shared_ptr<const EnvModel> model, std::shared_ptr<const ScenarioDataset> data,
                 int start_index, int length, std::uint64_t seed)
    : model_(std::move(model)), data_(std::move(data)), start_(start_index), length_(length), seed_(seed) {
    if (data_->horizon() == 0) throw std::invalid_argument("episode: empty dataset");
    if (start_ < 0 || start_ >= data_->horizon()) throw std::invalid_argument("episode: start out of range");
    const int spd = std::max(1, data_->steps_per_day());
    state_ = initial_state(*model_, current_field(), (data_->start_step + start_) % spd, seed_);
}

const ScenarioField& Episode::current_field() const {
    const int idx = std::min(start_ + step_, data_->horizon() - 1);
    return data_->fields[static_cast<std::size_t>(idx)];
}

const ScenarioField& Episode::next_field() const {
    const int idx = std::min(start_ + step_ + 1, data_->horizon() - 1);
    return data_->fields[static_cast<std::size_t>(idx)];
}

std::uint64_t Episode::arrival_seed() const { return derive_seed(seed_, static_cast<std::uint64_t>(step_ + 1)); }

StepOutcome Episode::advance(const FeasibleAction& action) {
    const ScenarioField& next = next_field();
    std::vector<Order> arrivals = sample_orders(next, state_.t + 1, arrival_seed());
    StepOutcome out = step(*model_, state_, action, current_field(), next, std::move(arrivals));
    state_ = out.next;
    ++step_;
    return out;
}

}  // namespace hexfleet
