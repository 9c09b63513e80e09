#include "hexfleet/projection.hpp"

#include "hexfleet/rng.hpp"

#include <chrono>
#include <functional>
#include <limits>
#include <cmath>
#include <map>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

namespace hexfleet {

namespace {

bool same_choice(const Candidate& a, const Candidate& b) {
    return a.kind == b.kind && a.order_id == b.order_id && a.station == b.station && a.target == b.target;
}

int find_candidate(const VehicleBlock& v, const Candidate& c) {
    for (int k = 0; k < static_cast<int>(v.cands.size()); ++k) {
        if (same_choice(v.cands[k], c)) return k;
    }
    return -1;
}

int idle_index(const std::vector<Candidate>& cands) {
    for (int k = 0; k < static_cast<int>(cands.size()); ++k) {
        if (cands[k].kind == ActionKind::idle) return k;
    }
    return -1;
}

/// Map vehicle index to its action; throws when the action has duplicates.
std::map<int, const VehicleAction*> by_vehicle(const FeasibleAction& a) {
    std::map<int, const VehicleAction*> out;
    for (const VehicleAction& va : a.per_vehicle) {
        if (!out.emplace(va.vehicle, &va).second) {
            throw std::logic_error("action lists vehicle " + std::to_string(va.vehicle) + " twice");
        }
    }
    return out;
}

double power_penalty_slope(const MilpInstance& inst, const StationBlock& s) {
    return s.p_max_kw > 0.0 ? inst.mu / s.p_max_kw : 0.0;
}

}  // namespace

std::string_view to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: return "optimal";
        case SolveStatus::incumbent_timeout: return "incumbent_timeout";
        case SolveStatus::fallback: return "fallback";
    }
    return "?";
}

std::vector<double> Intention::joint(std::size_t k, const std::vector<Candidate>& cands) const {
    std::vector<double> w(cands.size(), 0.0);
    if (empty()) return w;
    for (std::size_t c = 0; c < cands.size(); ++c) w[c] = mode.at(k)[mode_of(cands[c].kind)] * target.at(k).at(c);
    return w;
}

int Intention::argmax(std::size_t k, const std::vector<Candidate>& cands) const {
    const int idle = idle_index(cands);
    if (empty()) return idle;
    const std::vector<double> w = joint(k, cands);
    int best = idle;
    double best_w = idle >= 0 ? w[idle] : -1.0;
    for (int c = 0; c < static_cast<int>(cands.size()); ++c) {
        if (w[c] > best_w + 1e-12) {
            best = c;
            best_w = w[c];
        }
    }
    return best;
}

Intention one_hot_intention(const std::vector<std::vector<Candidate>>& cands, const std::vector<int>& pick,
                            const std::vector<double>& p_hat) {
    Intention it;
    for (std::size_t k = 0; k < cands.size(); ++k) {
        std::array<double, kModeCount> m{};
        std::vector<double> t(cands[k].size(), 0.0);
        const Candidate& c = cands[k].at(static_cast<std::size_t>(pick.at(k)));
        m[mode_of(c.kind)] = 1.0;
        t[pick[k]] = 1.0;
        it.mode.push_back(m);
        it.target.push_back(std::move(t));
        it.p_hat.push_back(k < p_hat.size() ? p_hat[k] : 0.0);
    }
    return it;
}

int MilpInstance::order_count() const {
    std::set<int> ids;
    for (const VehicleBlock& v : vehicles) {
        for (const Candidate& c : v.cands) {
            if (c.kind == ActionKind::serve) ids.insert(c.order_id);
        }
    }
    return static_cast<int>(ids.size());
}

double MilpInstance::candidate_value(const Candidate& c) const { return c.revenue - c_drv * c.km; }

double MilpInstance::power_cap(const VehicleBlock& v, int station) const {
    const double headroom = std::max(0.0, (e_max - v.energy) / (eta_c * dt_h));
    return std::min(stations.at(static_cast<std::size_t>(station)).p_max_kw, headroom);
}

MilpInstance::LpForm MilpInstance::to_lp() const {
    LpForm f;
    lp::LinearProgram& lp = f.prog;
    std::map<int, std::vector<int>> order_cols;
    std::vector<std::vector<int>> station_cols(stations.size());
    std::vector<int> all_power;
    for (std::size_t b = 0; b < vehicles.size(); ++b) {
        const VehicleBlock& v = vehicles[b];
        const std::string tag = std::to_string(v.vehicle);
        std::vector<int> bins(v.cands.size());
        std::vector<int> pows(v.cands.size(), -1);
        lp::Row one{{}, lp::RowSense::eq, 1.0, "task_" + tag};
        lp::Row soc_lo{{}, lp::RowSense::ge, soc_floor(v) - v.energy, "soclo_" + tag};
        lp::Row soc_hi{{}, lp::RowSense::le, e_max - v.energy, "sochi_" + tag};
        for (std::size_t k = 0; k < v.cands.size(); ++k) {
            const Candidate& c = v.cands[k];
            const double w = v.ref[k];
            const int col = lp.add_column("v_" + tag + "_" + std::to_string(k),
                                          candidate_value(c) - mu * (1.0 - 2.0 * w), 0.0, 1.0, true);
            lp.objective_offset -= mu * w;
            bins[k] = col;
            one.coefs.emplace_back(col, 1.0);
            if (c.energy_kwh != 0.0) {
                soc_lo.coefs.emplace_back(col, -c.energy_kwh);
                soc_hi.coefs.emplace_back(col, -c.energy_kwh);
            }
            if (c.kind == ActionKind::serve) order_cols[c.order_id].push_back(col);
            if (c.kind != ActionKind::charge) continue;
            const StationBlock& s = stations.at(static_cast<std::size_t>(c.station));
            station_cols[c.station].push_back(col);
            const double slope = power_penalty_slope(*this, s);
            const std::string ptag = tag + "_" + std::to_string(c.station);
            const int p = lp.add_column("p_" + ptag, -s.price * dt_h, 0.0, s.p_max_kw);
            const int up = lp.add_column("up_" + ptag, -slope, 0.0, s.p_max_kw);
            const int un = lp.add_column("un_" + ptag, -slope, 0.0, s.p_max_kw);
            pows[k] = p;
            all_power.push_back(p);
            soc_lo.coefs.emplace_back(p, eta_c * dt_h);
            soc_hi.coefs.emplace_back(p, eta_c * dt_h);
            lp.add_row({{{p, 1.0}, {up, -1.0}, {un, 1.0}}, lp::RowSense::eq, w * v.p_hat, "pref_" + ptag});
            lp.add_row({{{p, 1.0}, {col, -s.p_max_kw}}, lp::RowSense::le, 0.0, "pmax_" + ptag});
            lp.add_row({{{p, 1.0}, {col, -p_min_kw}}, lp::RowSense::ge, 0.0, "pmin_" + ptag});
        }
        lp.add_row(std::move(one));
        lp.add_row(std::move(soc_lo));
        lp.add_row(std::move(soc_hi));
        f.bin_col.push_back(std::move(bins));
        f.power_col.push_back(std::move(pows));
    }
    for (auto& [id, cols] : order_cols) {
        lp::Row r{{}, lp::RowSense::le, 1.0, "order_" + std::to_string(id)};
        for (int c : cols) r.coefs.emplace_back(c, 1.0);
        lp.add_row(std::move(r));
    }
    for (std::size_t s = 0; s < stations.size(); ++s) {
        if (station_cols[s].empty()) continue;
        lp::Row r{{}, lp::RowSense::le, static_cast<double>(stations[s].ports), "ports_" + std::to_string(s)};
        for (int c : station_cols[s]) r.coefs.emplace_back(c, 1.0);
        lp.add_row(std::move(r));
    }
    if (!all_power.empty()) {
        lp::Row r{{}, lp::RowSense::le, feeder_cap_kw, "feeder"};
        for (int c : all_power) r.coefs.emplace_back(c, 1.0);
        lp.add_row(std::move(r));
    }
    return f;
}

double MilpInstance::objective(const FeasibleAction& a) const {
    const auto acts = by_vehicle(a);
    double total = 0.0;
    for (const VehicleBlock& v : vehicles) {
        auto it = acts.find(v.vehicle);
        if (it == acts.end()) throw std::logic_error("objective: vehicle " + std::to_string(v.vehicle) + " has no action");
        const int chosen = find_candidate(v, it->second->choice);
        if (chosen < 0) throw std::logic_error("objective: action is not a candidate");
        for (int k = 0; k < static_cast<int>(v.cands.size()); ++k) {
            const double x = k == chosen ? 1.0 : 0.0;
            total -= mu * std::abs(x - v.ref[k]);
            const Candidate& c = v.cands[k];
            if (k == chosen) total += candidate_value(c);
            if (c.kind != ActionKind::charge) continue;
            const StationBlock& s = stations.at(static_cast<std::size_t>(c.station));
            const double p = k == chosen ? it->second->power_kw : 0.0;
            total -= s.price * dt_h * p;
            total -= power_penalty_slope(*this, s) * std::abs(p - v.ref[k] * v.p_hat);
        }
    }
    return total;
}

MilpInstance build_instance(const EnvModel& model, const SystemState& state, const Intention& intention,
                            const std::vector<std::vector<Candidate>>& candidates, double mu) {
    const EnvConfig& cfg = model.config;
    MilpInstance inst;
    inst.feeder_cap_kw = state.feeder_cap_kw;
    inst.p_min_kw = cfg.p_min_kw;
    inst.mu = mu;
    inst.dt_h = model.dt_hours();
    inst.eta_c = cfg.energy.eta_c;
    inst.c_drv = cfg.reward.c_drv;
    inst.e_min = cfg.fleet.e_min;
    inst.e_max = cfg.fleet.e_max;
    for (const StationState& s : state.stations) inst.stations.push_back({s.ports_total, s.p_max_kw, s.price});
    const std::vector<int> idle = state.idle_vehicles();
    if (candidates.size() != idle.size()) throw std::invalid_argument("build_instance: candidate lists do not match idle vehicles");
    if (!intention.empty() && intention.mode.size() != idle.size()) {
        throw std::invalid_argument("build_instance: intention does not match idle vehicles");
    }
    for (std::size_t k = 0; k < idle.size(); ++k) {
        VehicleBlock b;
        b.vehicle = idle[k];
        b.hex = state.vehicles[idle[k]].hex;
        b.energy = state.vehicles[idle[k]].energy;
        b.cands = candidates[k];
        b.ref.assign(b.cands.size(), 0.0);
        if (!intention.empty()) {
            const auto& t = intention.target.at(k);
            if (t.size() != b.cands.size()) throw std::invalid_argument("build_instance: target weights misaligned");
            b.ref = intention.joint(k, b.cands);
            b.p_hat = std::max(0.0, intention.p_hat.at(k));
        }
        inst.vehicles.push_back(std::move(b));
    }
    return inst;
}

std::string check_feasible(const MilpInstance& inst, const FeasibleAction& a) {
    std::ostringstream err;
    std::map<int, const VehicleAction*> acts;
    try {
        acts = by_vehicle(a);
    } catch (const std::logic_error& e) {
        return e.what();
    }
    if (acts.size() != inst.vehicles.size()) return "action count differs from idle vehicle count";
    std::set<int> orders;
    std::vector<int> ports(inst.stations.size(), 0);
    std::vector<double> station_kw(inst.stations.size(), 0.0);
    double total = 0.0;
    for (const VehicleBlock& v : inst.vehicles) {
        auto it = acts.find(v.vehicle);
        if (it == acts.end()) return "vehicle " + std::to_string(v.vehicle) + " has no task";
        const VehicleAction& va = *it->second;
        const int k = find_candidate(v, va.choice);
        if (k < 0) return "vehicle " + std::to_string(v.vehicle) + " takes a non-candidate action";
        const Candidate& c = v.cands[k];
        double e_next = v.energy - c.energy_kwh;
        if (c.kind == ActionKind::serve && !orders.insert(c.order_id).second) {
            return "order " + std::to_string(c.order_id) + " assigned twice";
        }
        if (c.kind == ActionKind::charge) {
            const StationBlock& s = inst.stations.at(static_cast<std::size_t>(c.station));
            ++ports[c.station];
            if (va.power_kw < inst.p_min_kw - 1e-9 || va.power_kw > s.p_max_kw + 1e-9) {
                err << "vehicle " << v.vehicle << " power " << va.power_kw << " outside [p_min, P_max]";
                return err.str();
            }
            station_kw[c.station] += va.power_kw;
            total += va.power_kw;
            e_next += inst.eta_c * va.power_kw * inst.dt_h;
        } else if (va.power_kw != 0.0) {
            return "vehicle " + std::to_string(v.vehicle) + " draws power without charging";
        }
        if (e_next < inst.soc_floor(v) - 1e-9 || e_next > inst.e_max + 1e-9) {
            err << "vehicle " << v.vehicle << " next SoC " << e_next << " out of bounds";
            return err.str();
        }
    }
    for (std::size_t s = 0; s < ports.size(); ++s) {
        if (ports[s] > inst.stations[s].ports) return "station " + std::to_string(s) + " port cap exceeded";
    }
    if (total > inst.feeder_cap_kw + 1e-9 * std::max(1.0, inst.feeder_cap_kw)) {
        err << "feeder cap exceeded: " << total << " > " << inst.feeder_cap_kw;
        return err.str();
    }
    if (std::abs(a.total_power_kw - total) > 1e-9 * std::max(1.0, total)) return "power totals stale";
    return {};
}

FeasibleAction greedy_fallback(const MilpInstance& inst) {
    std::vector<std::size_t> order(inst.vehicles.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return inst.vehicles[a].energy < inst.vehicles[b].energy;
    });
    std::set<int> taken;
    std::vector<int> ports_used(inst.stations.size(), 0);
    double residual = inst.feeder_cap_kw;
    std::vector<VehicleAction> acts(inst.vehicles.size());
    for (std::size_t k : order) {
        const VehicleBlock& v = inst.vehicles[k];
        VehicleAction va;
        va.vehicle = v.vehicle;
        int pick = -1;
        double best = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
            const Candidate& cand = v.cands[c];
            if (cand.kind != ActionKind::serve || taken.count(cand.order_id)) continue;
            const double val = inst.candidate_value(cand);
            if (val > best) {
                best = val;
                pick = c;
            }
        }
        if (pick >= 0) {
            taken.insert(v.cands[pick].order_id);
            va.choice = v.cands[pick];
            acts[k] = va;
            continue;
        }
        for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
            const Candidate& cand = v.cands[c];
            if (cand.kind != ActionKind::charge) continue;
            const int s = cand.station;
            const double cap = inst.power_cap(v, s);
            if (ports_used[s] >= inst.stations[s].ports || residual < inst.p_min_kw || cap < inst.p_min_kw) continue;
            pick = c;
            va.power_kw = std::min(cap, residual);
            residual -= va.power_kw;
            ++ports_used[s];
            break;
        }
        if (pick < 0) {
            pick = idle_index(v.cands);
            double best_w = pick >= 0 ? v.ref[pick] : -1.0;
            for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
                if (v.cands[c].kind != ActionKind::reposition) continue;
                if (v.ref[c] > best_w + 1e-12) {
                    best_w = v.ref[c];
                    pick = c;
                }
            }
        }
        va.choice = v.cands.at(static_cast<std::size_t>(pick));
        acts[k] = va;
    }
    FeasibleAction out;
    out.per_vehicle = std::move(acts);
    out.recompute_totals(static_cast<int>(inst.stations.size()));
    return out;
}

namespace {

struct PowerSegment {
    std::size_t vehicle;
    double slope;
    double length;
};

/// Optimal powers for a fixed set of charging vehicles; returns false when infeasible.
bool waterfill(const MilpInstance& inst, const std::vector<std::pair<std::size_t, int>>& charging,
               std::vector<double>& power, double& value) {
    power.assign(charging.size(), inst.p_min_kw);
    value = 0.0;
    double residual = inst.feeder_cap_kw;
    std::vector<PowerSegment> segs;
    for (std::size_t j = 0; j < charging.size(); ++j) {
        const auto [b, k] = charging[j];
        const VehicleBlock& v = inst.vehicles[b];
        const Candidate& c = v.cands[k];
        const StationBlock& s = inst.stations[c.station];
        const double ub = inst.power_cap(v, c.station);
        if (ub < inst.p_min_kw) return false;
        const double ref = v.ref[k] * v.p_hat;
        const double slope = power_penalty_slope(inst, s);
        const double cost = s.price * inst.dt_h;
        residual -= inst.p_min_kw;
        value += -cost * inst.p_min_kw - slope * std::abs(inst.p_min_kw - ref);
        const double knee = std::clamp(ref, inst.p_min_kw, ub);
        if (knee > inst.p_min_kw) segs.push_back({j, -cost + slope, knee - inst.p_min_kw});
        if (ub > knee) segs.push_back({j, -cost - slope, ub - knee});
    }
    if (residual < -1e-12) return false;
    std::stable_sort(segs.begin(), segs.end(), [](const PowerSegment& a, const PowerSegment& b) { return a.slope > b.slope; });
    for (const PowerSegment& s : segs) {
        if (s.slope <= 0.0 || residual <= 0.0) break;
        const double take = std::min(s.length, residual);
        power[s.vehicle] += take;
        value += s.slope * take;
        residual -= take;
    }
    return true;
}

}  // namespace

Projection enumerate_oracle(const MilpInstance& inst) {
    if (inst.vehicles.size() > 3 || inst.order_count() > 3 || inst.stations.size() > 2) {
        throw std::invalid_argument("enumerate_oracle: instance too large");
    }
    const std::size_t n = inst.vehicles.size();
    std::vector<int> pick(n, 0);
    std::vector<int> best_pick;
    std::vector<double> best_power;
    double best = -std::numeric_limits<double>::infinity();
    long patterns = 0;

    auto evaluate = [&]() {
        std::set<int> orders;
        std::vector<int> ports(inst.stations.size(), 0);
        std::vector<std::pair<std::size_t, int>> charging;
        double value = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            const VehicleBlock& v = inst.vehicles[b];
            const Candidate& c = v.cands[pick[b]];
            if (c.kind == ActionKind::serve && !orders.insert(c.order_id).second) return;
            if (v.energy - c.energy_kwh < inst.soc_floor(v) - 1e-12) return;
            if (c.kind == ActionKind::charge) {
                if (++ports[c.station] > inst.stations[c.station].ports) return;
                charging.emplace_back(b, pick[b]);
            }
            value += inst.candidate_value(c);
            for (int k = 0; k < static_cast<int>(v.cands.size()); ++k) {
                value -= inst.mu * std::abs((k == pick[b] ? 1.0 : 0.0) - v.ref[k]);
                const Candidate& other = v.cands[k];
                if (k != pick[b] && other.kind == ActionKind::charge) {
                    value -= power_penalty_slope(inst, inst.stations[other.station]) * v.ref[k] * v.p_hat;
                }
            }
        }
        std::vector<double> power;
        double pv = 0.0;
        if (!waterfill(inst, charging, power, pv)) return;
        ++patterns;
        value += pv;
        if (value > best + 1e-12) {
            best = value;
            best_pick = pick;
            best_power.assign(n, 0.0);
            for (std::size_t j = 0; j < charging.size(); ++j) best_power[charging[j].first] = power[j];
        }
    };

    std::function<void(std::size_t)> rec = [&](std::size_t b) {
        if (b == n) {
            evaluate();
            return;
        }
        for (int k = 0; k < static_cast<int>(inst.vehicles[b].cands.size()); ++k) {
            pick[b] = k;
            rec(b + 1);
        }
    };
    rec(0);

    Projection out;
    if (n == 0) {
        best = 0.0;
        best_pick.clear();
    }
    if (!std::isfinite(best)) throw std::logic_error("enumerate_oracle: no feasible pattern");
    for (std::size_t b = 0; b < n; ++b) {
        VehicleAction va;
        va.vehicle = inst.vehicles[b].vehicle;
        va.choice = inst.vehicles[b].cands[best_pick[b]];
        va.power_kw = va.choice.kind == ActionKind::charge ? best_power[b] : 0.0;
        out.action.per_vehicle.push_back(va);
    }
    out.action.recompute_totals(static_cast<int>(inst.stations.size()));
    out.report.status = SolveStatus::optimal;
    out.report.objective = best;
    out.report.best_bound = best;
    out.report.nodes = static_cast<int>(patterns);
    return out;
}

namespace {

/// Integral LP point to an action; clamps power noise back into its box and under the feeder cap.
FeasibleAction action_from_lp(const MilpInstance& inst, const MilpInstance::LpForm& f, const std::vector<double>& x) {
    FeasibleAction out;
    std::vector<std::size_t> charging;
    for (std::size_t b = 0; b < inst.vehicles.size(); ++b) {
        const VehicleBlock& v = inst.vehicles[b];
        int pick = -1;
        double best = -1.0;
        for (std::size_t k = 0; k < v.cands.size(); ++k) {
            if (x[f.bin_col[b][k]] > best) {
                best = x[f.bin_col[b][k]];
                pick = static_cast<int>(k);
            }
        }
        VehicleAction va;
        va.vehicle = v.vehicle;
        va.choice = v.cands[pick];
        if (va.choice.kind == ActionKind::charge) {
            const double ub = inst.power_cap(v, va.choice.station);
            va.power_kw = std::clamp(x[f.power_col[b][pick]], inst.p_min_kw, std::max(inst.p_min_kw, ub));
            charging.push_back(out.per_vehicle.size());
        }
        out.per_vehicle.push_back(va);
    }
    double total = 0.0;
    for (std::size_t j : charging) total += out.per_vehicle[j].power_kw;
    double excess = total - inst.feeder_cap_kw;
    for (std::size_t j : charging) {
        if (excess <= 0.0) break;
        double& p = out.per_vehicle[j].power_kw;
        const double cut = std::min(excess, p - inst.p_min_kw);
        p -= cut;
        excess -= cut;
    }
    out.recompute_totals(static_cast<int>(inst.stations.size()));
    return out;
}

struct Node {
    std::vector<double> lo;
    std::vector<double> hi;
    double bound;
    long id;
};

struct NodeOrder {
    bool operator()(const Node& a, const Node& b) const {
        if (a.bound != b.bound) return a.bound < b.bound;
        return a.id > b.id;
    }
};

}  // namespace

Projection solve(const MilpInstance& inst, const SolveOptions& opts) {
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    auto elapsed = [&] { return std::chrono::duration<double>(clock::now() - start).count(); };

    Projection best;
    best.action = greedy_fallback(inst);
    double incumbent = inst.objective(best.action);
    SolveReport& rep = best.report;
    rep.status = SolveStatus::optimal;
    if (inst.empty()) {
        rep.objective = rep.best_bound = incumbent;
        rep.wall_s = elapsed();
        return best;
    }
    if (opts.time_limit_s <= 0.0) {
        rep.status = SolveStatus::incumbent_timeout;
        rep.objective = incumbent;
        rep.best_bound = std::numeric_limits<double>::infinity();
        rep.wall_s = elapsed();
        return best;
    }

    const MilpInstance::LpForm form = inst.to_lp();
    const lp::LinearProgram& prog = form.prog;
    auto gap_tol = [&](double obj) { return 1e-6 * (1.0 + std::abs(obj)); };

    std::priority_queue<Node, std::vector<Node>, NodeOrder> open;
    long next_id = 0;
    {
        lp::Result root = lp::solve(prog);
        rep.lp_iterations += root.iterations;
        ++rep.nodes;
        if (root.status != lp::Status::optimal) {
            throw std::logic_error("projection: root relaxation is " +
                                   std::string(root.status == lp::Status::infeasible ? "infeasible" : "not solved"));
        }
        open.push({prog.lower, prog.upper, root.objective, next_id++});
    }
    bool timed_out = false;
    // The root is re-solved once when popped; the cost is one LP and keeps the loop uniform.
    while (!open.empty()) {
        if (elapsed() >= opts.time_limit_s || rep.nodes >= opts.node_limit) {
            timed_out = true;
            break;
        }
        Node node = open.top();
        open.pop();
        if (node.bound <= incumbent + gap_tol(incumbent)) continue;
        lp::Result r = lp::solve(prog, &node.lo, &node.hi);
        rep.lp_iterations += r.iterations;
        if (node.id != 0) ++rep.nodes;
        if (r.status != lp::Status::optimal) continue;
        if (opts.bound_trace && node.id != 0) opts.bound_trace->emplace_back(node.bound, r.objective);
        if (r.objective <= incumbent + gap_tol(incumbent)) continue;
        int branch = -1;
        double frac_best = 1e-7;
        for (int j = 0; j < prog.cols(); ++j) {
            if (!prog.integer[j]) continue;
            const double frac = std::abs(r.x[j] - std::round(r.x[j]));
            if (frac > frac_best + 1e-12) {
                frac_best = frac;
                branch = j;
            }
        }
        if (branch < 0) {
            FeasibleAction a = action_from_lp(inst, form, r.x);
            if (!check_feasible(inst, a).empty()) continue;
            const double val = inst.objective(a);
            if (val > incumbent) {
                incumbent = val;
                best.action = std::move(a);
            }
            continue;
        }
        Node down{node.lo, node.hi, r.objective, next_id++};
        down.hi[branch] = std::floor(r.x[branch]);
        Node up{std::move(node.lo), std::move(node.hi), r.objective, next_id++};
        up.lo[branch] = std::ceil(r.x[branch]);
        open.push(std::move(down));
        open.push(std::move(up));
    }
    rep.objective = incumbent;
    if (timed_out) {
        double bound = incumbent;
        while (!open.empty()) {
            bound = std::max(bound, open.top().bound);
            open.pop();
        }
        rep.best_bound = bound;
        rep.status = bound <= incumbent + gap_tol(incumbent) ? SolveStatus::optimal : SolveStatus::incumbent_timeout;
    } else {
        rep.best_bound = incumbent;
    }
    rep.wall_s = elapsed();
    return best;
}

Projection project(const EnvModel& model, const SystemState& state, const Intention& intention,
                   const std::vector<std::vector<Candidate>>& candidates, double mu, const SolveOptions& opts) {
    const MilpInstance inst = build_instance(model, state, intention, candidates, mu);
    try {
        Projection p = solve(inst, opts);
        if (check_feasible(inst, p.action).empty()) return p;
    } catch (const std::exception&) {
        // fall through to the greedy procedure
    }
    Projection p;
    p.action = greedy_fallback(inst);
    const std::string why = check_feasible(inst, p.action);
    if (!why.empty()) throw std::logic_error("projection: fallback action infeasible: " + why);
    p.report.status = SolveStatus::fallback;
    p.report.objective = inst.objective(p.action);
    p.report.best_bound = std::numeric_limits<double>::infinity();
    return p;
}

FeasibleAction execute_unprojected(const MilpInstance& inst) {
    std::vector<VehicleAction> acts(inst.vehicles.size());
    std::set<int> taken;
    struct ChargeClaim {
        std::size_t block;
        double weight;
    };
    std::vector<std::vector<ChargeClaim>> claims(inst.stations.size());
    for (std::size_t b = 0; b < inst.vehicles.size(); ++b) {
        const VehicleBlock& v = inst.vehicles[b];
        const int idle = idle_index(v.cands);
        int pick = idle;
        double best_w = idle >= 0 ? v.ref[idle] : -1.0;
        for (int k = 0; k < static_cast<int>(v.cands.size()); ++k) {
            if (v.ref[k] > best_w + 1e-12) {
                best_w = v.ref[k];
                pick = k;
            }
        }
        const Candidate& c = v.cands[pick];
        if (c.kind == ActionKind::serve && !taken.insert(c.order_id).second) pick = idle;
        acts[b].vehicle = v.vehicle;
        acts[b].choice = v.cands[pick];
        if (acts[b].choice.kind == ActionKind::charge) {
            const StationBlock& s = inst.stations[acts[b].choice.station];
            acts[b].power_kw = std::clamp(v.p_hat, inst.p_min_kw, std::max(inst.p_min_kw, s.p_max_kw));
            claims[acts[b].choice.station].push_back({b, v.ref[pick]});
        }
    }
    for (std::size_t s = 0; s < claims.size(); ++s) {
        auto& cl = claims[s];
        std::stable_sort(cl.begin(), cl.end(), [](const ChargeClaim& a, const ChargeClaim& b) { return a.weight > b.weight; });
        for (std::size_t j = static_cast<std::size_t>(std::max(0, inst.stations[s].ports)); j < cl.size(); ++j) {
            VehicleAction& va = acts[cl[j].block];
            va.choice = inst.vehicles[cl[j].block].cands[idle_index(inst.vehicles[cl[j].block].cands)];
            va.power_kw = 0.0;
        }
    }
    FeasibleAction out;
    out.per_vehicle = std::move(acts);
    out.recompute_totals(static_cast<int>(inst.stations.size()));
    return out;
}

MicroCase random_micro_case(std::uint64_t seed, double mu) {
    Rng rng(derive_seed(seed, 0x6d1c));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
    auto pick_int = [&](int a, int b) { return std::uniform_int_distribution<int>(a, b)(rng); };

    const int n_stations = pick_int(1, 2);
    auto grid = std::make_shared<HexGrid>(build_grid(3, 3, uniform(0.5, 1.5), n_stations, rng(), {}, 1));
    MicroCase mc;
    EnvModel& model = mc.model;
    model.grid = grid;
    EnvConfig& cfg = model.config;
    cfg.fleet.n_vehicles = pick_int(1, 3);
    cfg.fleet.e_min = 5.0;
    cfg.fleet.e_max = 50.0;
    cfg.station.ports = pick_int(1, 2);
    cfg.station.p_max_kw = uniform(20.0, 60.0);
    cfg.station.price = uniform(0.05, 0.5);
    cfg.p_min_kw = uniform(1.0, 8.0);
    cfg.feeder_cap_kw = u01(rng) < 0.2 ? uniform(0.0, cfg.p_min_kw) : uniform(0.0, 120.0);
    cfg.reward.c_drv = uniform(0.1, 0.6);
    model.dt_min = 5.0;

    ScenarioField field;
    const int m = grid->size();
    field.demand = DemandMatrix::Zero(m, m);
    field.travel = TravelMatrix::Ones(m, m);
    for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) field.travel(a, b) = 1 + grid->hop_distance(a, b);
    }
    field.travel.diagonal().setOnes();

    SystemState& s = mc.state;
    s.feeder_cap_kw = cfg.feeder_cap_kw;
    for (CellId h : grid->stations()) s.stations.push_back({h, cfg.station.ports, 0, 0, cfg.station.price, cfg.station.p_max_kw});
    for (int i = 0; i < cfg.fleet.n_vehicles; ++i) {
        VehicleState v;
        v.hex = u01(rng) < 0.6 ? grid->stations()[pick_int(0, n_stations - 1)] : pick_int(0, m - 1);
        v.energy = u01(rng) < 0.15 ? uniform(0.0, cfg.fleet.e_min) : uniform(cfg.fleet.e_min, cfg.fleet.e_max);
        if (u01(rng) < 0.1) v.energy = cfg.fleet.e_max;
        v.release_hex = v.hex;
        v.release_energy = v.energy;
        s.vehicles.push_back(v);
    }
    const int n_orders = pick_int(0, 3);
    for (int o = 0; o < n_orders; ++o) {
        Order ord;
        ord.id = o;
        ord.origin = pick_int(0, m - 1);
        ord.dest = pick_int(0, m - 1);
        s.open_orders.push_back(ord);
    }
    s.next_order_id = n_orders;
    s.agg = aggregate(s, field, m);
    mc.candidates = all_candidates(model, s, field);

    Intention& it = mc.intention;
    for (const auto& cands : mc.candidates) {
        std::array<double, kModeCount> mode{};
        std::array<bool, kModeCount> present{};
        for (const Candidate& c : cands) present[mode_of(c.kind)] = true;
        double total = 0.0;
        for (int g = 0; g < kModeCount; ++g) {
            if (present[g]) total += (mode[g] = -std::log(uniform(1e-9, 1.0)));
        }
        for (double& w : mode) w /= total;
        std::vector<double> target(cands.size(), 0.0);
        for (int g = 0; g < kModeCount; ++g) {
            double gsum = 0.0;
            for (std::size_t c = 0; c < cands.size(); ++c) {
                if (mode_of(cands[c].kind) == g) gsum += (target[c] = -std::log(uniform(1e-9, 1.0)));
            }
            for (std::size_t c = 0; c < cands.size(); ++c) {
                if (mode_of(cands[c].kind) == g && gsum > 0.0) target[c] /= gsum;
            }
        }
        it.mode.push_back(mode);
        it.target.push_back(std::move(target));
        it.p_hat.push_back(uniform(0.0, cfg.station.p_max_kw));
    }
    mc.instance = build_instance(model, s, it, mc.candidates, mu);
    return mc;
}

void write_lp(std::ostream& os, const MilpInstance& inst) {
    lp::write_cplex_lp(os, inst.to_lp().prog, "projection instance, maximize");
}

}  // namespace hexfleet
