#pragma once

#include "hexfleet/action.hpp"
#include "hexfleet/env.hpp"
#include "hexfleet/lp.hpp"

#include <algorithm>
#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace hexfleet {

/**
 * Policy intention for the idle vehicles of one epoch, aligned with
 * all_candidates(). Target weights form a simplex inside each mode group;
 * the reference weight of a candidate is mode weight times target weight.
 */
struct Intention {
    std::vector<std::array<double, kModeCount>> mode;
    std::vector<std::vector<double>> target;
    std::vector<double> p_hat;

    bool empty() const { return mode.empty(); }
    /// Joint weight of every candidate of idle vehicle k.
    std::vector<double> joint(std::size_t k, const std::vector<Candidate>& cands) const;
    /// Index of the largest joint weight, idle on ties.
    int argmax(std::size_t k, const std::vector<Candidate>& cands) const;
};

/// Deterministic one-hot intention placing weight 1 on the given candidate indices.
Intention one_hot_intention(const std::vector<std::vector<Candidate>>& cands, const std::vector<int>& pick,
                            const std::vector<double>& p_hat);

struct VehicleBlock {
    int vehicle = -1;
    CellId hex = 0;
    double energy = 0.0;
    std::vector<Candidate> cands;
    std::vector<double> ref;  ///< intention weight per candidate
    double p_hat = 0.0;
};

struct StationBlock {
    int ports = 0;
    double p_max_kw = 0.0;
    double price = 0.0;
};

/**
 * One epoch's projection problem.
 *
 * Columns per vehicle: one binary per candidate; per charge candidate a power
 * column p and an L1 split u+, u- around the reference power w * p_hat.
 * Binary L1 terms use the exact affine form |v - w| = w + (1 - 2w) v.
 */
struct MilpInstance {
    std::vector<VehicleBlock> vehicles;
    std::vector<StationBlock> stations;
    double feeder_cap_kw = 0.0;
    double p_min_kw = 1.0;
    double mu = 0.5;
    double dt_h = 5.0 / 60.0;
    double eta_c = 0.9;
    double c_drv = 0.3;
    double e_min = 5.0;
    double e_max = 50.0;

    bool empty() const { return vehicles.empty(); }
    int order_count() const;

    /// Immediate reward part of a candidate (fare minus driving cost).
    double candidate_value(const Candidate& c) const;
    /// Upper power bound of a vehicle at a station (port rating and battery headroom).
    double power_cap(const VehicleBlock& v, int station) const;
    /// Next-step lower SoC bound: E_min, or the current energy when already below it.
    double soc_floor(const VehicleBlock& v) const { return std::min(e_min, v.energy); }

    struct LpForm {
        lp::LinearProgram prog;
        std::vector<std::vector<int>> bin_col;    ///< [block][candidate]
        std::vector<std::vector<int>> power_col;  ///< [block][candidate], -1 unless charge
    };
    LpForm to_lp() const;

    /// MILP objective of a concrete action (same value the LP form assigns it).
    double objective(const FeasibleAction& a) const;
};

MilpInstance build_instance(const EnvModel& model, const SystemState& state, const Intention& intention,
                            const std::vector<std::vector<Candidate>>& candidates, double mu);

enum class SolveStatus { optimal, incumbent_timeout, fallback };
std::string_view to_string(SolveStatus s);

struct SolveReport {
    SolveStatus status = SolveStatus::fallback;
    double objective = 0.0;
    double best_bound = 0.0;
    int nodes = 0;
    long lp_iterations = 0;
    double wall_s = 0.0;
};

struct SolveOptions {
    double time_limit_s = 3.0;
    int node_limit = 200000;
    /// When set, receives (parent bound, child bound) for every solved child node.
    std::vector<std::pair<double, double>>* bound_trace = nullptr;
};

struct Projection {
    FeasibleAction action;
    SolveReport report;
};

/// Best-first branch-and-bound with the greedy fallback as the initial incumbent.
Projection solve(const MilpInstance& inst, const SolveOptions& opts = {});

/// Deterministic greedy procedure: ascending SoC, order, then charge, then intention-guided move.
FeasibleAction greedy_fallback(const MilpInstance& inst);

/// Exhaustive oracle for micro instances (<= 3 vehicles, 3 orders, 2 stations).
Projection enumerate_oracle(const MilpInstance& inst);

/// Empty string when the action satisfies every constraint family, else the first violation.
std::string check_feasible(const MilpInstance& inst, const FeasibleAction& a);

/// Build, solve and verify. Never throws on solver trouble; degrades to the fallback.
Projection project(const EnvModel& model, const SystemState& state, const Intention& intention,
                   const std::vector<std::vector<Candidate>>& candidates, double mu, const SolveOptions& opts = {});

/**
 * Ablation executor without the MILP: per-vehicle argmax of the intention,
 * conflicting order claims fall back to idle, charging clipped to the port
 * count by intention weight and power clipped to [p_min, P_max]. The feeder
 * cap is not enforced.
 */
FeasibleAction execute_unprojected(const MilpInstance& inst);

/// Random micro instance for oracle checks.
struct MicroCase {
    EnvModel model;
    SystemState state;
    std::vector<std::vector<Candidate>> candidates;
    Intention intention;
    MilpInstance instance;
};
MicroCase random_micro_case(std::uint64_t seed, double mu);

void write_lp(std::ostream& os, const MilpInstance& inst);

}  // namespace hexfleet
