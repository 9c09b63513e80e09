#pragma once

#include "hexfleet/action.hpp"
#include "hexfleet/hexgrid.hpp"
#include "hexfleet/scenario.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <vector>

namespace hexfleet {

struct EnergyModel {
    double eta_drv = 0.2;  ///< kWh per km
    double eta_c = 0.9;    ///< charging efficiency
};

struct RewardParams {
    double c_drv = 0.30;  ///< currency per km
    double lambda_wait = 0.5;
    double lambda_drop = 0.1;
    int w_max = 6;  ///< open orders are dropped once they have waited this many steps
};

enum class Placement { uniform, stations };

struct FleetParams {
    int n_vehicles = 20;
    double e_max = 50.0;
    double e_min = 5.0;
    double init_soc_lo = 0.5;  ///< fraction of e_max
    double init_soc_hi = 0.9;
    Placement placement = Placement::uniform;
};

struct StationParams {
    int ports = 5;
    double p_max_kw = 50.0;
    double price = 0.18;  ///< currency per kWh
};

struct EnvConfig {
    FleetParams fleet;
    EnergyModel energy;
    RewardParams reward;
    StationParams station;
    double feeder_cap_kw = 7000.0;
    double p_min_kw = 1.0;
    int episode_steps = 24;
};

/// Static description shared by every episode: geometry, physics and prices.
struct EnvModel {
    std::shared_ptr<const HexGrid> grid;
    EnvConfig config;
    FareModel fare_model;
    double dt_min = 5.0;
    int steps_per_day = 288;

    double dt_hours() const { return dt_min / 60.0; }
};

enum class VehicleStatus { idle, busy };

struct VehicleState {
    CellId hex = 0;
    double energy = 0.0;
    VehicleStatus status = VehicleStatus::idle;
    int release_step = 0;
    CellId release_hex = 0;
    double release_energy = 0.0;
};

struct StationState {
    CellId hex = 0;
    int ports_total = 0;
    int ports_busy = 0;  ///< vehicles charged here during the previous tick
    int queue = 0;       ///< idle vehicles co-located beyond the port count
    double price = 0.0;
    double p_max_kw = 0.0;
};

struct HexAggregates {
    Eigen::VectorXd n_idle;
    Eigen::VectorXd n_busy;
    Eigen::VectorXd mean_busy_energy;  ///< mean release energy of busy vehicles, 0 if none
    Eigen::VectorXd demand_out;
    Eigen::VectorXd demand_in;
};

struct SystemState {
    int t = 0;
    int step_of_day = 0;
    std::vector<VehicleState> vehicles;
    std::vector<Order> open_orders;
    std::vector<StationState> stations;
    double feeder_cap_kw = 0.0;
    HexAggregates agg;
    double demand_scale = 1.0;  ///< running max of the demand aggregates
    int next_order_id = 0;

    std::vector<int> idle_vehicles() const;
    const Order* find_order(int id) const;
};

/// Recomputes the per-hex aggregates from the roster and the current demand field.
HexAggregates aggregate(const SystemState& state, const ScenarioField& field, int cells);

/// Feature column order used by featurize().
enum Feature : int {
    kNIdle, kNBusy, kBusyEnergy, kDemandOut, kDemandIn, kStationPresent, kPortFreeFrac, kQueue,
    kPrice, kPMaxFrac, kTimeSin, kTimeCos, kFeatureCount
};

/// m x kFeatureCount node features.
Eigen::MatrixXd featurize(const EnvModel& model, const SystemState& state);

/// Candidate options of an idle vehicle: SoC-guarded orders, neighbours, co-located stations, idle.
std::vector<Candidate> candidate_set(const EnvModel& model, const SystemState& state, int vehicle,
                                     const ScenarioField& field);

/// candidate_set for every idle vehicle, in idle_vehicles() order.
std::vector<std::vector<Candidate>> all_candidates(const EnvModel& model, const SystemState& state,
                                                   const ScenarioField& field);

struct RewardBreakdown {
    double revenue = 0.0;
    double drive_cost = 0.0;
    double elec_cost = 0.0;
    double penalty = 0.0;
    double total() const { return revenue - drive_cost - elec_cost - penalty; }
};

struct StepOutcome {
    double reward = 0.0;
    RewardBreakdown parts;
    SystemState next;
    std::vector<int> acting_vehicles;  ///< vehicles that received an action
    std::vector<int> durations;        ///< per acting vehicle, >= 1
    std::vector<int> served_ids;
    std::vector<int> dropped_ids;
    double total_power_kw = 0.0;
    bool feeder_violation = false;

    /// Vehicle-count-weighted mean duration of this epoch's actions (1 if nobody acted).
    double epoch_duration() const;
};

/**
 * Advances the system by one tick.
 *
 * Durations come from `current.travel`; the successor's demand aggregates
 * use `next.demand`. `arrivals` are appended as the next tick's new orders
 * (ids are reassigned). Throws std::logic_error when the action references
 * an unknown order, station or vehicle, since that indicates a projection bug.
 */
StepOutcome step(const EnvModel& model, const SystemState& state, const FeasibleAction& action,
                 const ScenarioField& current, const ScenarioField& next, std::vector<Order> arrivals);

/// Initial state: fleet placement and SoC from the config, first arrivals sampled from field.
SystemState initial_state(const EnvModel& model, const ScenarioField& field, int step_of_day,
                          std::uint64_t seed);

/// Duration of an action for a vehicle at `from` under travel field T.
int leg_duration(const TravelMatrix& travel, const Candidate& c, CellId from);

/**
 * Runs one episode window over a dataset, sampling arrivals with derived seeds.
 * Owns the mutable state; single writer.
 */
class Episode {
public:
    Episode(std::shared_ptr<const EnvModel> model, std::shared_ptr<const ScenarioDataset> data,
            int start_index, int length, std::uint64_t seed);

    const SystemState& state() const { return state_; }
    const ScenarioField& current_field() const;
    const ScenarioField& next_field() const;
    int field_index() const { return start_ + step_; }
    int steps_taken() const { return step_; }
    bool done() const { return step_ >= length_; }
    std::uint64_t arrival_seed() const;
    const EnvModel& model() const { return *model_; }
    const ScenarioDataset& data() const { return *data_; }

    StepOutcome advance(const FeasibleAction& action);

private:
    std::shared_ptr<const EnvModel> model_;
    std::shared_ptr<const ScenarioDataset> data_;
    int start_ = 0;
    int length_ = 0;
    int step_ = 0;
    std::uint64_t seed_ = 0;
    SystemState state_;
};

}  // namespace hexfleet
