#pragma once

#include "hexfleet/hexgrid.hpp"

#include <string_view>
#include <vector>

namespace hexfleet {

enum class ActionKind { serve, reposition, charge, idle };

/// Number of action modes seen by the policy: serve, reposition (incl. stay idle), charge.
inline constexpr int kModeCount = 3;

/// Policy mode of a candidate; idle is the stay-in-place reposition.
inline int mode_of(ActionKind k) {
    switch (k) {
        case ActionKind::serve: return 0;
        case ActionKind::charge: return 2;
        default: return 1;
    }
}

std::string_view to_string(ActionKind k);

/// One admissible option for an idle vehicle, with its leg geometry precomputed.
struct Candidate {
    ActionKind kind = ActionKind::idle;
    int order_id = -1;    ///< serve only
    int station = -1;     ///< index into SystemState::stations, charge only
    CellId target = -1;   ///< final hex (dropoff, reposition target, or current hex)
    CellId pickup = -1;   ///< serve only
    double km = 0.0;      ///< driven distance (pickup + trip, or reposition leg)
    double energy_kwh = 0.0;
    int duration = 1;     ///< steps until the vehicle is free again
    double revenue = 0.0;
};

struct VehicleAction {
    int vehicle = -1;  ///< index into SystemState::vehicles
    Candidate choice;
    double power_kw = 0.0;  ///< charge only
};

/// One decision per idle vehicle plus the resulting station power totals.
struct FeasibleAction {
    std::vector<VehicleAction> per_vehicle;
    std::vector<double> station_power_kw;
    double total_power_kw = 0.0;

    /// Recomputes station_power_kw and total_power_kw from per_vehicle.
    void recompute_totals(int n_stations);
};

}  // namespace hexfleet
