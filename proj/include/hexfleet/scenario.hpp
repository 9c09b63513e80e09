#pragma once

#include "hexfleet/hexgrid.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace hexfleet {

using DemandMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using TravelMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Exogenous scenario for one step: OD request intensities and travel times (in steps).
struct ScenarioField {
    DemandMatrix demand;  ///< D(h1,h2) >= 0, expected requests per step
    TravelMatrix travel;  ///< T(h1,h2) >= 1, T(h,h) == 1

    int cells() const { return static_cast<int>(demand.rows()); }
    /// Throws std::invalid_argument when D < 0, T < 1, T(h,h) != 1 or shapes disagree.
    void validate() const;
};

struct FareModel {
    double base_fare = 2.5;
    double per_km = 1.0;
};

/// base_fare + per_km * hop_distance * pitch.
double fare(const FareModel& model, CellId origin, CellId dest, const HexGrid& grid);

struct ScenarioDataset {
    std::vector<ScenarioField> fields;
    double dt_min = 5.0;
    FareModel fare_model;
    int start_step = 0;  ///< step-of-day of fields[0], for time encodings

    int horizon() const { return static_cast<int>(fields.size()); }
    int cells() const { return fields.empty() ? 0 : fields.front().cells(); }
    int steps_per_day() const { return static_cast<int>(std::lround(1440.0 / dt_min)); }
    /// Steps [begin, end) as a new dataset.
    ScenarioDataset slice(int begin, int end) const;
};

struct TripRecord {
    int pickup_step = 0;
    CellId origin = 0;
    CellId dest = 0;
    double duration_min = 0.0;
};

struct IngestReport {
    std::size_t rows_read = 0;
    std::size_t rows_used = 0;
    std::size_t rows_skipped = 0;    ///< out-of-range cells, negative steps, bad durations
    std::size_t rows_subsampled = 0; ///< dropped by the subsample rate
};

struct IngestOptions {
    double subsample_rate = 1.0;  ///< uniform per-trip keep probability
    std::uint64_t seed = 0;
};

/**
 * Aggregates trips into per-step OD counts and median travel times.
 *
 * T_t(h1,h2) = max(1, round(median duration / dt)) per observed pair and
 * step; unobserved pairs take the global median duration. The diagonal is
 * pinned to 1. The result does not depend on row order.
 */
ScenarioDataset ingest_trips(std::span<const TripRecord> records, const HexGrid& grid, double dt_min,
                             IngestReport* report = nullptr, const IngestOptions& opts = {});

/// Parses `pickup_step,origin_hex,dest_hex,duration_min` CSV (header required).
std::vector<TripRecord> read_trip_csv(std::istream& is, IngestReport* report = nullptr);

struct SynthOptions {
    double dt_min = 5.0;
    double kernel_sigma_hops = 1.0;
    double noise = 0.1;       ///< multiplicative per-step noise level
    int start_step = 84;      ///< step of day at t = 0 (84 * 5 min = 07:00)
    FareModel fare_model;
};

/**
 * Synthetic demand: hotspot kernels modulated by a two-peak daily profile.
 *
 * Total requests per step equal peak_rate * profile(t) * noise. Origins
 * follow the hotspot kernel; destinations mix the kernel with a uniform
 * floor. T = 1 + hop distance, constant over time.
 */
ScenarioDataset synth_scenario(const HexGrid& grid, int horizon, int hotspots, double peak_rate,
                               std::uint64_t seed, const SynthOptions& opts = {});

/// Hotspot cells chosen by synth_scenario for a given seed.
std::vector<CellId> synth_hotspots(const HexGrid& grid, int hotspots, std::uint64_t seed);

/// Two-peak daily profile in [0,1], peaking at 1.
double daily_profile(double hour_of_day);

enum class OrderStatus { open, assigned, served, dropped };

struct Order {
    int id = 0;
    CellId origin = 0;
    CellId dest = 0;
    int arrival_step = 0;
    int wait_steps = 0;
    OrderStatus status = OrderStatus::open;
};

/// Independent Poisson(D(h1,h2)) arrivals per OD pair, ids starting at id_base.
std::vector<Order> sample_orders(const ScenarioField& field, int t, std::uint64_t seed, int id_base = 0);

/// Single-file format: one JSON manifest line, then all D blocks (f64 LE), then all T blocks (i32 LE).
void save_dataset(const ScenarioDataset& ds, const std::filesystem::path& path);
ScenarioDataset load_dataset(const std::filesystem::path& path);

}  // namespace hexfleet
