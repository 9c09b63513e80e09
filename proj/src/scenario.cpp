#include "hexfleet/scenario.hpp"

#include "hexfleet/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hexfleet {

void ScenarioField::validate() const {
    if (demand.rows() != demand.cols() || travel.rows() != travel.cols() || demand.rows() != travel.rows()) {
        throw std::invalid_argument("scenario field: D and T must be square and of equal size");
    }
    if ((demand.array() < 0.0).any() || !demand.allFinite()) {
        throw std::invalid_argument("scenario field: demand must be finite and nonnegative");
    }
    if ((travel.array() < 1).any()) throw std::invalid_argument("scenario field: travel times must be >= 1");
    for (Eigen::Index h = 0; h < travel.rows(); ++h) {
        if (travel(h, h) != 1) throw std::invalid_argument("scenario field: T(h,h) must equal 1");
    }
}

double fare(const FareModel& model, CellId origin, CellId dest, const HexGrid& grid) {
    return model.base_fare + model.per_km * grid.distance_km(origin, dest);
}

ScenarioDataset ScenarioDataset::slice(int begin, int end) const {
    if (begin < 0 || end > horizon() || begin > end) throw std::invalid_argument("dataset slice out of range");
    ScenarioDataset out;
    out.dt_min = dt_min;
    out.fare_model = fare_model;
    out.start_step = (start_step + begin) % std::max(1, steps_per_day());
    out.fields.assign(fields.begin() + begin, fields.begin() + end);
    return out;
}

namespace {

double median(std::vector<double>& v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int steps_from_minutes(double minutes, double dt_min) {
    return std::max(1, static_cast<int>(std::lround(minutes / dt_min)));
}

}  // namespace

ScenarioDataset ingest_trips(std::span<const TripRecord> records, const HexGrid& grid, double dt_min,
                             IngestReport* report, const IngestOptions& opts) {
    if (!(dt_min > 0.0)) throw std::invalid_argument("dt_min must be positive");
    IngestReport local;
    IngestReport& rep = report ? *report : local;
    rep.rows_read += records.size();

    // Subsampling keys on the record content, so the kept set is order independent.
    auto keep = [&](const TripRecord& r) {
        if (opts.subsample_rate >= 1.0) return true;
        std::uint64_t key = static_cast<std::uint64_t>(r.pickup_step);
        key = derive_seed(key, static_cast<std::uint64_t>(r.origin), static_cast<std::uint64_t>(r.dest));
        std::uint64_t dur_bits = 0;
        std::memcpy(&dur_bits, &r.duration_min, sizeof dur_bits);
        key = derive_seed(opts.seed, key, dur_bits);
        return static_cast<double>(key >> 11) * 0x1.0p-53 < opts.subsample_rate;
    };

    const int m = grid.size();
    std::map<std::tuple<int, int, int>, std::vector<double>> durations;
    std::vector<double> all;
    int horizon = 0;
    for (const TripRecord& r : records) {
        if (!grid.contains(r.origin) || !grid.contains(r.dest) || r.pickup_step < 0 ||
            !(r.duration_min > 0.0) || !std::isfinite(r.duration_min)) {
            ++rep.rows_skipped;
            continue;
        }
        if (!keep(r)) {
            ++rep.rows_subsampled;
            continue;
        }
        ++rep.rows_used;
        durations[{r.pickup_step, r.origin, r.dest}].push_back(r.duration_min);
        all.push_back(r.duration_min);
        horizon = std::max(horizon, r.pickup_step + 1);
    }

    ScenarioDataset ds;
    ds.dt_min = dt_min;
    if (horizon == 0) return ds;
    const int backfill = steps_from_minutes(median(all), dt_min);
    ds.fields.resize(static_cast<std::size_t>(horizon));
    for (ScenarioField& f : ds.fields) {
        f.demand = DemandMatrix::Zero(m, m);
        f.travel = TravelMatrix::Constant(m, m, backfill);
        f.travel.diagonal().setOnes();
    }
    for (auto& [key, durs] : durations) {
        const auto [t, o, d] = key;
        ScenarioField& f = ds.fields[static_cast<std::size_t>(t)];
        f.demand(o, d) = static_cast<double>(durs.size());
        if (o != d) f.travel(o, d) = steps_from_minutes(median(durs), dt_min);
    }
    for (const ScenarioField& f : ds.fields) f.validate();
    return ds;
}

std::vector<TripRecord> read_trip_csv(std::istream& is, IngestReport* report) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("trip csv: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "pickup_step,origin_hex,dest_hex,duration_min") {
        throw std::invalid_argument("trip csv: expected header 'pickup_step,origin_hex,dest_hex,duration_min'");
    }
    std::vector<TripRecord> out;
    while (std::getline(is, line)) {
        if (line.empty() || line == "\r") continue;
        std::replace(line.begin(), line.end(), ',', ' ');
        std::istringstream row(line);
        TripRecord r;
        if (!(row >> r.pickup_step >> r.origin >> r.dest >> r.duration_min)) {
            if (report) {
                ++report->rows_read;
                ++report->rows_skipped;
            }
            continue;
        }
        out.push_back(r);
    }
    return out;
}

double daily_profile(double hour) {
    auto bump = [](double h, double mu, double sigma) {
        const double z = (h - mu) / sigma;
        return std::exp(-0.5 * z * z);
    };
    return 0.2 + 0.8 * std::max(bump(hour, 8.5, 1.5), bump(hour, 18.0, 2.0));
}

std::vector<CellId> synth_hotspots(const HexGrid& grid, int hotspots, std::uint64_t seed) {
    std::vector<CellId> cells(static_cast<std::size_t>(grid.size()));
    std::iota(cells.begin(), cells.end(), 0);
    Rng rng(derive_seed(seed, 0x4075));
    std::shuffle(cells.begin(), cells.end(), rng);
    cells.resize(static_cast<std::size_t>(std::clamp(hotspots, 0, grid.size())));
    return cells;
}

ScenarioDataset synth_scenario(const HexGrid& grid, int horizon, int hotspots, double peak_rate,
                               std::uint64_t seed, const SynthOptions& opts) {
    if (horizon < 1) throw std::invalid_argument("synth_scenario: horizon must be >= 1");
    if (peak_rate < 0.0) throw std::invalid_argument("synth_scenario: peak_rate must be >= 0");
    const int m = grid.size();
    const std::vector<CellId> centers = synth_hotspots(grid, hotspots, seed);

    Eigen::VectorXd kernel = Eigen::VectorXd::Zero(m);
    for (CellId h = 0; h < m; ++h) {
        for (CellId c : centers) {
            const double d = grid.hop_distance(h, c);
            kernel[h] += std::exp(-0.5 * d * d / (opts.kernel_sigma_hops * opts.kernel_sigma_hops));
        }
    }
    Eigen::VectorXd origin = kernel.array() + 0.05;
    origin /= origin.sum();
    const Eigen::VectorXd kernel_n = kernel.sum() > 0 ? Eigen::VectorXd(kernel / kernel.sum())
                                                      : Eigen::VectorXd::Constant(m, 1.0 / m);
    const Eigen::VectorXd dest = 0.3 * kernel_n.array() + 0.7 / m;

    // Normalised OD shape, constant across steps.
    DemandMatrix shape = origin * dest.transpose();
    shape /= shape.sum();

    TravelMatrix travel(m, m);
    for (CellId a = 0; a < m; ++a) {
        for (CellId b = 0; b < m; ++b) travel(a, b) = 1 + grid.hop_distance(a, b);
    }

    ScenarioDataset ds;
    ds.dt_min = opts.dt_min;
    ds.fare_model = opts.fare_model;
    ds.start_step = opts.start_step;
    ds.fields.resize(static_cast<std::size_t>(horizon));
    Rng rng(derive_seed(seed, 0xd3a1));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int t = 0; t < horizon; ++t) {
        const double hour = std::fmod((opts.start_step + t) * opts.dt_min / 60.0, 24.0);
        const double noise = std::max(0.0, 1.0 + opts.noise * normal(rng));
        ScenarioField& f = ds.fields[static_cast<std::size_t>(t)];
        f.demand = shape * (peak_rate * daily_profile(hour) * noise);
        f.travel = travel;
        f.validate();
    }
    return ds;
}

std::vector<Order> sample_orders(const ScenarioField& field, int t, std::uint64_t seed, int id_base) {
    Rng rng(seed);
    std::vector<Order> out;
    const int m = field.cells();
    for (int a = 0; a < m; ++a) {
        for (int b = 0; b < m; ++b) {
            const double mean = field.demand(a, b);
            if (mean <= 0.0) continue;
            const int k = std::poisson_distribution<int>(mean)(rng);
            for (int i = 0; i < k; ++i) {
                Order o;
                o.id = id_base + static_cast<int>(out.size());
                o.origin = a;
                o.dest = b;
                o.arrival_step = t;
                out.push_back(o);
            }
        }
    }
    return out;
}

namespace {

static_assert(std::endian::native == std::endian::little, "dataset IO assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, const T* data, std::size_t n) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void read_raw(std::istream& is, T* data, std::size_t n) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
    if (!is) throw std::runtime_error("dataset file truncated");
}

}  // namespace

void save_dataset(const ScenarioDataset& ds, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    nlohmann::json manifest = {
        {"m", ds.cells()},
        {"horizon", ds.horizon()},
        {"dt_min", ds.dt_min},
        {"start_step", ds.start_step},
        {"fare", {{"base", ds.fare_model.base_fare}, {"per_km", ds.fare_model.per_km}}},
    };
    os << manifest.dump() << '\n';
    for (const ScenarioField& f : ds.fields) write_raw(os, f.demand.data(), static_cast<std::size_t>(f.demand.size()));
    for (const ScenarioField& f : ds.fields) write_raw(os, f.travel.data(), static_cast<std::size_t>(f.travel.size()));
}

ScenarioDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    const nlohmann::json manifest = nlohmann::json::parse(header);
    ScenarioDataset ds;
    const int m = manifest.at("m").get<int>();
    const int horizon = manifest.at("horizon").get<int>();
    ds.dt_min = manifest.at("dt_min").get<double>();
    ds.start_step = manifest.value("start_step", 0);
    ds.fare_model.base_fare = manifest.at("fare").at("base").get<double>();
    ds.fare_model.per_km = manifest.at("fare").at("per_km").get<double>();
    ds.fields.resize(static_cast<std::size_t>(horizon));
    for (ScenarioField& f : ds.fields) {
        f.demand.resize(m, m);
        read_raw(is, f.demand.data(), static_cast<std::size_t>(m) * m);
    }
    for (ScenarioField& f : ds.fields) {
        f.travel.resize(m, m);
        read_raw(is, f.travel.data(), static_cast<std::size_t>(m) * m);
        f.validate();
    }
    return ds;
}

}  // namespace hexfleet
