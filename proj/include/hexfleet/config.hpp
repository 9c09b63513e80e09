#pragma once

#include "hexfleet/agent.hpp"
#include "hexfleet/env.hpp"
#include "hexfleet/hexgrid.hpp"
#include "hexfleet/neural.hpp"
#include "hexfleet/scenario.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>

namespace hexfleet {

/// Parse, unknown-key or range failure; the message carries the key path and line.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GridConfig {
    int rows = 5;
    int cols = 5;
    double hex_pitch_km = 1.0;
    int stations = 2;
    int exclusion_radius = 2;
    std::uint64_t seed = 7;
};

struct ScenarioConfig {
    std::string dataset;  ///< dataset binary; empty means synthesize
    int horizon = 288 * 9;
    int hotspots = 3;
    double peak_rate = 6.0;
    double dt_min = 5.0;
    double noise = 0.1;
    double kernel_sigma_hops = 1.0;
    int start_step = 84;
    double base_fare = 2.5;
    double per_km = 1.0;
    double test_fraction = 7.0 / 31.0;  ///< trailing share of the horizon held out for evaluation
    std::uint64_t seed = 1;
};

struct RunSection {
    std::string id = "run";
    std::string out = "out";
    std::uint64_t seed = 0;
    int workers = 1;
    int eval_episodes = 20;
    int max_pickup_hops = 3;  ///< greedy baseline
    double low_soc = 0.2;     ///< greedy baseline
};

struct RunConfig {
    GridConfig grid;
    ScenarioConfig scenario;
    EnvConfig env;
    ProjectionConfig projection;
    WdroConfig wdro;
    nn::NetConfig neural;
    TrainConfig agent;
    RunSection run;
    std::filesystem::path base_dir;  ///< directory relative dataset paths resolve against
};

RunConfig parse_config(std::string_view toml_text, std::string_view source = "<string>",
                       const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
/// Full TOML document with every key; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& cfg);
bool operator==(const RunConfig& a, const RunConfig& b);

/// Range checks shared by the loader and programmatic callers; throws ConfigError.
void validate_config(const RunConfig& cfg);

struct World {
    std::shared_ptr<const HexGrid> grid;
    std::shared_ptr<const EnvModel> model;
    std::shared_ptr<const ScenarioDataset> train;
    std::shared_ptr<const ScenarioDataset> test;
};

HexGrid make_grid(const RunConfig& cfg);
/// Loads or synthesizes the dataset (synthesis seed from the config) and splits off the test tail.
World make_world(const RunConfig& cfg);

TrainerSetup make_trainer_setup(const RunConfig& cfg, const World& world, const AblationFlags& flags);

}  // namespace hexfleet
