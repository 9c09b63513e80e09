#include "hexfleet/agent.hpp"
#include "hexfleet/checks.hpp"
#include "hexfleet/config.hpp"
#include "hexfleet/theory.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace hexfleet;

namespace {

py::dict metrics_dict(const EvalMetrics& m) {
    py::dict d;
    d["net_profit"] = m.net_profit;
    d["revenue"] = m.revenue;
    d["driving_cost"] = m.driving_cost;
    d["charging_cost"] = m.charging_cost;
    d["penalty"] = m.penalty;
    d["served"] = m.served;
    d["dropped"] = m.dropped;
    d["mean_wait"] = m.mean_wait;
    d["violation_steps"] = m.violation_steps;
    d["peak_kw"] = m.peak_kw;
    d["episodes"] = m.episodes;
    d["steps"] = m.steps;
    return d;
}

py::dict log_dict(const TrainLogRow& r) {
    py::dict d;
    d["step"] = r.step;
    d["episode_return"] = r.episode_return;
    d["ma100"] = r.ma100;
    d["loss_q1"] = r.loss_q1;
    d["loss_q2"] = r.loss_q2;
    d["loss_pi"] = r.loss_pi;
    d["lambda"] = r.lambda;
    d["rho_hat"] = r.rho_hat;
    d["milp_status_counts"] = r.milp.str();
    return d;
}

/// Trainer bundled with the world it was built on.
struct PyTrainer {
    RunConfig cfg;
    World world;
    std::unique_ptr<RobustSacTrainer> trainer;

    PyTrainer(const RunConfig& c, const std::string& ablate) : cfg(c), world(make_world(c)) {
        AblationFlags f;
        f.no_milp = ablate == "no_milp";
        f.no_wdro = ablate == "no_wdro";
        f.identity_metric = ablate == "identity_metric";
        if (!ablate.empty() && !f.no_milp && !f.no_wdro && !f.identity_metric) {
            throw std::invalid_argument("unknown ablation '" + ablate + "'");
        }
        trainer = std::make_unique<RobustSacTrainer>(make_trainer_setup(cfg, world, f));
    }

    py::dict evaluate(int episodes) const {
        return metrics_dict(
            hexfleet::evaluate(trainer->policy(true), world.model, world.test, {episodes, cfg.env.episode_steps, cfg.run.seed}));
    }
};

}  // namespace

PYBIND11_MODULE(_hexfleet, m) {
    m.doc() = "Fleet dispatch and charging simulator, projection and robust actor-critic";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    py::class_<HexGrid>(m, "HexGrid")
        .def_property_readonly("rows", &HexGrid::rows)
        .def_property_readonly("cols", &HexGrid::cols)
        .def_property_readonly("size", &HexGrid::size)
        .def_property_readonly("hex_pitch_km", &HexGrid::hex_pitch_km)
        .def_property_readonly("stations", &HexGrid::stations)
        .def("neighbors", &HexGrid::neighbors, py::arg("cell"))
        .def("hop_distance", &HexGrid::hop_distance, py::arg("a"), py::arg("b"))
        .def("is_station", &HexGrid::is_station, py::arg("cell"));

    m.def(
        "build_grid",
        [](int rows, int cols, double pitch, int stations, std::uint64_t seed, int exclusion_radius) {
            return build_grid(rows, cols, pitch, stations, seed, {}, exclusion_radius);
        },
        py::arg("rows"), py::arg("cols"), py::arg("hex_pitch_km") = 1.0, py::arg("stations") = 0, py::arg("seed") = 0,
        py::arg("exclusion_radius") = 2);
    m.def(
        "normalized_adjacency", [](const HexGrid& g) { return Eigen::MatrixXd(graph_matrices(g).a_hat); },
        py::arg("grid"));

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("from_toml", [](const std::string& text) { return parse_config(text); }, py::arg("text"))
        .def_static("load", [](const std::string& path) { return load_config(path); }, py::arg("path"))
        .def("to_toml", [](const RunConfig& c) { return serialize_config(c); })
        .def("validate", [](const RunConfig& c) { validate_config(c); })
        .def("__eq__", [](const RunConfig& a, const RunConfig& b) { return a == b; })
        .def_property(
            "gamma", [](const RunConfig& c) { return c.agent.gamma; }, [](RunConfig& c, double v) { c.agent.gamma = v; })
        .def_property(
            "seed", [](const RunConfig& c) { return c.run.seed; }, [](RunConfig& c, std::uint64_t v) { c.run.seed = v; })
        .def_property(
            "episodes", [](const RunConfig& c) { return c.agent.episodes; },
            [](RunConfig& c, int v) { c.agent.episodes = v; })
        .def_property(
            "rho", [](const RunConfig& c) { return c.wdro.rho; }, [](RunConfig& c, double v) { c.wdro.rho = v; });

    m.def(
        "synth_demand",
        [](const HexGrid& g, int horizon, int hotspots, double peak_rate, std::uint64_t seed) {
            const ScenarioDataset ds = synth_scenario(g, horizon, hotspots, peak_rate, seed);
            std::vector<Eigen::MatrixXd> out;
            for (const ScenarioField& f : ds.fields) out.emplace_back(f.demand);
            return out;
        },
        py::arg("grid"), py::arg("horizon"), py::arg("hotspots"), py::arg("peak_rate"), py::arg("seed"));

    m.def(
        "evaluate_greedy",
        [](const RunConfig& c, int episodes) {
            const World w = make_world(c);
            GreedyOptions go;
            go.max_pickup_hops = c.run.max_pickup_hops;
            go.low_soc = c.run.low_soc;
            return metrics_dict(evaluate(greedy_as_policy(w.model, go), w.model, w.test,
                                         {episodes, c.env.episode_steps, c.run.seed}));
        },
        py::arg("config"), py::arg("episodes") = 5);

    py::class_<PyTrainer>(m, "Trainer")
        .def(py::init<const RunConfig&, const std::string&>(), py::arg("config"), py::arg("ablate") = "")
        .def("run_episode",
             [](PyTrainer& t) {
                 TrainLogRow row;
                 {
                     py::gil_scoped_release nogil;
                     row = t.trainer->run_episode();
                 }
                 return log_dict(row);
             })
        .def("evaluate", &PyTrainer::evaluate, py::arg("episodes") = 5)
        .def("save", [](const PyTrainer& t, const std::string& dir) { t.trainer->save(dir); }, py::arg("dir"))
        .def_property_readonly("steps", [](const PyTrainer& t) { return t.trainer->steps(); })
        .def_property_readonly("lambda_trace", [](const PyTrainer& t) { return t.trainer->lambda_trace(); })
        .def_property_readonly("rho_trace", [](const PyTrainer& t) { return t.trainer->rho_trace(); });

    py::class_<CheckResult>(m, "CheckResult")
        .def_readonly("passed", &CheckResult::pass)
        .def_readonly("trials", &CheckResult::trials)
        .def_readonly("worst", &CheckResult::worst)
        .def_readonly("detail", &CheckResult::detail)
        .def("__bool__", [](const CheckResult& r) { return r.pass; });

    m.def("check_projection_oracle", [](std::uint64_t seed, int n) { return check_projection_oracle(seed, n); },
          py::arg("seed") = 0, py::arg("instances") = 200);
    m.def("check_gradient_fidelity", &check_gradient_fidelity, py::arg("seed") = 0, py::arg("seeds") = 10,
          py::arg("tol") = 1e-4);
    m.def("check_gumbel_law", &check_gumbel_law, py::arg("seed") = 0, py::arg("samples") = 100000);
    m.def("check_power_density", &check_power_density, py::arg("tol") = 1e-3);
    m.def("check_contraction", [](std::uint64_t seed) { return check_contraction(seed); }, py::arg("seed") = 0);
    m.def("check_lipschitz_bound", [](std::uint64_t seed) { return check_lipschitz_bound(seed); }, py::arg("seed") = 0);
    m.def("check_dual_tracking", [](std::uint64_t seed) { return check_dual_tracking(seed); }, py::arg("seed") = 0);
}
