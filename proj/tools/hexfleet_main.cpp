#include "hexfleet/agent.hpp"
#include "hexfleet/checks.hpp"
#include "hexfleet/config.hpp"
#include "hexfleet/theory.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace hexfleet;

namespace {

constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int> workers;
    std::optional<double> milp_time_limit;
    std::string ablate;
    std::string dump_lp;
};

struct Context {
    RunConfig cfg;
    AblationFlags ablation;
    fs::path out;
    std::string dump_lp;
};

Context resolve(const Flags& f) {
    Context c;
    c.cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
    if (f.seed) c.cfg.run.seed = *f.seed;
    if (f.out) c.cfg.run.out = *f.out;
    if (f.workers) c.cfg.run.workers = *f.workers;
    if (f.milp_time_limit) c.cfg.projection.time_limit_s = *f.milp_time_limit;
    validate_config(c.cfg);
    if (f.ablate == "no_milp") {
        c.ablation.no_milp = true;
    } else if (f.ablate == "no_wdro") {
        c.ablation.no_wdro = true;
    } else if (f.ablate == "identity_metric") {
        c.ablation.identity_metric = true;
    }
    c.out = c.cfg.run.out;
    fs::create_directories(c.out);
    c.dump_lp = f.dump_lp;
    return c;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << std::setprecision(10);
    return os;
}

/// Writes the first non-empty projection instance met by the policy, in CPLEX LP format.
void dump_first_instance(const Context& c, const World& w, const nn::ParameterSet* params) {
    if (c.dump_lp.empty()) return;
    const int len = std::min(c.cfg.env.episode_steps, w.test->horizon() - 1);
    Episode ep(w.model, w.test, 0, len, derive_seed(c.cfg.run.seed, 0xd1));
    const nn::Mat a_hat = params ? nn::Mat(graph_matrices(*w.grid).a_hat) : nn::Mat();
    while (!ep.done()) {
        const SystemState s = ep.state();
        const auto cands = all_candidates(*w.model, s, ep.current_field());
        if (!cands.empty()) {
            Intention it;
            if (params) {
                const nn::ActorContext ctx = nn::make_actor_context(*w.model, s, cands);
                it = nn::actor_sample(*params, a_hat, nn::Mat(featurize(*w.model, s)), ctx, c.cfg.run.seed).intention;
            }
            const MilpInstance inst = build_instance(*w.model, s, it, cands, c.cfg.projection.mu);
            std::ofstream os(c.dump_lp);
            if (!os) throw std::runtime_error("cannot write " + c.dump_lp);
            write_lp(os, inst);
            return;
        }
        ep.advance(greedy_policy(*w.model, s, cands));
    }
    throw std::runtime_error("no decision epoch with idle vehicles to dump");
}

int cmd_ingest(const Context& c, const std::string& trips, double subsample) {
    std::ifstream in(trips);
    if (!in) throw ConfigError(trips + ": cannot open trip file");
    IngestReport rep;
    const std::vector<TripRecord> rows = read_trip_csv(in, &rep);
    const HexGrid grid = make_grid(c.cfg);
    IngestOptions opts;
    opts.subsample_rate = subsample;
    opts.seed = c.cfg.run.seed;
    ScenarioDataset ds = ingest_trips(rows, grid, c.cfg.scenario.dt_min, &rep, opts);
    ds.fare_model = {c.cfg.scenario.base_fare, c.cfg.scenario.per_km};
    save_dataset(ds, c.out / "dataset.bin");
    std::ofstream os = open_out(c.out / "ingest_report.csv");
    os << "rows_read,rows_used,rows_skipped,rows_subsampled,steps,cells\n"
       << rep.rows_read << ',' << rep.rows_used << ',' << rep.rows_skipped << ',' << rep.rows_subsampled << ','
       << ds.horizon() << ',' << ds.cells() << '\n';
    std::cout << "ingested " << rep.rows_used << " of " << rep.rows_read << " trips into " << ds.horizon() << " steps\n";
    return 0;
}

int cmd_synth(const Context& c) {
    RunConfig cfg = c.cfg;
    cfg.scenario.dataset.clear();
    const HexGrid grid = make_grid(cfg);
    SynthOptions so;
    so.dt_min = cfg.scenario.dt_min;
    so.noise = cfg.scenario.noise;
    so.kernel_sigma_hops = cfg.scenario.kernel_sigma_hops;
    so.start_step = cfg.scenario.start_step;
    so.fare_model = {cfg.scenario.base_fare, cfg.scenario.per_km};
    const ScenarioDataset ds =
        synth_scenario(grid, cfg.scenario.horizon, cfg.scenario.hotspots, cfg.scenario.peak_rate, cfg.scenario.seed, so);
    save_dataset(ds, c.out / "dataset.bin");
    std::ofstream os = open_out(c.out / "demand_profile.csv");
    os << "step,step_of_day,total_demand\n";
    for (int t = 0; t < ds.horizon(); ++t) {
        os << t << ',' << (ds.start_step + t) % ds.steps_per_day() << ',' << ds.fields[t].demand.sum() << '\n';
    }
    std::cout << "synthesized " << ds.horizon() << " steps over " << ds.cells() << " cells\n";
    return 0;
}

int cmd_train(const Context& c) {
    const World w = make_world(c.cfg);
    RobustSacTrainer tr(make_trainer_setup(c.cfg, w, c.ablation));
    dump_first_instance(c, w, &tr.params());
    {
        std::ofstream cfg_out = open_out(c.out / "config.toml");
        cfg_out << serialize_config(c.cfg);
    }
    std::ofstream log = open_out(c.out / "train_log.csv");
    try {
        tr.train(c.cfg.agent.episodes, &log);
    } catch (const nn::NonFiniteError& e) {
        tr.save(c.out / "checkpoint_abort");
        std::cerr << "non-finite value after " << tr.steps() << " environment steps: " << e.what()
                  << "\nparameters saved to " << (c.out / "checkpoint_abort").string() << '\n';
        return kExitRuntime;
    }
    tr.save(c.out / "checkpoint");
    std::ofstream dual = open_out(c.out / "dual_trace.csv");
    dual << "update,rho_hat,lambda\n";
    for (std::size_t i = 0; i < tr.rho_trace().size(); ++i) {
        dual << i + 1 << ',' << tr.rho_trace()[i] << ',' << tr.lambda_trace()[i] << '\n';
    }
    std::cout << "trained " << c.cfg.agent.episodes << " episodes (" << tr.steps() << " steps); checkpoint in "
              << (c.out / "checkpoint").string() << '\n';
    return 0;
}

void write_metrics_header(std::ostream& os) {
    os << "policy,net_profit,revenue,driving_cost,charging_cost,penalty,served,dropped,mean_wait,violation_steps,"
          "peak_kw,episodes,steps\n";
}

void write_metrics_row(std::ostream& os, const std::string& name, const EvalMetrics& m) {
    os << name << ',' << m.net_profit << ',' << m.revenue << ',' << m.driving_cost << ',' << m.charging_cost << ','
       << m.penalty << ',' << m.served << ',' << m.dropped << ',' << m.mean_wait << ',' << m.violation_steps << ','
       << m.peak_kw << ',' << m.episodes << ',' << m.steps << '\n';
}

int cmd_evaluate(const Context& c, std::string policy, const std::string& checkpoint) {
    const World w = make_world(c.cfg);
    if (policy.empty()) policy = checkpoint.empty() ? "greedy" : "actor";
    Policy pol;
    std::shared_ptr<nn::ParameterSet> params;
    if (policy == "actor") {
        if (checkpoint.empty()) throw ConfigError("--policy actor needs --checkpoint");
        params = std::make_shared<nn::ParameterSet>(nn::load_checkpoint(checkpoint));
        if (params->config.cells != w.grid->size() ||
            params->config.stations != static_cast<int>(w.grid->stations().size())) {
            throw ConfigError("checkpoint was trained on a different grid");
        }
        pol = actor_policy(w.model, params, c.cfg.projection, c.ablation.no_milp);
    } else {
        GreedyOptions go;
        go.max_pickup_hops = c.cfg.run.max_pickup_hops;
        go.low_soc = c.cfg.run.low_soc;
        pol = greedy_as_policy(w.model, go);
    }
    dump_first_instance(c, w, params.get());
    std::vector<StepTrace> trace;
    const EvalMetrics m =
        evaluate(pol, w.model, w.test, {c.cfg.run.eval_episodes, c.cfg.env.episode_steps, c.cfg.run.seed}, &trace);
    const std::string name = policy == "actor" && c.ablation.no_milp ? "actor_no_milp" : policy;
    std::ofstream os = open_out(c.out / "metrics.csv");
    write_metrics_header(os);
    write_metrics_row(os, name, m);
    fs::create_directories(c.out / "traces");
    std::ofstream tf;
    int open_ep = -1;
    for (const StepTrace& s : trace) {
        if (s.episode != open_ep) {
            char file[32];
            std::snprintf(file, sizeof file, "episode_%03d.csv", s.episode);
            tf = open_out(c.out / "traces" / file);
            write_trace_header(tf);
            open_ep = s.episode;
        }
        write_trace_row(tf, s);
    }
    std::cout << name << ": net profit " << m.net_profit << ", served " << m.served << ", dropped " << m.dropped
              << ", violation steps " << m.violation_steps << ", peak " << m.peak_kw << " kW\n";
    return 0;
}

void write_check_header(std::ostream& os) { os << "check,pass,trials,worst,detail\n"; }

void write_check_row(std::ostream& os, const std::string& name, const CheckResult& r) {
    os << name << ',' << (r.pass ? 1 : 0) << ',' << r.trials << ',' << r.worst << ",\"" << r.detail << "\"\n";
    std::cout << (r.pass ? "PASS " : "FAIL ") << name << ": " << r.detail << '\n';
}

int cmd_oracle_check(const Context& c, int instances) {
    std::optional<std::ofstream> lp;
    if (!c.dump_lp.empty()) lp.emplace(c.dump_lp);
    const CheckResult r =
        check_projection_oracle(c.cfg.run.seed, instances, c.cfg.projection.time_limit_s, lp ? &*lp : nullptr);
    std::ofstream os = open_out(c.out / "oracle_check.csv");
    write_check_header(os);
    write_check_row(os, "projection_oracle", r);
    return r.pass ? 0 : kExitCheckFailed;
}

int cmd_theory_check(const Context& c) {
    ContractionOptions co;
    co.gamma = c.cfg.agent.gamma;
    co.alpha = c.cfg.neural.alpha;
    LipschitzOptions lo;
    lo.rho = c.cfg.wdro.rho;
    DualTrackingOptions dop;
    dop.rho_target = c.cfg.wdro.rho_target;
    const CheckResult r1 = check_contraction(c.cfg.run.seed, co);
    const CheckResult r2 = check_lipschitz_bound(c.cfg.run.seed, lo);
    const CheckResult r3 = check_dual_tracking(c.cfg.run.seed, dop);
    std::ofstream os = open_out(c.out / "theory_check.csv");
    write_check_header(os);
    write_check_row(os, "contraction", r1);
    write_check_row(os, "lipschitz_bound", r2);
    write_check_row(os, "dual_tracking", r3);
    return r1.pass && r2.pass && r3.pass ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fleet dispatch and charging with robust actor-critic training and MILP action projection"};
    app.require_subcommand(1);
    app.fallthrough();
    Flags f;
    app.add_option("--config", f.config, "TOML configuration file")->check(CLI::ExistingFile);
    app.add_option("--seed", f.seed, "Run seed (overrides run.seed)");
    app.add_option("--out", f.out, "Output directory (overrides run.out)");
    app.add_option("--workers", f.workers, "Worker threads for target computation")->check(CLI::PositiveNumber);
    app.add_option("--milp-time-limit", f.milp_time_limit, "Projection time budget in seconds (default 3.0)")
        ->check(CLI::NonNegativeNumber);
    app.add_option("--ablate", f.ablate, "Ablation switch")->check(CLI::IsMember({"no_milp", "no_wdro", "identity_metric"}));
    app.add_option("--dump-lp", f.dump_lp, "Write one projection instance in CPLEX LP format");

    std::string trips;
    double subsample = 1.0;
    auto* ingest = app.add_subcommand("ingest", "Trip CSV to dataset binary");
    ingest->add_option("trips", trips, "CSV with pickup_step,origin_hex,dest_hex,duration_min")->required();
    ingest->add_option("--subsample", subsample, "Per-trip keep probability")->check(CLI::Range(0.0, 1.0));
    auto* synth = app.add_subcommand("synth", "Synthetic demand to dataset binary");
    auto* train = app.add_subcommand("train", "Train the policy (or an ablation)");
    std::string policy, checkpoint;
    auto* eval = app.add_subcommand("evaluate", "Evaluate a policy on the held-out steps");
    eval->add_option("--policy", policy, "greedy or actor")->check(CLI::IsMember({"greedy", "actor"}));
    eval->add_option("--checkpoint", checkpoint, "Checkpoint directory for the actor")->check(CLI::ExistingDirectory);
    int instances = 200;
    auto* oracle = app.add_subcommand("oracle-check", "Branch-and-bound against enumeration on micro instances");
    oracle->add_option("--instances", instances, "Number of random instances")->check(CLI::PositiveNumber);
    auto* theory = app.add_subcommand("theory-check", "Contraction, Lipschitz-bound and dual-tracking suites");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        const Context c = resolve(f);
        if (*ingest) return cmd_ingest(c, trips, subsample);
        if (*synth) return cmd_synth(c);
        if (*train) return cmd_train(c);
        if (*eval) return cmd_evaluate(c, policy, checkpoint);
        if (*oracle) return cmd_oracle_check(c, instances);
        if (*theory) return cmd_theory_check(c);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
    return kExitRuntime;
}
