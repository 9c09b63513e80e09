#include "hexfleet/config.hpp"

#include "toml.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace hexfleet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

template <class T>
struct Range {
    T lo, hi;
    bool lo_open = false, hi_open = false;
    bool ok(T v) const {
        if (lo_open ? !(v > lo) : !(v >= lo)) return false;
        if (hi_open ? !(v < hi) : !(v <= hi)) return false;
        return true;
    }
};

Range<double> at_least(double lo) { return {lo, kInf}; }
Range<double> above(double lo) { return {lo, kInf, true}; }
Range<double> unit_closed() { return {0.0, 1.0}; }
Range<double> unit_open() { return {0.0, 1.0, true, true}; }
Range<int> int_at_least(int lo) { return {lo, std::numeric_limits<int>::max()}; }

std::string describe(const std::string& key, const Range<double>& r) {
    std::ostringstream os;
    if (r.hi == kInf) {
        os << key << " must be " << (r.lo_open ? "> " : ">= ") << r.lo;
    } else {
        os << key << " must lie in " << (r.lo_open ? '(' : '[') << r.lo << ',' << r.hi << (r.hi_open ? ')' : ']');
    }
    return os.str();
}

std::string describe(const std::string& key, const Range<int>& r) {
    std::ostringstream os;
    if (r.hi == std::numeric_limits<int>::max()) {
        os << key << " must be >= " << r.lo;
    } else {
        os << key << " must lie in [" << r.lo << ',' << r.hi << ']';
    }
    return os.str();
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    std::string s(buf, res.ptr);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string quote(const std::string& s) {
    std::ostringstream os;
    os << toml::value<std::string>(s);
    return os.str();
}

std::string_view placement_name(Placement p) { return p == Placement::stations ? "stations" : "uniform"; }

/// Field enumeration shared by the reader, the writer and the validator.
template <class V>
void visit(RunConfig& c, V& v) {
    v.section("grid");
    v.field("rows", c.grid.rows, int_at_least(1));
    v.field("cols", c.grid.cols, int_at_least(1));
    v.field("hex_pitch_km", c.grid.hex_pitch_km, above(0.0));
    v.field("stations", c.grid.stations, int_at_least(0));
    v.field("exclusion_radius", c.grid.exclusion_radius, int_at_least(0));
    v.field("seed", c.grid.seed);

    v.section("scenario");
    v.field("dataset", c.scenario.dataset);
    v.field("horizon", c.scenario.horizon, int_at_least(2));
    v.field("hotspots", c.scenario.hotspots, int_at_least(1));
    v.field("peak_rate", c.scenario.peak_rate, at_least(0.0));
    v.field("dt_min", c.scenario.dt_min, above(0.0));
    v.field("noise", c.scenario.noise, at_least(0.0));
    v.field("kernel_sigma_hops", c.scenario.kernel_sigma_hops, above(0.0));
    v.field("start_step", c.scenario.start_step, int_at_least(0));
    v.field("base_fare", c.scenario.base_fare, at_least(0.0));
    v.field("per_km", c.scenario.per_km, at_least(0.0));
    v.field("test_fraction", c.scenario.test_fraction, unit_open());
    v.field("seed", c.scenario.seed);

    v.section("env");
    v.field("n_vehicles", c.env.fleet.n_vehicles, int_at_least(1));
    v.field("e_max", c.env.fleet.e_max, above(0.0));
    v.field("e_min", c.env.fleet.e_min, at_least(0.0));
    v.field("init_soc_lo", c.env.fleet.init_soc_lo, unit_closed());
    v.field("init_soc_hi", c.env.fleet.init_soc_hi, unit_closed());
    v.field("placement", c.env.fleet.placement);
    v.field("eta_drv", c.env.energy.eta_drv, at_least(0.0));
    v.field("eta_c", c.env.energy.eta_c, Range<double>{0.0, 1.0, true, false});
    v.field("c_drv", c.env.reward.c_drv, at_least(0.0));
    v.field("lambda_wait", c.env.reward.lambda_wait, at_least(0.0));
    v.field("lambda_drop", c.env.reward.lambda_drop, at_least(0.0));
    v.field("w_max", c.env.reward.w_max, int_at_least(1));
    v.field("ports", c.env.station.ports, int_at_least(0));
    v.field("p_max_kw", c.env.station.p_max_kw, above(0.0));
    v.field("price", c.env.station.price, at_least(0.0));
    v.field("feeder_cap_kw", c.env.feeder_cap_kw, at_least(0.0));
    v.field("p_min_kw", c.env.p_min_kw, above(0.0));
    v.field("episode_steps", c.env.episode_steps, int_at_least(1));

    v.section("projection");
    v.field("mu", c.projection.mu, at_least(0.0));
    v.field("time_limit_s", c.projection.time_limit_s, at_least(0.0));
    v.field("node_limit", c.projection.node_limit, int_at_least(1));

    v.section("wdro");
    v.field("rho", c.wdro.rho, at_least(0.0));
    v.field("rho_target", c.wdro.rho_target, at_least(0.0));
    v.field("beta", c.wdro.beta, at_least(0.0));
    v.field("eta0", c.wdro.eta0, above(0.0));
    v.field("inner_k", c.wdro.inner_k, int_at_least(0));
    v.field("inner_step", c.wdro.inner_step, above(0.0));
    v.field("ball_radius", c.wdro.ball_radius, at_least(0.0));

    v.section("neural");
    v.field("hidden", c.neural.hidden, int_at_least(1));
    v.field("head_hidden", c.neural.head_hidden, int_at_least(1));
    v.field("scorer_hidden", c.neural.scorer_hidden, int_at_least(1));
    v.field("alpha", c.neural.alpha, at_least(0.0));
    v.field("tau_start", c.neural.tau_start, above(0.0));
    v.field("tau_decay", c.neural.tau_decay, Range<double>{0.0, 1.0, true, false});
    v.field("tau_min", c.neural.tau_min, above(0.0));
    v.field("log_sigma_min", c.neural.log_sigma_min, Range<double>{-kInf, kInf});
    v.field("log_sigma_max", c.neural.log_sigma_max, Range<double>{-kInf, kInf});

    v.section("agent");
    v.field("lr_actor", c.agent.lr_actor, above(0.0));
    v.field("lr_critic", c.agent.lr_critic, above(0.0));
    v.field("lr_value", c.agent.lr_value, above(0.0));
    v.field("gamma", c.agent.gamma, unit_open());
    v.field("buffer", c.agent.buffer, int_at_least(1));
    v.field("batch", c.agent.batch, int_at_least(1));
    v.field("actor_batch", c.agent.actor_batch, int_at_least(0));
    v.field("polyak_tau", c.agent.polyak_tau, unit_closed());
    v.field("reward_scale", c.agent.reward_scale, above(0.0));
    v.field("episodes", c.agent.episodes, int_at_least(0));
    v.field("warmup_steps", c.agent.warmup_steps, int_at_least(0));
    v.field("updates_every", c.agent.updates_every, int_at_least(1));
    v.field("log_window", c.agent.log_window, int_at_least(1));

    v.section("run");
    v.field("id", c.run.id);
    v.field("out", c.run.out);
    v.field("seed", c.run.seed);
    v.field("workers", c.run.workers, int_at_least(1));
    v.field("eval_episodes", c.run.eval_episodes, int_at_least(1));
    v.field("max_pickup_hops", c.run.max_pickup_hops, int_at_least(0));
    v.field("low_soc", c.run.low_soc, unit_closed());
}

/// Constraints spanning several keys, reported against the second key.
template <class Fail>
void cross_checks(const RunConfig& c, Fail&& fail) {
    if (!(c.env.fleet.e_min < c.env.fleet.e_max)) fail("env", "e_min", "e_min must be below e_max");
    if (c.env.fleet.init_soc_lo > c.env.fleet.init_soc_hi) fail("env", "init_soc_hi", "init_soc_lo must not exceed init_soc_hi");
    if (c.neural.tau_min > c.neural.tau_start) fail("neural", "tau_min", "tau_min must not exceed tau_start");
    if (!(c.neural.log_sigma_min < c.neural.log_sigma_max)) {
        fail("neural", "log_sigma_max", "log_sigma_min must be below log_sigma_max");
    }
    if (c.agent.batch > c.agent.buffer) fail("agent", "batch", "batch must not exceed buffer");
    if (c.grid.stations > c.grid.rows * c.grid.cols) fail("grid", "stations", "stations must not exceed the cell count");
}

class Reader {
public:
    Reader(const toml::table& root, std::string source) : root_(root), source_(std::move(source)) {}

    void section(const char* name) {
        finish_section();
        name_ = name;
        tbl_ = nullptr;
        seen_.clear();
        if (const toml::node* n = root_.get(name)) {
            tbl_ = n->as_table();
            if (!tbl_) throw error(*n, name, std::string(name) + " must be a table");
        }
        sections_.insert(name);
    }

    template <class T, class R>
    void field(const char* key, T& out, const R& range) {
        field(key, out);
        if (const toml::node* n = find(key); n && !range.ok(out)) throw error(*n, path(key), describe(key, range));
    }

    void field(const char* key, double& out) {
        const toml::node* n = find(key);
        if (!n) return;
        if (auto f = n->value_exact<double>()) {
            out = *f;
        } else if (auto i = n->value_exact<std::int64_t>()) {
            out = static_cast<double>(*i);
        } else {
            throw error(*n, path(key), std::string(key) + " must be a number");
        }
    }

    void field(const char* key, int& out) {
        const toml::node* n = find(key);
        if (!n) return;
        auto i = n->value_exact<std::int64_t>();
        if (!i) throw error(*n, path(key), std::string(key) + " must be an integer");
        if (*i < std::numeric_limits<int>::min() || *i > std::numeric_limits<int>::max()) {
            throw error(*n, path(key), std::string(key) + " is out of range");
        }
        out = static_cast<int>(*i);
    }

    void field(const char* key, std::uint64_t& out) {
        const toml::node* n = find(key);
        if (!n) return;
        auto i = n->value_exact<std::int64_t>();
        if (!i || *i < 0) throw error(*n, path(key), std::string(key) + " must be a non-negative integer");
        out = static_cast<std::uint64_t>(*i);
    }

    void field(const char* key, std::string& out) {
        const toml::node* n = find(key);
        if (!n) return;
        auto s = n->value_exact<std::string>();
        if (!s) throw error(*n, path(key), std::string(key) + " must be a string");
        out = *s;
    }

    void field(const char* key, Placement& out) {
        std::string s(placement_name(out));
        field(key, s);
        if (s == "uniform") {
            out = Placement::uniform;
        } else if (s == "stations") {
            out = Placement::stations;
        } else {
            throw error(*find(key), path(key), std::string(key) + " must be \"uniform\" or \"stations\"");
        }
    }

    void finish() {
        finish_section();
        for (const auto& [k, n] : root_) {
            if (!sections_.count(std::string(k.str()))) {
                throw error(n, std::string(k.str()), "unknown table '" + std::string(k.str()) + "'");
            }
        }
    }

    int line_of(const std::string& section, const std::string& key) const {
        const toml::node* t = root_.get(section);
        const toml::node* n = t && t->is_table() ? t->as_table()->get(key) : nullptr;
        return n ? static_cast<int>(n->source().begin.line) : 0;
    }

    ConfigError error(const toml::node& n, const std::string& key_path, const std::string& msg) const {
        return ConfigError(source_ + ":" + std::to_string(n.source().begin.line) + ": " + key_path + ": " + msg);
    }
    const std::string& source() const { return source_; }

private:
    const toml::node* find(const char* key) {
        seen_.insert(key);
        return tbl_ ? tbl_->get(key) : nullptr;
    }
    std::string path(const char* key) const { return name_ + "." + key; }
    void finish_section() {
        if (!tbl_) return;
        for (const auto& [k, n] : *tbl_) {
            if (!seen_.count(std::string(k.str()))) {
                throw error(n, name_ + "." + std::string(k.str()), "unknown key '" + std::string(k.str()) + "'");
            }
        }
        tbl_ = nullptr;
    }

    const toml::table& root_;
    std::string source_;
    std::string name_;
    const toml::table* tbl_ = nullptr;
    std::set<std::string> seen_;
    std::set<std::string> sections_;
};

class Writer {
public:
    void section(const char* name) {
        if (!first_) os_ << '\n';
        first_ = false;
        os_ << '[' << name << "]\n";
    }
    template <class T, class R>
    void field(const char* key, T& v, const R&) {
        field(key, v);
    }
    void field(const char* key, double v) { os_ << key << " = " << format_double(v) << '\n'; }
    void field(const char* key, int v) { os_ << key << " = " << v << '\n'; }
    void field(const char* key, std::uint64_t v) { os_ << key << " = " << v << '\n'; }
    void field(const char* key, const std::string& v) { os_ << key << " = " << quote(v) << '\n'; }
    void field(const char* key, Placement v) { os_ << key << " = " << quote(std::string(placement_name(v))) << '\n'; }
    std::string str() const { return os_.str(); }

private:
    std::ostringstream os_;
    bool first_ = true;
};

class Validator {
public:
    void section(const char* name) { name_ = name; }
    template <class T, class R>
    void field(const char* key, T& v, const R& range) {
        if (!range.ok(v)) throw ConfigError(name_ + "." + key + ": " + describe(key, range));
    }
    template <class T>
    void field(const char*, T&) {}

private:
    std::string name_;
};

void check_dataset_path(const RunConfig& c, const Reader* r) {
    if (c.scenario.dataset.empty()) return;
    std::filesystem::path p = c.scenario.dataset;
    if (p.is_relative()) p = c.base_dir / p;
    if (!std::filesystem::exists(p)) {
        const std::string where = r ? r->source() + ":" + std::to_string(r->line_of("scenario", "dataset")) + ": " : "";
        throw ConfigError(where + "scenario.dataset: file not found: " + p.string());
    }
}

}  // namespace

void validate_config(const RunConfig& cfg) {
    RunConfig c = cfg;
    Validator v;
    visit(c, v);
    cross_checks(c, [](const char* s, const char* k, const std::string& msg) {
        throw ConfigError(std::string(s) + "." + k + ": " + msg);
    });
    check_dataset_path(c, nullptr);
}

RunConfig parse_config(std::string_view toml_text, std::string_view source, const std::filesystem::path& base_dir) {
    toml::table root;
    try {
        root = toml::parse(toml_text, source);
    } catch (const toml::parse_error& e) {
        throw ConfigError(std::string(source) + ":" + std::to_string(e.source().begin.line) + ": parse error: " +
                          std::string(e.description()));
    }
    RunConfig c;
    c.base_dir = base_dir;
    Reader r(root, std::string(source));
    visit(c, r);
    r.finish();
    cross_checks(c, [&](const char* s, const char* k, const std::string& msg) {
        throw ConfigError(r.source() + ":" + std::to_string(r.line_of(s, k)) + ": " + s + "." + k + ": " + msg);
    });
    check_dataset_path(c, &r);
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path.string(), path.parent_path());
}

std::string serialize_config(const RunConfig& cfg) {
    RunConfig c = cfg;
    Writer w;
    visit(c, w);
    return w.str();
}

bool operator==(const RunConfig& a, const RunConfig& b) {
    return a.base_dir == b.base_dir && serialize_config(a) == serialize_config(b);
}

HexGrid make_grid(const RunConfig& cfg) {
    const GridConfig& g = cfg.grid;
    return build_grid(g.rows, g.cols, g.hex_pitch_km, g.stations, g.seed, {}, g.exclusion_radius);
}

World make_world(const RunConfig& cfg) {
    const GridConfig& g = cfg.grid;
    const ScenarioConfig& sc = cfg.scenario;
    HexGrid bare = build_grid(g.rows, g.cols, g.hex_pitch_km, 0, g.seed, {}, g.exclusion_radius);
    ScenarioDataset ds;
    if (sc.dataset.empty()) {
        SynthOptions so;
        so.dt_min = sc.dt_min;
        so.noise = sc.noise;
        so.kernel_sigma_hops = sc.kernel_sigma_hops;
        so.start_step = sc.start_step;
        so.fare_model = {sc.base_fare, sc.per_km};
        ds = synth_scenario(bare, sc.horizon, sc.hotspots, sc.peak_rate, sc.seed, so);
    } else {
        std::filesystem::path p = sc.dataset;
        if (p.is_relative()) p = cfg.base_dir / p;
        ds = load_dataset(p);
        if (ds.cells() != bare.size()) {
            throw ConfigError("scenario.dataset: dataset has " + std::to_string(ds.cells()) + " cells but the grid has " +
                              std::to_string(bare.size()));
        }
    }
    if (ds.horizon() < 4) throw ConfigError("scenario: dataset horizon must be at least 4 steps");

    // Stations follow the mean outbound demand.
    std::vector<double> hint(static_cast<std::size_t>(bare.size()), 0.0);
    for (const ScenarioField& f : ds.fields) {
        for (CellId h = 0; h < bare.size(); ++h) hint[static_cast<std::size_t>(h)] += f.demand.row(h).sum();
    }
    auto grid = std::make_shared<HexGrid>(
        build_grid(g.rows, g.cols, g.hex_pitch_km, g.stations, g.seed, hint, g.exclusion_radius));

    const int h = ds.horizon();
    const int n_test = std::clamp(static_cast<int>(std::lround(h * sc.test_fraction)), 2, h - 2);
    auto model = std::make_shared<EnvModel>();
    model->grid = grid;
    model->config = cfg.env;
    model->fare_model = ds.fare_model;
    model->dt_min = ds.dt_min;
    model->steps_per_day = ds.steps_per_day();

    World w;
    w.grid = grid;
    w.model = model;
    w.train = std::make_shared<ScenarioDataset>(ds.slice(0, h - n_test));
    w.test = std::make_shared<ScenarioDataset>(ds.slice(h - n_test, h));
    return w;
}

TrainerSetup make_trainer_setup(const RunConfig& cfg, const World& world, const AblationFlags& flags) {
    TrainerSetup s;
    s.model = world.model;
    s.data = world.train;
    s.train = cfg.agent;
    s.wdro = cfg.wdro;
    s.projection = cfg.projection;
    s.net = cfg.neural;
    s.flags = flags;
    s.episode_steps = cfg.env.episode_steps;
    s.workers = cfg.run.workers;
    s.seed = cfg.run.seed;
    return s;
}

}  // namespace hexfleet
