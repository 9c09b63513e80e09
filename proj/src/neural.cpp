#include "hexfleet/neural.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

namespace hexfleet::nn {

namespace {

const char* const kModePrefix[kModeCount] = {"actor.serve.", "actor.reb.", "actor.chg."};

void add_mlp(ParameterSet& p, const std::string& prefix, int in, int hidden, int out) {
    p.names.push_back(prefix + "W0");
    p.values.push_back(Mat::Zero(in, hidden));
    p.names.push_back(prefix + "b0");
    p.values.push_back(Mat::Zero(1, hidden));
    p.names.push_back(prefix + "W1");
    p.values.push_back(Mat::Zero(hidden, out));
    p.names.push_back(prefix + "b1");
    p.values.push_back(Mat::Zero(1, out));
}

std::string target_name(const std::string& online) {
    // q1.W0 -> q1_target.W0
    const auto dot = online.find('.');
    return online.substr(0, dot) + "_target" + online.substr(dot);
}

Var column_constant(Tape& t, const std::vector<double>& v, const char* name) {
    Mat m(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
    return t.constant(std::move(m), name);
}

/// Rows of mode_logp for the available (vehicle, mode) pairs and their segment ids.
struct ModeLayout {
    std::vector<int> flat;  // index into the n_v x kModeCount logits
    std::vector<int> seg;
};

ModeLayout mode_layout(const ActorContext& ctx) {
    ModeLayout l;
    for (int k = 0; k < ctx.vehicles(); ++k) {
        for (int m = 0; m < kModeCount; ++m) {
            if (ctx.has_mode[k][m]) {
                l.flat.push_back(k * kModeCount + m);
                l.seg.push_back(k);
            }
        }
    }
    return l;
}

std::vector<int> target_groups(const ActorContext& ctx) {
    std::vector<int> g(ctx.cand_vehicle.size());
    for (int c = 0; c < ctx.candidates(); ++c) g[c] = ctx.group(c);
    return g;
}

Mat p_max_column(const ActorContext& ctx) {
    Mat m(ctx.vehicles(), 1);
    for (int k = 0; k < ctx.vehicles(); ++k) m(k, 0) = ctx.p_max[k];
    return m;
}

int find_flat_candidate(const ActorContext& ctx, int k, const Candidate& c) {
    for (int i = ctx.offset[k]; i < ctx.offset[k + 1]; ++i) {
        const Candidate& o = ctx.cand[i];
        if (o.kind == c.kind && o.order_id == c.order_id && o.station == c.station && o.target == c.target) return i;
    }
    return -1;
}

}  // namespace

int ParameterSet::index(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i) {
        if (names[i] == name) return static_cast<int>(i);
    }
    throw std::out_of_range("unknown parameter tensor '" + name + "'");
}

bool ParameterSet::all_finite() const {
    return std::all_of(values.begin(), values.end(), [](const Mat& m) { return m.allFinite(); });
}

double ParameterSet::tau() const {
    return std::max(config.tau_min, config.tau_start * std::pow(config.tau_decay, static_cast<double>(step)));
}

bool has_prefix(const std::string& name, const std::string& prefix) { return name.rfind(prefix, 0) == 0; }

ParameterSet init_parameters(const NetConfig& cfg, std::uint64_t seed) {
    if (cfg.hidden < 1 || cfg.head_hidden < 1 || cfg.scorer_hidden < 1 || cfg.cells < 1 || cfg.stations < 0) {
        throw std::invalid_argument("init_parameters: widths must be positive");
    }
    ParameterSet p;
    p.config = cfg;
    const int h = cfg.hidden;
    p.names = {"gcn.W0", "gcn.b0", "gcn.W1", "gcn.b1"};
    p.values = {Mat::Zero(cfg.features, h), Mat::Zero(1, h), Mat::Zero(h, h), Mat::Zero(1, h)};
    add_mlp(p, "actor.mode.", h + kVehicleExtra, cfg.head_hidden, kModeCount);
    for (const char* pre : kModePrefix) add_mlp(p, pre, 2 * h + kCandidateExtra, cfg.scorer_hidden, 1);
    add_mlp(p, "actor.power.", h + kPowerExtra, cfg.head_hidden, 2);
    add_mlp(p, "q1.", h + cfg.action_dim(), cfg.head_hidden, 1);
    add_mlp(p, "q2.", h + cfg.action_dim(), cfg.head_hidden, 1);
    add_mlp(p, "value.", h, cfg.head_hidden, 1);

    Rng rng(derive_seed(seed, 0x1417));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        Mat& m = p.values[i];
        if (p.names[i].find(".b") != std::string::npos) continue;
        const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = a * u(rng);
    }
    const std::size_t n = p.names.size();
    for (std::size_t i = 0; i < n; ++i) {
        for (const std::string& pre : kCriticPrefixes) {
            if (has_prefix(p.names[i], pre)) {
                p.names.push_back(target_name(p.names[i]));
                p.values.push_back(p.values[i]);
            }
        }
    }
    return p;
}

void polyak(ParameterSet& params, double tau) {
    for (std::size_t i = 0; i < params.names.size(); ++i) {
        for (const std::string& pre : kCriticPrefixes) {
            if (!has_prefix(params.names[i], pre)) continue;
            Mat& t = params.at(target_name(params.names[i]));
            t = (1.0 - tau) * t + tau * params.values[i];
        }
    }
}

Binder::Binder(Tape& tape, const ParameterSet& params) : tape_(tape), params_(params), bound_(params.size()) {}

Var Binder::get(const std::string& name) {
    const int i = params_.index(name);
    if (!bound_[i].valid()) bound_[i] = tape_.leaf(params_.values[i], name);
    return bound_[i];
}

void Binder::add_gradients(std::vector<Mat>& grads) const {
    for (std::size_t i = 0; i < bound_.size(); ++i) {
        if (bound_[i].valid()) grads[i] += tape_.grad(bound_[i]);
    }
}

std::vector<Mat> zero_gradients(const ParameterSet& params) {
    std::vector<Mat> g;
    g.reserve(params.size());
    for (const Mat& m : params.values) g.push_back(Mat::Zero(m.rows(), m.cols()));
    return g;
}

Var gcn_forward(Binder& b, Var a_hat, Var phi) {
    Tape& t = b.tape();
    const Mat& a = t.value(a_hat);
    const Mat& x = t.value(phi);
    if (a.rows() != a.cols() || a.rows() != x.rows()) throw std::invalid_argument("gcn_forward: A_hat must be m x m and Phi m x F");
    if (x.cols() != t.value(b.get("gcn.W0")).rows()) throw std::invalid_argument("gcn_forward: feature width mismatch");
    Var h1 = t.silu(t.add_row(t.matmul(t.matmul(a_hat, phi), b.get("gcn.W0")), b.get("gcn.b0")));
    return t.silu(t.add_row(t.matmul(t.matmul(a_hat, h1), b.get("gcn.W1")), b.get("gcn.b1")));
}

Var mlp2(Binder& b, const std::string& prefix, Var x) {
    Tape& t = b.tape();
    if (t.value(x).cols() != t.value(b.get(prefix + "W0")).rows()) {
        throw std::invalid_argument("mlp " + prefix + ": input width mismatch");
    }
    Var h = t.silu(t.add_row(t.matmul(x, b.get(prefix + "W0")), b.get(prefix + "b0")));
    return t.add_row(t.matmul(h, b.get(prefix + "W1")), b.get(prefix + "b1"));
}

ActorContext make_actor_context(const EnvModel& model, const SystemState& state,
                                const std::vector<std::vector<Candidate>>& cands) {
    ActorContext ctx;
    const std::vector<int> idle = state.idle_vehicles();
    if (idle.size() != cands.size()) throw std::invalid_argument("make_actor_context: candidate lists do not match idle vehicles");
    const double e_max = model.config.fleet.e_max;
    const int n_v = static_cast<int>(idle.size());
    ctx.veh_feat = Mat::Zero(n_v, kVehicleExtra);
    ctx.power_feat = Mat::Zero(n_v, kPowerExtra);
    std::vector<std::array<double, kCandidateExtra>> feats;
    for (int k = 0; k < n_v; ++k) {
        const VehicleState& v = state.vehicles.at(static_cast<std::size_t>(idle[k]));
        if (cands[k].empty()) throw std::invalid_argument("make_actor_context: empty candidate list");
        ctx.vehicle.push_back(idle[k]);
        ctx.veh_hex.push_back(v.hex);
        ctx.offset.push_back(static_cast<int>(ctx.cand.size()));
        std::array<bool, kModeCount> has{};
        double p_max = 0.0, price = 0.0;
        int n_serve = 0;
        bool at_station = false;
        for (const StationState& s : state.stations) at_station = at_station || s.hex == v.hex;
        for (std::size_t c = 0; c < cands[k].size(); ++c) {
            const Candidate& cd = cands[k][c];
            const int m = mode_of(cd.kind);
            has[m] = true;
            if (cd.kind == ActionKind::serve) ++n_serve;
            if (cd.kind == ActionKind::charge) {
                const StationState& s = state.stations.at(static_cast<std::size_t>(cd.station));
                p_max = s.p_max_kw;
                price = s.price;
            }
            ctx.cand_vehicle.push_back(k);
            ctx.cand_mode.push_back(m);
            ctx.cand_index.push_back(static_cast<int>(c));
            ctx.cand_target.push_back(cd.target);
            ctx.cand.push_back(cd);
            feats.push_back({cd.revenue / 10.0, cd.km / 10.0, cd.duration / 10.0, cd.energy_kwh / e_max,
                             cd.kind == ActionKind::idle ? 1.0 : 0.0});
        }
        ctx.has_mode.push_back(has);
        ctx.p_max.push_back(p_max);
        ctx.veh_feat(k, 0) = v.energy / e_max;
        ctx.veh_feat(k, 1) = n_serve / 10.0;
        ctx.veh_feat(k, 2) = at_station ? 1.0 : 0.0;
        ctx.power_feat(k, 0) = v.energy / e_max;
        ctx.power_feat(k, 1) = price;
    }
    ctx.offset.push_back(static_cast<int>(ctx.cand.size()));
    ctx.cand_feat = Mat::Zero(static_cast<Eigen::Index>(feats.size()), kCandidateExtra);
    for (std::size_t i = 0; i < feats.size(); ++i) {
        for (int j = 0; j < kCandidateExtra; ++j) ctx.cand_feat(static_cast<Eigen::Index>(i), j) = feats[i][j];
    }
    return ctx;
}

ActorHeads actor_heads(Binder& b, Var emb, const ActorContext& ctx) {
    Tape& t = b.tape();
    ActorHeads h;
    const int n_v = ctx.vehicles();
    if (n_v == 0) return h;
    const NetConfig& cfg = b.params().config;
    Var ev = t.gather_rows(emb, ctx.veh_hex);

    Var mode_logits = mlp2(b, "actor.mode.", t.concat_cols({ev, t.constant(ctx.veh_feat, "vehicle_features")}));
    const ModeLayout ml = mode_layout(ctx);
    Var flat = t.reshape(mode_logits, n_v * kModeCount, 1);
    h.mode_logp = t.segment_log_softmax(t.gather_rows(flat, ml.flat), ml.seg, n_v);
    h.mode_row.assign(static_cast<std::size_t>(n_v) * kModeCount, -1);
    for (std::size_t r = 0; r < ml.flat.size(); ++r) h.mode_row[ml.flat[r]] = static_cast<int>(r);

    const int n_c = ctx.candidates();
    Var scores;
    for (int m = 0; m < kModeCount; ++m) {
        std::vector<int> rows, vh, th;
        for (int c = 0; c < n_c; ++c) {
            if (ctx.cand_mode[c] != m) continue;
            rows.push_back(c);
            vh.push_back(ctx.veh_hex[ctx.cand_vehicle[c]]);
            th.push_back(ctx.cand_target[c]);
        }
        if (rows.empty()) continue;
        Mat cf(static_cast<Eigen::Index>(rows.size()), kCandidateExtra);
        for (std::size_t i = 0; i < rows.size(); ++i) cf.row(static_cast<Eigen::Index>(i)) = ctx.cand_feat.row(rows[i]);
        Var x = t.concat_cols({t.gather_rows(emb, vh), t.gather_rows(emb, th), t.constant(std::move(cf), "candidate_features")});
        Var s = t.scatter_add_rows(mlp2(b, kModePrefix[m], x), rows, n_c);
        scores = scores.valid() ? t.add(scores, s) : s;
    }
    h.target_logp = t.segment_log_softmax(scores, target_groups(ctx), n_v * kModeCount);

    Var ph = mlp2(b, "actor.power.", t.concat_cols({ev, t.constant(ctx.power_feat, "power_features")}));
    h.mu = t.col(ph, 0);
    h.log_sigma = t.clamp(t.col(ph, 1), cfg.log_sigma_min, cfg.log_sigma_max);
    return h;
}

double sample_gumbel(Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double x = u(rng);
    while (x <= 0.0) x = u(rng);
    return -std::log(-std::log(x));
}

ActorNoise draw_noise(const ActorContext& ctx, Rng& rng) {
    ActorNoise n;
    std::normal_distribution<double> nd;
    for (int i = 0; i < ctx.vehicles() * kModeCount; ++i) n.mode_gumbel.push_back(sample_gumbel(rng));
    for (int i = 0; i < ctx.candidates(); ++i) n.target_gumbel.push_back(sample_gumbel(rng));
    for (int i = 0; i < ctx.vehicles(); ++i) n.eps.push_back(nd(rng));
    return n;
}

std::vector<double> gumbel_softmax(const std::vector<double>& logits, const std::vector<double>& gumbel, double tau) {
    if (logits.size() != gumbel.size() || logits.empty()) throw std::invalid_argument("gumbel_softmax: size mismatch");
    if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax: tau must be positive");
    std::vector<double> z(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.size(); ++i) mx = std::max(mx, z[i] = (logits[i] + gumbel[i]) / tau);
    double s = 0.0;
    for (double& v : z) s += (v = std::exp(v - mx));
    for (double& v : z) v /= s;
    return z;
}

double squashed_log_density(double p_hat, double mu, double log_sigma, double p_max) {
    const double y = std::clamp(2.0 * p_hat / p_max - 1.0, -1.0 + 1e-15, 1.0 - 1e-15);
    const double u = std::atanh(y);
    const double sigma = std::exp(log_sigma);
    const double z = (u - mu) / sigma;
    const double log_n = -0.5 * z * z - log_sigma - 0.5 * std::log(2.0 * std::numbers::pi);
    return log_n - std::log(0.5 * p_max * (1.0 - y * y));
}

Var power_u(Tape& t, const ActorHeads& h, const ActorNoise& noise) {
    return t.add(h.mu, t.mul(t.exp(h.log_sigma), column_constant(t, noise.eps, "power_eps")));
}

Var power_log_density(Tape& t, Var mu, Var log_sigma, Var u, const Mat& p_max) {
    const Eigen::Index n = p_max.rows();
    Mat mask(n, 1), log_half(n, 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        mask(i, 0) = p_max(i, 0) > 0.0 ? 1.0 : 0.0;
        log_half(i, 0) = p_max(i, 0) > 0.0 ? std::log(0.5 * p_max(i, 0)) : 0.0;
    }
    Var z = t.mul(t.sub(u, mu), t.exp(t.scale(log_sigma, -1.0)));
    Var log_n = t.add_scalar(t.sub(t.scale(t.square(z), -0.5), log_sigma), -0.5 * std::log(2.0 * std::numbers::pi));
    // log(1 - tanh^2 u) = 2 (log 2 - u - softplus(-2u))
    Var log_jac = t.scale(t.add_scalar(t.add(u, t.softplus(t.scale(u, -2.0))), -std::log(2.0)), -2.0);
    Var dens = t.sub(log_n, t.add(log_jac, t.constant(log_half, "log_half_pmax")));
    return t.mul(dens, t.constant(mask, "power_mask"));
}

ActorSample sample_from_heads(const Tape& tape, const ActorHeads& h, const ActorContext& ctx,
                              const ActorNoise& noise, double tau) {
    ActorSample s;
    const int n_v = ctx.vehicles();
    if (n_v == 0) return s;
    const Mat& mlp = tape.value(h.mode_logp);
    const Mat& tlp = tape.value(h.target_logp);
    const Mat& mu = tape.value(h.mu);
    const Mat& ls = tape.value(h.log_sigma);
    for (int k = 0; k < n_v; ++k) {
        std::vector<double> lg, gg;
        std::vector<int> modes;
        for (int m = 0; m < kModeCount; ++m) {
            const int r = h.mode_row[k * kModeCount + m];
            if (r < 0) continue;
            modes.push_back(m);
            lg.push_back(mlp(r, 0));
            gg.push_back(noise.mode_gumbel[k * kModeCount + m]);
        }
        const std::vector<double> mw = gumbel_softmax(lg, gg, tau);
        std::array<double, kModeCount> mode{};
        int hard = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < modes.size(); ++i) {
            mode[modes[i]] = mw[i];
            if (lg[i] + gg[i] > best) {
                best = lg[i] + gg[i];
                hard = modes[i];
            }
        }
        const int n_k = ctx.offset[k + 1] - ctx.offset[k];
        std::vector<double> target(n_k, 0.0);
        int pick = -1;
        double pick_score = -std::numeric_limits<double>::infinity();
        double lp_pick = 0.0;
        for (int m : modes) {
            std::vector<int> members;
            std::vector<double> l2, g2;
            for (int c = ctx.offset[k]; c < ctx.offset[k + 1]; ++c) {
                if (ctx.cand_mode[c] != m) continue;
                members.push_back(c);
                l2.push_back(tlp(c, 0));
                g2.push_back(noise.target_gumbel[c]);
            }
            const std::vector<double> tw = gumbel_softmax(l2, g2, tau);
            for (std::size_t i = 0; i < members.size(); ++i) {
                target[members[i] - ctx.offset[k]] = tw[i];
                if (m == hard && l2[i] + g2[i] > pick_score) {
                    pick_score = l2[i] + g2[i];
                    pick = members[i] - ctx.offset[k];
                    lp_pick = l2[i];
                }
            }
        }
        const double u = mu(k, 0) + std::exp(ls(k, 0)) * noise.eps[k];
        const double p_hat = ctx.p_max[k] > 0.0 ? 0.5 * ctx.p_max[k] * (1.0 + std::tanh(u)) : 0.0;
        s.intention.mode.push_back(mode);
        s.intention.target.push_back(std::move(target));
        s.intention.p_hat.push_back(p_hat);
        s.mode.push_back(hard);
        s.pick.push_back(pick);
        s.u.push_back(u);
        s.log_prob += mlp(h.mode_row[k * kModeCount + hard], 0) + lp_pick;
        if (ctx.p_max[k] > 0.0) {
            // Same expression as the tape version so the two agree to rounding.
            const double z = noise.eps[k];
            const double log_n = -0.5 * z * z - ls(k, 0) - 0.5 * std::log(2.0 * std::numbers::pi);
            const double sp = -2.0 * u > 30.0 ? -2.0 * u : std::log1p(std::exp(-2.0 * u));
            s.log_prob += log_n - 2.0 * (std::log(2.0) - u - sp) - std::log(0.5 * ctx.p_max[k]);
        }
    }
    return s;
}

ActorSample actor_sample(const ParameterSet& params, const Mat& a_hat, const Mat& phi, const ActorContext& ctx,
                         std::uint64_t seed) {
    Tape t;
    Binder b(t, params);
    Var e = gcn_forward(b, t.constant(a_hat, "a_hat"), t.constant(phi, "phi"));
    const ActorHeads h = actor_heads(b, e, ctx);
    Rng rng(seed);
    const ActorNoise noise = draw_noise(ctx, rng);
    return sample_from_heads(t, h, ctx, noise, params.tau());
}

Var sample_log_prob(Tape& t, const ActorHeads& h, const ActorContext& ctx, const ActorSample& s) {
    std::vector<int> mrows, trows;
    for (int k = 0; k < ctx.vehicles(); ++k) {
        mrows.push_back(h.mode_row[k * kModeCount + s.mode[k]]);
        trows.push_back(ctx.offset[k] + s.pick[k]);
    }
    Var lp = t.add(t.sum(t.gather_rows(h.mode_logp, mrows)), t.sum(t.gather_rows(h.target_logp, trows)));
    Var u = column_constant(t, s.u, "power_u");
    return t.add(lp, t.sum(power_log_density(t, h.mu, h.log_sigma, u, p_max_column(ctx))));
}

Var expected_log_prob(Tape& t, const ActorHeads& h, const ActorContext& ctx, Var u) {
    Var mode_term = t.sum(t.mul(t.exp(h.mode_logp), h.mode_logp));
    std::vector<int> rows;
    for (int c = 0; c < ctx.candidates(); ++c) rows.push_back(h.mode_row[ctx.group(c)]);
    Var p_mode = t.exp(t.gather_rows(h.mode_logp, rows));
    Var target_term = t.sum(t.mul(p_mode, t.mul(t.exp(h.target_logp), h.target_logp)));
    Var power = t.sum(power_log_density(t, h.mu, h.log_sigma, u, p_max_column(ctx)));
    return t.add(t.add(mode_term, target_term), power);
}

Mat action_embedding(const NetConfig& cfg, const SystemState& state, const FeasibleAction& a) {
    Mat e = Mat::Zero(1, cfg.action_dim());
    const double n = std::max<std::size_t>(1, state.vehicles.size());
    for (const VehicleAction& va : a.per_vehicle) {
        const int m = mode_of(va.choice.kind);
        if (va.choice.target < 0 || va.choice.target >= cfg.cells) throw std::invalid_argument("action_embedding: target hex");
        e(0, m * cfg.cells + va.choice.target) += 1.0 / n;
        if (va.choice.kind == ActionKind::charge) {
            const StationState& s = state.stations.at(static_cast<std::size_t>(va.choice.station));
            const double cap = s.p_max_kw * std::max(1, s.ports_total);
            if (va.choice.station < cfg.stations && cap > 0.0) {
                e(0, kModeCount * cfg.cells + va.choice.station) += va.power_kw / cap;
            }
        }
    }
    return e;
}

HeadValues heads_eval(Binder& b, Var emb, Var action, bool target) {
    Tape& t = b.tape();
    Var pooled = t.mean_rows(emb);
    HeadValues hv;
    if (action.valid()) {
        Var x = t.concat_cols({pooled, action});
        hv.q1 = mlp2(b, target ? "q1_target." : "q1.", x);
        hv.q2 = mlp2(b, target ? "q2_target." : "q2.", x);
    }
    hv.v = mlp2(b, "value.", pooled);
    return hv;
}

Var ste_action_embedding(Tape& t, const NetConfig& cfg, const SystemState& state, const ActorContext& ctx,
                         const ActorHeads& h, const ActorNoise& noise, double tau, const FeasibleAction& a) {
    Var base = t.constant(action_embedding(cfg, state, a), "action_embedding");
    if (ctx.vehicles() == 0) return base;
    const double n = std::max<std::size_t>(1, state.vehicles.size());
    const ModeLayout ml = mode_layout(ctx);
    std::vector<double> mg;
    for (int f : ml.flat) mg.push_back(noise.mode_gumbel[f]);
    Var mode_w = t.exp(t.segment_log_softmax(t.scale(t.add(h.mode_logp, column_constant(t, mg, "mode_gumbel")), 1.0 / tau),
                                             ml.seg, ctx.vehicles()));
    Var target_w = t.exp(t.segment_log_softmax(
        t.scale(t.add(h.target_logp, column_constant(t, noise.target_gumbel, "target_gumbel")), 1.0 / tau),
        target_groups(ctx), ctx.vehicles() * kModeCount));
    Var p_hat;
    std::vector<int> mrows, trows, prows;
    std::vector<Eigen::Index> cols;
    std::vector<std::pair<int, double>> power_cols;
    for (const VehicleAction& va : a.per_vehicle) {
        const auto it = std::find(ctx.vehicle.begin(), ctx.vehicle.end(), va.vehicle);
        if (it == ctx.vehicle.end()) continue;
        const int k = static_cast<int>(it - ctx.vehicle.begin());
        const int c = find_flat_candidate(ctx, k, va.choice);
        if (c < 0) continue;
        mrows.push_back(h.mode_row[ctx.group(c)]);
        trows.push_back(c);
        cols.push_back(mode_of(va.choice.kind) * cfg.cells + va.choice.target);
        if (va.choice.kind == ActionKind::charge && va.choice.station < cfg.stations) {
            const StationState& s = state.stations.at(static_cast<std::size_t>(va.choice.station));
            const double cap = s.p_max_kw * std::max(1, s.ports_total);
            if (cap > 0.0 && ctx.p_max[k] > 0.0) {
                prows.push_back(k);
                power_cols.emplace_back(kModeCount * cfg.cells + va.choice.station, 1.0 / cap);
            }
        }
    }
    Var out = base;
    if (!mrows.empty()) {
        Var w = t.mul(t.gather_rows(mode_w, mrows), t.gather_rows(target_w, trows));
        Mat contrib = Mat::Zero(static_cast<Eigen::Index>(cols.size()), cfg.action_dim());
        for (std::size_t i = 0; i < cols.size(); ++i) contrib(static_cast<Eigen::Index>(i), cols[i]) = 1.0 / n;
        Var delta = t.sub(w, t.stop_gradient(w));
        Var d = t.scatter_add_rows(t.mul_col(t.constant(std::move(contrib), "ste_contrib"), delta),
                                   std::vector<int>(cols.size(), 0), 1);
        out = t.add(out, d);
    }
    if (!prows.empty()) {
        Var u = power_u(t, h, noise);
        Var p = t.mul(t.add_scalar(t.tanh(u), 1.0), t.constant(0.5 * p_max_column(ctx), "half_pmax"));
        Var ps = t.gather_rows(p, prows);
        Var delta = t.sub(ps, t.stop_gradient(ps));
        Mat contrib = Mat::Zero(static_cast<Eigen::Index>(prows.size()), cfg.action_dim());
        for (std::size_t i = 0; i < prows.size(); ++i) {
            contrib(static_cast<Eigen::Index>(i), power_cols[i].first) = power_cols[i].second;
        }
        Var d = t.scatter_add_rows(t.mul_col(t.constant(std::move(contrib), "ste_power"), delta),
                                   std::vector<int>(prows.size(), 0), 1);
        out = t.add(out, d);
    }
    return out;
}

Adam::Adam(const ParameterSet& params, std::vector<int> tensors, double lr, double beta1, double beta2, double eps)
    : tensors_(std::move(tensors)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (int i : tensors_) {
        m_.push_back(Mat::Zero(params.values[i].rows(), params.values[i].cols()));
        v_.push_back(m_.back());
    }
}

void Adam::step(ParameterSet& params, const std::vector<Mat>& grads) {
    ++t_;
    if (lr_ == 0.0) return;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t j = 0; j < tensors_.size(); ++j) {
        const Mat& g = grads[tensors_[j]];
        m_[j] = b1_ * m_[j] + (1.0 - b1_) * g;
        v_[j] = b2_ * v_[j] + (1.0 - b2_) * g.cwiseProduct(g);
        Mat& p = params.values[tensors_[j]];
        p.array() -= lr_ * (m_[j].array() / c1) / ((v_[j].array() / c2).sqrt() + eps_);
    }
}

std::vector<int> tensors_with_prefix(const ParameterSet& params, const std::vector<std::string>& prefixes) {
    std::vector<int> out;
    for (std::size_t i = 0; i < params.names.size(); ++i) {
        for (const std::string& p : prefixes) {
            if (has_prefix(params.names[i], p)) {
                out.push_back(static_cast<int>(i));
                break;
            }
        }
    }
    return out;
}

namespace {

nlohmann::json config_json(const NetConfig& c) {
    return {{"features", c.features},       {"cells", c.cells},
            {"stations", c.stations},       {"hidden", c.hidden},
            {"head_hidden", c.head_hidden}, {"scorer_hidden", c.scorer_hidden},
            {"alpha", c.alpha},             {"tau_start", c.tau_start},
            {"tau_decay", c.tau_decay},     {"tau_min", c.tau_min},
            {"log_sigma_min", c.log_sigma_min}, {"log_sigma_max", c.log_sigma_max}};
}

void write_f64(std::ostream& os, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(m.data()[i]);
        if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
        char buf[8];
        for (int b = 0; b < 8; ++b) buf[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
        os.write(buf, 8);
    }
}

void read_f64(std::istream& is, Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        unsigned char buf[8];
        if (!is.read(reinterpret_cast<char*>(buf), 8)) throw std::runtime_error("checkpoint tensor file is truncated");
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[b]) << (8 * b);
        m.data()[i] = std::bit_cast<double>(bits);
    }
}

}  // namespace

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& dir,
                     const std::map<std::string, double>& extra) {
    std::filesystem::create_directories(dir);
    nlohmann::json man;
    man["format"] = "hexfleet-checkpoint-1";
    man["step"] = params.step;
    man["config"] = config_json(params.config);
    man["hyper"] = extra;
    man["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::string file = params.names[i] + ".f64";
        man["tensors"].push_back({{"name", params.names[i]},
                                  {"shape", {params.values[i].rows(), params.values[i].cols()}},
                                  {"file", file}});
        std::ofstream os(dir / file, std::ios::binary);
        write_f64(os, params.values[i]);
        if (!os) throw std::runtime_error("cannot write " + (dir / file).string());
    }
    std::ofstream os(dir / "manifest.json");
    os << man.dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

ParameterSet load_checkpoint(const std::filesystem::path& dir, std::map<std::string, double>* extra) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
    const nlohmann::json man = nlohmann::json::parse(is);
    if (man.value("format", "") != "hexfleet-checkpoint-1") throw std::runtime_error("unknown checkpoint format");
    const nlohmann::json& c = man.at("config");
    NetConfig cfg;
    cfg.features = c.at("features");
    cfg.cells = c.at("cells");
    cfg.stations = c.at("stations");
    cfg.hidden = c.at("hidden");
    cfg.head_hidden = c.at("head_hidden");
    cfg.scorer_hidden = c.at("scorer_hidden");
    cfg.alpha = c.at("alpha");
    cfg.tau_start = c.at("tau_start");
    cfg.tau_decay = c.at("tau_decay");
    cfg.tau_min = c.at("tau_min");
    cfg.log_sigma_min = c.at("log_sigma_min");
    cfg.log_sigma_max = c.at("log_sigma_max");
    ParameterSet p = init_parameters(cfg, 0);
    p.step = man.at("step");
    for (const auto& t : man.at("tensors")) {
        const std::string name = t.at("name");
        Mat& m = p.at(name);
        if (t.at("shape")[0] != m.rows() || t.at("shape")[1] != m.cols()) {
            throw std::runtime_error("checkpoint tensor '" + name + "' has an unexpected shape");
        }
        std::ifstream bin(dir / t.at("file").get<std::string>(), std::ios::binary);
        if (!bin) throw std::runtime_error("cannot open tensor file for '" + name + "'");
        read_f64(bin, m);
    }
    if (extra) {
        extra->clear();
        for (auto it = man.at("hyper").begin(); it != man.at("hyper").end(); ++it) (*extra)[it.key()] = it.value();
    }
    if (!p.all_finite()) throw std::runtime_error("checkpoint contains non-finite parameters");
    return p;
}

}  // namespace hexfleet::nn
