#include "hexfleet/agent.hpp"

#include "hexfleet/hexgrid.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace hexfleet {

using nn::Mat;
using nn::Var;

namespace {

/// Runs fn(i) for i in [0, n) on up to `workers` threads; results must be written per index.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
    if (w <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(w);
    for (std::size_t k = 0; k < w; ++k) {
        pool.emplace_back([&, k] {
            try {
                for (std::size_t i = k; i < n; i += w) fn(i);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

Mat phi_matrix(const EnvModel& model, const SystemState& s) { return Mat(featurize(model, s)); }

nn::ActorNoise zero_noise(const nn::ActorContext& ctx) {
    nn::ActorNoise n;
    n.mode_gumbel.assign(static_cast<std::size_t>(ctx.vehicles()) * kModeCount, 0.0);
    n.target_gumbel.assign(static_cast<std::size_t>(ctx.candidates()), 0.0);
    n.eps.assign(static_cast<std::size_t>(ctx.vehicles()), 0.0);
    return n;
}

struct ActResult {
    FeasibleAction action;
    SolveStatus status = SolveStatus::optimal;
    nn::ActorSample sample;
};

ActResult actor_act(const EnvModel& model, const nn::ParameterSet& params, const Mat& a_hat,
                    const ProjectionConfig& proj, bool no_milp, const PolicyInput& in, bool deterministic) {
    ActResult r;
    const int n_st = static_cast<int>(in.state.stations.size());
    if (in.cands.empty()) {
        r.action.recompute_totals(n_st);
        return r;
    }
    const nn::ActorContext ctx = nn::make_actor_context(model, in.state, in.cands);
    nn::Tape t;
    nn::Binder b(t, params);
    Var e = nn::gcn_forward(b, t.constant(a_hat, "a_hat"), t.constant(phi_matrix(model, in.state), "phi"));
    const nn::ActorHeads h = nn::actor_heads(b, e, ctx);
    nn::ActorNoise noise;
    if (deterministic) {
        noise = zero_noise(ctx);
    } else {
        Rng rng(in.seed);
        noise = nn::draw_noise(ctx, rng);
    }
    const double tau = deterministic ? params.config.tau_min : params.tau();
    r.sample = nn::sample_from_heads(t, h, ctx, noise, tau);
    if (no_milp) {
        r.action = execute_unprojected(build_instance(model, in.state, r.sample.intention, in.cands, proj.mu));
        r.status = SolveStatus::fallback;
        return r;
    }
    SolveOptions so;
    so.time_limit_s = proj.time_limit_s;
    so.node_limit = proj.node_limit;
    Projection p = project(model, in.state, r.sample.intention, in.cands, proj.mu, so);
    r.action = std::move(p.action);
    r.status = p.report.status;
    return r;
}

double mean_of(const std::vector<double>& v, std::size_t from, std::size_t to) {
    if (to <= from) return 0.0;
    return std::accumulate(v.begin() + static_cast<long>(from), v.begin() + static_cast<long>(to), 0.0) /
           static_cast<double>(to - from);
}

}  // namespace

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
    if (items_.size() == capacity_) items_.pop_front();
    items_.push_back(std::move(t));
}

std::vector<std::size_t> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
    if (items_.empty()) throw std::logic_error("replay buffer is empty");
    std::uniform_int_distribution<std::size_t> u(0, items_.size() - 1);
    std::vector<std::size_t> out(n);
    for (std::size_t& i : out) i = u(rng);
    return out;
}

void write_trace_header(std::ostream& os) {
    os << "t,reward,revenue,drive_cost,elec_cost,penalty,served,dropped,total_kw,violation\n";
}

void write_trace_row(std::ostream& os, const StepTrace& s) {
    os << std::setprecision(10) << s.t << ',' << s.reward << ',' << s.parts.revenue << ',' << s.parts.drive_cost << ','
       << s.parts.elec_cost << ',' << s.parts.penalty << ',' << s.served << ',' << s.dropped << ',' << s.total_kw << ','
       << (s.violation ? 1 : 0) << '\n';
}

FeasibleAction greedy_policy(const EnvModel& model, const SystemState& state,
                             const std::vector<std::vector<Candidate>>& cands, const GreedyOptions& opts) {
    const HexGrid& grid = *model.grid;
    const MilpInstance inst = build_instance(model, state, Intention{}, cands, 0.0);
    const int n_v = static_cast<int>(inst.vehicles.size());
    std::vector<int> choice(n_v, -1);
    std::vector<double> power(n_v, 0.0);
    std::vector<int> ports_used(inst.stations.size(), 0);
    double headroom = inst.feeder_cap_kw;
    auto idle_of = [&](int k) {
        for (int c = 0; c < static_cast<int>(inst.vehicles[k].cands.size()); ++c) {
            if (inst.vehicles[k].cands[c].kind == ActionKind::idle) return c;
        }
        throw std::logic_error("greedy_policy: candidate list without idle");
    };

    std::vector<int> order(n_v);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return inst.vehicles[a].energy < inst.vehicles[b].energy; });
    for (int k : order) {
        const VehicleBlock& v = inst.vehicles[k];
        if (v.energy >= opts.low_soc * inst.e_max) continue;
        for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
            const Candidate& cd = v.cands[c];
            if (cd.kind != ActionKind::charge) continue;
            const StationBlock& s = inst.stations[cd.station];
            const double p = std::min(inst.power_cap(v, cd.station), headroom);
            if (ports_used[cd.station] < s.ports && p >= inst.p_min_kw) {
                choice[k] = c;
                power[k] = p;
                ++ports_used[cd.station];
                headroom -= p;
                break;
            }
        }
        if (choice[k] >= 0) continue;
        if (grid.is_station(v.hex)) {
            choice[k] = idle_of(k);  // wait for a port
            continue;
        }
        int best = -1, best_d = std::numeric_limits<int>::max();
        for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
            const Candidate& cd = v.cands[c];
            if (cd.kind != ActionKind::reposition || v.energy - cd.energy_kwh < inst.soc_floor(v)) continue;
            int d = std::numeric_limits<int>::max();
            for (CellId s : grid.stations()) d = std::min(d, grid.hop_distance(cd.target, s));
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        choice[k] = best >= 0 ? best : idle_of(k);
    }

    struct Pair {
        double profit;
        int k, c, order_id;
    };
    std::vector<Pair> pairs;
    for (int k = 0; k < n_v; ++k) {
        if (choice[k] >= 0) continue;
        const VehicleBlock& v = inst.vehicles[k];
        for (int c = 0; c < static_cast<int>(v.cands.size()); ++c) {
            const Candidate& cd = v.cands[c];
            if (cd.kind != ActionKind::serve || grid.hop_distance(v.hex, cd.pickup) > opts.max_pickup_hops) continue;
            const double profit = inst.candidate_value(cd);
            if (profit > 0.0) pairs.push_back({profit, k, c, cd.order_id});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.profit != b.profit) return a.profit > b.profit;
        if (a.k != b.k) return a.k < b.k;
        return a.order_id < b.order_id;
    });
    std::vector<int> taken;
    for (const Pair& p : pairs) {
        if (choice[p.k] >= 0 || std::find(taken.begin(), taken.end(), p.order_id) != taken.end()) continue;
        choice[p.k] = p.c;
        taken.push_back(p.order_id);
    }

    FeasibleAction a;
    for (int k = 0; k < n_v; ++k) {
        if (choice[k] < 0) choice[k] = idle_of(k);
        VehicleAction va;
        va.vehicle = inst.vehicles[k].vehicle;
        va.choice = inst.vehicles[k].cands[choice[k]];
        va.power_kw = power[k];
        a.per_vehicle.push_back(va);
    }
    a.recompute_totals(static_cast<int>(inst.stations.size()));
    const std::string err = check_feasible(inst, a);
    if (!err.empty()) throw std::logic_error("greedy_policy produced an infeasible action: " + err);
    return a;
}

EvalMetrics evaluate(const Policy& policy, std::shared_ptr<const EnvModel> model,
                     std::shared_ptr<const ScenarioDataset> data, const EvalOptions& opts,
                     std::vector<StepTrace>* trace) {
    EvalMetrics m;
    const int horizon = data->horizon();
    const int len = std::max(1, std::min(opts.episode_steps, horizon - 1));
    const int span = std::max(0, horizon - 1 - len);
    long served_wait = 0;
    for (int e = 0; e < opts.episodes; ++e) {
        const int start = opts.episodes > 1 ? static_cast<int>(static_cast<long>(span) * e / (opts.episodes - 1)) : 0;
        Episode ep(model, data, start, len, derive_seed(opts.seed, 0xe1, static_cast<std::uint64_t>(e)));
        while (!ep.done()) {
            const SystemState pre = ep.state();
            const auto cands = all_candidates(*model, pre, ep.current_field());
            const FeasibleAction a =
                policy({pre, cands, ep.current_field(), derive_seed(opts.seed, static_cast<std::uint64_t>(e) + 1,
                                                                    static_cast<std::uint64_t>(pre.t))});
            const StepOutcome out = ep.advance(a);
            m.revenue += out.parts.revenue;
            m.driving_cost += out.parts.drive_cost;
            m.charging_cost += out.parts.elec_cost;
            m.penalty += out.parts.penalty;
            m.served += static_cast<long>(out.served_ids.size());
            m.dropped += static_cast<long>(out.dropped_ids.size());
            for (int id : out.served_ids) {
                if (const Order* o = pre.find_order(id)) served_wait += o->wait_steps;
            }
            if (out.feeder_violation) ++m.violation_steps;
            m.peak_kw = std::max(m.peak_kw, out.total_power_kw);
            ++m.steps;
            if (trace) {
                trace->push_back({e, pre.t, out.reward, out.parts, static_cast<int>(out.served_ids.size()),
                                  static_cast<int>(out.dropped_ids.size()), out.total_power_kw, out.feeder_violation});
            }
        }
        ++m.episodes;
    }
    m.net_profit = m.revenue - m.driving_cost - m.charging_cost;
    m.mean_wait = m.served > 0 ? static_cast<double>(served_wait) / m.served : 0.0;
    return m;
}

void MilpCounts::add(SolveStatus s) {
    switch (s) {
        case SolveStatus::optimal: ++optimal; break;
        case SolveStatus::incumbent_timeout: ++incumbent_timeout; break;
        case SolveStatus::fallback: ++fallback; break;
    }
}

std::string MilpCounts::str() const {
    std::ostringstream os;
    os << "optimal:" << optimal << "|incumbent_timeout:" << incumbent_timeout << "|fallback:" << fallback;
    return os.str();
}

void write_train_log_header(std::ostream& os) {
    os << "step,episode_return,ma100,loss_q1,loss_q2,loss_pi,lambda,rho_hat,milp_status_counts\n";
}

void write_train_log_row(std::ostream& os, const TrainLogRow& r) {
    os << std::setprecision(10) << r.step << ',' << r.episode_return << ',' << r.ma100 << ',' << r.loss_q1 << ','
       << r.loss_q2 << ',' << r.loss_pi << ',' << r.lambda << ',' << r.rho_hat << ',' << r.milp.str() << '\n';
}

RobustSacTrainer::RobustSacTrainer(TrainerSetup setup)
    : setup_(std::move(setup)), buffer_(static_cast<std::size_t>(std::max(1, setup_.train.buffer))) {
    if (!setup_.model || !setup_.data) throw std::invalid_argument("trainer needs a model and a dataset");
    const TrainConfig& tc = setup_.train;
    if (!(tc.gamma > 0.0 && tc.gamma < 1.0)) throw std::invalid_argument("gamma must lie in (0,1)");
    if (tc.batch < 1) throw std::invalid_argument("batch must be positive");
    const HexGrid& grid = *setup_.model->grid;
    setup_.net.cells = grid.size();
    setup_.net.stations = static_cast<int>(grid.stations().size());
    params_ = nn::init_parameters(setup_.net, derive_seed(setup_.seed, 0x11));
    const GraphMatrices gm = graph_matrices(grid);
    a_hat_ = Mat(gm.a_hat);
    const int q = 2 * grid.size() * grid.size();
    metric_ = setup_.flags.identity_metric
                  ? std::make_shared<GroundMetric>(GroundMetric::identity(q))
                  : std::make_shared<GroundMetric>(variance_weights(*setup_.data), setup_.wdro.beta, gm.q_graph);
    dual_.eta0 = setup_.wdro.eta0;
    dual_.rho = setup_.wdro.rho;
    dual_.rho_target = setup_.wdro.rho_target;
    opt_critic_ = nn::Adam(params_, nn::tensors_with_prefix(params_, {"q1.", "q2.", "gcn."}), tc.lr_critic);
    opt_value_ = nn::Adam(params_, nn::tensors_with_prefix(params_, {"value."}), tc.lr_value);
    opt_actor_ = nn::Adam(params_, nn::tensors_with_prefix(params_, {"actor."}), tc.lr_actor);
    rng_.seed(derive_seed(setup_.seed, 0x12));
}

Mat RobustSacTrainer::phi_of(const SystemState& s) const { return phi_matrix(*setup_.model, s); }

double RobustSacTrainer::discount(double duration) const { return std::pow(setup_.train.gamma, duration); }

double RobustSacTrainer::value(const Mat& phi) const {
    nn::Tape t;
    nn::Binder b(t, params_);
    Var e = nn::gcn_forward(b, t.constant(a_hat_, "a_hat"), t.constant(phi, "phi"));
    return t.scalar(nn::heads_eval(b, e, Var{}).v);
}

ValueEval RobustSacTrainer::value_oracle(const ResimCache& cache, const Eigen::VectorXd& xi) const {
    const StepOutcome out = resim(*setup_.model, cache, xi);
    nn::Tape t;
    nn::Binder b(t, params_);
    Var phi = t.leaf(phi_of(out.next), "phi");
    Var e = nn::gcn_forward(b, t.constant(a_hat_, "a_hat"), phi);
    Var v = nn::heads_eval(b, e, Var{}).v;
    t.backward(v);
    ValueEval ev;
    ev.discount = discount(out.epoch_duration());
    ev.value = t.scalar(v);
    ev.grad = demand_gradient(Eigen::MatrixXd(t.grad(phi)), out.next.demand_scale, setup_.model->grid->size());
    return ev;
}

double RobustSacTrainer::value_target(const Transition& tr, std::uint64_t seed, double* min_q, double* log_pi) const {
    nn::Tape t;
    nn::Binder b(t, params_);
    Var e = nn::gcn_forward(b, t.constant(a_hat_, "a_hat"), t.constant(tr.phi, "phi"));
    const nn::HeadValues hv = nn::heads_eval(b, e, t.constant(tr.action_emb, "action_embedding"), true);
    const double q = std::min(t.scalar(hv.q1), t.scalar(hv.q2));
    double lp = 0.0;
    if (!tr.cands.empty()) {
        const nn::ActorContext ctx = nn::make_actor_context(*setup_.model, tr.pre, tr.cands);
        const nn::ActorHeads h = nn::actor_heads(b, e, ctx);
        Rng rng(seed);
        const nn::ActorNoise noise = nn::draw_noise(ctx, rng);
        lp = t.scalar(nn::expected_log_prob(t, h, ctx, nn::power_u(t, h, noise)));
    }
    if (min_q) *min_q = q;
    if (log_pi) *log_pi = lp;
    return q - params_.config.alpha * lp;
}

std::vector<double> RobustSacTrainer::critic_targets(const std::vector<std::size_t>& idx,
                                                     std::vector<double>* rho_hat) const {
    std::vector<double> y(idx.size()), rh(idx.size(), 0.0);
    const WdroConfig& w = setup_.wdro;
    const double radius = w.ball_radius > 0.0 ? w.ball_radius : 3.0 * w.rho;
    const int m = setup_.model->grid->size();
    parallel_for(idx.size(), setup_.workers, [&](std::size_t i) {
        const Transition& tr = buffer_.at(idx[i]);
        if (setup_.flags.no_wdro) {
            y[i] = tr.reward + discount(tr.duration) * value(tr.phi_next);
            return;
        }
        SupportSet set{tr.xi_hat, radius, m * m};
        const InnerResult inner = inner_minimize([&](const Eigen::VectorXd& xi) { return value_oracle(tr.cache, xi); },
                                                 *metric_, set, dual_.lambda, w.inner_k, w.inner_step);
        y[i] = robust_target(tr.reward, inner, dual_.lambda, dual_.rho);
        rh[i] = inner.rho_hat;
    });
    if (rho_hat) *rho_hat = rh;
    return y;
}

FeasibleAction RobustSacTrainer::act(const PolicyInput& in, bool deterministic, SolveStatus* status,
                                     nn::ActorSample* sample) const {
    ActResult r = actor_act(*setup_.model, params_, a_hat_, setup_.projection, setup_.flags.no_milp, in, deterministic);
    if (status) *status = r.status;
    if (sample) *sample = std::move(r.sample);
    return std::move(r.action);
}

Policy RobustSacTrainer::policy(bool deterministic) const {
    return [this, deterministic](const PolicyInput& in) { return act(in, deterministic); };
}

UpdateStats RobustSacTrainer::update() {
    const TrainConfig& tc = setup_.train;
    UpdateStats st;
    const std::vector<std::size_t> idx = buffer_.sample(static_cast<std::size_t>(tc.batch), rng_);
    std::vector<double> rho_hat;
    st.targets = critic_targets(idx, &rho_hat);
    const double inv_b = 1.0 / static_cast<double>(idx.size());
    const std::uint64_t useed = derive_seed(setup_.seed, 0x21, static_cast<std::uint64_t>(updates_));

    std::vector<Mat> g_cv = nn::zero_gradients(params_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const Transition& tr = buffer_.at(idx[i]);
        const double vt = value_target(tr, derive_seed(useed, i));
        nn::Tape t;
        nn::Binder b(t, params_);
        Var e = nn::gcn_forward(b, t.constant(a_hat_, "a_hat"), t.constant(tr.phi, "phi"));
        const nn::HeadValues hv = nn::heads_eval(b, e, t.constant(tr.action_emb, "action_embedding"));
        Var d1 = t.add_scalar(hv.q1, -st.targets[i]);
        Var d2 = t.add_scalar(hv.q2, -st.targets[i]);
        Var dv = t.add_scalar(hv.v, -vt);
        Var loss = t.scale(t.add(t.add(t.square(d1), t.square(d2)), t.square(dv)), inv_b);
        t.backward(loss);
        b.add_gradients(g_cv);
        st.loss_q1 += t.scalar(t.square(d1)) * inv_b;
        st.loss_q2 += t.scalar(t.square(d2)) * inv_b;
        st.loss_v += t.scalar(t.square(dv)) * inv_b;
    }

    std::vector<Mat> g_pi = nn::zero_gradients(params_);
    const std::size_t n_actor =
        tc.actor_batch > 0 ? std::min<std::size_t>(idx.size(), static_cast<std::size_t>(tc.actor_batch)) : idx.size();
    std::vector<std::size_t> with_vehicles;
    for (std::size_t i = 0; i < n_actor; ++i) {
        if (!buffer_.at(idx[i]).cands.empty()) with_vehicles.push_back(i);
    }
    SolveOptions so;
    so.time_limit_s = setup_.projection.time_limit_s;
    so.node_limit = setup_.projection.node_limit;
    for (std::size_t i : with_vehicles) {
        const Transition& tr = buffer_.at(idx[i]);
        nn::Tape t;
        nn::Binder b(t, params_);
        Var e = nn::gcn_forward(b, t.constant(a_hat_, "a_hat"), t.constant(tr.phi, "phi"));
        const nn::ActorContext ctx = nn::make_actor_context(*setup_.model, tr.pre, tr.cands);
        const nn::ActorHeads h = nn::actor_heads(b, e, ctx);
        Rng rng(derive_seed(useed, 0xac, i));
        const nn::ActorNoise noise = nn::draw_noise(ctx, rng);
        const double tau = params_.tau();
        const nn::ActorSample s = nn::sample_from_heads(t, h, ctx, noise, tau);
        FeasibleAction a;
        if (setup_.flags.no_milp) {
            a = execute_unprojected(build_instance(*setup_.model, tr.pre, s.intention, tr.cands, setup_.projection.mu));
        } else {
            a = project(*setup_.model, tr.pre, s.intention, tr.cands, setup_.projection.mu, so).action;
        }
        Var emb = nn::ste_action_embedding(t, params_.config, tr.pre, ctx, h, noise, tau, a);
        const nn::HeadValues hv = nn::heads_eval(b, e, emb);
        Var lp = nn::expected_log_prob(t, h, ctx, nn::power_u(t, h, noise));
        Var loss = t.sub(t.scale(lp, params_.config.alpha), t.min(hv.q1, hv.q2));
        loss = t.scale(loss, 1.0 / static_cast<double>(with_vehicles.size()));
        t.backward(loss);
        b.add_gradients(g_pi);
        st.loss_pi += t.scalar(loss);
    }

    opt_critic_.step(params_, g_cv);
    opt_value_.step(params_, g_cv);
    if (!with_vehicles.empty()) opt_actor_.step(params_, g_pi);
    nn::polyak(params_, tc.polyak_tau);
    if (!setup_.flags.no_wdro) {
        st.rho_hat = std::accumulate(rho_hat.begin(), rho_hat.end(), 0.0) * inv_b;
        dual_ = dual_update(dual_, st.rho_hat);
    }
    st.lambda = dual_.lambda;
    rho_trace_.push_back(st.rho_hat);
    lambda_trace_.push_back(dual_.lambda);
    ++params_.step;
    ++updates_;
    if (!params_.all_finite()) throw nn::NonFiniteError("parameters became non-finite after update " + std::to_string(updates_));
    return st;
}

TrainLogRow RobustSacTrainer::run_episode() {
    const auto& model = setup_.model;
    const auto& data = setup_.data;
    const TrainConfig& tc = setup_.train;
    const int horizon = data->horizon();
    const int len = std::max(1, std::min(setup_.episode_steps, horizon - 1));
    std::uniform_int_distribution<int> start_dist(0, std::max(0, horizon - 1 - len));
    const int start = start_dist(rng_);
    Episode ep(model, data, start, len, derive_seed(setup_.seed, 0x31, static_cast<std::uint64_t>(episode_index_)));
    TrainLogRow row;
    double ret = 0.0;
    double sq1 = 0.0, sq2 = 0.0, spi = 0.0, srho = 0.0;
    int n_upd = 0;
    while (!ep.done()) {
        const SystemState pre = ep.state();
        const int cur_idx = std::min(ep.field_index(), horizon - 1);
        const int nxt_idx = std::min(ep.field_index() + 1, horizon - 1);
        std::shared_ptr<const ScenarioField> cur(data, &data->fields[static_cast<std::size_t>(cur_idx)]);
        std::shared_ptr<const ScenarioField> nxt(data, &data->fields[static_cast<std::size_t>(nxt_idx)]);
        auto cands = all_candidates(*model, pre, *cur);
        SolveStatus status = SolveStatus::optimal;
        const FeasibleAction a =
            act({pre, cands, *cur, derive_seed(setup_.seed, 0x32, static_cast<std::uint64_t>(env_steps_))}, false, &status);
        if (!cands.empty()) row.milp.add(status);
        std::vector<Order> arrivals = sample_orders(*nxt, pre.t + 1, ep.arrival_seed());
        const StepOutcome out = ep.advance(a);
        ret += out.reward;

        Transition tr;
        tr.phi = phi_of(pre);
        tr.phi_next = phi_of(out.next);
        tr.action_emb = nn::action_embedding(params_.config, pre, a);
        tr.action = a;
        tr.reward = out.reward * tc.reward_scale;
        tr.parts = out.parts;
        tr.duration = out.epoch_duration();
        tr.durations = out.durations;
        tr.cache = make_resim_cache(pre, a, std::move(arrivals), cur, nxt);
        tr.xi_hat = tr.cache.xi_hat;
        tr.pre = pre;
        tr.cands = std::move(cands);
        buffer_.push(std::move(tr));
        ++env_steps_;

        const long ready = std::max<long>(tc.batch, tc.warmup_steps);
        if (static_cast<long>(buffer_.size()) >= std::min<long>(ready, static_cast<long>(buffer_.capacity())) &&
            env_steps_ % std::max(1, tc.updates_every) == 0) {
            const UpdateStats st = update();
            sq1 += st.loss_q1;
            sq2 += st.loss_q2;
            spi += st.loss_pi;
            srho += st.rho_hat;
            ++n_upd;
        }
    }
    returns_.push_back(ret);
    ++episode_index_;
    row.step = env_steps_;
    row.episode_return = ret;
    const std::size_t w = static_cast<std::size_t>(std::max(1, tc.log_window));
    row.ma100 = mean_of(returns_, returns_.size() > w ? returns_.size() - w : 0, returns_.size());
    if (n_upd > 0) {
        row.loss_q1 = sq1 / n_upd;
        row.loss_q2 = sq2 / n_upd;
        row.loss_pi = spi / n_upd;
        row.rho_hat = srho / n_upd;
    }
    row.lambda = dual_.lambda;
    return row;
}

std::vector<TrainLogRow> RobustSacTrainer::train(int episodes, std::ostream* log) {
    std::vector<TrainLogRow> rows;
    if (log) write_train_log_header(*log);
    for (int e = 0; e < episodes; ++e) {
        rows.push_back(run_episode());
        if (log) {
            write_train_log_row(*log, rows.back());
            log->flush();
        }
    }
    return rows;
}

void RobustSacTrainer::save(const std::filesystem::path& dir) const {
    nn::save_checkpoint(params_, dir,
                        {{"lambda", dual_.lambda}, {"dual_t", static_cast<double>(dual_.t)},
                         {"gamma", setup_.train.gamma}, {"env_steps", static_cast<double>(env_steps_)}});
}

Policy actor_policy(std::shared_ptr<const EnvModel> model, std::shared_ptr<const nn::ParameterSet> params,
                    const ProjectionConfig& proj, bool no_milp) {
    auto a_hat = std::make_shared<const Mat>(Mat(graph_matrices(*model->grid).a_hat));
    return [model, params, a_hat, proj, no_milp](const PolicyInput& in) {
        return actor_act(*model, *params, *a_hat, proj, no_milp, in, true).action;
    };
}

Policy greedy_as_policy(std::shared_ptr<const EnvModel> model, const GreedyOptions& opts) {
    return [model, opts](const PolicyInput& in) { return greedy_policy(*model, in.state, in.cands, opts); };
}

}  // namespace hexfleet
