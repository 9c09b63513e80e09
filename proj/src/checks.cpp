#include "hexfleet/checks.hpp"

#include "hexfleet/neural.hpp"
#include "hexfleet/projection.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

namespace hexfleet {

using nn::Mat;
using nn::Var;

CheckResult check_projection_oracle(std::uint64_t seed, int instances, double time_limit_s, std::ostream* lp_dump) {
    CheckResult res;
    res.pass = true;
    int failures = 0;
    for (int i = 0; i < instances; ++i) {
        const std::uint64_t s = derive_seed(seed, 0x0e, static_cast<std::uint64_t>(i));
        const double mu = i % 3 == 0 ? 0.0 : 0.05 * (i % 17);
        const MicroCase mc = random_micro_case(s, mu);
        const MilpInstance& inst = mc.instance;
        if (lp_dump && i == 0) write_lp(*lp_dump, inst);
        SolveOptions opt;
        opt.time_limit_s = time_limit_s;
        const Projection bb = solve(inst, opt);
        const Projection oracle = enumerate_oracle(inst);
        const double gap = std::abs(bb.report.objective - oracle.report.objective);
        const double attained = std::abs(inst.objective(bb.action) - bb.report.objective);
        res.worst = std::max(res.worst, gap);
        ++res.trials;
        if (gap > 1e-6 || attained > 1e-6 || !check_feasible(inst, bb.action).empty()) {
            res.pass = false;
            ++failures;
        }
    }
    std::ostringstream os;
    os << res.trials << " instances, " << failures << " mismatches, max objective gap " << res.worst;
    res.detail = os.str();
    return res;
}

namespace {

/// Micro case with at least one idle vehicle and a charging option, random parameters and features.
struct GradientCase {
    MicroCase mc;
    nn::ParameterSet params;
    Mat a_hat, phi;
    nn::ActorContext ctx;
    nn::ActorNoise noise;
    nn::ActorSample sample;
    Mat action_emb;

    explicit GradientCase(std::uint64_t seed) {
        for (std::uint64_t s = seed;; ++s) {
            mc = random_micro_case(s, 0.5);
            bool chg = false;
            for (const auto& cs : mc.candidates) {
                for (const Candidate& c : cs) chg = chg || c.kind == ActionKind::charge;
            }
            if (chg) break;
        }
        nn::NetConfig cfg;
        cfg.cells = mc.model.grid->size();
        cfg.stations = static_cast<int>(mc.state.stations.size());
        cfg.hidden = 4;
        cfg.head_hidden = 5;
        cfg.scorer_hidden = 3;
        params = nn::init_parameters(cfg, seed);
        Rng rng(derive_seed(seed, 0x9d));
        std::uniform_real_distribution<double> u(-0.3, 0.3);
        for (Mat& v : params.values) {
            for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += u(rng);
        }
        a_hat = Mat(graph_matrices(*mc.model.grid).a_hat);
        phi = Mat(featurize(mc.model, mc.state));
        for (Eigen::Index i = 0; i < phi.size(); ++i) phi.data()[i] += u(rng);
        ctx = nn::make_actor_context(mc.model, mc.state, mc.candidates);
        noise = nn::draw_noise(ctx, rng);
        nn::Tape t;
        nn::Binder b(t, params);
        Var e = nn::gcn_forward(b, t.constant(a_hat), t.constant(phi));
        sample = nn::sample_from_heads(t, nn::actor_heads(b, e, ctx), ctx, noise, 0.7);
        const MilpInstance inst = build_instance(mc.model, mc.state, sample.intention, mc.candidates, 0.5);
        action_emb = nn::action_embedding(cfg, mc.state, greedy_fallback(inst));
    }

    double loss(const nn::ParameterSet& p, const Mat& phi_in, std::vector<Mat>* grads, Mat* phi_grad) const {
        nn::Tape t;
        nn::Binder b(t, p);
        Var phi_v = t.leaf(phi_in, "phi");
        Var e = nn::gcn_forward(b, t.constant(a_hat), phi_v);
        const nn::ActorHeads h = nn::actor_heads(b, e, ctx);
        Var total = t.add(t.scale(nn::sample_log_prob(t, h, ctx, sample), 0.3),
                          t.scale(nn::expected_log_prob(t, h, ctx, nn::power_u(t, h, noise)), 0.2));
        const nn::HeadValues hv = nn::heads_eval(b, e, t.constant(action_emb));
        const nn::HeadValues ht = nn::heads_eval(b, e, t.constant(action_emb), true);
        total = t.add(total, t.sum(t.min(hv.q1, hv.q2)));
        total = t.add(total, t.sum(t.square(hv.v)));
        total = t.add(total, t.sum(t.add(ht.q1, t.scale(ht.q2, 0.5))));
        if (grads) {
            t.backward(total);
            *grads = nn::zero_gradients(p);
            b.add_gradients(*grads);
            *phi_grad = t.grad(phi_v);
        }
        return t.scalar(total);
    }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}); }

}  // namespace

CheckResult check_gradient_fidelity(std::uint64_t seed, int seeds, double tol) {
    CheckResult res;
    const double h = 1e-5;
    std::string worst_where;
    for (int k = 0; k < seeds; ++k) {
        const GradientCase gc(derive_seed(seed, 0x6d, static_cast<std::uint64_t>(k)) % 100000);
        std::vector<Mat> grads;
        Mat phi_grad;
        gc.loss(gc.params, gc.phi, &grads, &phi_grad);
        auto note = [&](double e, const std::string& where) {
            ++res.trials;
            if (e > res.worst) {
                res.worst = e;
                worst_where = where;
            }
        };
        for (std::size_t j = 0; j < gc.params.size(); ++j) {
            for (Eigen::Index i = 0; i < gc.params.values[j].size(); ++i) {
                nn::ParameterSet p = gc.params, m = gc.params;
                p.values[j].data()[i] += h;
                m.values[j].data()[i] -= h;
                const double fd = (gc.loss(p, gc.phi, nullptr, nullptr) - gc.loss(m, gc.phi, nullptr, nullptr)) / (2 * h);
                note(rel_err(fd, grads[j].data()[i]), gc.params.names[j]);
            }
        }
        for (Eigen::Index i = 0; i < gc.phi.size(); ++i) {
            Mat p = gc.phi, m = gc.phi;
            p.data()[i] += h;
            m.data()[i] -= h;
            const double fd = (gc.loss(gc.params, p, nullptr, nullptr) - gc.loss(gc.params, m, nullptr, nullptr)) / (2 * h);
            note(rel_err(fd, phi_grad.data()[i]), "phi");
        }
    }
    res.pass = res.worst <= tol;
    std::ostringstream os;
    os << seeds << " seeds, " << res.trials << " coordinates, max relative error " << res.worst << " (" << worst_where
       << ")";
    res.detail = os.str();
    return res;
}

CheckResult check_gumbel_law(std::uint64_t seed, int samples) {
    const std::vector<double> logits{0.5, -0.3, 1.2, 0.0, -1.0};
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    Rng rng(derive_seed(seed, 0x96));
    std::vector<int> counts(logits.size(), 0);
    std::vector<double> g(logits.size());
    for (int i = 0; i < samples; ++i) {
        for (double& x : g) x = nn::sample_gumbel(rng);
        const std::vector<double> w = nn::gumbel_softmax(logits, g, 0.5);
        ++counts[static_cast<std::size_t>(std::max_element(w.begin(), w.end()) - w.begin())];
    }
    CheckResult res;
    res.trials = samples;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double e = samples * std::exp(logits[k]) / z;
        res.worst += (counts[k] - e) * (counts[k] - e) / e;
    }
    const boost::math::chi_squared dist(static_cast<double>(logits.size() - 1));
    const double p = boost::math::cdf(boost::math::complement(dist, res.worst));
    res.pass = p > 0.01;
    std::ostringstream os;
    os << "chi2 " << res.worst << " on " << logits.size() - 1 << " dof, p = " << p;
    res.detail = os.str();
    return res;
}

CheckResult check_power_density(double tol) {
    CheckResult res;
    const double p_max = 50.0;
    const int n = 400000;
    for (auto [mu, ls] : std::vector<std::pair<double, double>>{{0.0, 0.0}, {0.8, -0.5}, {-1.2, -1.0}, {0.3, -3.0},
                                                                {1.5, 0.5}}) {
        double acc = 0.0, prev = 0.0;
        for (int i = 1; i < n; ++i) {
            const double f = std::exp(nn::squashed_log_density(p_max * i / n, mu, ls, p_max));
            acc += 0.5 * (prev + f) * (p_max / n);
            prev = f;
        }
        acc += 0.5 * prev * (p_max / n);
        res.worst = std::max(res.worst, std::abs(acc - 1.0));
        ++res.trials;
    }
    res.pass = res.worst <= tol;
    std::ostringstream os;
    os << res.trials << " (mu, log sigma) pairs, max |integral - 1| = " << res.worst;
    res.detail = os.str();
    return res;
}

}  // namespace hexfleet
