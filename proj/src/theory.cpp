#include "hexfleet/theory.hpp"

#include "hexfleet/rng.hpp"
#include "hexfleet/wdro.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace hexfleet {

namespace {

Eigen::MatrixXd random_spd(Rng& rng, int n) {
    std::normal_distribution<double> nd;
    Eigen::MatrixXd b(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) b(i, j) = nd(rng);
    }
    return b * b.transpose() / n + 0.5 * Eigen::MatrixXd::Identity(n, n);
}

Eigen::VectorXd random_vector(Rng& rng, int n, double scale) {
    std::normal_distribution<double> nd(0.0, scale);
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = nd(rng);
    return v;
}

}  // namespace

CheckResult check_contraction(std::uint64_t seed, const ContractionOptions& o) {
    Rng rng(derive_seed(seed, 0x7431));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_int_distribution<int> next_state(0, o.states - 1);
    std::uniform_int_distribution<int> duration(1, 4);
    std::uniform_int_distribution<int> action(0, o.actions - 1);

    const int dim = 3;
    const GroundMetric metric = GroundMetric::dense(random_spd(rng, dim));
    std::vector<Eigen::VectorXd> scen;
    for (int j = 0; j < o.scenarios; ++j) scen.push_back(j == 0 ? Eigen::VectorXd::Zero(dim) : random_vector(rng, dim, 0.5));
    std::vector<double> d(o.scenarios);
    for (int j = 0; j < o.scenarios; ++j) d[j] = metric.dist(scen[j], scen[0]);

    const int sa = o.states * o.actions;
    std::vector<double> reward(sa), log_pi(sa), pi(sa);
    std::vector<int> projected(sa);
    std::vector<std::vector<int>> succ(sa, std::vector<int>(o.scenarios));
    std::vector<std::vector<int>> dur(sa, std::vector<int>(o.scenarios));
    for (int s = 0; s < o.states; ++s) {
        double z = 0.0;
        for (int a = 0; a < o.actions; ++a) z += (pi[s * o.actions + a] = std::exp(2.0 * u(rng)));
        for (int a = 0; a < o.actions; ++a) {
            const int k = s * o.actions + a;
            pi[k] /= z;
            log_pi[k] = std::log(pi[k]);
            // Infeasible intentions are mapped to a feasible action of the same state.
            projected[k] = u(rng) < 0.0 ? action(rng) : a;
            reward[k] = u(rng);
            for (int j = 0; j < o.scenarios; ++j) {
                succ[k][j] = next_state(rng);
                dur[k][j] = duration(rng);
            }
        }
    }
    auto apply = [&](const Eigen::VectorXd& v) {
        Eigen::VectorXd out(o.states);
        for (int s = 0; s < o.states; ++s) {
            double acc = 0.0;
            for (int a = 0; a < o.actions; ++a) {
                const int k = s * o.actions + a;
                const int kp = s * o.actions + projected[k];
                double sup = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < o.scenarios; ++j) {
                    sup = std::max(sup, std::pow(o.gamma, dur[kp][j]) * v[succ[kp][j]] - o.lambda * d[j]);
                }
                acc += pi[k] * (reward[kp] - o.alpha * log_pi[k] + sup);
            }
            out[s] = acc;
        }
        return out;
    };

    CheckResult res;
    res.pass = true;
    for (int t = 0; t < o.trials; ++t) {
        const double scale = std::pow(10.0, u(rng) * 2.0);
        const Eigen::VectorXd v1 = random_vector(rng, o.states, scale);
        const Eigen::VectorXd v2 = t % 2 == 0 ? random_vector(rng, o.states, scale) : Eigen::VectorXd(v1.array() + u(rng));
        const double den = (v1 - v2).cwiseAbs().maxCoeff();
        if (den == 0.0) continue;
        const double ratio = (apply(v1) - apply(v2)).cwiseAbs().maxCoeff() / den;
        res.worst = std::max(res.worst, ratio);
        ++res.trials;
        if (ratio > o.gamma + 1e-9) res.pass = false;
    }
    std::ostringstream os;
    os << "max ratio " << res.worst << " vs gamma " << o.gamma << " over " << res.trials << " pairs";
    res.detail = os.str();
    return res;
}

CheckResult check_lipschitz_bound(std::uint64_t seed, const LipschitzOptions& o) {
    Rng rng(derive_seed(seed, 0x4c57));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    CheckResult res;
    res.pass = true;
    res.worst = std::numeric_limits<double>::infinity();
    for (int t = 0; t < o.trials; ++t) {
        const GroundMetric metric = GroundMetric::dense(random_spd(rng, o.dim));
        std::vector<Eigen::VectorXd> a(o.pieces);
        std::vector<double> b(o.pieces);
        for (int j = 0; j < o.pieces; ++j) {
            Eigen::VectorXd dir = random_vector(rng, o.dim, 1.0);
            a[j] = dir * (o.lipschitz * (0.2 + 0.8 * u01(rng)) / metric.dual_norm(dir));
            b[j] = 2.0 * u01(rng) - 1.0;
        }
        a[0] *= o.lipschitz / metric.dual_norm(a[0]);
        auto g = [&](const Eigen::VectorXd& x) {
            double v = std::numeric_limits<double>::infinity();
            for (int j = 0; j < o.pieces; ++j) v = std::min(v, a[j].dot(x) + b[j]);
            return v;
        };
        auto active = [&](const Eigen::VectorXd& x) {
            int best = 0;
            for (int j = 1; j < o.pieces; ++j) {
                if (a[j].dot(x) + b[j] < a[best].dot(x) + b[best]) best = j;
            }
            return best;
        };
        std::vector<Eigen::VectorXd> atoms;
        double e_hat = 0.0;
        for (int i = 0; i < o.atoms; ++i) {
            atoms.push_back(random_vector(rng, o.dim, 1.0));
            e_hat += g(atoms.back()) / o.atoms;
        }
        const double w = 1.0 / o.atoms;

        // Each candidate P is a list of (mass, location) pairs with transport cost <= rho.
        double inf_e = std::numeric_limits<double>::infinity();
        auto consider = [&](const std::vector<std::pair<double, Eigen::VectorXd>>& p, double cost) {
            if (cost > o.rho * (1.0 + 1e-12)) {
                res.pass = false;
                res.detail = "constructed distribution outside the ball";
            }
            double e = 0.0;
            for (const auto& [mass, x] : p) e += mass * g(x);
            inf_e = std::min(inf_e, e);
        };
        auto steepest = [&](const Eigen::VectorXd& x) {
            const Eigen::VectorXd& aj = a[active(x)];
            Eigen::VectorXd dir = -metric.solve(aj);
            return Eigen::VectorXd(dir / metric.norm(dir));
        };
        for (int variant = 0; variant < 4; ++variant) {
            std::vector<std::pair<double, Eigen::VectorXd>> p;
            double cost = 0.0;
            for (int i = 0; i < o.atoms; ++i) {
                double budget = 0.0;
                if (variant == 0) budget = o.rho;
                if (variant == 1) budget = i == 0 ? o.rho * o.atoms : 0.0;
                p.emplace_back(w, atoms[i] + budget * steepest(atoms[i]));
                cost += w * budget;
            }
            if (variant == 2 || variant == 3) {
                p.clear();
                cost = 0.0;
                std::vector<double> share(o.atoms);
                double z = 0.0;
                for (double& s : share) z += (s = u01(rng));
                for (int i = 0; i < o.atoms; ++i) {
                    const double split = variant == 3 ? u01(rng) : 1.0;
                    const double budget = o.rho * share[i] / z / w;
                    Eigen::VectorXd dir = variant == 2 ? steepest(atoms[i]) : random_vector(rng, o.dim, 1.0);
                    dir /= metric.norm(dir);
                    // Mass `split` of the atom moves by budget / split; the rest stays put.
                    p.emplace_back(w * split, atoms[i] + (budget / split) * dir);
                    if (split < 1.0) p.emplace_back(w * (1.0 - split), atoms[i]);
                    cost += w * split * (budget / split);
                }
            }
            consider(p, cost);
        }
        const double slack = inf_e - (e_hat - o.lipschitz * o.rho);
        res.worst = std::min(res.worst, slack);
        ++res.trials;
        if (slack < -1e-9) res.pass = false;
    }
    if (res.detail.empty()) {
        std::ostringstream os;
        os << "min slack " << res.worst << " over " << res.trials << " functions";
        res.detail = os.str();
    }
    return res;
}

DualTrace run_dual_tracking(std::uint64_t seed, const DualTrackingOptions& o) {
    Rng rng(derive_seed(seed, 0x3d7a));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    DualState dual;
    dual.eta0 = o.eta0;
    dual.rho_target = o.rho_target;
    DualTrace tr;
    tr.g_bound = std::max(o.rho_max - o.rho_target, o.rho_target);
    const int horizon = o.windows.empty() ? 0 : *std::max_element(o.windows.begin(), o.windows.end());
    double viol = 0.0;
    for (int t = 1; t <= horizon; ++t) {
        const double rho_hat = std::clamp(o.rho_max * std::exp(-o.decay * dual.lambda) + o.noise * u(rng), 0.0, o.rho_max);
        tr.lambda.push_back(dual.lambda);
        tr.rho_hat.push_back(rho_hat);
        viol += std::max(0.0, rho_hat - o.rho_target);
        dual = dual_update(dual, rho_hat);
        for (int w : o.windows) {
            if (w == t) tr.window_avg.push_back(viol / t);
        }
    }
    return tr;
}

CheckResult check_dual_tracking(std::uint64_t seed, const DualTrackingOptions& o) {
    DualTrace tr = run_dual_tracking(seed, o);
    CheckResult res;
    res.trials = static_cast<int>(tr.rho_hat.size());
    res.pass = !tr.window_avg.empty();
    std::ostringstream os;
    os << "window averages";
    for (std::size_t k = 0; k < tr.window_avg.size(); ++k) {
        os << ' ' << tr.window_avg[k];
        if (k > 0 && tr.window_avg[k] > tr.window_avg[k - 1]) res.pass = false;
    }
    res.worst = tr.window_avg.empty() ? 0.0 : tr.window_avg.back();
    if (res.worst > 0.1 * tr.g_bound) res.pass = false;
    for (double l : tr.lambda) {
        if (l < 0.0) res.pass = false;
    }
    os << "; G = " << tr.g_bound;
    res.detail = os.str();
    return res;
}

}  // namespace hexfleet
