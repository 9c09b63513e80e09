#include "hexfleet/wdro.hpp"

#include <cmath>
#include <stdexcept>

namespace hexfleet {

Eigen::VectorXd flatten_scenario(const DemandMatrix& demand, const TravelMatrix& travel) {
    const Eigen::Index n = demand.size();
    Eigen::VectorXd xi(2 * n);
    xi.head(n) = Eigen::Map<const Eigen::VectorXd>(demand.data(), n);
    xi.tail(n) = Eigen::Map<const Eigen::VectorXi>(travel.data(), n).cast<double>();
    return xi;
}

void unflatten_scenario(const Eigen::VectorXd& xi, int cells, DemandMatrix& demand, TravelMatrix& travel) {
    const Eigen::Index n = static_cast<Eigen::Index>(cells) * cells;
    if (xi.size() != 2 * n) throw std::invalid_argument("unflatten_scenario: dimension mismatch");
    demand.resize(cells, cells);
    travel.resize(cells, cells);
    for (Eigen::Index k = 0; k < n; ++k) {
        demand.data()[k] = std::max(0.0, xi[k]);
        travel.data()[k] = std::max(1, static_cast<int>(std::lround(xi[n + k])));
    }
}

Eigen::VectorXd variance_weights(const ScenarioDataset& data) {
    const int m = data.cells();
    const Eigen::Index q = 2 * static_cast<Eigen::Index>(m) * m;
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(q);
    Eigen::VectorXd sq = Eigen::VectorXd::Zero(q);
    int count = 0;
    for (int t = 0; t + 1 < data.horizon(); ++t) {
        const Eigen::VectorXd xi = flatten_scenario(data.fields[t + 1].demand, data.fields[t].travel);
        mean += xi;
        sq += xi.cwiseProduct(xi);
        ++count;
    }
    if (count < 2) return Eigen::VectorXd::Constant(q, 1.0 / (0.0 + 1e-6));
    mean /= count;
    Eigen::VectorXd var = (sq / count - mean.cwiseProduct(mean)) * (static_cast<double>(count) / (count - 1));
    var = var.cwiseMax(0.0);
    return (var.array() + 1e-6).inverse().matrix();
}

GroundMetric::GroundMetric(const Eigen::VectorXd& w, double beta, const Eigen::SparseMatrix<double>& q_graph,
                           double eps, double jitter)
    : eps_(eps) {
    if (q_graph.rows() != w.size() || q_graph.cols() != w.size()) {
        throw std::invalid_argument("GroundMetric: weight and graph dimensions differ");
    }
    Eigen::SparseMatrix<double> diag(w.size(), w.size());
    diag.reserve(Eigen::VectorXi::Constant(w.size(), 1));
    for (Eigen::Index i = 0; i < w.size(); ++i) diag.insert(i, i) = w[i] + jitter;
    q_ = diag + beta * q_graph;
    q_.makeCompressed();
    factorize();
}

GroundMetric GroundMetric::identity(int dim, double eps) {
    GroundMetric g;
    g.eps_ = eps;
    g.q_.resize(dim, dim);
    g.q_.setIdentity();
    g.factorize();
    return g;
}

GroundMetric GroundMetric::dense(const Eigen::MatrixXd& q, double eps) {
    GroundMetric g;
    g.eps_ = eps;
    g.q_ = q.sparseView();
    g.factorize();
    return g;
}

void GroundMetric::factorize() {
    llt_ = std::make_shared<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>>(q_);
    if (llt_->info() != Eigen::Success) throw std::invalid_argument("GroundMetric: Q is not positive definite");
}

double GroundMetric::norm(const Eigen::VectorXd& v) const {
    if (v.size() != dim()) throw std::invalid_argument("GroundMetric: dimension mismatch");
    // Q = P' L L' P, so v'Qv = ||L' P v||^2.
    const Eigen::VectorXd pv = llt_->permutationP() * v;
    const Eigen::VectorXd y = llt_->matrixU() * pv;
    return y.norm();
}

double GroundMetric::dist(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
    if (a.size() != b.size()) throw std::invalid_argument("GroundMetric::dist: dimension mismatch");
    return norm(a - b);
}

Eigen::VectorXd GroundMetric::subgrad(const Eigen::VectorXd& xi, const Eigen::VectorXd& center) const {
    const Eigen::VectorXd d = xi - center;
    const double n = norm(d);
    if (n == 0.0) return Eigen::VectorXd::Zero(d.size());
    return (q_ * d) / std::max(eps_, n);
}

Eigen::VectorXd GroundMetric::solve(const Eigen::VectorXd& v) const { return llt_->solve(v); }

double GroundMetric::dual_norm(const Eigen::VectorXd& v) const { return std::sqrt(std::max(0.0, v.dot(solve(v)))); }

namespace {

void clamp_box(const SupportSet& set, Eigen::VectorXd& xi) {
    for (Eigen::Index k = 0; k < xi.size(); ++k) xi[k] = std::max(xi[k], k < set.demand_dim ? 0.0 : 1.0);
}

void shrink_to_ball(const SupportSet& set, const GroundMetric& metric, Eigen::VectorXd& xi) {
    const double d = metric.dist(xi, set.center);
    if (d > set.radius) {
        const double s = set.radius > 0.0 ? set.radius / d : 0.0;
        xi = set.center + (xi - set.center) * s;
    }
}

}  // namespace

Eigen::VectorXd project_support(const SupportSet& set, const GroundMetric& metric, const Eigen::VectorXd& xi) {
    Eigen::VectorXd x = xi;
    for (int pass = 0; pass < 3; ++pass) {
        shrink_to_ball(set, metric, x);
        clamp_box(set, x);
    }
    if (metric.dist(x, set.center) > set.radius + 1e-6) {
        // The center lies in the box, so pulling toward it keeps the box and restores the ball.
        shrink_to_ball(set, metric, x);
        clamp_box(set, x);
    }
    return x;
}

InnerResult inner_minimize(const ValueOracle& oracle, const GroundMetric& metric, const SupportSet& set,
                           double lambda, int k, double step) {
    if (k < 1 || !(step > 0.0)) throw std::invalid_argument("inner_minimize: need K >= 1 and a positive step");
    InnerResult best;
    Eigen::VectorXd xi = set.center;
    best.xi_star = xi;
    best.eval_star = oracle(xi);
    best.f_start = best.f_star = best.eval_star.discount * best.eval_star.value;
    if (!std::isfinite(best.f_start)) throw std::runtime_error("inner_minimize: value at the empirical scenario is not finite");
    ValueEval cur = best.eval_star;
    for (int it = 0; it < k; ++it) {
        Eigen::VectorXd g = cur.discount * cur.grad + lambda * metric.subgrad(xi, set.center);
        if (!g.allFinite()) break;
        xi = project_support(set, metric, xi - step * metric.solve(g));
        cur = oracle(xi);
        const double f = cur.discount * cur.value + lambda * metric.dist(xi, set.center);
        if (!std::isfinite(f) || !cur.grad.allFinite()) break;
        best.steps = it + 1;
        if (f < best.f_star) {
            best.f_star = f;
            best.xi_star = xi;
            best.eval_star = cur;
        }
    }
    best.rho_hat = metric.dist(best.xi_star, set.center);
    return best;
}

double robust_target(double reward, const InnerResult& inner, double lambda, double rho) {
    return reward - lambda * rho + inner.eval_star.discount * inner.eval_star.value + lambda * inner.rho_hat;
}

DualState dual_update(const DualState& dual, double rho_hat) {
    DualState d = dual;
    const double g = rho_hat - d.rho_target;
    d.lambda = std::max(0.0, d.lambda + d.eta0 / std::sqrt(static_cast<double>(d.t)) * g);
    d.violation_sum += std::max(0.0, g);
    d.t += 1;
    return d;
}

ResimCache make_resim_cache(const SystemState& pre, const FeasibleAction& action, std::vector<Order> arrivals,
                            std::shared_ptr<const ScenarioField> current, std::shared_ptr<const ScenarioField> next) {
    ResimCache c;
    c.pre = pre;
    c.action = action;
    c.arrivals = std::move(arrivals);
    c.xi_hat = flatten_scenario(next->demand, current->travel);
    c.current = std::move(current);
    c.next = std::move(next);
    return c;
}

ResimCache make_resim_cache(const SystemState& pre, const FeasibleAction& action, std::vector<Order> arrivals,
                            const ScenarioField& current, const ScenarioField& next) {
    return make_resim_cache(pre, action, std::move(arrivals), std::make_shared<const ScenarioField>(current),
                            std::make_shared<const ScenarioField>(next));
}

StepOutcome resim(const EnvModel& model, const ResimCache& cache, const Eigen::VectorXd& xi) {
    ScenarioField cur = *cache.current;
    ScenarioField nxt = *cache.next;
    DemandMatrix d;
    TravelMatrix t;
    unflatten_scenario(xi, cur.cells(), d, t);
    nxt.demand = std::move(d);
    cur.travel = std::move(t);
    return step(model, cache.pre, cache.action, cur, nxt, cache.arrivals);
}

Eigen::VectorXd demand_gradient(const Eigen::MatrixXd& feature_grad, double demand_scale, int cells) {
    const Eigen::Index n = static_cast<Eigen::Index>(cells) * cells;
    Eigen::VectorXd g = Eigen::VectorXd::Zero(2 * n);
    const double inv = demand_scale > 0.0 ? 1.0 / demand_scale : 1.0;
    for (int a = 0; a < cells; ++a) {
        for (int b = 0; b < cells; ++b) {
            g[static_cast<Eigen::Index>(a) * cells + b] = (feature_grad(a, kDemandOut) + feature_grad(b, kDemandIn)) * inv;
        }
    }
    return g;
}

}  // namespace hexfleet
