#pragma once

#include "hexfleet/env.hpp"
#include "hexfleet/scenario.hpp"

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <functional>
#include <memory>
#include <vector>

namespace hexfleet {

/// Scenario vector of length 2m^2: D row-major, then T (as reals) row-major.
Eigen::VectorXd flatten_scenario(const DemandMatrix& demand, const TravelMatrix& travel);
/// Splits a scenario vector; D is clamped at 0 and T rounded with a floor of 1.
void unflatten_scenario(const Eigen::VectorXd& xi, int cells, DemandMatrix& demand, TravelMatrix& travel);

/// 1 / (per-coordinate sample variance + 1e-6) of (D_{t+1}, T_t) over a dataset.
Eigen::VectorXd variance_weights(const ScenarioDataset& data);

/**
 * Mahalanobis ground metric d_Q(a, b) = ||Q^{1/2}(a - b)||.
 *
 * Q = diag(w) + beta * Q_graph + jitter * I is kept sparse and factorized
 * once with a simplicial Cholesky; distances use the factor.
 */
class GroundMetric {
public:
    GroundMetric(const Eigen::VectorXd& w, double beta, const Eigen::SparseMatrix<double>& q_graph,
                 double eps = 1e-8, double jitter = 1e-10);
    static GroundMetric identity(int dim, double eps = 1e-8);
    static GroundMetric dense(const Eigen::MatrixXd& q, double eps = 1e-8);

    int dim() const { return static_cast<int>(q_.rows()); }
    const Eigen::SparseMatrix<double>& q() const { return q_; }
    double eps() const { return eps_; }

    double norm(const Eigen::VectorXd& v) const;
    double dist(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const;
    /// Q(xi - center) / max(eps, d_Q(xi, center)); zero at the kink.
    Eigen::VectorXd subgrad(const Eigen::VectorXd& xi, const Eigen::VectorXd& center) const;
    /// Q^{-1} v.
    Eigen::VectorXd solve(const Eigen::VectorXd& v) const;
    /// ||v||_{Q^{-1}} = sqrt(v' Q^{-1} v).
    double dual_norm(const Eigen::VectorXd& v) const;

private:
    GroundMetric() = default;
    void factorize();

    Eigen::SparseMatrix<double> q_;
    std::shared_ptr<Eigen::SimplicialLLT<Eigen::SparseMatrix<double>>> llt_;
    double eps_ = 1e-8;
};

/// Q-ball of radius `radius` around `center`, intersected with the box D >= 0, T >= 1.
struct SupportSet {
    Eigen::VectorXd center;
    double radius = 0.0;
    int demand_dim = 0;  ///< leading coordinates floored at 0; the rest are floored at 1
};

Eigen::VectorXd project_support(const SupportSet& set, const GroundMetric& metric, const Eigen::VectorXd& xi);

/// gamma^Delta(xi), V(s'(xi)) and its gradient with respect to xi.
struct ValueEval {
    double discount = 1.0;
    double value = 0.0;
    Eigen::VectorXd grad;
};
using ValueOracle = std::function<ValueEval(const Eigen::VectorXd&)>;

struct InnerResult {
    Eigen::VectorXd xi_star;
    double rho_hat = 0.0;
    double f_star = 0.0;
    double f_start = 0.0;
    ValueEval eval_star;
    int steps = 0;
};

/**
 * K projected subgradient steps on f(xi) = discount * V + lambda * d_Q(xi, center),
 * preconditioned by Q^{-1}. Returns the best iterate seen, starting from the center.
 */
InnerResult inner_minimize(const ValueOracle& oracle, const GroundMetric& metric, const SupportSet& set,
                           double lambda, int k, double step);

/// r - lambda * rho + discount * V + lambda * rho_hat at the adversarial point.
double robust_target(double reward, const InnerResult& inner, double lambda, double rho);

struct DualState {
    double lambda = 0.0;
    double eta0 = 0.01;
    long t = 1;
    double rho = 0.3;
    double rho_target = 0.2;
    double violation_sum = 0.0;  ///< sum of (rho_hat - rho_target)_+
};

/// lambda <- max(0, lambda + eta0 / sqrt(t) * (rho_hat - rho_target)), t <- t + 1.
DualState dual_update(const DualState& dual, double rho_hat);

/// Everything needed to replay one transition under a perturbed scenario.
struct ResimCache {
    SystemState pre;
    FeasibleAction action;
    std::vector<Order> arrivals;
    std::shared_ptr<const ScenarioField> current;  ///< may alias into a shared dataset
    std::shared_ptr<const ScenarioField> next;
    Eigen::VectorXd xi_hat;  ///< (D of next, T of current)
};

ResimCache make_resim_cache(const SystemState& pre, const FeasibleAction& action, std::vector<Order> arrivals,
                            std::shared_ptr<const ScenarioField> current, std::shared_ptr<const ScenarioField> next);
/// Copies both fields.
ResimCache make_resim_cache(const SystemState& pre, const FeasibleAction& action, std::vector<Order> arrivals,
                            const ScenarioField& current, const ScenarioField& next);

/// Successor under xi: D drives the next-step demand aggregates, T the action durations.
StepOutcome resim(const EnvModel& model, const ResimCache& cache, const Eigen::VectorXd& xi);

/**
 * Chain rule from node-feature gradients to the scenario vector: demand_out and
 * demand_in are row and column sums of D scaled by 1 / demand_scale (held fixed).
 * The T block receives zero.
 */
Eigen::VectorXd demand_gradient(const Eigen::MatrixXd& feature_grad, double demand_scale, int cells);

}  // namespace hexfleet
