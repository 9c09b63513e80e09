#include "doctest.h"

#include "hexfleet/projection.hpp"
#include "hexfleet/rng.hpp"
#include "hexfleet/theory.hpp"
#include "hexfleet/wdro.hpp"

using namespace hexfleet;

namespace {

Eigen::VectorXd rand_vec(Rng& rng, int n) {
    std::normal_distribution<double> nd;
    Eigen::VectorXd v(n);
    for (int i = 0; i < n; ++i) v[i] = nd(rng);
    return v;
}

GroundMetric grid_metric(int rows, int cols, Rng& rng) {
    HexGrid g = build_grid(rows, cols, 1.0, 1, 1);
    GraphMatrices gm = graph_matrices(g);
    Eigen::VectorXd w = rand_vec(rng, static_cast<int>(gm.q_graph.rows())).cwiseAbs();
    return GroundMetric(w, 0.3, gm.q_graph);
}

}  // namespace

TEST_CASE("wdro: distance examples") {
    GroundMetric id = GroundMetric::identity(3);
    Eigen::VectorXd a(3), b(3);
    a << 1, 2, 3;
    b << 1, 0, 3;
    CHECK(id.dist(a, a) == 0.0);
    CHECK(id.dist(a, b) == doctest::Approx(2.0));
    GroundMetric four = GroundMetric::dense(Eigen::MatrixXd::Constant(1, 1, 4.0));
    Eigen::VectorXd x(1), y(1);
    x << 3;
    y << 0;
    CHECK(four.dist(x, y) == doctest::Approx(6.0));
    CHECK_THROWS_AS(id.dist(a, x), std::invalid_argument);
}

TEST_CASE("wdro: metric axioms on random triples") {
    Rng rng(3);
    GroundMetric m = grid_metric(2, 3, rng);
    const int q = m.dim();
    CHECK(q == 2 * 36);
    for (int t = 0; t < 1000; ++t) {
        Eigen::VectorXd a = rand_vec(rng, q), b = rand_vec(rng, q), c = rand_vec(rng, q);
        const double ab = m.dist(a, b), bc = m.dist(b, c), ac = m.dist(a, c);
        CHECK(ab >= 0.0);
        CHECK(std::abs(ab - m.dist(b, a)) <= 1e-9);
        CHECK(ac <= ab + bc + 1e-9);
    }
}

TEST_CASE("wdro: cholesky distance matches the quadratic form") {
    Rng rng(5);
    GroundMetric m = grid_metric(3, 3, rng);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd v = rand_vec(rng, m.dim());
        CHECK(m.norm(v) == doctest::Approx(std::sqrt(v.dot(m.q() * v))).epsilon(1e-10));
    }
}

TEST_CASE("wdro: subgradient has unit dual norm and vanishes at the kink") {
    Rng rng(7);
    GroundMetric m = grid_metric(2, 2, rng);
    Eigen::VectorXd c = rand_vec(rng, m.dim());
    CHECK(m.subgrad(c, c).norm() == 0.0);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd x = rand_vec(rng, m.dim());
        CHECK(m.dual_norm(m.subgrad(x, c)) == doctest::Approx(1.0).epsilon(1e-9));
    }
    GroundMetric id = GroundMetric::identity(3);
    Eigen::VectorXd e = Eigen::VectorXd::Unit(3, 1);
    CHECK((id.subgrad(e, Eigen::VectorXd::Zero(3)) - e).norm() < 1e-15);
}

TEST_CASE("wdro: support projection") {
    GroundMetric id = GroundMetric::identity(4);
    SupportSet set{Eigen::VectorXd::Constant(4, 2.0), 1.0, 2};
    Eigen::VectorXd inside = set.center;
    inside[0] += 0.3;
    CHECK((project_support(set, id, inside) - inside).norm() == 0.0);

    GroundMetric diag = GroundMetric::dense(Eigen::Vector4d(4, 1, 1, 1).asDiagonal().toDenseMatrix());
    Eigen::VectorXd far = set.center;
    far[1] += 2.0;  // distance 2 = twice the radius along an eigendirection
    Eigen::VectorXd p = project_support(set, diag, far);
    CHECK(p[1] == doctest::Approx(3.0));
    CHECK(diag.dist(p, set.center) == doctest::Approx(1.0));

    SupportSet wide{Eigen::VectorXd::Constant(4, 2.0), 100.0, 2};
    Eigen::VectorXd neg = wide.center;
    neg[0] = -5;
    neg[3] = -5;
    Eigen::VectorXd q = project_support(wide, id, neg);
    CHECK(q[0] == 0.0);
    CHECK(q[3] == 1.0);

    Rng rng(1);
    for (int t = 0; t < 200; ++t) {
        Eigen::VectorXd x = set.center + 3.0 * rand_vec(rng, 4);
        Eigen::VectorXd y = project_support(set, diag, x);
        CHECK(diag.dist(y, set.center) <= set.radius + 1e-6);
        CHECK(y.head(2).minCoeff() >= 0.0);
        CHECK(y.tail(2).minCoeff() >= 1.0);
    }
}

TEST_CASE("wdro: inner minimization on a quadratic toy converges to the analytic minimizer") {
    // f(x) = ||x||^2 + lambda ||x - c||; for lambda < 2 ||c|| the minimizer is (lambda / 2) c / ||c||.
    GroundMetric id = GroundMetric::identity(2);
    Eigen::VectorXd c(2);
    c << 3.0, 4.0;
    const double lambda = 2.0;
    SupportSet set{c, 10.0, 2};
    ValueOracle quad = [](const Eigen::VectorXd& x) { return ValueEval{1.0, x.squaredNorm(), 2.0 * x}; };
    InnerResult r = inner_minimize(quad, id, set, lambda, 200, 0.1);
    Eigen::VectorXd expect = c / c.norm() * (lambda / 2.0);
    CHECK((r.xi_star - expect).norm() < 1e-3);
    CHECK(r.f_star <= r.f_start);
    CHECK(r.rho_hat == doctest::Approx((expect - c).norm()).epsilon(1e-3));

    SupportSet tight{c, 1.0, 0};
    InnerResult b = inner_minimize(quad, id, tight, 0.0, 200, 0.1);
    CHECK((b.xi_star - c * (1.0 - 1.0 / c.norm())).norm() < 1e-3);
}

TEST_CASE("wdro: degenerate radius and dominant penalty keep the empirical point") {
    GroundMetric id = GroundMetric::identity(2);
    Eigen::VectorXd c(2);
    c << 3.0, 4.0;
    ValueOracle lin = [](const Eigen::VectorXd& x) {
        return ValueEval{0.9, x.sum(), Eigen::VectorXd::Ones(2)};
    };
    InnerResult zero = inner_minimize(lin, id, SupportSet{c, 0.0, 0}, 0.5, 10, 0.1);
    CHECK((zero.xi_star - c).norm() == 0.0);
    CHECK(zero.rho_hat == 0.0);
    InnerResult big = inner_minimize(lin, id, SupportSet{c, 5.0, 0}, 1e6, 10, 0.1);
    CHECK((big.xi_star - c).norm() < 1e-6);
}

TEST_CASE("wdro: robust target arithmetic and bound against the non-robust target") {
    InnerResult r;
    r.eval_star = ValueEval{std::pow(0.9, 3), 10.0, {}};
    r.rho_hat = 0.0;
    CHECK(robust_target(1.0, r, 0.0, 0.3) == doctest::Approx(8.29));

    GroundMetric id = GroundMetric::identity(2);
    Eigen::VectorXd c(2);
    c << 2.0, 2.0;
    ValueOracle v = [](const Eigen::VectorXd& x) { return ValueEval{0.95, 3.0 * x[0] - x[1], Eigen::Vector2d(3, -1)}; };
    for (double lambda : {0.0, 0.5, 2.0, 10.0}) {
        InnerResult in = inner_minimize(v, id, SupportSet{c, 1.0, 0}, lambda, 10, 0.05);
        const double nonrobust = 1.0 + 0.95 * (3.0 * c[0] - c[1]);
        CHECK(robust_target(1.0, in, lambda, 0.3) <= nonrobust + lambda * (in.rho_hat - 0.3) + 1e-12);
    }
}

TEST_CASE("wdro: dual update examples") {
    DualState d;
    d.lambda = 0.5;
    d.eta0 = 0.1;
    d.rho_target = 0.2;
    DualState n = dual_update(d, 0.3);
    CHECK(n.lambda == doctest::Approx(0.51));
    CHECK(n.t == 2);
    DualState low{0.05, 0.1, 1, 0.3, 1.0, 0.0};
    CHECK(dual_update(low, 0.0).lambda == 0.0);
    DualState flat{0.7, 0.1, 1, 0.3, 0.2, 0.0};
    for (int i = 0; i < 50; ++i) flat = dual_update(flat, 0.2);
    CHECK(flat.lambda == doctest::Approx(0.7));
}

TEST_CASE("wdro: flatten round trip and resim reproduces the stored successor") {
    HexGrid g = build_grid(3, 3, 1.0, 1, 2);
    auto grid = std::make_shared<HexGrid>(g);
    auto data = std::make_shared<ScenarioDataset>(synth_scenario(g, 6, 2, 4.0, 9));
    auto model = std::make_shared<EnvModel>();
    model->grid = grid;
    model->config.fleet.n_vehicles = 4;
    Episode ep(model, data, 0, 4, 11);
    const SystemState pre = ep.state();
    FeasibleAction act;
    act = project(*model, pre, {}, all_candidates(*model, pre, ep.current_field()), 0.5).action;
    std::vector<Order> arrivals = sample_orders(ep.next_field(), pre.t + 1, ep.arrival_seed());
    ResimCache cache = make_resim_cache(pre, act, arrivals, ep.current_field(), ep.next_field());
    StepOutcome real = ep.advance(act);
    StepOutcome again = resim(*model, cache, cache.xi_hat);
    CHECK(again.reward == real.reward);
    CHECK((again.next.agg.demand_out - real.next.agg.demand_out).norm() == 0.0);
    CHECK(again.durations == real.durations);

    DemandMatrix d;
    TravelMatrix t;
    unflatten_scenario(cache.xi_hat, 9, d, t);
    CHECK((d - ep.data().fields[1].demand).norm() == 0.0);
    CHECK((t - ep.data().fields[0].travel).cwiseAbs().maxCoeff() == 0);
}

TEST_CASE("wdro: demand gradient chain rule against finite differences") {
    const int m = 3;
    Rng rng(2);
    Eigen::MatrixXd coef = Eigen::MatrixXd::Random(m, kFeatureCount);
    const double scale = 2.5;
    auto value = [&](const DemandMatrix& dm) {
        Eigen::VectorXd out = dm.rowwise().sum() / scale;
        Eigen::VectorXd in = dm.colwise().sum().transpose() / scale;
        return coef.col(kDemandOut).dot(out) + coef.col(kDemandIn).dot(in);
    };
    Eigen::VectorXd g = demand_gradient(coef, scale, m);
    DemandMatrix base = DemandMatrix::Random(m, m).cwiseAbs();
    for (int k = 0; k < m * m; ++k) {
        DemandMatrix p = base, n = base;
        p.data()[k] += 1e-6;
        n.data()[k] -= 1e-6;
        CHECK(g[k] == doctest::Approx((value(p) - value(n)) / 2e-6).epsilon(1e-6));
    }
    CHECK(g.tail(m * m).norm() == 0.0);
}

TEST_CASE("theory: contraction, Lipschitz bound and dual tracking") {
    CheckResult c = check_contraction(1);
    CHECK_MESSAGE(c.pass, c.detail);
    CHECK(c.trials == 100);
    CheckResult l = check_lipschitz_bound(2);
    CHECK_MESSAGE(l.pass, l.detail);
    CheckResult d = check_dual_tracking(3);
    CHECK_MESSAGE(d.pass, d.detail);
    MESSAGE(c.detail << " | " << l.detail << " | " << d.detail);
}
