#include "hexfleet/neural.hpp"
#include "hexfleet/hexgrid.hpp"
#include "hexfleet/projection.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <algorithm>
#include <numeric>

using namespace hexfleet;
using namespace hexfleet::nn;

namespace {

NetConfig small_config(int cells, int stations) {
    NetConfig c;
    c.cells = cells;
    c.stations = stations;
    c.hidden = 4;
    c.head_hidden = 5;
    c.scorer_hidden = 3;
    return c;
}

Mat to_mat(const Eigen::MatrixXd& m) { return Mat(m); }

/// Scalar loss over every head, with all discrete data and noise fixed up front.
struct LossFixture {
    MicroCase mc;
    ParameterSet params;
    Mat a_hat, phi;
    ActorContext ctx;
    ActorNoise noise;
    ActorSample sample;
    FeasibleAction action;

    explicit LossFixture(std::uint64_t seed) {
        // Pick a case with at least one idle vehicle and a charge option somewhere.
        for (std::uint64_t s = seed;; ++s) {
            mc = random_micro_case(s, 0.5);
            if (mc.candidates.empty()) continue;
            bool chg = false;
            for (const auto& cs : mc.candidates) {
                for (const Candidate& c : cs) chg = chg || c.kind == ActionKind::charge;
            }
            if (chg) break;
        }
        const int m = mc.model.grid->size();
        params = init_parameters(small_config(m, static_cast<int>(mc.state.stations.size())), seed);
        // Non-zero biases so every tensor carries gradient signal.
        Rng rng(seed + 99);
        std::uniform_real_distribution<double> u(-0.3, 0.3);
        for (Mat& v : params.values) {
            for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += u(rng);
        }
        a_hat = to_mat(graph_matrices(*mc.model.grid).a_hat);
        phi = to_mat(featurize(mc.model, mc.state));
        for (Eigen::Index i = 0; i < phi.size(); ++i) phi.data()[i] += u(rng);
        ctx = make_actor_context(mc.model, mc.state, mc.candidates);
        Rng nr(seed + 7);
        noise = draw_noise(ctx, nr);
        Tape t;
        Binder b(t, params);
        Var e = gcn_forward(b, t.constant(a_hat), t.constant(phi));
        sample = sample_from_heads(t, actor_heads(b, e, ctx), ctx, noise, 0.7);
        MilpInstance inst = build_instance(mc.model, mc.state, sample.intention, mc.candidates, 0.5);
        action = greedy_fallback(inst);
        // Force a charging vehicle into the action when possible so the power STE path is exercised.
        for (std::size_t k = 0; k < mc.candidates.size(); ++k) {
            for (const Candidate& c : mc.candidates[k]) {
                if (c.kind != ActionKind::charge) continue;
                for (VehicleAction& va : action.per_vehicle) {
                    if (va.vehicle == ctx.vehicle[k]) {
                        va.choice = c;
                        va.power_kw = 3.0;
                    }
                }
            }
        }
        action.recompute_totals(static_cast<int>(mc.state.stations.size()));
    }

    /// sum(r * STE embedding) on the tape, and the same quantity rebuilt from the sampler's soft weights.
    double ste_loss(const ParameterSet& p, const Mat& r, std::vector<Mat>* grads) const {
        Tape t;
        Binder b(t, p);
        Var e = gcn_forward(b, t.constant(a_hat), t.constant(phi));
        ActorHeads h = actor_heads(b, e, ctx);
        if (grads) {
            Var emb = ste_action_embedding(t, p.config, mc.state, ctx, h, noise, 0.7, action);
            Var total = t.sum(t.mul(emb, t.constant(r)));
            t.backward(total);
            *grads = zero_gradients(p);
            b.add_gradients(*grads);
            return t.scalar(total);
        }
        const ActorSample smp = sample_from_heads(t, h, ctx, noise, 0.7);
        const double n = static_cast<double>(mc.state.vehicles.size());
        double acc = 0.0;
        for (const VehicleAction& va : action.per_vehicle) {
            const int k = static_cast<int>(std::find(ctx.vehicle.begin(), ctx.vehicle.end(), va.vehicle) - ctx.vehicle.begin());
            int c = 0;
            while (!(mc.candidates[k][c].kind == va.choice.kind && mc.candidates[k][c].order_id == va.choice.order_id &&
                     mc.candidates[k][c].target == va.choice.target)) ++c;
            const double w = smp.intention.joint(k, mc.candidates[k])[c];
            acc += r(0, mode_of(va.choice.kind) * p.config.cells + va.choice.target) * w / n;
            if (va.choice.kind == ActionKind::charge) {
                const StationState& st = mc.state.stations[va.choice.station];
                acc += r(0, kModeCount * p.config.cells + va.choice.station) * smp.intention.p_hat[k] /
                       (st.p_max_kw * st.ports_total);
            }
        }
        return acc;
    }

    /// Returns the loss; when grads is non-null fills parameter gradients and d loss / d phi.
    double loss(const ParameterSet& p, const Mat& phi_in, std::vector<Mat>* grads, Mat* phi_grad) const {
        Tape t;
        Binder b(t, p);
        Var phi_v = t.leaf(phi_in, "phi");
        Var e = gcn_forward(b, t.constant(a_hat, "a_hat"), phi_v);
        ActorHeads h = actor_heads(b, e, ctx);
        Var lp = sample_log_prob(t, h, ctx, sample);
        Var elp = expected_log_prob(t, h, ctx, power_u(t, h, noise));
        Var emb = t.constant(action_embedding(p.config, mc.state, action));
        HeadValues hv = heads_eval(b, e, emb);
        HeadValues ht = heads_eval(b, e, t.constant(action_embedding(p.config, mc.state, action)), true);
        Var total = t.add(t.scale(lp, 0.3), t.scale(elp, 0.2));
        total = t.add(total, t.sum(t.min(hv.q1, hv.q2)));
        total = t.add(total, t.sum(t.square(hv.v)));
        total = t.add(total, t.sum(t.add(ht.q1, t.scale(ht.q2, 0.5))));
        if (grads) {
            t.backward(total);
            *grads = zero_gradients(p);
            b.add_gradients(*grads);
            if (phi_grad) *phi_grad = t.grad(phi_v);
        }
        return t.scalar(total);
    }
};

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3}); }

}  // namespace

TEST_CASE("tape: gradient of sum(W) is all ones") {
    Tape t;
    Mat w = Mat::Random(3, 4);
    Var v = t.leaf(w, "W");
    t.backward(t.sum(v));
    CHECK(t.grad(v).isApprox(Mat::Ones(3, 4)));
}

TEST_CASE("tape: non-finite values are reported with the node name") {
    Tape t;
    Mat w = Mat::Constant(2, 2, -1.0);
    Var v = t.leaf(w, "W");
    Var bad = t.log(v);
    try {
        t.backward(t.sum(bad));
        FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
        CHECK(std::string(e.what()).find("'log'") != std::string::npos);
    }
}

TEST_CASE("tape: elementary ops against finite differences") {
    Rng rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Mat a(3, 4), bm(4, 2), row(1, 2), col(3, 1);
    for (Mat* m : {&a, &bm, &row, &col}) {
        for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = u(rng);
    }
    auto f = [&](const Mat& x, Mat* g) {
        Tape t;
        Var xa = t.leaf(x, "a");
        Var y = t.add_row(t.matmul(t.tanh(xa), t.constant(bm)), t.constant(row));
        y = t.mul_col(t.softplus(y), t.exp(t.constant(col)));
        Var z = t.reshape(t.concat_cols({y, t.silu(t.col(xa, 1))}), 9, 1);
        Var ls = t.segment_log_softmax(z, {0, 0, 1, 1, 1, 2, 2, 2, 2}, 3);
        Var s = t.add(t.sum(t.mul(ls, t.gather_rows(z, {8, 7, 6, 5, 4, 3, 2, 1, 0}))),
                      t.mean(t.log_softmax_rows(t.scatter_add_rows(xa, {1, 0, 1}, 2))));
        s = t.add(s, t.sum(t.min(t.mean_rows(xa), t.scale(t.mean_rows(t.square(xa)), 0.7))));
        if (g) {
            t.backward(s);
            *g = t.grad(xa);
        }
        return t.scalar(s);
    };
    Mat g;
    f(a, &g);
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        Mat p = a, m = a;
        p.data()[i] += 1e-5;
        m.data()[i] -= 1e-5;
        const double fd = (f(p, nullptr) - f(m, nullptr)) / 2e-5;
        CHECK(rel_err(fd, g.data()[i]) < 1e-4);
    }
}

TEST_CASE("neural: every parameter tensor and the scenario input match finite differences") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        LossFixture fx(seed * 31);
        std::vector<Mat> grads;
        Mat phi_grad;
        fx.loss(fx.params, fx.phi, &grads, &phi_grad);
        const double h = 1e-5;
        for (std::size_t k = 0; k < fx.params.size(); ++k) {
            const Mat& v = fx.params.values[k];
            double worst = 0.0;
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                ParameterSet p = fx.params, m = fx.params;
                p.values[k].data()[i] += h;
                m.values[k].data()[i] -= h;
                const double fd = (fx.loss(p, fx.phi, nullptr, nullptr) - fx.loss(m, fx.phi, nullptr, nullptr)) / (2 * h);
                worst = std::max(worst, rel_err(fd, grads[k].data()[i]));
            }
            INFO("seed " << seed << " tensor " << fx.params.names[k]);
            CHECK(worst < 1e-4);
        }
        double worst = 0.0;
        for (Eigen::Index i = 0; i < fx.phi.size(); ++i) {
            Mat p = fx.phi, m = fx.phi;
            p.data()[i] += h;
            m.data()[i] -= h;
            const double fd = (fx.loss(fx.params, p, nullptr, nullptr) - fx.loss(fx.params, m, nullptr, nullptr)) / (2 * h);
            worst = std::max(worst, rel_err(fd, phi_grad.data()[i]));
        }
        INFO("seed " << seed << " phi");
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("neural: straight-through gradients follow the selected joint weights and power") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        LossFixture fx(seed * 13);
        Mat r = Mat::Random(1, fx.params.config.action_dim());
        std::vector<Mat> grads;
        fx.ste_loss(fx.params, r, &grads);
        const double h = 1e-5;
        for (std::size_t k = 0; k < fx.params.size(); ++k) {
            if (!has_prefix(fx.params.names[k], "actor.") && !has_prefix(fx.params.names[k], "gcn.")) continue;
            double worst = 0.0;
            const Mat& v = fx.params.values[k];
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                ParameterSet p = fx.params, m = fx.params;
                p.values[k].data()[i] += h;
                m.values[k].data()[i] -= h;
                const double fd = (fx.ste_loss(p, r, nullptr) - fx.ste_loss(m, r, nullptr)) / (2 * h);
                worst = std::max(worst, rel_err(fd, grads[k].data()[i]));
            }
            INFO("seed " << seed << " tensor " << fx.params.names[k]);
            CHECK(worst < 1e-4);
        }
    }
}

TEST_CASE("neural: STE embedding carries the projected action value") {
    LossFixture fx(5);
    Tape t;
    Binder b(t, fx.params);
    Var e = gcn_forward(b, t.constant(fx.a_hat), t.constant(fx.phi));
    ActorHeads h = actor_heads(b, e, fx.ctx);
    Var emb = ste_action_embedding(t, fx.params.config, fx.mc.state, fx.ctx, h, fx.noise, 0.7, fx.action);
    CHECK((t.value(emb) - action_embedding(fx.params.config, fx.mc.state, fx.action)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("neural: gcn examples") {
    NetConfig c = small_config(1, 0);
    ParameterSet p = init_parameters(c, 4);
    SUBCASE("zero weights give zero embeddings") {
        for (const char* n : {"gcn.W0", "gcn.b0", "gcn.W1", "gcn.b1"}) p.at(n).setZero();
        Tape t;
        Binder b(t, p);
        Var e = gcn_forward(b, t.constant(Mat::Identity(1, 1)), t.constant(Mat::Random(1, c.features)));
        CHECK(t.value(e).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("single node reduces to a two-layer MLP") {
        Mat x = Mat::Random(1, c.features);
        Tape t;
        Binder b(t, p);
        Var e = gcn_forward(b, t.constant(Mat::Identity(1, 1)), t.constant(x));
        auto silu = [](const Mat& z) { return Mat(z.array() / (1.0 + (-z.array()).exp())); };
        Mat h1 = silu(x * p.at("gcn.W0") + p.at("gcn.b0"));
        Mat ref = silu(h1 * p.at("gcn.W1") + p.at("gcn.b1"));
        CHECK((t.value(e) - ref).cwiseAbs().maxCoeff() < 1e-12);
    }
    SUBCASE("shape mismatch is rejected") {
        Tape t;
        Binder b(t, p);
        CHECK_THROWS_AS(gcn_forward(b, t.constant(Mat::Identity(2, 2)), t.constant(Mat::Random(1, c.features))),
                        std::invalid_argument);
    }
}

TEST_CASE("neural: gcn is permutation equivariant") {
    HexGrid g = build_grid(4, 4, 1.0, 2, 9, {}, 1);
    const Mat a = to_mat(graph_matrices(g).a_hat);
    ParameterSet p = init_parameters(small_config(16, 2), 11);
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        Mat x(16, p.config.features);
        std::normal_distribution<double> nd;
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
        std::vector<int> perm(16);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        Mat pm = Mat::Zero(16, 16);
        for (int i = 0; i < 16; ++i) pm(i, perm[i]) = 1.0;
        auto run = [&](const Mat& am, const Mat& xm) {
            Tape t;
            Binder b(t, p);
            return Mat(t.value(gcn_forward(b, t.constant(am), t.constant(xm))));
        };
        const Mat e = run(a, x);
        const Mat ep = run(pm * a * pm.transpose(), pm * x);
        CHECK((ep - pm * e).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("neural: gumbel argmax follows the categorical law") {
    const std::vector<double> logits{0.5, -0.3, 1.2, 0.0};
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    Rng rng(2024);
    const int n = 100000;
    std::vector<int> counts(logits.size(), 0);
    for (int i = 0; i < n; ++i) {
        int best = 0;
        double bv = -1e300;
        for (std::size_t k = 0; k < logits.size(); ++k) {
            const double v = logits[k] + sample_gumbel(rng);
            if (v > bv) {
                bv = v;
                best = static_cast<int>(k);
            }
        }
        ++counts[best];
    }
    double chi2 = 0.0;
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const double e = n * std::exp(logits[k]) / z;
        chi2 += (counts[k] - e) * (counts[k] - e) / e;
    }
    // 99th percentile of chi-square with 3 degrees of freedom.
    CHECK(chi2 < 11.345);
}

TEST_CASE("neural: gumbel-softmax weights are a distribution") {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> l(5), g(5);
        for (std::size_t i = 0; i < 5; ++i) {
            l[i] = sample_gumbel(rng);
            g[i] = sample_gumbel(rng);
        }
        const std::vector<double> w = gumbel_softmax(l, g, 0.3 + 0.1 * (trial % 8));
        CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
        for (double x : w) CHECK(x >= 0.0);
    }
}

TEST_CASE("neural: squashed power density integrates to one") {
    const double p_max = 50.0;
    for (auto [mu, ls] : std::vector<std::pair<double, double>>{{0.0, 0.0}, {0.8, -0.5}, {-1.2, -1.0}, {0.3, -3.0}}) {
        const int n = 400000;
        double acc = 0.0;
        double prev = 0.0;
        for (int i = 1; i < n; ++i) {
            const double p = p_max * i / n;
            const double f = std::exp(squashed_log_density(p, mu, ls, p_max));
            acc += 0.5 * (prev + f) * (p_max / n);
            prev = f;
        }
        acc += 0.5 * prev * (p_max / n);
        INFO("mu " << mu << " log sigma " << ls);
        CHECK(std::abs(acc - 1.0) < 1e-3);
    }
}

TEST_CASE("neural: tape power density matches the closed form") {
    Tape t;
    Mat mu(3, 1), ls(3, 1), u(3, 1), pm(3, 1);
    mu << 0.2, -0.4, 1.0;
    ls << -0.3, 0.1, -1.5;
    u << 0.5, -2.0, 3.0;
    pm << 50.0, 22.0, 0.0;
    Var d = power_log_density(t, t.constant(mu), t.constant(ls), t.constant(u), pm);
    for (int i = 0; i < 2; ++i) {
        const double p = 0.5 * pm(i, 0) * (1.0 + std::tanh(u(i, 0)));
        CHECK(t.value(d)(i, 0) == doctest::Approx(squashed_log_density(p, mu(i, 0), ls(i, 0), pm(i, 0))).epsilon(1e-9));
    }
    CHECK(t.value(d)(2, 0) == 0.0);
}

TEST_CASE("neural: actor sample is consistent with its log-probability") {
    LossFixture fx(17);
    const ActorSample& s = fx.sample;
    Tape t;
    Binder b(t, fx.params);
    Var e = gcn_forward(b, t.constant(fx.a_hat), t.constant(fx.phi));
    ActorHeads h = actor_heads(b, e, fx.ctx);
    CHECK(t.scalar(sample_log_prob(t, h, fx.ctx, s)) == doctest::Approx(s.log_prob).epsilon(1e-10));
    for (std::size_t k = 0; k < s.intention.mode.size(); ++k) {
        double sum = 0.0;
        for (double w : s.intention.mode[k]) sum += w;
        CHECK(sum == doctest::Approx(1.0));
        CHECK(s.intention.p_hat[k] >= 0.0);
        CHECK(s.intention.p_hat[k] <= fx.ctx.p_max[k] + 1e-12);
        CHECK(s.pick[k] >= 0);
    }
}

TEST_CASE("neural: heads examples") {
    NetConfig c = small_config(4, 1);
    ParameterSet p = init_parameters(c, 8);
    Mat emb_v = Mat::Random(4, c.hidden);
    Mat act = Mat::Random(1, c.action_dim());
    SUBCASE("zero parameters give zero outputs") {
        for (Mat& v : p.values) v.setZero();
        Tape t;
        Binder b(t, p);
        HeadValues hv = heads_eval(b, t.constant(emb_v), t.constant(act));
        CHECK(t.scalar(hv.q1) == 0.0);
        CHECK(t.scalar(hv.q2) == 0.0);
        CHECK(t.scalar(hv.v) == 0.0);
    }
    SUBCASE("identical critics agree exactly") {
        for (const char* n : {"W0", "b0", "W1", "b1"}) p.at(std::string("q2.") + n) = p.at(std::string("q1.") + n);
        Tape t;
        Binder b(t, p);
        HeadValues hv = heads_eval(b, t.constant(emb_v), t.constant(act));
        CHECK(t.scalar(hv.q1) == t.scalar(hv.q2));
    }
}

TEST_CASE("neural: polyak averaging") {
    ParameterSet p = init_parameters(small_config(4, 1), 3);
    for (Mat& v : p.values) v.setRandom();
    const ParameterSet before = p;
    polyak(p, 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.values[i] == before.values[i]);
    ParameterSet q = p;
    polyak(q, 1.0);
    CHECK(q.at("q1_target.W0") == q.at("q1.W0"));
    CHECK(q.at("q2_target.b1") == q.at("q2.b1"));
    // Frozen online net: the gap shrinks by exactly (1 - tau) per update.
    ParameterSet r = p;
    const double tau = 0.1;
    const Mat gap0 = r.at("q1_target.W1") - r.at("q1.W1");
    for (int k = 0; k < 25; ++k) polyak(r, tau);
    const Mat gap = r.at("q1_target.W1") - r.at("q1.W1");
    CHECK((gap - std::pow(1.0 - tau, 25) * gap0).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("neural: adam with zero learning rate leaves parameters bitwise unchanged") {
    ParameterSet p = init_parameters(small_config(4, 1), 3);
    const ParameterSet before = p;
    Adam opt(p, tensors_with_prefix(p, {"q1.", "actor."}), 0.0);
    std::vector<Mat> g = zero_gradients(p);
    for (Mat& m : g) m.setRandom();
    for (int k = 0; k < 10; ++k) opt.step(p, g);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p.values[i] == before.values[i]);
}

TEST_CASE("neural: checkpoint round trip") {
    ParameterSet p = init_parameters(small_config(9, 2), 21);
    p.step = 123;
    const auto dir = std::filesystem::temp_directory_path() / "hexfleet_ckpt_test";
    std::filesystem::remove_all(dir);
    save_checkpoint(p, dir, {{"lambda", 0.25}});
    std::map<std::string, double> extra;
    ParameterSet q = load_checkpoint(dir, &extra);
    CHECK(q.step == 123);
    CHECK(extra.at("lambda") == 0.25);
    REQUIRE(q.size() == p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        CHECK(q.names[i] == p.names[i]);
        CHECK(q.values[i] == p.values[i]);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("neural: temperature schedule") {
    ParameterSet p = init_parameters(small_config(4, 1), 1);
    CHECK(p.tau() == 1.0);
    p.step = 1000;
    CHECK(p.tau() == doctest::Approx(std::pow(0.9995, 1000)));
    p.step = 100000;
    CHECK(p.tau() == 0.3);
}
