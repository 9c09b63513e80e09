#pragma once

#include "hexfleet/env.hpp"
#include "hexfleet/neural.hpp"
#include "hexfleet/projection.hpp"
#include "hexfleet/scenario.hpp"
#include "hexfleet/wdro.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace hexfleet {

struct TrainConfig {
    double lr_actor = 5e-5;
    double lr_critic = 1e-4;
    double lr_value = 1e-4;
    double gamma = 0.995;
    int buffer = 100000;
    int batch = 128;
    int actor_batch = 0;  ///< states re-projected for the actor loss per update; 0 means the full batch
    double polyak_tau = 0.005;
    double reward_scale = 1.0;
    int episodes = 2000;
    int warmup_steps = 0;  ///< environment steps before the first update; at least one batch is always collected
    int updates_every = 1; ///< environment steps per update
    int log_window = 100;
};

struct AblationFlags {
    bool no_milp = false;
    bool no_wdro = false;
    bool identity_metric = false;
};

struct WdroConfig {
    double rho = 0.3;
    double rho_target = 0.2;
    double beta = 0.3;
    double eta0 = 0.01;
    int inner_k = 5;
    double inner_step = 0.05;
    double ball_radius = 0.0;  ///< support-set radius r_B; 0 means 3 rho
};

struct ProjectionConfig {
    double mu = 0.5;
    double time_limit_s = 3.0;
    int node_limit = 200000;
};

/// One epoch of experience.
struct Transition {
    SystemState pre;
    std::vector<std::vector<Candidate>> cands;
    nn::Mat phi;
    nn::Mat phi_next;
    nn::Mat action_emb;
    FeasibleAction action;
    double reward = 0.0;  ///< scaled
    RewardBreakdown parts;
    double duration = 1.0;  ///< vehicle-weighted epoch duration used as the discount exponent
    std::vector<int> durations;
    Eigen::VectorXd xi_hat;
    ResimCache cache;
};

/// FIFO ring buffer with uniform sampling.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity);
    void push(Transition t);
    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }
    const Transition& at(std::size_t i) const { return items_.at(i); }
    /// Indices drawn uniformly with replacement.
    std::vector<std::size_t> sample(std::size_t n, Rng& rng) const;

private:
    std::size_t capacity_;
    std::deque<Transition> items_;
};

struct EvalMetrics {
    double net_profit = 0.0;  ///< revenue - driving - charging
    double revenue = 0.0;
    double driving_cost = 0.0;
    double charging_cost = 0.0;
    double penalty = 0.0;
    long served = 0;
    long dropped = 0;
    double mean_wait = 0.0;  ///< steps waited by served orders
    long violation_steps = 0;
    double peak_kw = 0.0;
    int episodes = 0;
    long steps = 0;
};

struct StepTrace {
    int episode = 0;
    int t = 0;
    double reward = 0.0;
    RewardBreakdown parts;
    int served = 0;
    int dropped = 0;
    double total_kw = 0.0;
    bool violation = false;
};

/// Column header and row writer for episode trace CSVs.
void write_trace_header(std::ostream& os);
void write_trace_row(std::ostream& os, const StepTrace& s);

struct GreedyOptions {
    int max_pickup_hops = 3;
    double low_soc = 0.2;  ///< fraction of E_max below which a vehicle is sent to charge
};

/**
 * Baseline: low-SoC vehicles charge (or head for the nearest station), the rest
 * take orders by descending immediate profit within the pickup radius.
 */
FeasibleAction greedy_policy(const EnvModel& model, const SystemState& state,
                             const std::vector<std::vector<Candidate>>& cands, const GreedyOptions& opts = {});

/// Everything a policy sees at one epoch.
struct PolicyInput {
    const SystemState& state;
    const std::vector<std::vector<Candidate>>& cands;
    const ScenarioField& field;
    std::uint64_t seed;
};
using Policy = std::function<FeasibleAction(const PolicyInput&)>;

struct EvalOptions {
    int episodes = 10;
    int episode_steps = 24;
    std::uint64_t seed = 0;
};

/// Episode windows are spread evenly over the dataset; arrivals use seeds derived from opts.seed.
EvalMetrics evaluate(const Policy& policy, std::shared_ptr<const EnvModel> model,
                     std::shared_ptr<const ScenarioDataset> data, const EvalOptions& opts,
                     std::vector<StepTrace>* trace = nullptr);

struct MilpCounts {
    long optimal = 0, incumbent_timeout = 0, fallback = 0;
    void add(SolveStatus s);
    std::string str() const;
};

struct TrainLogRow {
    long step = 0;
    double episode_return = 0.0;
    double ma100 = 0.0;
    double loss_q1 = 0.0, loss_q2 = 0.0, loss_pi = 0.0;
    double lambda = 0.0;
    double rho_hat = 0.0;
    MilpCounts milp;
};
void write_train_log_header(std::ostream& os);
void write_train_log_row(std::ostream& os, const TrainLogRow& r);

/// Per-update diagnostics.
struct UpdateStats {
    double loss_q1 = 0.0, loss_q2 = 0.0, loss_v = 0.0, loss_pi = 0.0;
    double rho_hat = 0.0;  ///< batch mean realized radius (0 without the adversary)
    double lambda = 0.0;   ///< after the dual update
    std::vector<double> targets;
};

struct TrainerSetup {
    std::shared_ptr<const EnvModel> model;
    std::shared_ptr<const ScenarioDataset> data;
    TrainConfig train;
    WdroConfig wdro;
    ProjectionConfig projection;
    nn::NetConfig net;
    AblationFlags flags;
    int episode_steps = 24;
    int workers = 1;
    std::uint64_t seed = 0;
};

/**
 * Soft actor-critic with robust critic targets, a primal-dual radius budget
 * and MILP projection of sampled intentions.
 */
class RobustSacTrainer {
public:
    explicit RobustSacTrainer(TrainerSetup setup);

    /// Runs one episode of collection and updates; returns its log row.
    TrainLogRow run_episode();
    /// Runs `episodes` episodes, writing each log row when `log` is set.
    std::vector<TrainLogRow> train(int episodes, std::ostream* log = nullptr);

    /// One gradient update on a minibatch drawn from the buffer.
    UpdateStats update();
    /// Critic targets for the given buffer indices under the current parameters.
    std::vector<double> critic_targets(const std::vector<std::size_t>& idx, std::vector<double>* rho_hat = nullptr) const;
    /// Soft value target min_k Qbar_k(s, a) - alpha * log pi for one stored transition and power noise draw.
    double value_target(const Transition& tr, std::uint64_t seed, double* min_q = nullptr, double* log_pi = nullptr) const;

    /// V(s') with gradient w.r.t. the scenario vector, via re-simulation of the cached step.
    ValueEval value_oracle(const ResimCache& cache, const Eigen::VectorXd& xi) const;
    double value(const nn::Mat& phi) const;

    /// Samples, projects (or executes unprojected) and returns the action for a state.
    FeasibleAction act(const PolicyInput& in, bool deterministic, SolveStatus* status = nullptr,
                       nn::ActorSample* sample = nullptr) const;
    Policy policy(bool deterministic = true) const;

    const nn::ParameterSet& params() const { return params_; }
    nn::ParameterSet& params() { return params_; }
    const DualState& dual() const { return dual_; }
    const ReplayBuffer& buffer() const { return buffer_; }
    const GroundMetric& metric() const { return *metric_; }
    const TrainerSetup& setup() const { return setup_; }
    long steps() const { return env_steps_; }
    const std::vector<double>& rho_trace() const { return rho_trace_; }
    const std::vector<double>& lambda_trace() const { return lambda_trace_; }
    const std::vector<double>& returns() const { return returns_; }

    void save(const std::filesystem::path& dir) const;

private:
    nn::Mat phi_of(const SystemState& s) const;
    double discount(double duration) const;

    TrainerSetup setup_;
    nn::ParameterSet params_;
    nn::Mat a_hat_;
    std::shared_ptr<GroundMetric> metric_;
    DualState dual_;
    ReplayBuffer buffer_;
    nn::Adam opt_critic_, opt_value_, opt_actor_;
    Rng rng_;
    long env_steps_ = 0;
    long updates_ = 0;
    int episode_index_ = 0;
    std::vector<double> returns_;
    std::vector<double> rho_trace_;
    std::vector<double> lambda_trace_;
};

/// Projected (or ablated) trained-actor policy from a checkpointed parameter set.
Policy actor_policy(std::shared_ptr<const EnvModel> model, std::shared_ptr<const nn::ParameterSet> params,
                    const ProjectionConfig& proj, bool no_milp);

/// Greedy baseline as a Policy.
Policy greedy_as_policy(std::shared_ptr<const EnvModel> model, const GreedyOptions& opts = {});

}  // namespace hexfleet
