#pragma once

#include "hexfleet/action.hpp"
#include "hexfleet/env.hpp"
#include "hexfleet/projection.hpp"
#include "hexfleet/rng.hpp"
#include "hexfleet/tape.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace hexfleet::nn {

struct NetConfig {
    int features = kFeatureCount;
    int cells = 25;
    int stations = 2;
    int hidden = 64;         ///< GCN width
    int head_hidden = 64;    ///< mode, power, critic and value MLPs
    int scorer_hidden = 32;  ///< per-mode target scorers
    double alpha = 0.05;
    double tau_start = 1.0;
    double tau_decay = 0.9995;
    double tau_min = 0.3;
    double log_sigma_min = -5.0;
    double log_sigma_max = 2.0;

    int action_dim() const { return kModeCount * cells + stations; }
};

/// Extra per-vehicle inputs of the mode head, per-vehicle inputs of the power head, per-candidate scalars.
inline constexpr int kVehicleExtra = 3;
inline constexpr int kPowerExtra = 2;
inline constexpr int kCandidateExtra = 5;

/// Named parameter tensors plus the schedule state.
struct ParameterSet {
    NetConfig config;
    std::vector<std::string> names;
    std::vector<Mat> values;
    long step = 0;

    int index(const std::string& name) const;
    Mat& at(const std::string& name) { return values[static_cast<std::size_t>(index(name))]; }
    const Mat& at(const std::string& name) const { return values[static_cast<std::size_t>(index(name))]; }
    std::size_t size() const { return values.size(); }
    bool all_finite() const;
    /// Gumbel temperature at the current step.
    double tau() const;
};

/// Xavier-uniform weights, zero biases; target critics start equal to the online critics.
ParameterSet init_parameters(const NetConfig& cfg, std::uint64_t seed);

/// Tensor name prefixes.
inline const std::vector<std::string> kCriticPrefixes{"q1.", "q2."};
bool has_prefix(const std::string& name, const std::string& prefix);

/// target <- (1 - tau) target + tau online for every q{1,2}_target tensor.
void polyak(ParameterSet& params, double tau);

/// Binds parameter tensors to tape leaves on first use and collects their gradients.
class Binder {
public:
    Binder(Tape& tape, const ParameterSet& params);
    Var get(const std::string& name);
    Tape& tape() { return tape_; }
    const ParameterSet& params() const { return params_; }
    /// Adds d loss / d param into grads (sized like params.values) for every bound tensor.
    void add_gradients(std::vector<Mat>& grads) const;

private:
    Tape& tape_;
    const ParameterSet& params_;
    std::vector<Var> bound_;
};

std::vector<Mat> zero_gradients(const ParameterSet& params);

/// E = SiLU(A (SiLU(A Phi W0 + b0)) W1 + b1).
Var gcn_forward(Binder& b, Var a_hat, Var phi);
/// Linear, SiLU, linear with tensors <prefix>W0, b0, W1, b1.
Var mlp2(Binder& b, const std::string& prefix, Var x);

/// Flattened candidate context of one epoch, aligned with all_candidates().
struct ActorContext {
    std::vector<int> vehicle;      ///< SystemState vehicle index per idle vehicle
    std::vector<int> veh_hex;
    Mat veh_feat;                  ///< n_v x kVehicleExtra: SoC, serve options / 10, at a station
    Mat power_feat;                ///< n_v x kPowerExtra: SoC, price
    std::vector<double> p_max;     ///< station rating for vehicles with a charge option, else 0
    std::vector<std::array<bool, kModeCount>> has_mode;

    std::vector<int> cand_vehicle;  ///< per flattened candidate
    std::vector<int> cand_mode;
    std::vector<int> cand_index;    ///< position inside the vehicle's candidate list
    std::vector<int> cand_target;
    Mat cand_feat;                  ///< n_c x kCandidateExtra
    std::vector<Candidate> cand;
    std::vector<int> offset;        ///< start of each vehicle's candidates; size n_v + 1

    int vehicles() const { return static_cast<int>(veh_hex.size()); }
    int candidates() const { return static_cast<int>(cand_vehicle.size()); }
    int group(int c) const { return cand_vehicle[c] * kModeCount + cand_mode[c]; }
};

ActorContext make_actor_context(const EnvModel& model, const SystemState& state,
                                const std::vector<std::vector<Candidate>>& cands);

/// Policy head outputs for one state.
struct ActorHeads {
    Var mode_logp;     ///< available (vehicle, mode) pairs as a column, log-softmax per vehicle
    Var target_logp;   ///< n_c x 1, log-softmax inside each (vehicle, mode) group
    Var mu;            ///< n_v x 1
    Var log_sigma;     ///< n_v x 1, clamped
    std::vector<int> mode_row;  ///< [vehicle * kModeCount + mode] -> row of mode_logp, or -1
};

ActorHeads actor_heads(Binder& b, Var emb, const ActorContext& ctx);

/// Random draws that fix one reparameterized sample.
struct ActorNoise {
    std::vector<double> mode_gumbel;    ///< n_v * kModeCount
    std::vector<double> target_gumbel;  ///< n_c
    std::vector<double> eps;            ///< n_v
};
ActorNoise draw_noise(const ActorContext& ctx, Rng& rng);

struct ActorSample {
    Intention intention;
    std::vector<int> mode;    ///< hard (argmax) mode per vehicle
    std::vector<int> pick;    ///< hard candidate index per vehicle
    std::vector<double> u;    ///< pre-squash power
    double log_prob = 0.0;    ///< categorical log-probs of the hard choices plus the power density
};

/// Gumbel-Softmax weights at temperature tau and the squashed Gaussian power.
ActorSample sample_from_heads(const Tape& tape, const ActorHeads& h, const ActorContext& ctx,
                              const ActorNoise& noise, double tau);

/// Samples an intention for one state.
ActorSample actor_sample(const ParameterSet& params, const Mat& a_hat, const Mat& phi, const ActorContext& ctx,
                         std::uint64_t seed);

/// log N(u; mu, sigma) - log(dp/du) for p = (p_max / 2)(1 + tanh u).
Var power_log_density(Tape& t, Var mu, Var log_sigma, Var u, const Mat& p_max);
double squashed_log_density(double p_hat, double mu, double log_sigma, double p_max);

/// Reparameterized u = mu + sigma * eps.
Var power_u(Tape& t, const ActorHeads& h, const ActorNoise& noise);

/// log pi of the hard choices in `s` plus the power term, differentiable in the head outputs.
Var sample_log_prob(Tape& t, const ActorHeads& h, const ActorContext& ctx, const ActorSample& s);
/// Mode and target terms averaged over the current categorical law (exact entropy), power term at `u`.
Var expected_log_prob(Tape& t, const ActorHeads& h, const ActorContext& ctx, Var u);

/// Softmax of (log p + g) / tau inside segments; returns weights as a column.
std::vector<double> gumbel_softmax(const std::vector<double>& logits, const std::vector<double>& gumbel, double tau);
double sample_gumbel(Rng& rng);

/// Normalized per-hex chosen-mode counts and per-station power of a feasible action.
Mat action_embedding(const NetConfig& cfg, const SystemState& state, const FeasibleAction& a);

struct HeadValues {
    Var q1, q2, v;
};
/// Critics over [mean-pooled E, action embedding]; value over pooled E. `target` selects q{1,2}_target.
HeadValues heads_eval(Binder& b, Var emb, Var action, bool target = false);

/**
 * Embedding of the projected action with straight-through gradients: the value
 * is action_embedding(a); the gradient flows to the joint weight of each vehicle's
 * selected candidate and, for charging vehicles, to the sampled power.
 */
Var ste_action_embedding(Tape& t, const NetConfig& cfg, const SystemState& state, const ActorContext& ctx,
                         const ActorHeads& h, const ActorNoise& noise, double tau, const FeasibleAction& a);

/// Adam over a subset of tensors.
class Adam {
public:
    Adam() = default;
    Adam(const ParameterSet& params, std::vector<int> tensors, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8);
    void step(ParameterSet& params, const std::vector<Mat>& grads);
    double lr() const { return lr_; }
    const std::vector<int>& tensors() const { return tensors_; }

private:
    std::vector<int> tensors_;
    std::vector<Mat> m_, v_;
    double lr_ = 1e-3, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
};

/// Tensor indices whose names start with any of the prefixes.
std::vector<int> tensors_with_prefix(const ParameterSet& params, const std::vector<std::string>& prefixes);

/// manifest.json plus <name>.f64 (little-endian doubles) per tensor.
void save_checkpoint(const ParameterSet& params, const std::filesystem::path& dir,
                     const std::map<std::string, double>& extra = {});
ParameterSet load_checkpoint(const std::filesystem::path& dir, std::map<std::string, double>* extra = nullptr);

}  // namespace hexfleet::nn
