#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hexfleet {

struct CheckResult {
    bool pass = false;
    int trials = 0;
    double worst = 0.0;  ///< worst observed statistic (meaning depends on the check)
    std::string detail;
};

struct ContractionOptions {
    int states = 12;
    int actions = 3;
    int scenarios = 5;  ///< size of the enumerated support set
    double gamma = 0.9;
    double alpha = 0.05;
    double lambda = 0.7;
    int trials = 100;
};

/**
 * Robust soft Bellman operator (sup form) on a random micro semi-MDP with an
 * enumerated scenario set. `worst` is the largest ||TV1 - TV2|| / ||V1 - V2|| over the trials.
 */
CheckResult check_contraction(std::uint64_t seed, const ContractionOptions& opts = {});

struct LipschitzOptions {
    int dim = 4;
    int atoms = 6;
    int pieces = 4;
    double lipschitz = 1.5;
    double rho = 0.3;
    int trials = 50;
};

/**
 * Worst-case expectation over transported empirical distributions against
 * E_hat[g] - L rho for piecewise-linear g that are L-Lipschitz under d_Q.
 * `worst` is the smallest slack inf E_P[g] - (E_hat[g] - L rho).
 */
CheckResult check_lipschitz_bound(std::uint64_t seed, const LipschitzOptions& opts = {});

struct DualTrackingOptions {
    double eta0 = 0.5;
    double rho_target = 0.2;
    double rho_max = 1.0;   ///< response at lambda = 0
    double decay = 2.0;     ///< response rate of the adversary to lambda
    double noise = 0.02;
    std::vector<int> windows{100, 1000, 10000};
};

/**
 * Drives dual_update with a bounded, lambda-responsive realized-radius stream.
 * `worst` is the average violation over the longest window; detail lists all windows.
 */
CheckResult check_dual_tracking(std::uint64_t seed, const DualTrackingOptions& opts = {});

/// Average (rho_hat - target)_+ over each window prefix of a stream, plus the bound G.
struct DualTrace {
    std::vector<double> lambda;
    std::vector<double> rho_hat;
    std::vector<double> window_avg;
    double g_bound = 0.0;
};
DualTrace run_dual_tracking(std::uint64_t seed, const DualTrackingOptions& opts);

}  // namespace hexfleet
