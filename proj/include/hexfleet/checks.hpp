#pragma once

#include "hexfleet/theory.hpp"

#include <cstdint>
#include <iosfwd>

namespace hexfleet {

/// Branch-and-bound against the enumeration oracle on random micro instances.
/// `worst` is the largest objective gap; an instance also fails if its action does not attain the reported objective.
CheckResult check_projection_oracle(std::uint64_t seed, int instances, double time_limit_s = 3.0,
                                    std::ostream* lp_dump = nullptr);

/// Central finite differences of a loss touching every head against the tape, for every tensor and the
/// scenario features. `worst` is the largest relative error (denominator floored at 1e-3).
CheckResult check_gradient_fidelity(std::uint64_t seed, int seeds, double tol = 1e-4);

/// Chi-square of Gumbel-Softmax argmax frequencies against softmax(logits); `worst` is the statistic.
/// Passes when the p-value exceeds 0.01.
CheckResult check_gumbel_law(std::uint64_t seed, int samples = 100000);

/// Trapezoid integral of the squashed power density over [0, P_max]; `worst` is the largest |integral - 1|.
CheckResult check_power_density(double tol = 1e-3);

}  // namespace hexfleet
