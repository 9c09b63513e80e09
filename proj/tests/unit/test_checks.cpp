#include "doctest.h"

#include "hexfleet/checks.hpp"

#include <sstream>

using namespace hexfleet;

TEST_CASE("checks: projection oracle suite passes and dumps the first instance") {
    std::ostringstream lp;
    CheckResult r = check_projection_oracle(3, 20, 3.0, &lp);
    CHECK(r.pass);
    CHECK(r.trials == 20);
    CHECK(r.worst <= 1e-6);
    CHECK(lp.str().find("Maximize") != std::string::npos);
}

TEST_CASE("checks: gradient fidelity on two seeds") {
    CheckResult r = check_gradient_fidelity(5, 2);
    INFO(r.detail);
    CHECK(r.pass);
    CHECK(r.trials > 100);
}

TEST_CASE("checks: sampling laws") {
    CheckResult g = check_gumbel_law(1, 20000);
    INFO(g.detail);
    CHECK(g.pass);
    CheckResult d = check_power_density();
    INFO(d.detail);
    CHECK(d.pass);
}
