#pragma once

#include <iosfwd>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace hexfleet::lp {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

enum class RowSense { le, ge, eq };

struct Row {
    std::vector<std::pair<int, double>> coefs;
    RowSense sense = RowSense::le;
    double rhs = 0.0;
    std::string name;
};

/// max c'x  s.t.  rows,  lower <= x <= upper.
struct LinearProgram {
    std::vector<double> objective;
    std::vector<double> lower;
    std::vector<double> upper;
    std::vector<std::string> names;
    std::vector<bool> integer;
    std::vector<Row> rows;
    double objective_offset = 0.0;

    int cols() const { return static_cast<int>(objective.size()); }
    int add_column(std::string name, double obj, double lo, double hi, bool is_integer = false);
    void add_row(Row row) { rows.push_back(std::move(row)); }
    /// max_i violation of rows and bounds at x.
    double max_violation(const std::vector<double>& x) const;
    double evaluate(const std::vector<double>& x) const;
};

enum class Status { optimal, infeasible, unbounded, iteration_limit };

struct Result {
    Status status = Status::infeasible;
    double objective = -kInf;  ///< includes objective_offset
    std::vector<double> x;
    int iterations = 0;
};

struct SimplexOptions {
    double tol = 1e-9;
    /// Consecutive degenerate pivots before switching from Dantzig pricing to Bland's rule.
    int degenerate_switch = 30;
    bool bland_only = false;
    int max_iterations = 200000;
};

/**
 * Bounded-variable two-phase primal simplex on a dense tableau.
 *
 * Bounds in lower/upper override the program's own column bounds when not
 * null (used by branch-and-bound). Lower bounds must be finite.
 */
Result solve(const LinearProgram& prog, const std::vector<double>* lower = nullptr,
             const std::vector<double>* upper = nullptr, const SimplexOptions& opts = {});

/// CPLEX LP text format.
void write_cplex_lp(std::ostream& os, const LinearProgram& prog, const std::string& comment = {});

}  // namespace hexfleet::lp
