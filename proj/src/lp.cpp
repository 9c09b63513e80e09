#include "hexfleet/lp.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace hexfleet::lp {

int LinearProgram::add_column(std::string name, double obj, double lo, double hi, bool is_integer) {
    objective.push_back(obj);
    lower.push_back(lo);
    upper.push_back(hi);
    names.push_back(std::move(name));
    integer.push_back(is_integer);
    return cols() - 1;
}

double LinearProgram::max_violation(const std::vector<double>& x) const {
    double worst = 0.0;
    for (int j = 0; j < cols(); ++j) {
        worst = std::max({worst, lower[j] - x[j], x[j] - upper[j]});
    }
    for (const Row& r : rows) {
        double lhs = 0.0;
        for (auto [j, a] : r.coefs) lhs += a * x[j];
        switch (r.sense) {
            case RowSense::le: worst = std::max(worst, lhs - r.rhs); break;
            case RowSense::ge: worst = std::max(worst, r.rhs - lhs); break;
            case RowSense::eq: worst = std::max(worst, std::abs(lhs - r.rhs)); break;
        }
    }
    return worst;
}

double LinearProgram::evaluate(const std::vector<double>& x) const {
    double v = objective_offset;
    for (int j = 0; j < cols(); ++j) v += objective[j] * x[j];
    return v;
}

namespace {

class Tableau {
public:
    Tableau(const LinearProgram& prog, const std::vector<double>& lo, const std::vector<double>& hi,
            const SimplexOptions& opts)
        : opts_(opts), m_(static_cast<int>(prog.rows.size())), n_(prog.cols()) {
        // Columns: structural, one slack per row, then artificials as needed.
        lo_ = lo;
        hi_ = hi;
        for (const Row& r : prog.rows) {
            switch (r.sense) {
                case RowSense::le: lo_.push_back(0.0); hi_.push_back(kInf); break;
                case RowSense::ge: lo_.push_back(-kInf); hi_.push_back(0.0); break;
                case RowSense::eq: lo_.push_back(0.0); hi_.push_back(0.0); break;
            }
        }
        x_.assign(static_cast<std::size_t>(n_ + m_), 0.0);
        for (int j = 0; j < n_; ++j) {
            if (std::isfinite(lo_[j])) {
                x_[j] = lo_[j];
            } else if (std::isfinite(hi_[j])) {
                x_[j] = hi_[j];
            }
        }
        std::vector<double> resid(static_cast<std::size_t>(m_));
        std::vector<int> art_rows;
        for (int i = 0; i < m_; ++i) {
            double lhs = 0.0;
            for (auto [j, a] : prog.rows[i].coefs) lhs += a * x_[j];
            resid[i] = prog.rows[i].rhs - lhs;
            const int s = n_ + i;
            if (resid[i] < lo_[s] - opts_.tol || resid[i] > hi_[s] + opts_.tol) art_rows.push_back(i);
        }
        ncols_ = n_ + m_ + static_cast<int>(art_rows.size());
        lo_.resize(static_cast<std::size_t>(ncols_), 0.0);
        hi_.resize(static_cast<std::size_t>(ncols_), kInf);
        x_.resize(static_cast<std::size_t>(ncols_), 0.0);
        t_.assign(static_cast<std::size_t>(m_) * ncols_, 0.0);
        basis_.assign(static_cast<std::size_t>(m_), -1);
        for (int i = 0; i < m_; ++i) {
            for (auto [j, a] : prog.rows[i].coefs) at(i, j) += a;
            at(i, n_ + i) = 1.0;
        }
        std::vector<bool> has_art(static_cast<std::size_t>(m_), false);
        for (std::size_t k = 0; k < art_rows.size(); ++k) {
            const int i = art_rows[k];
            const int a = n_ + m_ + static_cast<int>(k);
            has_art[i] = true;
            const double sigma = resid[i] >= 0.0 ? 1.0 : -1.0;
            at(i, a) = sigma;
            // Slack sits at its bound nearest zero; the artificial absorbs the rest.
            x_[n_ + i] = 0.0;
            x_[a] = std::abs(resid[i]);
            basis_[i] = a;
            if (sigma < 0.0) {
                for (int j = 0; j < ncols_; ++j) at(i, j) = -at(i, j);
            }
        }
        for (int i = 0; i < m_; ++i) {
            if (has_art[i]) continue;
            basis_[i] = n_ + i;
            x_[n_ + i] = resid[i];
        }
        is_basic_.assign(static_cast<std::size_t>(ncols_), false);
        for (int b : basis_) is_basic_[b] = true;
        first_art_ = n_ + m_;
    }

    bool has_artificials() const { return ncols_ > first_art_; }

    Status run(const std::vector<double>& cost, int& iterations) {
        cost_ = cost;
        d_ = cost_;
        for (int i = 0; i < m_; ++i) {
            const double cb = cost_[basis_[i]];
            if (cb == 0.0) continue;
            for (int j = 0; j < ncols_; ++j) d_[j] -= cb * at(i, j);
        }
        int degenerate_run = 0;
        while (true) {
            if (iterations >= opts_.max_iterations) return Status::iteration_limit;
            const bool bland = opts_.bland_only || degenerate_run >= opts_.degenerate_switch;
            int q = -1;
            double best = 0.0;
            for (int j = 0; j < ncols_; ++j) {
                if (is_basic_[j] || hi_[j] - lo_[j] <= 0.0) continue;
                const bool can_up = x_[j] < hi_[j] - opts_.tol;
                const bool can_down = x_[j] > lo_[j] + opts_.tol;
                double score = 0.0;
                if (d_[j] < -opts_.tol && can_up) score = -d_[j];
                if (d_[j] > opts_.tol && can_down) score = d_[j];
                if (score <= 0.0) continue;
                if (bland) {
                    q = j;
                    break;
                }
                if (score > best) {
                    best = score;
                    q = j;
                }
            }
            if (q < 0) return Status::optimal;
            ++iterations;
            const double dir = d_[q] < 0.0 ? 1.0 : -1.0;

            double theta = hi_[q] - lo_[q];
            int leave = -1;
            double leave_alpha = 0.0;
            for (int i = 0; i < m_; ++i) {
                const double alpha = dir * at(i, q);
                const int b = basis_[i];
                double limit = kInf;
                if (alpha > opts_.tol) {
                    if (std::isfinite(lo_[b])) limit = (x_[b] - lo_[b]) / alpha;
                } else if (alpha < -opts_.tol) {
                    if (std::isfinite(hi_[b])) limit = (hi_[b] - x_[b]) / -alpha;
                } else {
                    continue;
                }
                limit = std::max(0.0, limit);
                bool take = false;
                if (limit < theta - opts_.tol) {
                    take = true;
                } else if (limit <= theta + opts_.tol && leave >= 0) {
                    take = bland ? b < basis_[leave] : std::abs(alpha) > std::abs(leave_alpha);
                } else if (limit <= theta + opts_.tol && leave < 0 && limit < theta) {
                    take = true;
                }
                if (take) {
                    theta = limit;
                    leave = i;
                    leave_alpha = alpha;
                }
            }
            if (!std::isfinite(theta)) return Status::unbounded;
            degenerate_run = theta <= opts_.tol ? degenerate_run + 1 : 0;

            x_[q] += dir * theta;
            for (int i = 0; i < m_; ++i) {
                const double a = at(i, q);
                if (a != 0.0) x_[basis_[i]] -= dir * theta * a;
            }
            if (leave < 0) {
                x_[q] = dir > 0 ? hi_[q] : lo_[q];  // bound flip
                continue;
            }
            const int out = basis_[leave];
            x_[out] = leave_alpha > 0 ? lo_[out] : hi_[out];
            pivot(leave, q);
        }
    }

    double artificial_sum() const {
        double s = 0.0;
        for (int j = first_art_; j < ncols_; ++j) s += x_[j];
        return s;
    }

    void freeze_artificials() {
        for (int j = first_art_; j < ncols_; ++j) hi_[j] = 0.0;
    }

    std::vector<double> structural() const { return {x_.begin(), x_.begin() + n_}; }
    int ncols() const { return ncols_; }
    int first_artificial() const { return first_art_; }

private:
    double& at(int i, int j) { return t_[static_cast<std::size_t>(i) * ncols_ + j]; }
    double at(int i, int j) const { return t_[static_cast<std::size_t>(i) * ncols_ + j]; }

    void pivot(int r, int q) {
        double* row = &t_[static_cast<std::size_t>(r) * ncols_];
        const double inv = 1.0 / row[q];
        for (int j = 0; j < ncols_; ++j) row[j] *= inv;
        row[q] = 1.0;
        for (int i = 0; i < m_; ++i) {
            if (i == r) continue;
            double* other = &t_[static_cast<std::size_t>(i) * ncols_];
            const double f = other[q];
            if (f == 0.0) continue;
            for (int j = 0; j < ncols_; ++j) other[j] -= f * row[j];
            other[q] = 0.0;
        }
        const double dq = d_[q];
        if (dq != 0.0) {
            for (int j = 0; j < ncols_; ++j) d_[j] -= dq * row[j];
            d_[q] = 0.0;
        }
        is_basic_[basis_[r]] = false;
        basis_[r] = q;
        is_basic_[q] = true;
    }

    SimplexOptions opts_;
    int m_ = 0;
    int n_ = 0;
    int ncols_ = 0;
    int first_art_ = 0;
    std::vector<double> t_;
    std::vector<double> lo_, hi_, x_, cost_, d_;
    std::vector<int> basis_;
    std::vector<bool> is_basic_;
};

}  // namespace

Result solve(const LinearProgram& prog, const std::vector<double>* lower, const std::vector<double>* upper,
             const SimplexOptions& opts) {
    const std::vector<double>& lo = lower ? *lower : prog.lower;
    const std::vector<double>& hi = upper ? *upper : prog.upper;
    for (int j = 0; j < prog.cols(); ++j) {
        if (!std::isfinite(lo[j])) throw std::invalid_argument("lp::solve: lower bounds must be finite");
        if (lo[j] > hi[j] + opts.tol) return {Status::infeasible, -kInf, {}, 0};
    }
    Tableau tab(prog, lo, hi, opts);
    Result res;
    if (tab.has_artificials()) {
        std::vector<double> phase1(static_cast<std::size_t>(tab.ncols()), 0.0);
        for (int j = tab.first_artificial(); j < tab.ncols(); ++j) phase1[j] = 1.0;
        const Status st = tab.run(phase1, res.iterations);
        if (st == Status::iteration_limit) {
            res.status = st;
            return res;
        }
        double scale = 1.0;
        for (const Row& r : prog.rows) scale = std::max(scale, std::abs(r.rhs));
        if (tab.artificial_sum() > 1e-7 * scale) {
            res.status = Status::infeasible;
            return res;
        }
        tab.freeze_artificials();
    }
    std::vector<double> cost(static_cast<std::size_t>(tab.ncols()), 0.0);
    for (int j = 0; j < prog.cols(); ++j) cost[j] = -prog.objective[j];
    res.status = tab.run(cost, res.iterations);
    if (res.status != Status::optimal) return res;
    res.x = tab.structural();
    res.objective = prog.evaluate(res.x);
    return res;
}

namespace {

void write_term(std::ostream& os, double a, const std::string& name, bool first) {
    if (a < 0) {
        os << " - " << -a << ' ' << name;
    } else {
        os << (first ? " " : " + ") << a << ' ' << name;
    }
}

}  // namespace

void write_cplex_lp(std::ostream& os, const LinearProgram& prog, const std::string& comment) {
    const auto old_precision = os.precision(17);
    if (!comment.empty()) os << "\\ " << comment << '\n';
    os << "\\ objective offset " << prog.objective_offset << '\n';
    os << "Maximize\n obj:";
    bool first = true;
    for (int j = 0; j < prog.cols(); ++j) {
        if (prog.objective[j] == 0.0) continue;
        write_term(os, prog.objective[j], prog.names[j], first);
        first = false;
    }
    if (first) os << " 0 " << (prog.cols() > 0 ? prog.names[0] : "x0");
    os << "\nSubject To\n";
    for (std::size_t i = 0; i < prog.rows.size(); ++i) {
        const Row& r = prog.rows[i];
        os << ' ' << (r.name.empty() ? "r" + std::to_string(i) : r.name) << ':';
        bool f = true;
        for (auto [j, a] : r.coefs) {
            write_term(os, a, prog.names[j], f);
            f = false;
        }
        if (f) os << " 0 " << prog.names.front();
        os << (r.sense == RowSense::le ? " <= " : r.sense == RowSense::ge ? " >= " : " = ") << r.rhs << '\n';
    }
    os << "Bounds\n";
    for (int j = 0; j < prog.cols(); ++j) {
        os << ' ' << prog.lower[j] << " <= " << prog.names[j];
        if (std::isfinite(prog.upper[j])) os << " <= " << prog.upper[j];
        os << '\n';
    }
    bool any_int = false;
    for (int j = 0; j < prog.cols(); ++j) {
        if (!prog.integer[j]) continue;
        if (!any_int) os << "Binaries\n";
        any_int = true;
        os << ' ' << prog.names[j] << '\n';
    }
    os << "End\n";
    os.precision(old_precision);
}

}  // namespace hexfleet::lp
