#include "hexfleet/tape.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace hexfleet::nn {

namespace {

double softplus1(double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); }
double sigmoid1(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

void check_same(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string("tape ") + op + ": shape mismatch");
    }
}

}  // namespace

Var Tape::push(Mat value, std::string name, std::function<void(Tape&, int)> back) {
    Node n;
    n.grad = Mat::Zero(value.rows(), value.cols());
    n.value = std::move(value);
    n.name = std::move(name);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& delta) { nodes_[id].grad += delta; }

Var Tape::constant(Mat value, std::string name) { return push(std::move(value), std::move(name), nullptr); }

Var Tape::leaf(Mat value, std::string name) { return push(std::move(value), std::move(name), nullptr); }

void Tape::backward(Var loss) {
    for (const Node& n : nodes_) {
        if (!n.value.allFinite()) throw NonFiniteError("non-finite value in tape node '" + n.name + "'");
    }
    if (value(loss).size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (Node& n : nodes_) n.grad.setZero();
    nodes_[loss.id].grad(0, 0) = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        if (nodes_[i].back) nodes_[i].back(*this, i);
    }
    for (const Node& n : nodes_) {
        if (!n.grad.allFinite()) throw NonFiniteError("non-finite gradient in tape node '" + n.name + "'");
    }
}

Var Tape::matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows()) throw std::invalid_argument("tape matmul: inner dimensions differ");
    Mat v = value(a) * value(b);
    return push(std::move(v), "matmul", [a, b](Tape& t, int self) {
        const Mat& gs = t.g(self);
        t.accumulate(a.id, gs * t.value(b).transpose());
        t.accumulate(b.id, t.value(a).transpose() * gs);
    });
}

Var Tape::add(Var a, Var b) {
    check_same(value(a), value(b), "add");
    return push(value(a) + value(b), "add", [a, b](Tape& t, int self) {
        t.accumulate(a.id, t.g(self));
        t.accumulate(b.id, t.g(self));
    });
}

Var Tape::sub(Var a, Var b) {
    check_same(value(a), value(b), "sub");
    return push(value(a) - value(b), "sub", [a, b](Tape& t, int self) {
        t.accumulate(a.id, t.g(self));
        t.accumulate(b.id, -t.g(self));
    });
}

Var Tape::mul(Var a, Var b) {
    check_same(value(a), value(b), "mul");
    return push(value(a).cwiseProduct(value(b)), "mul", [a, b](Tape& t, int self) {
        const Mat gs = t.g(self);
        t.accumulate(a.id, gs.cwiseProduct(t.value(b)));
        t.accumulate(b.id, gs.cwiseProduct(t.value(a)));
    });
}

Var Tape::scale(Var a, double c) {
    return push(value(a) * c, "scale", [a, c](Tape& t, int self) { t.accumulate(a.id, t.g(self) * c); });
}

Var Tape::add_scalar(Var a, double c) {
    Mat v = value(a).array() + c;
    return push(std::move(v), "add_scalar", [a](Tape& t, int self) { t.accumulate(a.id, t.g(self)); });
}

Var Tape::add_row(Var a, Var row) {
    if (value(row).rows() != 1 || value(row).cols() != value(a).cols()) {
        throw std::invalid_argument("tape add_row: row shape mismatch");
    }
    Mat v = value(a).rowwise() + value(row).row(0);
    return push(std::move(v), "add_row", [a, row](Tape& t, int self) {
        t.accumulate(a.id, t.g(self));
        t.accumulate(row.id, t.g(self).colwise().sum());
    });
}

Var Tape::mul_col(Var a, Var col) {
    if (value(col).cols() != 1 || value(col).rows() != value(a).rows()) {
        throw std::invalid_argument("tape mul_col: column shape mismatch");
    }
    Mat v = value(a).array().colwise() * value(col).col(0).array();
    return push(std::move(v), "mul_col", [a, col](Tape& t, int self) {
        const Mat gs = t.g(self);
        Mat ga = gs.array().colwise() * t.value(col).col(0).array();
        t.accumulate(a.id, ga);
        t.accumulate(col.id, gs.cwiseProduct(t.value(a)).rowwise().sum());
    });
}

Var Tape::silu(Var a) {
    const Mat& x = value(a);
    Mat v(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) v.data()[i] = x.data()[i] * sigmoid1(x.data()[i]);
    return push(std::move(v), "silu", [a](Tape& t, int self) {
        const Mat& x = t.value(a);
        Mat d(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            const double s = sigmoid1(x.data()[i]);
            d.data()[i] = s * (1.0 + x.data()[i] * (1.0 - s));
        }
        t.accumulate(a.id, t.g(self).cwiseProduct(d));
    });
}

Var Tape::tanh(Var a) {
    Mat v = value(a).array().tanh();
    return push(std::move(v), "tanh", [a](Tape& t, int self) {
        const Mat& y = t.value(Var{self});
        Mat d = 1.0 - y.array().square();
        t.accumulate(a.id, t.g(self).cwiseProduct(d));
    });
}

Var Tape::exp(Var a) {
    Mat v = value(a).array().exp();
    return push(std::move(v), "exp", [a](Tape& t, int self) {
        t.accumulate(a.id, t.g(self).cwiseProduct(t.value(Var{self})));
    });
}

Var Tape::log(Var a) {
    Mat v = value(a).array().log();
    return push(std::move(v), "log", [a](Tape& t, int self) {
        Mat d = t.g(self).array() / t.value(a).array();
        t.accumulate(a.id, d);
    });
}

Var Tape::softplus(Var a) {
    const Mat& x = value(a);
    Mat v(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.size(); ++i) v.data()[i] = softplus1(x.data()[i]);
    return push(std::move(v), "softplus", [a](Tape& t, int self) {
        const Mat& x = t.value(a);
        Mat d(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) d.data()[i] = sigmoid1(x.data()[i]);
        t.accumulate(a.id, t.g(self).cwiseProduct(d));
    });
}

Var Tape::square(Var a) {
    Mat v = value(a).array().square();
    return push(std::move(v), "square", [a](Tape& t, int self) {
        t.accumulate(a.id, 2.0 * t.g(self).cwiseProduct(t.value(a)));
    });
}

Var Tape::clamp(Var a, double lo, double hi) {
    Mat v = value(a).cwiseMax(lo).cwiseMin(hi);
    return push(std::move(v), "clamp", [a, lo, hi](Tape& t, int self) {
        const Mat& x = t.value(a);
        Mat d = t.g(self);
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            if (x.data()[i] < lo || x.data()[i] > hi) d.data()[i] = 0.0;
        }
        t.accumulate(a.id, d);
    });
}

Var Tape::sum(Var a) {
    Mat v(1, 1);
    v(0, 0) = value(a).sum();
    return push(std::move(v), "sum", [a](Tape& t, int self) {
        const Mat& x = t.value(a);
        t.accumulate(a.id, Mat::Constant(x.rows(), x.cols(), t.g(self)(0, 0)));
    });
}

Var Tape::mean(Var a) {
    const double n = static_cast<double>(value(a).size());
    if (n == 0) throw std::invalid_argument("tape mean: empty input");
    return scale(sum(a), 1.0 / n);
}

Var Tape::mean_rows(Var a) {
    const double n = static_cast<double>(value(a).rows());
    if (n == 0) throw std::invalid_argument("tape mean_rows: empty input");
    Mat v = value(a).colwise().sum() / n;
    return push(std::move(v), "mean_rows", [a, n](Tape& t, int self) {
        const Mat& x = t.value(a);
        Mat d = t.g(self).replicate(x.rows(), 1) / n;
        t.accumulate(a.id, d);
    });
}

Var Tape::min(Var a, Var b) {
    check_same(value(a), value(b), "min");
    Mat v = value(a).cwiseMin(value(b));
    return push(std::move(v), "min", [a, b](Tape& t, int self) {
        const Mat& x = t.value(a);
        const Mat& y = t.value(b);
        Mat ga = Mat::Zero(x.rows(), x.cols());
        Mat gb = Mat::Zero(x.rows(), x.cols());
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            (x.data()[i] <= y.data()[i] ? ga : gb).data()[i] = t.g(self).data()[i];
        }
        t.accumulate(a.id, ga);
        t.accumulate(b.id, gb);
    });
}

Var Tape::gather_rows(Var a, const std::vector<int>& rows) {
    const Mat& x = value(a);
    Mat v(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.rows()) throw std::out_of_range("tape gather_rows: row index");
        v.row(static_cast<Eigen::Index>(i)) = x.row(rows[i]);
    }
    return push(std::move(v), "gather_rows", [a, rows](Tape& t, int self) {
        Mat d = Mat::Zero(t.value(a).rows(), t.value(a).cols());
        const Mat& gs = t.g(self);
        for (std::size_t i = 0; i < rows.size(); ++i) d.row(rows[i]) += gs.row(static_cast<Eigen::Index>(i));
        t.accumulate(a.id, d);
    });
}

Var Tape::scatter_add_rows(Var a, const std::vector<int>& seg, int n_out) {
    const Mat& x = value(a);
    if (static_cast<Eigen::Index>(seg.size()) != x.rows()) throw std::invalid_argument("tape scatter_add_rows: size");
    Mat v = Mat::Zero(n_out, x.cols());
    for (std::size_t i = 0; i < seg.size(); ++i) {
        if (seg[i] < 0 || seg[i] >= n_out) throw std::out_of_range("tape scatter_add_rows: segment index");
        v.row(seg[i]) += x.row(static_cast<Eigen::Index>(i));
    }
    return push(std::move(v), "scatter_add_rows", [a, seg](Tape& t, int self) {
        Mat d(static_cast<Eigen::Index>(seg.size()), t.value(a).cols());
        for (std::size_t i = 0; i < seg.size(); ++i) d.row(static_cast<Eigen::Index>(i)) = t.g(self).row(seg[i]);
        t.accumulate(a.id, d);
    });
}

Var Tape::col(Var a, int j) {
    if (j < 0 || j >= value(a).cols()) throw std::out_of_range("tape col: index");
    Mat v = value(a).col(j);
    return push(std::move(v), "col", [a, j](Tape& t, int self) {
        Mat d = Mat::Zero(t.value(a).rows(), t.value(a).cols());
        d.col(j) = t.g(self).col(0);
        t.accumulate(a.id, d);
    });
}

Var Tape::reshape(Var a, int rows, int cols) {
    const Mat& x = value(a);
    if (static_cast<Eigen::Index>(rows) * cols != x.size()) throw std::invalid_argument("tape reshape: size mismatch");
    Mat v = Eigen::Map<const Mat>(x.data(), rows, cols);
    return push(std::move(v), "reshape", [a](Tape& t, int self) {
        const Mat& x = t.value(a);
        t.accumulate(a.id, Eigen::Map<const Mat>(t.g(self).data(), x.rows(), x.cols()));
    });
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("tape concat_cols: no inputs");
    const Eigen::Index r = value(parts[0]).rows();
    Eigen::Index c = 0;
    for (Var p : parts) {
        if (value(p).rows() != r) throw std::invalid_argument("tape concat_cols: row counts differ");
        c += value(p).cols();
    }
    Mat v(r, c);
    Eigen::Index off = 0;
    for (Var p : parts) {
        v.middleCols(off, value(p).cols()) = value(p);
        off += value(p).cols();
    }
    return push(std::move(v), "concat_cols", [parts](Tape& t, int self) {
        Eigen::Index off = 0;
        for (Var p : parts) {
            const Eigen::Index w = t.value(p).cols();
            t.accumulate(p.id, t.g(self).middleCols(off, w));
            off += w;
        }
    });
}

Var Tape::stop_gradient(Var a) { return constant(value(a), "stop_gradient"); }

Var Tape::segment_log_softmax(Var a, const std::vector<int>& seg, int n_seg) {
    const Mat& x = value(a);
    if (x.cols() != 1 || static_cast<Eigen::Index>(seg.size()) != x.rows()) {
        throw std::invalid_argument("tape segment_log_softmax: expects an n x 1 column with n segment ids");
    }
    std::vector<double> mx(n_seg, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < seg.size(); ++i) mx[seg[i]] = std::max(mx[seg[i]], x(static_cast<Eigen::Index>(i), 0));
    std::vector<double> z(n_seg, 0.0);
    for (std::size_t i = 0; i < seg.size(); ++i) z[seg[i]] += std::exp(x(static_cast<Eigen::Index>(i), 0) - mx[seg[i]]);
    Mat v(x.rows(), 1);
    for (std::size_t i = 0; i < seg.size(); ++i) {
        v(static_cast<Eigen::Index>(i), 0) = x(static_cast<Eigen::Index>(i), 0) - mx[seg[i]] - std::log(z[seg[i]]);
    }
    return push(std::move(v), "segment_log_softmax", [a, seg, n_seg](Tape& t, int self) {
        const Mat& y = t.value(Var{self});
        const Mat& gs = t.g(self);
        std::vector<double> gsum(n_seg, 0.0);
        for (std::size_t i = 0; i < seg.size(); ++i) gsum[seg[i]] += gs(static_cast<Eigen::Index>(i), 0);
        Mat d(y.rows(), 1);
        for (std::size_t i = 0; i < seg.size(); ++i) {
            const auto k = static_cast<Eigen::Index>(i);
            d(k, 0) = gs(k, 0) - std::exp(y(k, 0)) * gsum[seg[i]];
        }
        t.accumulate(a.id, d);
    });
}

Var Tape::log_softmax_rows(Var a) {
    const Mat& x = value(a);
    Mat v(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        const double lz = m + std::log((x.row(r).array() - m).exp().sum());
        v.row(r) = x.row(r).array() - lz;
    }
    return push(std::move(v), "log_softmax_rows", [a](Tape& t, int self) {
        const Mat& y = t.value(Var{self});
        const Mat& gs = t.g(self);
        Mat d(y.rows(), y.cols());
        for (Eigen::Index r = 0; r < y.rows(); ++r) {
            d.row(r) = gs.row(r).array() - y.row(r).array().exp() * gs.row(r).sum();
        }
        t.accumulate(a.id, d);
    });
}

}  // namespace hexfleet::nn
