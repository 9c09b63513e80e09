#pragma once

#include <Eigen/Dense>

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace hexfleet::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/**
 * Reverse-mode tape over dense row-major matrices.
 *
 * Every op appends a node holding its value and a closure that pushes the
 * node's gradient to its inputs. backward() runs the closures in reverse
 * creation order, so the tape is single-use per loss.
 */
class Tape {
public:
    Var constant(Mat value, std::string name = "const");
    /// Leaf whose gradient is kept (parameters and differentiable inputs).
    Var leaf(Mat value, std::string name);

    const Mat& value(Var v) const { return nodes_.at(v.id).value; }
    const Mat& grad(Var v) const { return nodes_.at(v.id).grad; }
    double scalar(Var v) const { return value(v)(0, 0); }
    const std::string& name(Var v) const { return nodes_.at(v.id).name; }
    std::size_t size() const { return nodes_.size(); }

    /// Seeds d loss / d loss = 1. Throws NonFiniteError naming the first non-finite node.
    void backward(Var loss);

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);             ///< elementwise
    Var scale(Var a, double c);
    Var add_scalar(Var a, double c);
    Var add_row(Var a, Var row);       ///< broadcast a 1 x n row over the rows of a
    Var mul_col(Var a, Var col);       ///< scale each row of a by the matching entry of an r x 1 column
    Var silu(Var a);
    Var tanh(Var a);
    Var exp(Var a);
    Var log(Var a);
    Var softplus(Var a);
    Var square(Var a);
    Var clamp(Var a, double lo, double hi);  ///< zero gradient where clamped
    Var sum(Var a);                    ///< 1 x 1
    Var mean(Var a);                   ///< 1 x 1
    Var mean_rows(Var a);              ///< 1 x cols
    Var min(Var a, Var b);             ///< elementwise, gradient to the smaller input
    Var gather_rows(Var a, const std::vector<int>& rows);
    /// out[seg[i]] += a[i] for row vectors; result has n_out rows.
    Var scatter_add_rows(Var a, const std::vector<int>& seg, int n_out);
    Var col(Var a, int j);
    Var reshape(Var a, int rows, int cols);  ///< row-major reinterpretation
    Var concat_cols(const std::vector<Var>& parts);
    Var stop_gradient(Var a);
    /// Log-softmax of an n x 1 column within segments seg[i] in [0, n_seg).
    Var segment_log_softmax(Var a, const std::vector<int>& seg, int n_seg);
    /// Row-wise log-softmax of an r x c matrix.
    Var log_softmax_rows(Var a);

private:
    struct Node {
        Mat value;
        Mat grad;
        std::string name;
        std::function<void(Tape&, int)> back;
    };
    Var push(Mat value, std::string name, std::function<void(Tape&, int)> back);
    Mat& g(int id) { return nodes_[id].grad; }
    void accumulate(int id, const Mat& delta);

    std::vector<Node> nodes_;
};

}  // namespace hexfleet::nn
