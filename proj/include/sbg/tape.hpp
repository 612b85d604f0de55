#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sbg/mat.hpp"
#include "sbg/rng.hpp"

namespace sbg {

class Tape;

// Named trainable (or buffer) matrix. Gradients accumulate across tapes until
// the optimizer consumes them.
struct Param {
    std::string name;
    Mat value;
    Mat grad;
    bool trainable = true;

    void zero_grad() { grad.fill(0.0); }
};

// Handle to a node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
public:
    Var() = default;
    const Mat& val() const;
    const Mat& grad() const;
    int rows() const { return val().rows; }
    int cols() const { return val().cols; }
    int id() const { return id_; }
    Tape* tape() const { return tape_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* t, int id) : tape_(t), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Reverse-mode tape over dense matrices. Ops execute eagerly and record a
// backward closure; backward() visits nodes once in reverse creation order.
// Single-threaded by construction.
class Tape {
public:
    struct Node {
        Mat value;
        Mat grad;
        std::function<void(Tape&)> backward;
        bool needs_grad = false;
    };

    // Leaf with no gradient.
    Var constant(Mat v);
    // Leaf that receives a gradient (inputs under differentiation).
    Var input(Mat v);
    // Leaf tied to a Param; after backward() the node gradient is added to
    // p.grad. Params with trainable=false enter as constants.
    Var param(Param& p);

    int add_node(Mat value, bool needs_grad);
    void set_backward(int id, std::function<void(Tape&)> fn);

    void backward(Var root);

    const Mat& value(int id) const { return nodes_[id].value; }
    Mat& grad_buf(int id);
    const Mat& grad(int id) const { return nodes_[id].grad; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    size_t num_nodes() const { return nodes_.size(); }

    // When set, every op validates that its output is finite.
    bool debug_checks = false;

private:
    std::vector<Node> nodes_;
    std::vector<std::pair<int, Param*>> param_links_;
    bool ran_backward_ = false;
};

inline const Mat& Var::val() const { return tape_->value(id_); }
inline const Mat& Var::grad() const { return tape_->grad(id_); }

// ---- primitive ops -------------------------------------------------------
// Binary ops broadcast a 1xC row or Rx1 column second operand.

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var divide(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var relu(Var a);
Var gelu(Var a);  // tanh approximation
Var sigmoid(Var a);
Var softplus(Var a);
Var log_op(Var a);
Var exp_op(Var a);
Var pow_scalar(Var a, double p);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(Var a, int r0, int r1);
Var slice_cols(Var a, int c0, int c1);
Var transpose(Var a);
Var reshape(Var a, int r, int c);
Var dropout(Var a, double p, Rng& rng, bool active);
// Normalizes over rows (the batch axis), one statistic per column. Training
// mode updates the running buffers in place with the given momentum.
Var batch_norm(Var a, Var gamma, Var beta, Mat& running_mean, Mat& running_var,
               bool train, double momentum = 0.1, double eps = 1e-5);
Var layer_norm(Var a, Var gamma, Var beta, double eps = 1e-5);
Var segment_sum(Var a, const std::vector<int>& seg, int n_segments);
Var segment_mean(Var a, const std::vector<int>& seg, int n_segments);
// Max over each segment; empty segments produce 0. Gradient flows to the
// argmax entry, ties resolved to the lowest row index.
Var segment_max(Var a, const std::vector<int>& seg, int n_segments);
Var row_gather(Var a, const std::vector<int>& idx);
Var scatter_add(Var a, const std::vector<int>& idx, int n_rows);
Var sum_all(Var a);
Var mean_all(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// Max relative error between tape gradients and central finite differences,
// maximized over the coordinates of x: |g_ad - g_fd| / max(1, |g_fd|).
// The builder receives x as a tape input leaf and returns a scalar.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Mat& x, double h = 1e-4);

}  // namespace sbg
