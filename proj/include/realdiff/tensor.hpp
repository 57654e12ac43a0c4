#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "realdiff/errors.hpp"

namespace realdiff {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major array of doubles. Copies share the underlying buffer;
// a tensor recorded on a tape is immutable for the tape's lifetime.
class Tensor {
public:
    Tensor();                                    // rank-0 zero
    explicit Tensor(Shape shape);                // zero-filled
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    // Uniform in [lo, hi); the default weight init uses [-1/sqrt(fan_in), +1/sqrt(fan_in)).
    static Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_->size()); }
    int dim(int i) const;

    const double* data() const { return data_->data(); }
    const std::vector<double>& values() const { return *data_; }
    // In-place access; only legal while the buffer is uniquely owned and off-tape.
    double* mutable_data();

    double item() const;                         // single-element tensors only
    double at(std::initializer_list<int> index) const;

    bool on_tape() const { return node_ >= 0; }
    int node() const { return node_; }
    Tape* tape() const { return tape_; }
    Tensor detached() const;                     // same buffer, no tape node

    bool all_finite() const;
    bool same_values(const Tensor& other) const; // shape + bitwise data equality

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    int node_ = -1;
    Tape* tape_ = nullptr;

    friend class Tape;
};

// RAII guard: while alive on this thread, operations do not record tape nodes.
class GradPause {
public:
    GradPause();
    ~GradPause();
    GradPause(const GradPause&) = delete;
    GradPause& operator=(const GradPause&) = delete;
    static bool recording_enabled();
};

// Reverse-mode tape. Nodes are appended in execution order, so inputs always
// reference earlier nodes; backward() walks them once, in reverse.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a value as a differentiable leaf (parameter or watched input).
    Tensor leaf(const Tensor& t);

    // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
    void backward(const Tensor& loss);

    // Gradient of the last backward() w.r.t. a node on this tape.
    // Nodes the loss never reached get a zero gradient.
    Tensor grad(const Tensor& t) const;

    std::size_t node_count() const { return nodes_.size(); }
    const Tensor& value(int node) const;

    // Op-implementation surface (also used by tests to register custom ops).
    int ensure_node(const Tensor& t);
    Tensor emit(Tensor value, std::vector<int> inputs, BackwardFn backward);
    void accumulate(int node, const double* g, std::int64_t n);
    const std::vector<double>* grad_buffer(int node) const;

private:
    struct Node {
        std::vector<int> inputs;
        Tensor value;
        BackwardFn backward;     // empty for leaves
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

// Picks the common tape of the operands (nullptr if none is being recorded).
// Mixing tensors from two different tapes is a contract violation.
Tape* common_tape(std::span<const Tensor* const> operands);

// --- elementwise / structural operations -----------------------------------

Tensor add(const Tensor& a, const Tensor& b);    // scalar operand broadcasts
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);    // Hadamard; scalar broadcasts
Tensor scale(const Tensor& a, double s);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor concat_lastdim(std::span<const Tensor> parts);
Tensor stack_rows(std::span<const Tensor> rows);     // T tensors [d] -> [T, d]
Tensor slice_lastdim(const Tensor& a, int start, int len);
Tensor take_row(const Tensor& a, int row);           // [T, d] -> [d]
Tensor reshape(const Tensor& a, Shape target);
Tensor reduce_sum(const Tensor& a);                  // -> rank-0
Tensor reduce_mean(const Tensor& a);                 // -> rank-0
Tensor mse(const Tensor& pred, const Tensor& target);

// --- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matvec(const Tensor& a, const Tensor& x);     // [m,k] x [k] -> [m]
Tensor transpose(const Tensor& a);                   // [m,n] -> [n,m]
Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b);  // [T,i]x[i,o]+b

// --- normalization / attention kernels --------------------------------------

inline constexpr double kLayerNormEps = 1e-5;

Tensor softmax_lastdim(const Tensor& a);
// Row-wise softmax of [T,T] score matrix restricted to the causal prefix
// (key index <= query index); entries above the diagonal are exactly zero.
Tensor causal_softmax(const Tensor& logits);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// --- small conv stack for the image encoder ---------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, int pad);                 // [Ci,H,W] x [Co,Ci,kh,kw]
Tensor global_avg_pool(const Tensor& a);            // [C,H,W] -> [C]

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

}  // namespace realdiff
