#include "realdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace realdiff {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_shape_valid(const Shape& shape) {
    for (int d : shape) {
        if (d <= 0) throw ShapeError("dimension sizes must be positive, got " + shape_str(shape));
    }
}

}  // namespace

// --- Tensor ------------------------------------------------------------------

Tensor::Tensor() : shape_{}, data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape_valid(shape_);
    data_ = std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
    check_shape_valid(shape_);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape_)) {
        throw ShapeError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape_));
    }
    data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, std::vector<double>{v}); }

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    std::fill(t.data_->begin(), t.data_->end(), v);
    return t;
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    for (double& v : *t.data_) {
        // 53-bit mantissa draw; avoids the implementation-defined distribution adapters
        v = lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
    }
    return t;
}

int Tensor::dim(int i) const {
    if (i < 0 || i >= rank()) throw BoundsError("dim index " + std::to_string(i) +
                                                " out of range for " + shape_str(shape_));
    return shape_[i];
}

double* Tensor::mutable_data() {
    if (node_ >= 0) throw ContractError("cannot mutate a tensor recorded on a tape");
    if (data_.use_count() > 1) {
        data_ = std::make_shared<std::vector<double>>(*data_);
    }
    return data_->data();
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item() requires a single-element tensor, got " +
                                         shape_str(shape_));
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> index) const {
    if (static_cast<int>(index.size()) != rank()) {
        throw BoundsError("index rank mismatch for " + shape_str(shape_));
    }
    std::int64_t flat = 0;
    int axis = 0;
    for (int i : index) {
        if (i < 0 || i >= shape_[axis]) throw BoundsError("index out of range for " + shape_str(shape_));
        flat = flat * shape_[axis] + i;
        ++axis;
    }
    return (*data_)[flat];
}

Tensor Tensor::detached() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
}

bool Tensor::all_finite() const {
    for (double v : *data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

bool Tensor::same_values(const Tensor& other) const {
    return shape_ == other.shape_ &&
           std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

// --- GradPause ---------------------------------------------------------------

namespace {
thread_local int g_grad_pause_depth = 0;
}

GradPause::GradPause() { ++g_grad_pause_depth; }
GradPause::~GradPause() { --g_grad_pause_depth; }
bool GradPause::recording_enabled() { return g_grad_pause_depth == 0; }

// --- Tape --------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& t) {
    if (t.node_ >= 0) {
        if (t.tape_ != this) throw ContractError("tensor already belongs to another tape");
        return t;
    }
    Tensor reg = t;
    reg.node_ = static_cast<int>(nodes_.size());
    reg.tape_ = this;
    nodes_.push_back(Node{{}, reg, nullptr});
    return reg;
}

int Tape::ensure_node(const Tensor& t) {
    if (t.node_ >= 0) {
        if (t.tape_ != this) throw ContractError("tensor already belongs to another tape");
        return t.node_;
    }
    Tensor reg = t;
    reg.node_ = static_cast<int>(nodes_.size());
    reg.tape_ = this;
    nodes_.push_back(Node{{}, reg, nullptr});
    return reg.node_;
}

Tensor Tape::emit(Tensor value, std::vector<int> inputs, BackwardFn backward) {
    for (int id : inputs) {
        if (id < 0 || id >= static_cast<int>(nodes_.size())) {
            throw ContractError("emit input node out of range");
        }
    }
    value.node_ = static_cast<int>(nodes_.size());
    value.tape_ = this;
    nodes_.push_back(Node{std::move(inputs), value, std::move(backward)});
    return value;
}

const Tensor& Tape::value(int node) const {
    if (node < 0 || node >= static_cast<int>(nodes_.size())) {
        throw ContractError("node id out of range");
    }
    return nodes_[node].value;
}

void Tape::accumulate(int node, const double* g, std::int64_t n) {
    auto& buf = grads_[node];
    if (buf.empty()) buf.assign(n, 0.0);
    for (std::int64_t i = 0; i < n; ++i) buf[i] += g[i];
}

const std::vector<double>* Tape::grad_buffer(int node) const {
    if (node < 0 || node >= static_cast<int>(grads_.size())) return nullptr;
    return grads_[node].empty() ? nullptr : &grads_[node];
}

void Tape::backward(const Tensor& loss) {
    if (loss.node_ < 0 || loss.tape_ != this) {
        throw ContractError("backward: loss is not recorded on this tape");
    }
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    }
    grads_.assign(nodes_.size(), {});
    grads_[loss.node_] = {1.0};
    for (int i = loss.node_; i >= 0; --i) {
        if (grads_[i].empty() || !nodes_[i].backward) continue;
        Tensor gout(nodes_[i].value.shape(), grads_[i]);
        nodes_[i].backward(*this, gout);
    }
}

Tensor Tape::grad(const Tensor& t) const {
    if (t.node_ < 0 || t.tape_ != this) {
        throw ContractError("grad: tensor is not recorded on this tape");
    }
    if (grads_.empty()) throw ContractError("grad: backward has not been run");
    const auto& buf = grads_[t.node_];
    if (buf.empty()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), buf);
}

Tape* common_tape(std::span<const Tensor* const> operands) {
    if (!GradPause::recording_enabled()) return nullptr;
    Tape* tape = nullptr;
    for (const Tensor* t : operands) {
        if (!t->on_tape()) continue;
        if (!tape) {
            tape = t->tape();
        } else if (tape != t->tape()) {
            throw ContractError("operands belong to different tapes");
        }
    }
    return tape;
}

// --- op plumbing -------------------------------------------------------------

namespace {

struct Recorded {
    Tape* tape = nullptr;
    std::vector<int> ids;
};

Recorded bind(std::initializer_list<const Tensor*> operands) {
    std::vector<const Tensor*> v(operands);
    Recorded r;
    r.tape = common_tape(std::span<const Tensor* const>(v.data(), v.size()));
    if (r.tape) {
        r.ids.reserve(v.size());
        for (const Tensor* t : v) r.ids.push_back(r.tape->ensure_node(*t));
    }
    return r;
}

bool is_scalar_like(const Tensor& t) { return t.size() == 1; }

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " do not match");
    }
}

enum class BinOp { Add, Sub, Mul };

Tensor binary_op(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
    const bool a_scalar = is_scalar_like(a);
    const bool b_scalar = is_scalar_like(b);
    if (a.shape() != b.shape() && !a_scalar && !b_scalar) {
        require_same_shape(name, a, b);
    }
    const Tensor& big = (a_scalar && !b_scalar) ? b : a;
    Tensor out(big.shape());
    double* o = out.mutable_data();
    const std::int64_t n = big.size();
    const double* pa = a.data();
    const double* pb = b.data();
    const std::int64_t sa = a_scalar && !b_scalar ? 0 : 1;
    const std::int64_t sb = b_scalar && !a_scalar ? 0 : 1;
    switch (kind) {
        case BinOp::Add:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i * sa] + pb[i * sb];
            break;
        case BinOp::Sub:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i * sa] - pb[i * sb];
            break;
        case BinOp::Mul:
            for (std::int64_t i = 0; i < n; ++i) o[i] = pa[i * sa] * pb[i * sb];
            break;
    }
    Recorded rec = bind({&a, &b});
    if (!rec.tape) return out;
    const int ia = rec.ids[0], ib = rec.ids[1];
    Tensor av = a.detached(), bv = b.detached();
    return rec.tape->emit(
        std::move(out), {ia, ib},
        [=](Tape& tp, const Tensor& g) {
            const std::int64_t gn = g.size();
            const double* pg = g.data();
            auto side = [&](int id, const Tensor& self, const Tensor& other, bool negate,
                            bool times_other) {
                std::vector<double> buf;
                const std::int64_t ns = self.size();
                buf.assign(ns, 0.0);
                const double* po = other.data();
                const std::int64_t so = other.size() == 1 ? 0 : 1;
                if (ns == gn) {
                    for (std::int64_t i = 0; i < gn; ++i) {
                        double v = times_other ? pg[i] * po[i * so] : pg[i];
                        buf[i] += negate ? -v : v;
                    }
                } else {  // scalar operand: reduce
                    double s = 0.0;
                    for (std::int64_t i = 0; i < gn; ++i) {
                        double v = times_other ? pg[i] * po[i * so] : pg[i];
                        s += negate ? -v : v;
                    }
                    buf[0] = s;
                }
                tp.accumulate(id, buf.data(), ns);
            };
            switch (kind) {
                case BinOp::Add:
                    side(ia, av, bv, false, false);
                    side(ib, bv, av, false, false);
                    break;
                case BinOp::Sub:
                    side(ia, av, bv, false, false);
                    side(ib, bv, av, true, false);
                    break;
                case BinOp::Mul:
                    side(ia, av, bv, false, true);
                    side(ib, bv, av, false, true);
                    break;
            }
        });
}

enum class UnOp { Tanh, Sigmoid, Relu };

Tensor unary_op(UnOp kind, const Tensor& a) {
    Tensor out(a.shape());
    double* o = out.mutable_data();
    const double* p = a.data();
    const std::int64_t n = a.size();
    switch (kind) {
        case UnOp::Tanh:
            for (std::int64_t i = 0; i < n; ++i) o[i] = std::tanh(p[i]);
            break;
        case UnOp::Sigmoid:
            for (std::int64_t i = 0; i < n; ++i) {
                double x = p[i];
                o[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x));
            }
            break;
        case UnOp::Relu:
            for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] > 0 ? p[i] : 0.0;
            break;
    }
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    Tensor saved = kind == UnOp::Relu ? a.detached() : out.detached();
    return rec.tape->emit(
        std::move(out), {ia},
        [=](Tape& tp, const Tensor& g) {
            const std::int64_t n2 = g.size();
            std::vector<double> buf(n2);
            const double* pg = g.data();
            const double* ps = saved.data();
            switch (kind) {
                case UnOp::Tanh:
                    for (std::int64_t i = 0; i < n2; ++i) buf[i] = pg[i] * (1.0 - ps[i] * ps[i]);
                    break;
                case UnOp::Sigmoid:
                    for (std::int64_t i = 0; i < n2; ++i) buf[i] = pg[i] * ps[i] * (1.0 - ps[i]);
                    break;
                case UnOp::Relu:
                    for (std::int64_t i = 0; i < n2; ++i) buf[i] = ps[i] > 0 ? pg[i] : 0.0;
                    break;
            }
            tp.accumulate(ia, buf.data(), n2);
        });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op("add", BinOp::Add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op("sub", BinOp::Sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op("mul", BinOp::Mul, a, b); }

Tensor scale(const Tensor& a, double s) {
    Tensor out(a.shape());
    double* o = out.mutable_data();
    const double* p = a.data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) o[i] = p[i] * s;
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        const std::int64_t n2 = g.size();
        std::vector<double> buf(n2);
        const double* pg = g.data();
        for (std::int64_t i = 0; i < n2; ++i) buf[i] = pg[i] * s;
        tp.accumulate(ia, buf.data(), n2);
    });
}

Tensor tanh(const Tensor& a) { return unary_op(UnOp::Tanh, a); }
Tensor sigmoid(const Tensor& a) { return unary_op(UnOp::Sigmoid, a); }
Tensor relu(const Tensor& a) { return unary_op(UnOp::Relu, a); }

Tensor concat_lastdim(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
    const int rank = parts[0].rank();
    if (rank < 1) throw ShapeError("concat_lastdim: inputs must have rank >= 1");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    int total_last = 0;
    for (const Tensor& p : parts) {
        if (p.rank() != rank ||
            !std::equal(lead.begin(), lead.end(), p.shape().begin())) {
            throw ShapeError("concat_lastdim: shapes " + shape_str(parts[0].shape()) + " and " +
                             shape_str(p.shape()) + " differ outside the last axis");
        }
        total_last += p.shape().back();
    }
    Shape out_shape = lead;
    out_shape.push_back(total_last);
    Tensor out(out_shape);
    double* o = out.mutable_data();
    const std::int64_t rows = shape_numel(lead);
    std::int64_t col = 0;
    for (const Tensor& p : parts) {
        const int w = p.shape().back();
        const double* src = p.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(o + r * total_last + col, src + r * w, w * sizeof(double));
        }
        col += w;
    }

    std::vector<const Tensor*> ptrs;
    for (const Tensor& p : parts) ptrs.push_back(&p);
    Tape* tape = common_tape(std::span<const Tensor* const>(ptrs.data(), ptrs.size()));
    if (!tape) return out;
    std::vector<int> ids;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        ids.push_back(tape->ensure_node(p));
        widths.push_back(p.shape().back());
    }
    std::vector<int> in_ids = ids;
    return tape->emit(std::move(out), std::move(in_ids),
                      [ids, widths, rows, total_last](Tape& tp, const Tensor& g) {
                          const double* pg = g.data();
                          std::int64_t col2 = 0;
                          for (std::size_t k = 0; k < ids.size(); ++k) {
                              const int w = widths[k];
                              std::vector<double> buf(rows * w);
                              for (std::int64_t r = 0; r < rows; ++r) {
                                  std::memcpy(buf.data() + r * w, pg + r * total_last + col2,
                                              w * sizeof(double));
                              }
                              tp.accumulate(ids[k], buf.data(), rows * w);
                              col2 += w;
                          }
                      });
}

Tensor stack_rows(std::span<const Tensor> rows) {
    if (rows.empty()) throw ContractError("stack_rows: no inputs");
    const int d = rows[0].rank() == 1 ? rows[0].dim(0) : -1;
    if (d < 0) throw ShapeError("stack_rows: inputs must be rank-1, got " +
                                shape_str(rows[0].shape()));
    for (const Tensor& r : rows) {
        if (r.rank() != 1 || r.dim(0) != d) {
            throw ShapeError("stack_rows: shapes " + shape_str(rows[0].shape()) + " and " +
                             shape_str(r.shape()) + " do not match");
        }
    }
    const int t = static_cast<int>(rows.size());
    Tensor out({t, d});
    double* o = out.mutable_data();
    for (int i = 0; i < t; ++i) std::memcpy(o + static_cast<std::int64_t>(i) * d, rows[i].data(), d * sizeof(double));

    std::vector<const Tensor*> ptrs;
    for (const Tensor& r : rows) ptrs.push_back(&r);
    Tape* tape = common_tape(std::span<const Tensor* const>(ptrs.data(), ptrs.size()));
    if (!tape) return out;
    std::vector<int> ids;
    for (const Tensor& r : rows) ids.push_back(tape->ensure_node(r));
    std::vector<int> in_ids = ids;
    return tape->emit(std::move(out), std::move(in_ids), [ids, d](Tape& tp, const Tensor& g) {
        const double* pg = g.data();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            tp.accumulate(ids[i], pg + i * d, d);
        }
    });
}

Tensor slice_lastdim(const Tensor& a, int start, int len) {
    if (a.rank() < 1) throw ShapeError("slice_lastdim: input must have rank >= 1");
    const int last = a.shape().back();
    if (len < 1 || start < 0 || start + len > last) {
        throw BoundsError("slice_lastdim: range [" + std::to_string(start) + ", " +
                          std::to_string(start + len) + ") out of range for " +
                          shape_str(a.shape()));
    }
    Shape out_shape = a.shape();
    out_shape.back() = len;
    Tensor out(out_shape);
    double* o = out.mutable_data();
    const double* p = a.data();
    const std::int64_t rows = a.size() / last;
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(o + r * len, p + r * last + start, len * sizeof(double));
    }
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    const std::int64_t total = a.size();
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(total, 0.0);
        const double* pg = g.data();
        for (std::int64_t r = 0; r < rows; ++r) {
            for (int j = 0; j < len; ++j) buf[r * last + start + j] = pg[r * len + j];
        }
        tp.accumulate(ia, buf.data(), total);
    });
}

Tensor take_row(const Tensor& a, int row) {
    if (a.rank() != 2) throw ShapeError("take_row: input must be rank-2, got " + shape_str(a.shape()));
    const int t = a.dim(0), d = a.dim(1);
    if (row < 0 || row >= t) {
        throw BoundsError("take_row: row " + std::to_string(row) + " out of range for " +
                          shape_str(a.shape()));
    }
    Tensor out({d});
    std::memcpy(out.mutable_data(), a.data() + static_cast<std::int64_t>(row) * d, d * sizeof(double));
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(static_cast<std::int64_t>(t) * d, 0.0);
        std::memcpy(buf.data() + static_cast<std::int64_t>(row) * d, g.data(), d * sizeof(double));
        tp.accumulate(ia, buf.data(), static_cast<std::int64_t>(t) * d);
    });
}

Tensor reshape(const Tensor& a, Shape target) {
    check_shape_valid(target);
    if (shape_numel(target) != a.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(target));
    }
    Tensor out(target, a.values());
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        tp.accumulate(ia, g.data(), g.size());
    });
}

Tensor reduce_sum(const Tensor& a) {
    double s = 0.0;
    const double* p = a.data();
    for (std::int64_t i = 0; i < a.size(); ++i) s += p[i];
    Tensor out = Tensor::scalar(s);
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    const std::int64_t n = a.size();
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(n, g.item());
        tp.accumulate(ia, buf.data(), n);
    });
}

Tensor reduce_mean(const Tensor& a) {
    double s = 0.0;
    const double* p = a.data();
    const std::int64_t n = a.size();
    for (std::int64_t i = 0; i < n; ++i) s += p[i];
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(n, g.item() / static_cast<double>(n));
        tp.accumulate(ia, buf.data(), n);
    });
}

Tensor mse(const Tensor& pred, const Tensor& target) {
    require_same_shape("mse", pred, target);
    const std::int64_t n = pred.size();
    const double* pp = pred.data();
    const double* pt = target.data();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double d = pp[i] - pt[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(s / static_cast<double>(n));
    Recorded rec = bind({&pred, &target});
    if (!rec.tape) return out;
    const int ip = rec.ids[0], it = rec.ids[1];
    Tensor pv = pred.detached(), tv = target.detached();
    return rec.tape->emit(std::move(out), {ip, it}, [=](Tape& tp, const Tensor& g) {
        const double go = g.item();
        std::vector<double> buf(n);
        const double* a = pv.data();
        const double* b = tv.data();
        for (std::int64_t i = 0; i < n; ++i) buf[i] = go * 2.0 * (a[i] - b[i]) / static_cast<double>(n);
        tp.accumulate(ip, buf.data(), n);
        for (std::int64_t i = 0; i < n; ++i) buf[i] = -buf[i];
        tp.accumulate(it, buf.data(), n);
    });
}

// --- linear algebra ----------------------------------------------------------

namespace {

void mm_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    // c[m,n] += a[m,k] * b[k,n]
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::int64_t>(i) * k;
        double* cr = c + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void mm_at_b_accum(const double* a, const double* b, double* c, int m, int k, int n) {
    // c[k,n] += a[m,k]^T * b[m,n]
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::int64_t>(i) * k;
        const double* br = b + static_cast<std::int64_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const double av = ar[p];
            double* cr = c + static_cast<std::int64_t>(p) * n;
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

void mm_a_bt_accum(const double* a, const double* b, double* c, int m, int n, int k) {
    // c[m,k] += a[m,n] * b[k,n]^T  (dot of contiguous rows)
    for (int i = 0; i < m; ++i) {
        const double* ar = a + static_cast<std::int64_t>(i) * n;
        double* cr = c + static_cast<std::int64_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const double* br = b + static_cast<std::int64_t>(p) * n;
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += ar[j] * br[j];
            cr[p] += s;
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " are not compatible");
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out({m, n});
    mm_accum(a.data(), b.data(), out.mutable_data(), m, k, n);
    Recorded rec = bind({&a, &b});
    if (!rec.tape) return out;
    const int ia = rec.ids[0], ib = rec.ids[1];
    Tensor av = a.detached(), bv = b.detached();
    return rec.tape->emit(std::move(out), {ia, ib}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> da(static_cast<std::int64_t>(m) * k, 0.0);
        mm_a_bt_accum(g.data(), bv.data(), da.data(), m, n, k);
        tp.accumulate(ia, da.data(), static_cast<std::int64_t>(m) * k);
        std::vector<double> db(static_cast<std::int64_t>(k) * n, 0.0);
        mm_at_b_accum(av.data(), g.data(), db.data(), m, k, n);
        tp.accumulate(ib, db.data(), static_cast<std::int64_t>(k) * n);
    });
}

Tensor matvec(const Tensor& a, const Tensor& x) {
    if (a.rank() != 2 || x.rank() != 1 || a.dim(1) != x.dim(0)) {
        throw ShapeError("matvec: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(x.shape()) + " are not compatible");
    }
    const int m = a.dim(0), k = a.dim(1);
    Tensor out({m});
    double* o = out.mutable_data();
    const double* pa = a.data();
    const double* px = x.data();
    for (int i = 0; i < m; ++i) {
        const double* ar = pa + static_cast<std::int64_t>(i) * k;
        double s = 0.0;
        for (int p = 0; p < k; ++p) s += ar[p] * px[p];
        o[i] = s;
    }
    Recorded rec = bind({&a, &x});
    if (!rec.tape) return out;
    const int ia = rec.ids[0], ix = rec.ids[1];
    Tensor av = a.detached(), xv = x.detached();
    return rec.tape->emit(std::move(out), {ia, ix}, [=](Tape& tp, const Tensor& g) {
        const double* pg = g.data();
        std::vector<double> da(static_cast<std::int64_t>(m) * k);
        const double* pxv = xv.data();
        for (int i = 0; i < m; ++i) {
            const double gv = pg[i];
            double* dr = da.data() + static_cast<std::int64_t>(i) * k;
            for (int p = 0; p < k; ++p) dr[p] = gv * pxv[p];
        }
        tp.accumulate(ia, da.data(), static_cast<std::int64_t>(m) * k);
        std::vector<double> dx(k, 0.0);
        const double* pav = av.data();
        for (int i = 0; i < m; ++i) {
            const double gv = pg[i];
            const double* ar = pav + static_cast<std::int64_t>(i) * k;
            for (int p = 0; p < k; ++p) dx[p] += gv * ar[p];
        }
        tp.accumulate(ix, dx.data(), k);
    });
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: input must be rank-2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor out({n, m});
    double* o = out.mutable_data();
    const double* p = a.data();
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) o[static_cast<std::int64_t>(j) * m + i] = p[static_cast<std::int64_t>(i) * n + j];
    }
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(static_cast<std::int64_t>(m) * n);
        const double* pg = g.data();
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < m; ++i) buf[static_cast<std::int64_t>(i) * n + j] = pg[static_cast<std::int64_t>(j) * m + i];
        }
        tp.accumulate(ia, buf.data(), static_cast<std::int64_t>(m) * n);
    });
}

Tensor linear_rows(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
        w.dim(1) != b.dim(0)) {
        throw ShapeError("linear_rows: shapes " + shape_str(x.shape()) + ", " +
                         shape_str(w.shape()) + ", " + shape_str(b.shape()) +
                         " are not compatible");
    }
    const int t = x.dim(0), in = x.dim(1), out_w = w.dim(1);
    Tensor out({t, out_w});
    double* o = out.mutable_data();
    const double* pb = b.data();
    for (int r = 0; r < t; ++r) {
        std::memcpy(o + static_cast<std::int64_t>(r) * out_w, pb, out_w * sizeof(double));
    }
    mm_accum(x.data(), w.data(), o, t, in, out_w);
    Recorded rec = bind({&x, &w, &b});
    if (!rec.tape) return out;
    const int ixn = rec.ids[0], iw = rec.ids[1], ib = rec.ids[2];
    Tensor xv = x.detached(), wv = w.detached();
    return rec.tape->emit(std::move(out), {ixn, iw, ib}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> dx(static_cast<std::int64_t>(t) * in, 0.0);
        mm_a_bt_accum(g.data(), wv.data(), dx.data(), t, out_w, in);
        tp.accumulate(ixn, dx.data(), static_cast<std::int64_t>(t) * in);
        std::vector<double> dw(static_cast<std::int64_t>(in) * out_w, 0.0);
        mm_at_b_accum(xv.data(), g.data(), dw.data(), t, in, out_w);
        tp.accumulate(iw, dw.data(), static_cast<std::int64_t>(in) * out_w);
        std::vector<double> db(out_w, 0.0);
        const double* pg = g.data();
        for (int r = 0; r < t; ++r) {
            for (int j = 0; j < out_w; ++j) db[j] += pg[static_cast<std::int64_t>(r) * out_w + j];
        }
        tp.accumulate(ib, db.data(), out_w);
    });
}

// --- softmax / layer norm ----------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
    if (a.rank() < 1) throw ShapeError("softmax_lastdim: input must have rank >= 1");
    if (!a.all_finite()) throw NumericError("softmax_lastdim: input contains NaN or inf");
    const int n = a.shape().back();
    const std::int64_t slices = a.size() / n;
    Tensor out(a.shape());
    double* o = out.mutable_data();
    const double* p = a.data();
    for (std::int64_t s = 0; s < slices; ++s) {
        const double* row = p + s * n;
        double* orow = o + s * n;
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= sum;
    }
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    Tensor sv = out.detached();
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(sv.size());
        const double* pg = g.data();
        const double* ps = sv.data();
        for (std::int64_t s = 0; s < slices; ++s) {
            const double* grow = pg + s * n;
            const double* srow = ps + s * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += grow[j] * srow[j];
            double* brow = buf.data() + s * n;
            for (int j = 0; j < n; ++j) brow[j] = srow[j] * (grow[j] - dot);
        }
        tp.accumulate(ia, buf.data(), sv.size());
    });
}

Tensor causal_softmax(const Tensor& logits) {
    if (logits.rank() != 2 || logits.dim(0) != logits.dim(1)) {
        throw ShapeError("causal_softmax: input must be square rank-2, got " +
                         shape_str(logits.shape()));
    }
    const int t = logits.dim(0);
    const double* p = logits.data();
    Tensor out({t, t});
    double* o = out.mutable_data();
    for (int i = 0; i < t; ++i) {
        const double* row = p + static_cast<std::int64_t>(i) * t;
        double* orow = o + static_cast<std::int64_t>(i) * t;
        double mx = row[0];
        for (int j = 1; j <= i; ++j) mx = std::max(mx, row[j]);
        if (!std::isfinite(mx)) throw NumericError("causal_softmax: non-finite attention score");
        double sum = 0.0;
        for (int j = 0; j <= i; ++j) {
            if (!std::isfinite(row[j])) throw NumericError("causal_softmax: non-finite attention score");
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j <= i; ++j) orow[j] /= sum;
        // entries above the diagonal stay exactly zero
    }
    Recorded rec = bind({&logits});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    Tensor sv = out.detached();
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(static_cast<std::int64_t>(t) * t, 0.0);
        const double* pg = g.data();
        const double* ps = sv.data();
        for (int i = 0; i < t; ++i) {
            const double* grow = pg + static_cast<std::int64_t>(i) * t;
            const double* srow = ps + static_cast<std::int64_t>(i) * t;
            double dot = 0.0;
            for (int j = 0; j <= i; ++j) dot += grow[j] * srow[j];
            double* brow = buf.data() + static_cast<std::int64_t>(i) * t;
            for (int j = 0; j <= i; ++j) brow[j] = srow[j] * (grow[j] - dot);
        }
        tp.accumulate(ia, buf.data(), static_cast<std::int64_t>(t) * t);
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    if (x.rank() < 1) throw ShapeError("layer_norm: input must have rank >= 1");
    const int n = x.shape().back();
    if (n < 2) throw ShapeError("layer_norm: last dimension must be >= 2, got " + shape_str(x.shape()));
    if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
        throw ShapeError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " must be [" + std::to_string(n) + "]");
    }
    const std::int64_t slices = x.size() / n;
    Tensor out(x.shape());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(slices);
    {
        double* o = out.mutable_data();
        const double* p = x.data();
        const double* pg = gamma.data();
        const double* pb = beta.data();
        for (std::int64_t s = 0; s < slices; ++s) {
            const double* row = p + s * n;
            double mean = 0.0;
            for (int j = 0; j < n; ++j) mean += row[j];
            mean /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) {
                const double d = row[j] - mean;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
            inv_std[s] = inv;
            double* orow = o + s * n;
            double* hrow = xhat.data() + s * n;
            for (int j = 0; j < n; ++j) {
                hrow[j] = (row[j] - mean) * inv;
                orow[j] = pg[j] * hrow[j] + pb[j];
            }
        }
    }
    Recorded rec = bind({&x, &gamma, &beta});
    if (!rec.tape) return out;
    const int ix = rec.ids[0], ig = rec.ids[1], ib = rec.ids[2];
    Tensor gv = gamma.detached();
    auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
    auto inv_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    const std::int64_t total = x.size();
    return rec.tape->emit(std::move(out), {ix, ig, ib}, [=](Tape& tp, const Tensor& g) {
        const double* pg = g.data();
        const double* ph = xhat_p->data();
        const double* pgam = gv.data();
        std::vector<double> dx(total);
        std::vector<double> dgam(n, 0.0);
        std::vector<double> dbeta(n, 0.0);
        for (std::int64_t s = 0; s < slices; ++s) {
            const double* grow = pg + s * n;
            const double* hrow = ph + s * n;
            double* dxrow = dx.data() + s * n;
            double sum_dh = 0.0, sum_dh_h = 0.0;
            for (int j = 0; j < n; ++j) {
                dgam[j] += grow[j] * hrow[j];
                dbeta[j] += grow[j];
                const double dh = grow[j] * pgam[j];
                sum_dh += dh;
                sum_dh_h += dh * hrow[j];
            }
            const double inv = (*inv_p)[s];
            const double mean_dh = sum_dh / n;
            const double mean_dh_h = sum_dh_h / n;
            for (int j = 0; j < n; ++j) {
                const double dh = grow[j] * pgam[j];
                dxrow[j] = inv * (dh - mean_dh - hrow[j] * mean_dh_h);
            }
        }
        tp.accumulate(ix, dx.data(), total);
        tp.accumulate(ig, dgam.data(), n);
        tp.accumulate(ib, dbeta.data(), n);
    });
}

// --- conv / pooling ----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int pad) {
    if (input.rank() != 3 || kernel.rank() != 4 || bias.rank() != 1 ||
        kernel.dim(1) != input.dim(0) || bias.dim(0) != kernel.dim(0)) {
        throw ShapeError("conv2d: shapes " + shape_str(input.shape()) + ", " +
                         shape_str(kernel.shape()) + ", " + shape_str(bias.shape()) +
                         " are not compatible");
    }
    if (stride < 1 || pad < 0) throw ContractError("conv2d: invalid stride/padding");
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const int oh = (h - kh + 2 * pad) / stride + 1;
    const int ow = (w - kw + 2 * pad) / stride + 1;
    if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel larger than padded input");
    Tensor out({co, oh, ow});
    double* o = out.mutable_data();
    const double* pin = input.data();
    const double* pk = kernel.data();
    const double* pb = bias.data();
    auto in_at = [&](int c, int y, int x) -> double {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return pin[(static_cast<std::int64_t>(c) * h + y) * w + x];
    };
    for (int c = 0; c < co; ++c) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                double s = pb[c];
                for (int ic = 0; ic < ci; ++ic) {
                    for (int r = 0; r < kh; ++r) {
                        for (int q = 0; q < kw; ++q) {
                            s += in_at(ic, y * stride - pad + r, x * stride - pad + q) *
                                 pk[((static_cast<std::int64_t>(c) * ci + ic) * kh + r) * kw + q];
                        }
                    }
                }
                o[(static_cast<std::int64_t>(c) * oh + y) * ow + x] = s;
            }
        }
    }
    Recorded rec = bind({&input, &kernel, &bias});
    if (!rec.tape) return out;
    const int ii = rec.ids[0], ik = rec.ids[1], ib = rec.ids[2];
    Tensor iv = input.detached(), kv = kernel.detached();
    return rec.tape->emit(std::move(out), {ii, ik, ib}, [=](Tape& tp, const Tensor& g) {
        const double* pgrad = g.data();
        const double* piv = iv.data();
        const double* pkv = kv.data();
        std::vector<double> din(static_cast<std::int64_t>(ci) * h * w, 0.0);
        std::vector<double> dk(static_cast<std::int64_t>(co) * ci * kh * kw, 0.0);
        std::vector<double> db(co, 0.0);
        for (int c = 0; c < co; ++c) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const double gv = pgrad[(static_cast<std::int64_t>(c) * oh + y) * ow + x];
                    db[c] += gv;
                    for (int ic = 0; ic < ci; ++ic) {
                        for (int r = 0; r < kh; ++r) {
                            const int iy = y * stride - pad + r;
                            if (iy < 0 || iy >= h) continue;
                            for (int q = 0; q < kw; ++q) {
                                const int ixp = x * stride - pad + q;
                                if (ixp < 0 || ixp >= w) continue;
                                const std::int64_t kidx =
                                    ((static_cast<std::int64_t>(c) * ci + ic) * kh + r) * kw + q;
                                const std::int64_t iidx =
                                    (static_cast<std::int64_t>(ic) * h + iy) * w + ixp;
                                dk[kidx] += piv[iidx] * gv;
                                din[iidx] += pkv[kidx] * gv;
                            }
                        }
                    }
                }
            }
        }
        tp.accumulate(ii, din.data(), static_cast<std::int64_t>(ci) * h * w);
        tp.accumulate(ik, dk.data(), static_cast<std::int64_t>(co) * ci * kh * kw);
        tp.accumulate(ib, db.data(), co);
    });
}

Tensor global_avg_pool(const Tensor& a) {
    if (a.rank() != 3) throw ShapeError("global_avg_pool: input must be [C,H,W], got " + shape_str(a.shape()));
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    Tensor out({c});
    double* o = out.mutable_data();
    const double* p = a.data();
    for (int i = 0; i < c; ++i) {
        double s = 0.0;
        const double* base = p + i * hw;
        for (std::int64_t j = 0; j < hw; ++j) s += base[j];
        o[i] = s / static_cast<double>(hw);
    }
    Recorded rec = bind({&a});
    if (!rec.tape) return out;
    const int ia = rec.ids[0];
    return rec.tape->emit(std::move(out), {ia}, [=](Tape& tp, const Tensor& g) {
        std::vector<double> buf(static_cast<std::int64_t>(c) * hw);
        const double* pg = g.data();
        for (int i = 0; i < c; ++i) {
            const double v = pg[i] / static_cast<double>(hw);
            double* base = buf.data() + i * hw;
            for (std::int64_t j = 0; j < hw; ++j) base[j] = v;
        }
        tp.accumulate(ia, buf.data(), static_cast<std::int64_t>(c) * hw);
    });
}

}  // namespace realdiff
