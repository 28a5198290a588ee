#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "caga/common.hpp"

namespace caga {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

// Row-major strides for a shape.
inline std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> v;  // values, row-major
    std::vector<T> g;  // gradient; empty means all-zero / not yet touched
    bool requires_grad = false;

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), T(0));
    }
    void clear_grad() { g.clear(); }
};

// Value-like handle to a dense N-d array. Copies of a Tensor share storage;
// deep_copy() detaches. Gradient lives beside the data and is populated by
// Tape::backward for every reachable requires_grad tensor.
template <typename T>
class Tensor {
public:
    using Scalar = T;

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(shape);
        t.d_->v.assign(numel(t.d_->shape), T(0));
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        for (T& x : t.d_->v) x = value;
        return t;
    }

    static Tensor from_vector(Shape shape, std::vector<T> values,
                              bool requires_grad = false) {
        if (numel(shape) != values.size())
            throw ShapeError("from_vector: shape " + shape_str(shape) + " holds " +
                             std::to_string(numel(shape)) + " elements, got " +
                             std::to_string(values.size()));
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>();
        t.d_->shape = std::move(shape);
        t.d_->v = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_vector({}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t size() const { return d_->v.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }

    T* data() { return d_->v.data(); }
    const T* data() const { return d_->v.data(); }
    std::vector<T>& values() { return d_->v; }
    const std::vector<T>& values() const { return d_->v; }

    bool requires_grad() const { return d_->requires_grad; }
    Tensor& set_requires_grad(bool rg) {
        d_->requires_grad = rg;
        return *this;
    }

    bool has_grad() const { return !d_->g.empty(); }
    // Gradient values; zero-filled on first access.
    std::vector<T>& grad() {
        d_->ensure_grad();
        return d_->g;
    }
    const std::vector<T>& grad() const {
        d_->ensure_grad();
        return d_->g;
    }
    void zero_grad() { d_->clear_grad(); }

    T item() const {
        if (size() != 1)
            throw ContractError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return d_->v[0];
    }

    // Flat and multi-index element access (tests and kernels).
    T& operator[](std::size_t i) { return d_->v[i]; }
    const T& operator[](std::size_t i) const { return d_->v[i]; }

    T& at(std::initializer_list<std::size_t> idx) { return d_->v[offset(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return d_->v[offset(idx)]; }

    Tensor deep_copy() const {
        Tensor t;
        t.d_ = std::make_shared<TensorData<T>>(*d_);
        return t;
    }

    // Same storage object (aliasing check).
    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    std::shared_ptr<TensorData<T>> ptr() const { return d_; }

private:
    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        auto st = row_major_strides(d_->shape);
        std::size_t off = 0, i = 0;
        for (std::size_t v : idx) off += v * st[i++];
        return off;
    }

    std::shared_ptr<TensorData<T>> d_;
};

// Ordered record of primitive ops for one forward pass. Backward replays the
// record in exact reverse order. Intermediate (op-output) gradients are
// cleared at the start of every backward call so that repeated calls
// accumulate only into leaves, once per call. A tape is confined to the
// thread that activates it.
template <typename T>
class Tape {
public:
    struct Node {
        std::shared_ptr<TensorData<T>> out;
        std::function<void()> pull;  // accumulate input grads from out->g
        const char* op;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape*& active_slot() {
        thread_local Tape* active = nullptr;
        return active;
    }
    static Tape* active() { return active_slot(); }

    // RAII activation; ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(active_slot()) { active_slot() = &t; }
        ~Scope() { active_slot() = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

    void record(std::shared_ptr<TensorData<T>> out, const char* op,
                std::function<void()> pull) {
        nodes_.push_back(Node{std::move(out), std::move(pull), op});
    }

    std::size_t size() const { return nodes_.size(); }

    void backward(const Tensor<T>& loss) {
        if (!loss.defined() || loss.size() != 1)
            throw ContractError("backward: loss must be scalar, got " +
                                (loss.defined() ? shape_str(loss.shape())
                                                : std::string("undefined")));
        for (auto& n : nodes_) n.out->clear_grad();
        loss.ptr()->ensure_grad();
        loss.ptr()->g[0] = T(1);
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            if (nodes_[i].out->g.empty()) continue;  // nothing flowed here
            nodes_[i].pull();
        }
    }

    void reset() { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

// Records `pull` for `out` when gradient tracking applies: some input needs a
// gradient and a tape is active. Marks the output as gradient-carrying so
// downstream ops keep the chain alive.
template <typename T, typename F>
void record_op(bool any_input_requires_grad, Tensor<T>& out, const char* op, F&& pull) {
    Tape<T>* tape = Tape<T>::active();
    if (tape && any_input_requires_grad) {
        out.set_requires_grad(true);
        tape->record(out.ptr(), op, std::forward<F>(pull));
    }
}

// Free-function form used throughout the training code.
template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) throw ContractError("backward: no active tape");
    tape->backward(loss);
}

} // namespace caga
