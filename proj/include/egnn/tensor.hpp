#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "egnn/errors.hpp"

namespace egnn {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

/// Dense n-dimensional array participating in reverse-mode differentiation.
///
/// A Tensor is a cheap shared handle: copies alias the same storage. Values
/// are written during construction (or via values_mut() in init/load paths)
/// and treated as immutable once an op has consumed the tensor; only the
/// gradient buffer is mutated afterwards.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), {}, requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        Tensor t(std::move(shape), {}, requires_grad);
        for (T& v : t.d_->values) v = value;
        return t;
    }

    static Tensor from_data(Shape shape, std::vector<T> values, bool requires_grad = false) {
        if (shape_size(shape) != values.size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->values = std::move(values);
        t.d_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    // A Tensor is a shallow-const handle: const methods may still mutate the
    // shared buffers, mirroring the contract that values are fixed after
    // construction while gradient buffers stay writable.

    bool valid() const { return static_cast<bool>(d_); }
    const Shape& shape() const { return d_->shape; }
    std::size_t rank() const { return d_->shape.size(); }
    std::size_t extent(std::size_t axis) const { return d_->shape.at(axis); }
    std::size_t size() const { return d_->values.size(); }

    std::span<const T> values() const { return d_->values; }
    /// Mutable access for initialization and deserialization paths only.
    std::span<T> values_mut() const { return d_->values; }

    T item() const {
        if (size() != 1)
            throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
        return d_->values[0];
    }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) const { d_->requires_grad = v; }

    bool has_grad() const { return !d_->grad.empty(); }

    std::span<const T> grad() const {
        if (!has_grad())
            throw std::logic_error("grad: no gradient buffer present");
        return d_->grad;
    }

    /// Gradient buffer, allocated (zero-filled) on first use.
    std::span<T> grad_mut() const {
        if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
        return d_->grad;
    }

    /// Drops the gradient buffer entirely.
    void zero_grad() const { d_->grad.clear(); }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    bool all_finite() const {
        for (T v : d_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    struct Data {
        Shape shape;
        std::vector<T> values;
        std::vector<T> grad; // empty until touched; same length as values otherwise
        bool requires_grad = false;
    };

    Tensor(Shape shape, std::vector<T>, bool requires_grad) {
        d_ = std::make_shared<Data>();
        d_->values.assign(shape_size(shape), T(0));
        d_->shape = std::move(shape);
        d_->requires_grad = requires_grad;
    }

    std::shared_ptr<Data> d_;
};

/// Ordered record of executed ops with their backward rules.
///
/// Ops append one closure each in execution order, so the record is
/// topologically sorted by construction; backward() replays it once in
/// reverse. One tape serves one forward/backward pass.
template <typename T>
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool v) { recording_ = v; }

    void record(std::function<void()> backward_step) {
        steps_.push_back(std::move(backward_step));
    }

    std::size_t num_ops() const { return steps_.size(); }

    /// Populates grad buffers of all requires_grad leaves with d loss / d leaf.
    void backward(Tensor<T> loss) {
        if (!loss.valid() || loss.size() != 1)
            throw std::logic_error("backward: loss must be a scalar tensor");
        if (consumed_)
            throw std::logic_error("backward: tape already consumed; run a new forward pass");
        consumed_ = true;
        loss.grad_mut()[0] += T(1);
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    bool consumed() const { return consumed_; }

    void reset() {
        steps_.clear();
        consumed_ = false;
    }

private:
    std::vector<std::function<void()>> steps_;
    bool recording_ = true;
    bool consumed_ = false;
};

} // namespace egnn
