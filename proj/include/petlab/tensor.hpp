#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "petlab/errors.hpp"

namespace petlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Row-major dense buffer plus an optional gradient of the same length.
// Shared between tensor handles; its address is the identity that the
// autodiff graph records.
template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until a gradient is first accumulated
    bool requires_grad = false;

    std::size_t size() const { return values.size(); }

    void accumulate_grad(std::span<const T> g) {
        if (grad.empty()) grad.assign(values.size(), T{0});
        for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
};

// Value-semantics handle over shared storage: copying a Tensor aliases
// the same buffer. Scalar type T is float or double; a run picks one
// precision and never mixes the two in one graph.
template <typename T>
class Tensor {
public:
    Tensor() : data_(std::make_shared<TensorData<T>>()) {}

    explicit Tensor(Shape shape, T fill = T{0})
        : data_(std::make_shared<TensorData<T>>()) {
        data_->shape = std::move(shape);
        data_->values.assign(numel(data_->shape), fill);
    }

    Tensor(Shape shape, std::vector<T> values)
        : data_(std::make_shared<TensorData<T>>()) {
        if (values.size() != numel(shape)) {
            throw ShapeError("tensor data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        data_->shape = std::move(shape);
        data_->values = std::move(values);
    }

    explicit Tensor(std::shared_ptr<TensorData<T>> data) : data_(std::move(data)) {}

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return data_->shape; }
    std::size_t rank() const { return data_->shape.size(); }
    std::size_t size() const { return data_->values.size(); }
    std::size_t dim(std::size_t axis) const { return data_->shape.at(axis); }

    std::span<T> values() { return data_->values; }
    std::span<const T> values() const { return data_->values; }

    T item() const {
        if (size() != 1) {
            throw ContractError("item() requires a one-element tensor, got shape " +
                                shape_str(shape()));
        }
        return data_->values[0];
    }

    T& at(std::size_t flat) { return data_->values[flat]; }
    T at(std::size_t flat) const { return data_->values[flat]; }

    bool requires_grad() const { return data_->requires_grad; }
    Tensor& set_requires_grad(bool on) {
        data_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !data_->grad.empty(); }
    std::span<const T> grad() const {
        if (data_->grad.empty()) {
            throw ContractError("gradient requested but none accumulated");
        }
        return data_->grad;
    }
    void zero_grad() { data_->grad.assign(data_->values.size(), T{0}); }
    void drop_grad() { data_->grad.clear(); }

    // Deep copy of values (new storage, no grad, no graph history).
    Tensor clone() const {
        Tensor out(shape());
        out.data_->values = data_->values;
        return out;
    }

    const std::shared_ptr<TensorData<T>>& storage() const { return data_; }
    bool same_storage(const Tensor& other) const { return data_ == other.data_; }

private:
    std::shared_ptr<TensorData<T>> data_;
};

}  // namespace petlab
