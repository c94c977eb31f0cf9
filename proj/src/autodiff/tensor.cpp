#include "cnerf/autodiff/tensor.hpp"

#include <atomic>
#include <sstream>

namespace cnerf::ad {

namespace {
std::atomic<bool> g_checked{false};
}

void set_checked_mode(bool enabled) { g_checked.store(enabled, std::memory_order_relaxed); }
bool checked_mode() { return g_checked.load(std::memory_order_relaxed); }

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor() : data_(std::make_shared<const std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
    if (numel(shape_) != data.size())
        throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " + std::to_string(data.size()) +
                         " elements");
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }
Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::full(Shape shape, double value) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}
Tensor Tensor::vector(std::vector<double> values) {
    Shape s{values.size()};
    return Tensor(std::move(s), std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + to_string(shape_));
    return shape_[axis];
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape_) + " is not a scalar");
    return (*data_)[0];
}

Tensor Tensor::with_shape(Shape shape) const {
    if (numel(shape) != size()) throw ShapeError("cannot view " + to_string(shape_) + " as " + to_string(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
}

Tensor Tensor::detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
}

}  // namespace cnerf::ad
