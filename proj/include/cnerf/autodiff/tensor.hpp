#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cnerf::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Raised when operand shapes are incompatible for an op.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised in checked mode when an op sees or produces NaN/Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class Tape;

/// Dense row-major array of doubles. The storage is immutable once built and
/// shared between copies; a tensor may additionally refer to a node on a tape.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor vector(std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return data_->size(); }

    std::span<const double> data() const noexcept { return {data_->data(), data_->size()}; }
    const std::shared_ptr<const std::vector<double>>& storage() const noexcept { return data_; }
    std::vector<double> to_vector() const { return *data_; }

    double operator[](std::size_t i) const { return (*data_)[i]; }
    double item() const;

    /// Same values, no tape linkage.
    Tensor detach() const;
    /// Untracked view of the same storage under another shape of equal size.
    Tensor with_shape(Shape shape) const;

    Tape* tape() const noexcept { return tape_; }
    int node() const noexcept { return node_; }
    bool tracked_on(const Tape* tape) const noexcept { return tape != nullptr && tape_ == tape && node_ >= 0; }

private:
    friend class Tape;

    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    int node_ = -1;
};

/// Globally toggles NaN/Inf checks on every op output.
void set_checked_mode(bool enabled);
bool checked_mode();

}  // namespace cnerf::ad
