#pragma once

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cnerf/autodiff/tensor.hpp"

namespace cnerf::ad {

/// A named, trainable tensor. Reading it through var() while a tape is active
/// registers it as a leaf of that tape.
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Tensor init);

    // Tapes key leaves by address.
    Parameter(const Parameter&) = delete;
    Parameter& operator=(const Parameter&) = delete;
    Parameter(Parameter&&) = default;
    Parameter& operator=(Parameter&&) = default;

    const std::string& name() const noexcept { return name_; }
    const Tensor& value() const noexcept { return value_; }
    const Shape& shape() const noexcept { return value_.shape(); }
    std::size_t size() const noexcept { return value_.size(); }

    void assign(Tensor value);
    void assign(std::vector<double> values);

    /// The value, tracked on the current tape if one is active.
    Tensor var() const;

private:
    std::string name_;
    Tensor value_;
};

using ParameterList = std::vector<Parameter*>;

/// Gradient buffers produced by Tape::backward.
class Gradients {
public:
    /// Gradient of a parameter, or nullptr if the loss does not depend on it.
    const std::vector<double>* find(const Parameter& p) const;
    /// Gradient of a parameter; zeros if unreached.
    std::vector<double> of(const Parameter& p) const;
    /// Gradient with respect to a tensor previously passed to Tape::watch.
    Tensor wrt(const Tensor& watched) const;

    /// dst += scale * values (creates the buffer if absent).
    void accumulate(const Parameter& p, std::span<const double> values, double scale = 1.0);
    void scale_all(double factor);
    /// Adds `scale` times every parameter gradient of `other`.
    void merge(const Gradients& other, double scale = 1.0);

private:
    friend class Tape;
    std::unordered_map<const Parameter*, std::vector<double>> params_;
    std::unordered_map<int, std::vector<double>> leaves_;
    const Tape* tape_ = nullptr;
};

/// Handed to an op's backward closure: incoming gradient plus accumulation
/// slots for each input.
class BackwardContext {
public:
    std::span<const double> grad_out;

    bool needs(std::size_t input) const { return slots_[input] != nullptr; }
    /// Mutable gradient buffer of an input, zero-initialised on first use.
    std::span<double> grad(std::size_t input);

private:
    friend class Tape;
    std::vector<std::vector<double>*> slots_;
    std::vector<std::size_t> sizes_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Linear record of operations for reverse-mode differentiation. One training
/// step owns one tape; ops record themselves onto Tape::current().
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() noexcept;

    /// New leaf node carrying `t`'s value.
    Tensor watch(const Tensor& t);
    Tensor param(const Parameter& p);

    /// Attach `result` as the output of an op whose inputs are `inputs`.
    /// Untracked inputs are treated as constants. Returns `result` unchanged
    /// when no input lives on this tape.
    Tensor record(std::string_view kind, Tensor result, std::span<const Tensor* const> inputs, BackwardFn fn);

    Gradients backward(const Tensor& loss) const;

    std::size_t size() const noexcept { return nodes_.size(); }
    void clear();

private:
    struct Node {
        std::string_view kind;
        std::size_t size = 0;
        std::vector<int> inputs;
        BackwardFn fn;
        const Parameter* param = nullptr;
    };

    Tensor attach(Tensor t, Node node);

    std::vector<Node> nodes_;
    std::unordered_map<const Parameter*, int> param_nodes_;
};

/// Makes a tape current for the lifetime of the scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording (for inference inside a training step).
class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape* previous_;
};

}  // namespace cnerf::ad
