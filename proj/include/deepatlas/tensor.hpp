#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace deepatlas {

// All tensors hold 64-bit floats. Finite-difference checks rely on it.
using Scalar = double;
using Shape = std::vector<std::int64_t>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericDomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

class TapeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<Scalar> data;
    std::vector<Scalar> grad;  // empty until the first gradient arrives
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), Scalar{0});
    }
};

}  // namespace detail

/// Dense row-major n-d array. Copies share storage; the value is treated as
/// immutable once an op has consumed it, except for parameters which are
/// updated in place by an optimizer between training steps.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, Scalar value, bool requires_grad = false);
    static Tensor scalar(Scalar value, bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
    std::int64_t dim(std::int64_t axis) const;
    std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

    std::span<const Scalar> data() const { return impl_->data; }
    std::span<Scalar> mutable_data() { return impl_->data; }
    Scalar operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
    Scalar item() const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; empty when no gradient reached this tensor.
    std::span<const Scalar> grad() const { return impl_->grad; }
    std::span<Scalar> mutable_grad() { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    /// Deep copy with no gradient tracking.
    Tensor detach() const;
    Tensor clone() const;

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    friend Tensor make_tensor(std::shared_ptr<detail::TensorImpl>);

    std::shared_ptr<detail::TensorImpl> impl_;
};

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl);

/// Records primitive operations executed on the current thread while it is
/// alive and replays their adjoints in reverse order on backward().
///
/// A tape may be consumed once; a second backward() throws TapeError.
/// Tapes nest: constructing one shadows the previous tape until destroyed.
class GradientTape {
public:
    using Adjoint = std::function<void(std::span<const Scalar> out_grad)>;

    GradientTape();
    ~GradientTape();
    GradientTape(const GradientTape&) = delete;
    GradientTape& operator=(const GradientTape&) = delete;

    static GradientTape* active();

    void record(std::vector<Tensor> inputs, const Tensor& output, Adjoint adjoint);
    void backward(const Tensor& loss);

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        std::vector<Tensor> inputs;
        Tensor output;
        Adjoint adjoint;
    };
    std::vector<Node> nodes_;
    GradientTape* previous_ = nullptr;
    bool consumed_ = false;
};

/// Suspends recording on this thread for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    GradientTape* saved_;
};

namespace detail {

// True when some input requires grad and a tape is recording.
bool should_record(std::initializer_list<const Tensor*> inputs);

// Accumulates `values` into the gradient of `t` if it requires grad.
void accumulate_grad(const Tensor& t, std::span<const Scalar> values);

}  // namespace detail

}  // namespace deepatlas
