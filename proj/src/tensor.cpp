#include "deepatlas/tensor.hpp"

#include <sstream>

namespace deepatlas {

namespace {
thread_local GradientTape* g_active_tape = nullptr;
}

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, std::vector<Scalar> data, bool requires_grad) {
    for (auto e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
    if (deepatlas::numel(shape) != static_cast<std::int64_t>(data.size())) {
        throw ShapeError("shape " + to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
    }
    impl_ = std::make_shared<detail::TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, Scalar value, bool requires_grad) {
    const auto n = deepatlas::numel(shape);
    if (n <= 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    return Tensor(std::move(shape), std::vector<Scalar>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::scalar(Scalar value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

std::int64_t Tensor::dim(std::int64_t axis) const {
    const auto r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(axis)];
}

Scalar Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() requires a single element, shape is " + to_string(shape()));
    return impl_->data[0];
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

Tensor make_tensor(std::shared_ptr<detail::TensorImpl> impl) { return Tensor(std::move(impl)); }

GradientTape::GradientTape() : previous_(g_active_tape) { g_active_tape = this; }

GradientTape::~GradientTape() { g_active_tape = previous_; }

GradientTape* GradientTape::active() { return g_active_tape; }

void GradientTape::record(std::vector<Tensor> inputs, const Tensor& output, Adjoint adjoint) {
    if (consumed_) throw TapeError("cannot record onto a tape after backward()");
    output.impl()->requires_grad = true;
    nodes_.push_back(Node{std::move(inputs), output, std::move(adjoint)});
}

void GradientTape::backward(const Tensor& loss) {
    if (consumed_) throw TapeError("backward() already called on this tape");
    if (!loss.defined() || loss.numel() != 1) {
        throw TapeError("backward() requires a scalar loss");
    }
    consumed_ = true;
    if (!loss.requires_grad()) return;

    auto& root = *loss.impl();
    root.ensure_grad();
    root.grad[0] += 1.0;

    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        for (const auto& in : it->inputs) {
            if (in.requires_grad()) in.impl()->ensure_grad();
        }
        const auto& out = *it->output.impl();
        if (out.grad.empty()) continue;
        it->adjoint(out.grad);
    }
    // Saved inputs are no longer needed; parameters keep their gradients.
    nodes_.clear();
    nodes_.shrink_to_fit();
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

namespace detail {

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (g_active_tape == nullptr) return false;
    for (const auto* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

void accumulate_grad(const Tensor& t, std::span<const Scalar> values) {
    if (!t.requires_grad()) return;
    auto& impl = *t.impl();
    impl.ensure_grad();
    for (std::size_t i = 0; i < values.size(); ++i) impl.grad[i] += values[i];
}

}  // namespace detail

}  // namespace deepatlas
