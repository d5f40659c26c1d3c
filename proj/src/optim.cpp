#include "deepatlas/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace deepatlas {

void Adam::step(ParameterSet& params, Scalar lr) {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    auto& entries = params.entries();
    if (m_.empty()) {
        for (const auto& [name, t] : entries) {
            m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
            v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
        }
    } else if (m_.size() != entries.size()) {
        throw std::invalid_argument("Adam state does not match the parameter set");
    }
    ++steps_;
    const Scalar c1 = 1.0 - std::pow(options_.beta1, static_cast<Scalar>(steps_));
    const Scalar c2 = 1.0 - std::pow(options_.beta2, static_cast<Scalar>(steps_));
    for (std::size_t p = 0; p < entries.size(); ++p) {
        Tensor& t = entries[p].second;
        if (!t.has_grad()) continue;
        auto data = t.mutable_data();
        const auto grad = t.grad();
        auto& m = m_[p];
        auto& v = v_[p];
        for (std::size_t i = 0; i < m.size(); ++i) {
            const Scalar g = grad[i];
            m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g;
            v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g * g;
            data[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + options_.epsilon);
        }
    }
}

void Adam::reset() {
    steps_ = 0;
    m_.clear();
    v_.clear();
}

}  // namespace deepatlas
