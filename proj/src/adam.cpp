#include "dpolab/adam.hpp"

#include <cmath>
#include <stdexcept>

namespace dpolab {

double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return base_lr;
    if (step >= total_steps) return 0.0;
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

AdamOptimizer::AdamOptimizer(std::vector<TensorPtr> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
        p->ensure_grad();
        m_.emplace_back(p->data.size(), 0.0);
        v_.emplace_back(p->data.size(), 0.0);
    }
}

double AdamOptimizer::current_lr() const { return cosine_lr(cfg_.lr, step_count_, cfg_.total_steps); }

void AdamOptimizer::step() {
    // Validate every gradient before touching any parameter, so an aborted
    // step leaves the model in its pre-step state.
    for (const auto& p : params_) {
        for (double g : p->grad) {
            if (!std::isfinite(g)) {
                throw std::runtime_error("adam: non-finite gradient in parameter '" +
                                         (p->name.empty() ? std::string("<unnamed>") : p->name) + "'");
            }
        }
    }

    const double lr = current_lr();
    const std::int64_t t = step_count_ + 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));

    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        auto& p = *params_[pi];
        auto& m = m_[pi];
        auto& v = v_[pi];
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            const double g = p.grad[i];
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p.data[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
    ++step_count_;

    for (const auto& p : params_) {
        for (double x : p->data) {
            if (!std::isfinite(x)) {
                throw std::runtime_error("adam: non-finite value in parameter '" +
                                         (p->name.empty() ? std::string("<unnamed>") : p->name) +
                                         "' after step " + std::to_string(step_count_));
            }
        }
    }
}

void AdamOptimizer::zero_grad() {
    for (const auto& p : params_) p->zero_grad();
}

}  // namespace dpolab
