#pragma once

#include <cstdint>
#include <vector>

#include "dpolab/tensor.hpp"

namespace dpolab {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    // Cosine decay of the effective learning rate over total_steps.
    // total_steps <= 0 means constant lr.
    std::int64_t total_steps = 0;
};

// lr * 0.5 * (1 + cos(pi * step / total)); step is 0-based.
double cosine_lr(double base_lr, std::int64_t step, std::int64_t total_steps);

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<TensorPtr> params, AdamConfig cfg);

    // One Adam update with bias correction at the scheduled learning rate.
    // Throws std::runtime_error naming the parameter if its gradient holds a
    // NaN/Inf; parameters are untouched in that case.
    void step();

    void zero_grad();

    std::int64_t step_count() const { return step_count_; }
    double current_lr() const;  // lr the next step() will use

private:
    std::vector<TensorPtr> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    std::int64_t step_count_ = 0;
};

}  // namespace dpolab
