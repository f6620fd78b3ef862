#pragma once

#include <cstdint>
#include <vector>

#include "fewflow/tensor.hpp"

namespace fewflow {

enum class OptimKind { sgd, adam };
enum class LrSchedule { constant, halve_every_k_epochs };

struct OptimConfig {
    OptimKind kind = OptimKind::adam;
    double learning_rate = 1e-3;
    LrSchedule schedule = LrSchedule::constant;
    std::size_t halve_every = 10;  // epochs, when schedule is halving
    // adam moments
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter-set optimizer state. Parameters are leaf tensors updated in
// place; the schedule is applied at epoch boundaries only (set_epoch).
class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg);

    // params and grads must be shape-aligned, pairwise.
    void step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads);

    void set_epoch(std::size_t epoch);
    double learning_rate() const { return lr_; }
    std::size_t step_count() const { return step_count_; }
    const OptimConfig& config() const { return cfg_; }

private:
    OptimConfig cfg_;
    double lr_;
    std::size_t step_count_ = 0;
    std::vector<std::vector<double>> m_;  // first moments, adam only
    std::vector<std::vector<double>> v_;  // second moments, adam only
};

}  // namespace fewflow
