#include "fewflow/optim.hpp"

#include <cmath>
#include <string>

namespace fewflow {

Optimizer::Optimizer(OptimConfig cfg) : cfg_(cfg), lr_(cfg.learning_rate) {
    if (!(cfg_.learning_rate > 0)) {
        throw ConfigError("optimizer learning_rate must be > 0, got " +
                          std::to_string(cfg_.learning_rate));
    }
    if (cfg_.schedule == LrSchedule::halve_every_k_epochs && cfg_.halve_every == 0) {
        throw ConfigError("halve_every must be >= 1");
    }
}

void Optimizer::set_epoch(std::size_t epoch) {
    if (cfg_.schedule == LrSchedule::halve_every_k_epochs) {
        lr_ = cfg_.learning_rate / std::pow(2.0, static_cast<double>(epoch / cfg_.halve_every));
    } else {
        lr_ = cfg_.learning_rate;
    }
}

void Optimizer::step(const std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) {
        throw ContractError("optimizer_step: param/grad count mismatch");
    }
    if (cfg_.kind == OptimKind::adam && m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params[i].numel(), 0.0);
            v_[i].assign(params[i].numel(), 0.0);
        }
    }
    ++step_count_;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape()) {
            throw ContractError("optimizer_step: shape mismatch at param " + std::to_string(i) +
                                ": " + shape_str(params[i].shape()) + " vs " +
                                shape_str(grads[i].shape()));
        }
        auto& w = const_cast<Tensor&>(params[i]).mutable_values();
        const auto& g = grads[i].values();
        if (cfg_.kind == OptimKind::sgd) {
            for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr_ * g[j];
        } else {
            // Adam with bias correction
            const double t = static_cast<double>(step_count_);
            const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
            const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= lr_ * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
        for (double x : w) {
            if (!std::isfinite(x)) throw NumericError("optimizer_step produced non-finite weight");
        }
    }
}

}  // namespace fewflow
