#pragma once

// Confusion-matrix bookkeeping, balanced accuracy, and normal-approximation
// confidence intervals.

#include <cstddef>
#include <vector>

#include "fewflow/errors.hpp"

namespace fewflow {

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t classes);

    void add(int true_class, int predicted_class, std::size_t count = 1);
    std::size_t at(std::size_t t, std::size_t p) const;
    std::size_t classes() const { return c_; }
    std::size_t row_sum(std::size_t t) const;

private:
    std::size_t c_;
    std::vector<std::size_t> counts_;  // row-major, rows = true class
};

// unweighted mean of per-class recall; classes with zero support excluded
double balanced_accuracy(const ConfusionMatrix& cm);

struct MeanCi {
    double mean = 0.0;
    double half_width = 0.0;  // 1.96 * sd / sqrt(n), sample sd
    std::size_t n = 0;
    bool degenerate = false;  // n == 1 (half-width reported as 0)
};
MeanCi mean_ci95(const std::vector<double>& values);

}  // namespace fewflow
