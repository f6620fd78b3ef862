#include "fewflow/metrics.hpp"

#include <cmath>
#include <string>

namespace fewflow {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : c_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ContractError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(int true_class, int predicted_class, std::size_t count) {
    if (true_class < 0 || predicted_class < 0 || static_cast<std::size_t>(true_class) >= c_ ||
        static_cast<std::size_t>(predicted_class) >= c_) {
        throw ContractError("confusion matrix index out of range");
    }
    counts_[static_cast<std::size_t>(true_class) * c_ +
            static_cast<std::size_t>(predicted_class)] += count;
}

std::size_t ConfusionMatrix::at(std::size_t t, std::size_t p) const {
    return counts_.at(t * c_ + p);
}

std::size_t ConfusionMatrix::row_sum(std::size_t t) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < c_; ++p) s += at(t, p);
    return s;
}

double balanced_accuracy(const ConfusionMatrix& cm) {
    double recall_sum = 0.0;
    std::size_t supported = 0;
    for (std::size_t t = 0; t < cm.classes(); ++t) {
        const std::size_t n = cm.row_sum(t);
        if (n == 0) continue;  // zero-support classes excluded from the mean
        recall_sum += static_cast<double>(cm.at(t, t)) / static_cast<double>(n);
        supported++;
    }
    if (supported == 0) throw DataError("balanced_accuracy: no class has support");
    return recall_sum / static_cast<double>(supported);
}

MeanCi mean_ci95(const std::vector<double>& values) {
    if (values.empty()) throw DataError("mean_ci95: no values");
    MeanCi out;
    out.n = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / static_cast<double>(values.size());
    if (values.size() == 1) {
        out.degenerate = true;  // half-width undefined; reported as 0
        return out;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    out.half_width = 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
    return out;
}

}  // namespace fewflow
