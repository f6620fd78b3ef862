#pragma once

// From-scratch random forest (CART, Gini impurity, bootstrap, sqrt-feature
// subsampling) over flattened packet time series, with the node/depth size
// accounting reported next to accuracy.

#include <cstdint>
#include <optional>
#include <vector>

#include "fewflow/errors.hpp"

namespace fewflow {

struct ForestConfig {
    std::size_t n_estimators = 100;
    // nullopt = unbounded depth
    std::optional<std::size_t> max_depth;
    bool bootstrap = true;
    std::uint64_t seed = 0;
};

struct TreeNode {
    // leaf when feature < 0
    int feature = -1;
    double threshold = 0.0;
    std::int32_t left = -1, right = -1;
    std::vector<std::size_t> histogram;  // leaf class counts
};

struct Tree {
    std::vector<TreeNode> nodes;
    std::size_t depth = 0;  // max leaf depth; single-leaf tree has depth 0

    int predict_leaf(const std::vector<double>& x) const;  // node index
    int predict(const std::vector<double>& x) const;       // class (ties: lowest id)
};

struct Forest {
    std::vector<Tree> trees;
    std::size_t n_classes = 0;

    std::size_t node_count_total() const;
    double avg_depth() const;
};

Forest fit_forest(const std::vector<std::vector<double>>& X, const std::vector<int>& y,
                  const ForestConfig& cfg);

// majority vote over trees; ties -> lowest class id. `allowed` (optional)
// masks the vote tally to a class subset before the argmax.
int forest_predict(const Forest& f, const std::vector<double>& x);
int forest_predict_masked(const Forest& f, const std::vector<double>& x,
                          const std::vector<int>& allowed);

struct ForestStats {
    std::size_t total_nodes = 0;
    double avg_depth = 0.0;
};
ForestStats forest_stats(const Forest& f);

}  // namespace fewflow
