#pragma once

// Flow-sample schema, CSV dataset files with JSON sidecar metadata,
// popularity-based class-disjoint partitioning, per-channel normalization,
// and the synthetic dataset generator.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fewflow/errors.hpp"

namespace fewflow {

struct DatasetProfile {
    std::size_t packets = 10;   // P
    std::size_t features = 4;   // F
    std::vector<std::string> feature_names;

    static DatasetProfile mirage_like();     // P=10, F=4
    static DatasetProfile appclass_like();   // P=20, F=2
    static DatasetProfile generic(std::size_t packets, std::size_t features);
};

struct FlowSample {
    std::vector<double> features;  // P*F, packet-major (row = packet)
    int label = 0;                 // dense class id
    std::string flow_id;
};

struct Dataset {
    std::vector<FlowSample> samples;
    DatasetProfile profile;
    std::map<int, std::size_t> class_counts;
    // original label in the source file -> dense id 0..C-1
    std::map<std::int64_t, int> class_id_map;

    std::size_t n_classes() const { return class_counts.size(); }
    void rebuild_counts();
};

struct ClassPartition {
    std::vector<int> train_classes, val_classes, test_classes;
    std::vector<std::size_t> train_idx, val_idx, test_idx;
};

struct NormStats {
    // per feature channel, over non-padding packet rows of the training split
    std::vector<double> mean;
    std::vector<double> stddev;  // zero-variance channels forced to 1
};

struct SynthConfig {
    std::size_t n_classes = 4;
    std::size_t samples_per_class_max = 100;
    double imbalance_rho = 1.0;   // >= 1
    double separability = 1.0;    // >= 0; approx. distance between class templates
    std::size_t packets = 10;
    std::size_t features = 4;
    std::uint64_t seed = 0;
};

// A packet row whose features are all exactly zero is tail padding.
bool is_padding_row(const FlowSample& s, std::size_t packet, std::size_t features);

// CSV with header flow_id,label,f_0_0,...,f_{P-1}_{F-1}; 17-significant-digit
// reals for bit-exact reload. A sidecar <path>.meta.json holds the profile
// and class-id mapping.
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path, const DatasetProfile& profile);
// Reads P/F/names from the sidecar instead of requiring a caller profile.
Dataset load_dataset_auto(const std::string& path);

ClassPartition partition_by_popularity(const Dataset& d, std::size_t n_train, std::size_t n_val,
                                       std::size_t n_test);

void save_partition(const ClassPartition& p, const std::string& path);
ClassPartition load_partition(const std::string& path);

// Per-class stratified 9:1 split of the given sample indices. The validation
// side takes max(1, floor(count/10)) samples per class.
struct MonolithicSplit {
    std::vector<std::size_t> fit_idx;
    std::vector<std::size_t> val_idx;
};
MonolithicSplit monolithic_split(const Dataset& d, const std::vector<std::size_t>& train_idx,
                                 std::uint64_t seed);

double imbalance_rho(const std::map<int, std::size_t>& class_counts);

NormStats normalize_fit(const Dataset& d, const std::vector<std::size_t>& train_idx);
FlowSample normalize_apply(const NormStats& stats, const FlowSample& s,
                           const DatasetProfile& profile);
// Convenience: a copy of d with every sample normalized.
Dataset normalize_dataset(const NormStats& stats, const Dataset& d);

Dataset synth_generate(const SynthConfig& cfg);

// round(max * rho^(-i/(C-1))) for i = 0..C-1
std::vector<std::size_t> synth_class_counts(std::size_t n_classes, std::size_t max_per_class,
                                            double rho);

}  // namespace fewflow
