#pragma once

// Experiment configuration: a strict JSON file whose keys mirror the
// TrainConfig / ExperimentConfig fields. Unknown keys are hard errors.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fewflow/dataio.hpp"
#include "fewflow/trainers.hpp"

namespace fewflow {

struct ScenarioConfig {
    std::size_t folds = 5;
    std::size_t repetitions = 3;
    std::size_t selections = 30;
    std::size_t target_classes = 4;
    std::size_t rf_estimators = 100;
};

struct ExperimentConfig {
    // dataset source: a file path or a synthetic generator config
    std::string dataset_path;
    std::optional<SynthConfig> synth;
    std::string dataset_id;

    std::size_t n_train = 0, n_val = 0, n_test = 0;  // partition class counts

    std::vector<std::string> methods;
    std::vector<std::size_t> shot_grid = {5, 15, 50, 100, 200};
    std::vector<std::size_t> train_way_grid;
    std::vector<std::size_t> test_way_grid;
    std::size_t episodes = 1000;
    std::size_t ways = 4;
    std::size_t queries = 15;
    std::vector<std::uint64_t> seeds = {0};
    std::string output_dir = ".";
    std::string encoder = "cnn2";

    TrainConfig train;
    ScenarioConfig scenarios;

    // canonical serialized form of the parsed file (for config hashes)
    std::string canonical;
    std::string hash;

    void validate() const;
};

ExperimentConfig parse_experiment_config_file(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& text);

// per-method learning-rate conventions (halving schedule for the prototype
// trainer, fixed 1e-3 / 1e-4 for relation / maml) applied underneath the
// explicit config keys
TrainConfig train_config_for_method(const ExperimentConfig& cfg, const std::string& method);

bool is_rf_method(const std::string& method);
std::string source_model_key(const std::string& method);

}  // namespace fewflow
