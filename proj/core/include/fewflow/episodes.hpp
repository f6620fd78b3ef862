#pragma once

// Class-balanced (N-way, S-shot, Q-query) episode construction and the
// deterministic epoch/episode streams that drive meta-training and all
// episodic evaluation. Episode rngs derive hierarchically from
// (seed, epoch, index) so sweeps can reuse identical test episodes across
// methods.

#include <cstdint>
#include <map>
#include <vector>

#include "fewflow/dataio.hpp"
#include "fewflow/rng.hpp"

namespace fewflow {

// Per-class sample index view over one split of a dataset.
struct SplitView {
    const Dataset* dataset = nullptr;
    std::map<int, std::vector<std::size_t>> by_class;

    static SplitView over(const Dataset& d, const std::vector<std::size_t>& idx);
    std::size_t n_classes() const { return by_class.size(); }
};

struct Episode {
    std::size_t ways = 0;   // N
    std::size_t shots = 0;  // S
    std::size_t queries = 0;  // Q
    std::vector<int> classes;  // global class per local label (bijection 0..N-1)
    std::vector<std::size_t> support_idx;  // N*S dataset indices, way-major
    std::vector<int> support_local;
    std::vector<std::size_t> query_idx;    // N*Q dataset indices, way-major
    std::vector<int> query_local;
    std::uint64_t id = 0;  // stable id within a stream/batch
};

Episode sample_episode(const SplitView& split, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng);

struct EpisodeStreamConfig {
    std::size_t epochs = 200;
    std::size_t episodes_per_epoch = 100;
    std::size_t ways = 5;
    std::size_t shots = 5;
    std::size_t queries = 15;
    std::uint64_t seed = 0;
};

// Deterministic, random-access stream of exactly epochs*episodes_per_epoch
// episodes.
class EpisodeStream {
public:
    EpisodeStream(const SplitView& split, EpisodeStreamConfig cfg);

    std::size_t size() const { return cfg_.epochs * cfg_.episodes_per_epoch; }
    std::size_t epochs() const { return cfg_.epochs; }
    std::size_t episodes_per_epoch() const { return cfg_.episodes_per_epoch; }
    Episode at(std::size_t epoch, std::size_t index) const;
    Episode at_flat(std::size_t i) const;

private:
    const SplitView* split_;
    EpisodeStreamConfig cfg_;
};

// `count` independent episodes from a (test) split; shared across methods
// when called with the same seed.
std::vector<Episode> test_episode_batch(const SplitView& split, std::size_t ways,
                                        std::size_t shots, std::size_t queries, std::size_t count,
                                        std::uint64_t seed);

}  // namespace fewflow
