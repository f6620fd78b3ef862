#pragma once

// Stochastic packet-series transformations for contrastive training. All
// transforms are pure given an explicit rng; composition order is fixed
// (hflip, shuffle, tail_occlude, gauss_noise) so seeded runs reproduce.

#include <cstdint>
#include <vector>

#include "fewflow/rng.hpp"

namespace fewflow {

struct AugmentPolicy {
    // per-transform application probability; 0 disables a transform
    double p_hflip = 0.5;
    double p_shuffle = 0.5;
    double p_tail_occlude = 0.5;
    double p_gauss_noise = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

// x is a P*F packet-major matrix, flattened row-major.
std::vector<double> hflip(const std::vector<double>& x, std::size_t P, std::size_t F);
std::vector<double> shuffle_packets(const std::vector<double>& x, std::size_t P, std::size_t F,
                                    Rng& rng);
// zeroes the last floor(P/2) packet rows
std::vector<double> tail_occlude(const std::vector<double>& x, std::size_t P, std::size_t F);
// adds N(0,1) to every entry, padding rows included
std::vector<double> gauss_noise(const std::vector<double>& x, std::size_t P, std::size_t F,
                                Rng& rng);

std::vector<double> random_view(const std::vector<double>& x, std::size_t P, std::size_t F,
                                const AugmentPolicy& policy, Rng& rng);

}  // namespace fewflow
