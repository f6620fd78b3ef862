#include "fewflow/augment.hpp"

#include <algorithm>
#include <numeric>

#include "fewflow/errors.hpp"

namespace fewflow {

void AugmentPolicy::validate() const {
    for (double p : {p_hflip, p_shuffle, p_tail_occlude, p_gauss_noise}) {
        if (p < 0.0 || p > 1.0) {
            throw ConfigError("augment probability must be in [0,1], got " + std::to_string(p));
        }
    }
}

std::vector<double> hflip(const std::vector<double>& x, std::size_t P, std::size_t F) {
    std::vector<double> out(x.size());
    for (std::size_t p = 0; p < P; ++p) {
        std::copy(x.begin() + (P - 1 - p) * F, x.begin() + (P - p) * F, out.begin() + p * F);
    }
    return out;
}

std::vector<double> shuffle_packets(const std::vector<double>& x, std::size_t P, std::size_t F,
                                    Rng& rng) {
    std::vector<std::size_t> perm(P);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> out(x.size());
    for (std::size_t p = 0; p < P; ++p) {
        std::copy(x.begin() + perm[p] * F, x.begin() + (perm[p] + 1) * F, out.begin() + p * F);
    }
    return out;
}

std::vector<double> tail_occlude(const std::vector<double>& x, std::size_t P, std::size_t F) {
    std::vector<double> out = x;
    for (std::size_t p = P - P / 2; p < P; ++p) {
        std::fill(out.begin() + p * F, out.begin() + (p + 1) * F, 0.0);
    }
    return out;
}

std::vector<double> gauss_noise(const std::vector<double>& x, std::size_t P, std::size_t F,
                                Rng& rng) {
    (void)P;
    (void)F;
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> out = x;
    for (double& v : out) v += n(rng);
    return out;
}

std::vector<double> random_view(const std::vector<double>& x, std::size_t P, std::size_t F,
                                const AugmentPolicy& policy, Rng& rng) {
    policy.validate();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> out = x;
    if (policy.p_hflip > 0 && u(rng) < policy.p_hflip) out = hflip(out, P, F);
    if (policy.p_shuffle > 0 && u(rng) < policy.p_shuffle) out = shuffle_packets(out, P, F, rng);
    if (policy.p_tail_occlude > 0 && u(rng) < policy.p_tail_occlude) out = tail_occlude(out, P, F);
    if (policy.p_gauss_noise > 0 && u(rng) < policy.p_gauss_noise) out = gauss_noise(out, P, F, rng);
    return out;
}

}  // namespace fewflow
