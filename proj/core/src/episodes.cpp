#include "fewflow/episodes.hpp"

#include <algorithm>

namespace fewflow {

SplitView SplitView::over(const Dataset& d, const std::vector<std::size_t>& idx) {
    SplitView v;
    v.dataset = &d;
    for (std::size_t i : idx) {
        if (i >= d.samples.size()) {
            throw DataError("split index " + std::to_string(i) + " out of range");
        }
        v.by_class[d.samples[i].label].push_back(i);
    }
    return v;
}

Episode sample_episode(const SplitView& split, std::size_t ways, std::size_t shots,
                       std::size_t queries, Rng& rng) {
    if (ways == 0 || shots == 0 || queries == 0) {
        throw EpisodeError("episode needs ways, shots and queries >= 1");
    }
    if (split.n_classes() < ways) {
        throw EpisodeError("episode needs " + std::to_string(ways) + " classes, split has " +
                           std::to_string(split.n_classes()));
    }

    // draw N classes uniformly without replacement
    std::vector<int> classes;
    classes.reserve(split.by_class.size());
    for (const auto& [cls, idxs] : split.by_class) classes.push_back(cls);
    for (std::size_t i = 0; i < ways; ++i) {
        std::size_t j = i + static_cast<std::size_t>(rng() % (classes.size() - i));
        std::swap(classes[i], classes[j]);
    }
    classes.resize(ways);

    Episode ep;
    ep.ways = ways;
    ep.shots = shots;
    ep.queries = queries;
    ep.classes = classes;
    const std::size_t need = shots + queries;
    for (std::size_t w = 0; w < ways; ++w) {
        const auto& pool = split.by_class.at(classes[w]);
        if (pool.size() < need) {
            throw EpisodeError("class " + std::to_string(classes[w]) + " has " +
                               std::to_string(pool.size()) + " samples, episode needs " +
                               std::to_string(need));
        }
        // partial Fisher-Yates: need distinct samples without replacement
        std::vector<std::size_t> picks = pool;
        for (std::size_t i = 0; i < need; ++i) {
            std::size_t j = i + static_cast<std::size_t>(rng() % (picks.size() - i));
            std::swap(picks[i], picks[j]);
        }
        for (std::size_t i = 0; i < shots; ++i) {
            ep.support_idx.push_back(picks[i]);
            ep.support_local.push_back(static_cast<int>(w));
        }
        for (std::size_t i = shots; i < need; ++i) {
            ep.query_idx.push_back(picks[i]);
            ep.query_local.push_back(static_cast<int>(w));
        }
    }
    return ep;
}

EpisodeStream::EpisodeStream(const SplitView& split, EpisodeStreamConfig cfg)
    : split_(&split), cfg_(cfg) {}

Episode EpisodeStream::at(std::size_t epoch, std::size_t index) const {
    if (epoch >= cfg_.epochs || index >= cfg_.episodes_per_epoch) {
        throw ContractError("episode stream index out of range");
    }
    Rng rng = make_rng(cfg_.seed, epoch, index);
    Episode ep = sample_episode(*split_, cfg_.ways, cfg_.shots, cfg_.queries, rng);
    ep.id = epoch * cfg_.episodes_per_epoch + index;
    return ep;
}

Episode EpisodeStream::at_flat(std::size_t i) const {
    return at(i / cfg_.episodes_per_epoch, i % cfg_.episodes_per_epoch);
}

std::vector<Episode> test_episode_batch(const SplitView& split, std::size_t ways,
                                        std::size_t shots, std::size_t queries, std::size_t count,
                                        std::uint64_t seed) {
    std::vector<Episode> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = make_rng(seed, 0xe9, i);
        Episode ep = sample_episode(split, ways, shots, queries, rng);
        ep.id = i;
        out.push_back(std::move(ep));
    }
    return out;
}

}  // namespace fewflow
