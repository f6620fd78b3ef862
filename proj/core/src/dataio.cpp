#include "fewflow/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fewflow/rng.hpp"
#include "json.hpp"

namespace fewflow {

namespace {

using json = nlohmann::ordered_json;

std::string fmt17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double(const std::string& tok, std::size_t line, const std::string& what) {
    const char* begin = tok.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end == begin || *end != '\0') {
        throw DataError("line " + std::to_string(line) + ": non-numeric " + what + " '" + tok +
                        "'");
    }
    return v;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::vector<std::string> default_feature_names(std::size_t features) {
    static const char* known[] = {"pkt_size", "direction", "iat", "win_size"};
    std::vector<std::string> names;
    for (std::size_t f = 0; f < features; ++f) {
        if (f < 4) {
            names.emplace_back(known[f]);
        } else {
            names.push_back("f" + std::to_string(f));
        }
    }
    return names;
}

}  // namespace

DatasetProfile DatasetProfile::mirage_like() { return generic(10, 4); }

DatasetProfile DatasetProfile::appclass_like() { return generic(20, 2); }

DatasetProfile DatasetProfile::generic(std::size_t packets, std::size_t features) {
    DatasetProfile p;
    p.packets = packets;
    p.features = features;
    p.feature_names = default_feature_names(features);
    return p;
}

void Dataset::rebuild_counts() {
    class_counts.clear();
    for (const auto& s : samples) class_counts[s.label]++;
}

bool is_padding_row(const FlowSample& s, std::size_t packet, std::size_t features) {
    for (std::size_t f = 0; f < features; ++f) {
        if (s.features[packet * features + f] != 0.0) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

void save_dataset(const Dataset& d, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    const std::size_t P = d.profile.packets, F = d.profile.features;
    out << "flow_id,label";
    for (std::size_t p = 0; p < P; ++p) {
        for (std::size_t f = 0; f < F; ++f) out << ",f_" << p << "_" << f;
    }
    out << "\n";
    for (const auto& s : d.samples) {
        if (s.flow_id.find(',') != std::string::npos) {
            throw DataError("flow_id '" + s.flow_id + "' contains a comma");
        }
        out << s.flow_id << "," << s.label;
        for (double v : s.features) out << "," << fmt17(v);
        out << "\n";
    }
    out.close();

    json meta;
    meta["packets"] = P;
    meta["features"] = F;
    meta["feature_names"] = d.profile.feature_names;
    json cmap = json::object();
    for (const auto& [orig, dense] : d.class_id_map) cmap[std::to_string(orig)] = dense;
    meta["class_id_map"] = cmap;
    std::ofstream mout(path + ".meta.json");
    if (!mout) throw DataError("cannot open '" + path + ".meta.json' for writing");
    mout << meta.dump(2) << "\n";
}

Dataset load_dataset(const std::string& path, const DatasetProfile& profile) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset file '" + path + "'");
    const std::size_t P = profile.packets, F = profile.features;
    const std::size_t ncols = 2 + P * F;

    std::string line;
    if (!std::getline(in, line)) throw DataError("'" + path + "': empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    {
        auto header = split_csv(line);
        if (header.size() != ncols || header[0] != "flow_id" || header[1] != "label") {
            throw DataError("'" + path + "': header does not match profile (P=" +
                            std::to_string(P) + ", F=" + std::to_string(F) + ")");
        }
    }

    struct RawRow {
        std::string flow_id;
        std::int64_t label;
        std::vector<double> features;
    };
    std::vector<RawRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto toks = split_csv(line);
        if (toks.size() != ncols) {
            throw DataError("line " + std::to_string(lineno) + ": expected " +
                            std::to_string(ncols) + " fields, got " + std::to_string(toks.size()));
        }
        RawRow r;
        r.flow_id = toks[0];
        r.label = static_cast<std::int64_t>(parse_double(toks[1], lineno, "label"));
        r.features.reserve(P * F);
        for (std::size_t i = 2; i < ncols; ++i) {
            r.features.push_back(parse_double(toks[i], lineno, "feature"));
        }
        rows.push_back(std::move(r));
    }

    // dense relabeling: ascending original label -> 0..C-1
    std::map<std::int64_t, int> cmap;
    for (const auto& r : rows) cmap.emplace(r.label, 0);
    int next = 0;
    for (auto& [orig, dense] : cmap) dense = next++;

    Dataset d;
    d.profile = profile;
    d.class_id_map = cmap;
    d.samples.reserve(rows.size());
    for (auto& r : rows) {
        FlowSample s;
        s.flow_id = std::move(r.flow_id);
        s.label = cmap.at(r.label);
        s.features = std::move(r.features);
        d.samples.push_back(std::move(s));
    }
    d.rebuild_counts();
    return d;
}

Dataset load_dataset_auto(const std::string& path) {
    std::ifstream min(path + ".meta.json");
    if (!min) throw DataError("missing sidecar '" + path + ".meta.json'");
    json meta = json::parse(min, nullptr, /*allow_exceptions=*/false);
    if (meta.is_discarded()) throw DataError("malformed sidecar '" + path + ".meta.json'");
    DatasetProfile p;
    p.packets = meta.at("packets").get<std::size_t>();
    p.features = meta.at("features").get<std::size_t>();
    p.feature_names = meta.at("feature_names").get<std::vector<std::string>>();
    return load_dataset(path, p);
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

ClassPartition partition_by_popularity(const Dataset& d, std::size_t n_train, std::size_t n_val,
                                       std::size_t n_test) {
    if (n_train + n_val + n_test != d.n_classes()) {
        throw ConfigError("partition counts " + std::to_string(n_train) + "+" +
                          std::to_string(n_val) + "+" + std::to_string(n_test) +
                          " do not sum to " + std::to_string(d.n_classes()) + " classes");
    }
    std::vector<std::pair<int, std::size_t>> by_pop(d.class_counts.begin(),
                                                    d.class_counts.end());
    std::sort(by_pop.begin(), by_pop.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;  // popularity desc
        return a.first < b.first;                              // ties: ascending id
    });

    ClassPartition part;
    std::map<int, int> split_of;  // class -> 0 train / 1 val / 2 test
    for (std::size_t i = 0; i < by_pop.size(); ++i) {
        int cls = by_pop[i].first;
        if (i < n_train) {
            part.train_classes.push_back(cls);
            split_of[cls] = 0;
        } else if (i < n_train + n_val) {
            part.val_classes.push_back(cls);
            split_of[cls] = 1;
        } else {
            part.test_classes.push_back(cls);
            split_of[cls] = 2;
        }
    }
    for (std::size_t i = 0; i < d.samples.size(); ++i) {
        switch (split_of.at(d.samples[i].label)) {
            case 0: part.train_idx.push_back(i); break;
            case 1: part.val_idx.push_back(i); break;
            default: part.test_idx.push_back(i); break;
        }
    }
    return part;
}

void save_partition(const ClassPartition& p, const std::string& path) {
    json j;
    j["train_classes"] = p.train_classes;
    j["val_classes"] = p.val_classes;
    j["test_classes"] = p.test_classes;
    j["train_idx"] = p.train_idx;
    j["val_idx"] = p.val_idx;
    j["test_idx"] = p.test_idx;
    std::ofstream out(path);
    if (!out) throw DataError("cannot open '" + path + "' for writing");
    out << j.dump(2) << "\n";
}

ClassPartition load_partition(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open partition file '" + path + "'");
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed partition file '" + path + "'");
    ClassPartition p;
    p.train_classes = j.at("train_classes").get<std::vector<int>>();
    p.val_classes = j.at("val_classes").get<std::vector<int>>();
    p.test_classes = j.at("test_classes").get<std::vector<int>>();
    p.train_idx = j.at("train_idx").get<std::vector<std::size_t>>();
    p.val_idx = j.at("val_idx").get<std::vector<std::size_t>>();
    p.test_idx = j.at("test_idx").get<std::vector<std::size_t>>();
    return p;
}

MonolithicSplit monolithic_split(const Dataset& d, const std::vector<std::size_t>& train_idx,
                                 std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t idx : train_idx) by_class[d.samples[idx].label].push_back(idx);

    MonolithicSplit out;
    for (auto& [cls, idxs] : by_class) {
        if (idxs.size() < 2) {
            throw DataError("monolithic_split: class " + std::to_string(cls) +
                            " has only " + std::to_string(idxs.size()) + " sample(s)");
        }
        Rng rng = make_rng(seed, static_cast<std::uint64_t>(cls), 0x9a);
        std::shuffle(idxs.begin(), idxs.end(), rng);
        // 9:1 with at least one validation sample per class
        std::size_t n_val = std::max<std::size_t>(1, idxs.size() / 10);
        for (std::size_t i = 0; i < idxs.size(); ++i) {
            (i < n_val ? out.val_idx : out.fit_idx).push_back(idxs[i]);
        }
    }
    std::sort(out.fit_idx.begin(), out.fit_idx.end());
    std::sort(out.val_idx.begin(), out.val_idx.end());
    return out;
}

double imbalance_rho(const std::map<int, std::size_t>& class_counts) {
    if (class_counts.empty()) throw DataError("imbalance_rho: no classes");
    std::size_t mn = SIZE_MAX, mx = 0;
    for (const auto& [cls, n] : class_counts) {
        mn = std::min(mn, n);
        mx = std::max(mx, n);
    }
    if (mn == 0) throw DataError("imbalance_rho: class with zero samples");
    return static_cast<double>(mx) / static_cast<double>(mn);
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

NormStats normalize_fit(const Dataset& d, const std::vector<std::size_t>& train_idx) {
    if (train_idx.size() < 2) throw DataError("normalize_fit: need at least 2 train samples");
    const std::size_t P = d.profile.packets, F = d.profile.features;
    std::vector<double> sum(F, 0.0), sumsq(F, 0.0);
    std::vector<std::size_t> n(F, 0);
    for (std::size_t idx : train_idx) {
        const FlowSample& s = d.samples[idx];
        for (std::size_t p = 0; p < P; ++p) {
            if (is_padding_row(s, p, F)) continue;
            for (std::size_t f = 0; f < F; ++f) {
                double v = s.features[p * F + f];
                sum[f] += v;
                sumsq[f] += v * v;
                n[f]++;
            }
        }
    }
    NormStats st;
    st.mean.resize(F);
    st.stddev.resize(F);
    for (std::size_t f = 0; f < F; ++f) {
        if (n[f] == 0) {
            st.mean[f] = 0.0;
            st.stddev[f] = 1.0;
            continue;
        }
        const double m = sum[f] / static_cast<double>(n[f]);
        double var = sumsq[f] / static_cast<double>(n[f]) - m * m;  // population
        st.mean[f] = m;
        st.stddev[f] = var > 1e-24 ? std::sqrt(var) : 1.0;
    }
    return st;
}

FlowSample normalize_apply(const NormStats& stats, const FlowSample& s,
                           const DatasetProfile& profile) {
    const std::size_t P = profile.packets, F = profile.features;
    if (stats.mean.size() != F) throw ContractError("normalize_apply: stats/profile mismatch");
    FlowSample out = s;
    for (std::size_t p = 0; p < P; ++p) {
        if (is_padding_row(s, p, F)) continue;  // padding stays exactly 0
        for (std::size_t f = 0; f < F; ++f) {
            out.features[p * F + f] = (s.features[p * F + f] - stats.mean[f]) / stats.stddev[f];
        }
    }
    return out;
}

Dataset normalize_dataset(const NormStats& stats, const Dataset& d) {
    Dataset out = d;
    for (auto& s : out.samples) s = normalize_apply(stats, s, d.profile);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

std::vector<std::size_t> synth_class_counts(std::size_t n_classes, std::size_t max_per_class,
                                            double rho) {
    std::vector<std::size_t> counts(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        double frac = n_classes <= 1 ? 1.0
                                     : std::pow(rho, -static_cast<double>(c) /
                                                          static_cast<double>(n_classes - 1));
        counts[c] = static_cast<std::size_t>(
            std::llround(static_cast<double>(max_per_class) * frac));
        counts[c] = std::max<std::size_t>(1, counts[c]);
    }
    return counts;
}

Dataset synth_generate(const SynthConfig& cfg) {
    if (cfg.n_classes < 2) throw ConfigError("synth_generate: n_classes must be >= 2");
    if (cfg.imbalance_rho < 1.0) throw ConfigError("synth_generate: imbalance_rho must be >= 1");
    if (cfg.separability < 0.0) throw ConfigError("synth_generate: separability must be >= 0");

    const std::size_t P = cfg.packets, F = cfg.features;
    const std::size_t dir = 1;  // direction channel, when present
    const bool has_dir = F >= 2;

    Dataset d;
    d.profile = DatasetProfile::generic(P, F);

    auto counts = synth_class_counts(cfg.n_classes, cfg.samples_per_class_max, cfg.imbalance_rho);

    // Class templates: unit direction in (non-direction-channel) feature
    // space scaled so `separability` roughly equals the inter-template
    // distance; class signal in the direction channel is a Bernoulli sign
    // pattern whose bias also fades to 0.5 as separability goes to 0.
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double dir_spread = 0.5 * std::min(cfg.separability / 10.0, 1.0);

    std::vector<std::vector<double>> templates(cfg.n_classes);
    std::vector<std::vector<double>> dir_prob(cfg.n_classes);
    {
        Rng rng = make_rng(cfg.seed, 0xc1a5);
        for (std::size_t c = 0; c < cfg.n_classes; ++c) {
            std::vector<double> t(P * F, 0.0);
            double norm2 = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
                for (std::size_t f = 0; f < F; ++f) {
                    if (has_dir && f == dir) continue;
                    double g = gauss(rng);
                    t[p * F + f] = g;
                    norm2 += g * g;
                }
            }
            const double norm = std::sqrt(norm2);
            if (norm > 0) {
                for (double& v : t) v *= 0.5 * cfg.separability / norm;
            }
            templates[c] = std::move(t);

            std::vector<double> pr(P, 0.5);
            if (has_dir) {
                for (std::size_t p = 0; p < P; ++p) {
                    double u = 2.0 * unif(rng) - 1.0;
                    pr[p] = std::clamp(0.5 + dir_spread * u, 0.0, 1.0);
                }
            }
            dir_prob[c] = std::move(pr);
        }
    }

    for (std::size_t c = 0; c < cfg.n_classes; ++c) {
        Rng rng = make_rng(cfg.seed, 0x5a11, c);
        for (std::size_t i = 0; i < counts[c]; ++i) {
            FlowSample s;
            s.label = static_cast<int>(c);
            s.flow_id = "synth-c" + std::to_string(c) + "-" + std::to_string(i);
            s.features.resize(P * F);
            for (std::size_t p = 0; p < P; ++p) {
                for (std::size_t f = 0; f < F; ++f) {
                    if (has_dir && f == dir) {
                        s.features[p * F + f] = unif(rng) < dir_prob[c][p] ? 1.0 : -1.0;
                    } else {
                        s.features[p * F + f] = templates[c][p * F + f] + gauss(rng);
                    }
                }
            }
            // a fifth of the flows are shorter than P packets -> zero padding
            if (unif(rng) < 0.2 && P > 1) {
                std::size_t len = 1 + static_cast<std::size_t>(rng() % (P - 1));
                for (std::size_t p = len; p < P; ++p) {
                    for (std::size_t f = 0; f < F; ++f) s.features[p * F + f] = 0.0;
                }
            }
            d.samples.push_back(std::move(s));
        }
        d.class_id_map[static_cast<int>(c)] = static_cast<int>(c);
    }
    d.rebuild_counts();
    return d;
}

}  // namespace fewflow
