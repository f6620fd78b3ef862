#pragma once

// One evaluation outcome per line, append-only JSONL results log.

#include <cstdint>
#include <string>
#include <vector>

#include "fewflow/errors.hpp"

namespace fewflow {

struct RunRecord {
    std::string record_id;
    std::string method;
    std::string scenario;  // "a" | "b" | "c" | "sweep_shots" | "sweep_ways" | "eval"
    std::string dataset_id;
    std::uint64_t seed = 0;
    std::size_t train_ways = 0;  // sweep_ways only
    std::size_t ways = 0;
    std::size_t shots = 0;
    std::size_t queries = 0;
    std::int64_t fold_id = -1;
    std::int64_t episode_id = -1;
    double balanced_accuracy = 0.0;
    std::size_t trunk_params = 0;
    std::size_t head_params = 0;
    std::size_t forest_nodes = 0;
    double forest_avg_depth = 0.0;
    double wall_clock_s = 0.0;
    std::string config_hash;

    // stable identifier derived from the semantic key fields
    void assign_id();
};

std::string record_to_jsonl(const RunRecord& r);
RunRecord record_from_jsonl(const std::string& line);

void append_records(const std::string& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_records(const std::string& path);

// FNV-1a over a canonical string; used for config hashes
std::string fnv1a_hex(const std::string& s);

}  // namespace fewflow
