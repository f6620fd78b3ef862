#include "fewflow/records.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fewflow {

namespace {
using json = nlohmann::ordered_json;
}

std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

void RunRecord::assign_id() {
    std::ostringstream os;
    os << method << "/" << scenario << "/" << dataset_id << "/s" << seed << "/tw" << train_ways
       << "/w" << ways << "/S" << shots << "/f" << fold_id << "/e" << episode_id;
    record_id = os.str();
}

std::string record_to_jsonl(const RunRecord& r) {
    json j;
    j["record_id"] = r.record_id;
    j["method"] = r.method;
    j["scenario"] = r.scenario;
    j["dataset_id"] = r.dataset_id;
    j["seed"] = r.seed;
    j["train_ways"] = r.train_ways;
    j["ways"] = r.ways;
    j["shots"] = r.shots;
    j["queries"] = r.queries;
    j["fold_id"] = r.fold_id;
    j["episode_id"] = r.episode_id;
    j["balanced_accuracy"] = r.balanced_accuracy;
    j["trunk_params"] = r.trunk_params;
    j["head_params"] = r.head_params;
    j["forest_nodes"] = r.forest_nodes;
    j["forest_avg_depth"] = r.forest_avg_depth;
    j["wall_clock_s"] = r.wall_clock_s;
    j["config_hash"] = r.config_hash;
    return j.dump();
}

RunRecord record_from_jsonl(const std::string& line) {
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed record line: " + line);
    RunRecord r;
    r.record_id = j.at("record_id").get<std::string>();
    r.method = j.at("method").get<std::string>();
    r.scenario = j.at("scenario").get<std::string>();
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.train_ways = j.at("train_ways").get<std::size_t>();
    r.ways = j.at("ways").get<std::size_t>();
    r.shots = j.at("shots").get<std::size_t>();
    r.queries = j.at("queries").get<std::size_t>();
    r.fold_id = j.at("fold_id").get<std::int64_t>();
    r.episode_id = j.at("episode_id").get<std::int64_t>();
    r.balanced_accuracy = j.at("balanced_accuracy").get<double>();
    r.trunk_params = j.at("trunk_params").get<std::size_t>();
    r.head_params = j.at("head_params").get<std::size_t>();
    r.forest_nodes = j.at("forest_nodes").get<std::size_t>();
    r.forest_avg_depth = j.at("forest_avg_depth").get<double>();
    r.wall_clock_s = j.at("wall_clock_s").get<double>();
    r.config_hash = j.at("config_hash").get<std::string>();
    return r;
}

void append_records(const std::string& path, const std::vector<RunRecord>& records) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw DataError("cannot open results log '" + path + "'");
    for (const RunRecord& r : records) out << record_to_jsonl(r) << "\n";
}

std::vector<RunRecord> read_records(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open results log '" + path + "'");
    std::vector<RunRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(record_from_jsonl(line));
    }
    return out;
}

}  // namespace fewflow
