#pragma once

#include <stdexcept>
#include <string>

namespace fewflow {

// Process exit codes used by the CLI: 0 success, 2 config error,
// 3 data error, 4 numeric failure.
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
public:
    Error(std::string msg, ExitCode code)
        : std::runtime_error(std::move(msg)), code_(code) {}
    ExitCode exit_code() const { return code_; }

private:
    ExitCode code_;
};

// Violated operation contract: bad shapes, misuse of the tape, invalid
// arguments that are programming (or configuration) mistakes.
class ContractError : public Error {
public:
    explicit ContractError(std::string msg)
        : Error(std::move(msg), ExitCode::config) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(std::string msg)
        : Error(std::move(msg), ExitCode::config) {}
};

// Malformed input files, impossible splits, deficient episode sources.
class DataError : public Error {
public:
    explicit DataError(std::string msg)
        : Error(std::move(msg), ExitCode::data) {}
};

class EpisodeError : public DataError {
public:
    explicit EpisodeError(std::string msg) : DataError(std::move(msg)) {}
};

// NaN/Inf produced by a numeric op, diverged training runs.
class NumericError : public Error {
public:
    explicit NumericError(std::string msg)
        : Error(std::move(msg), ExitCode::numeric) {}
};

}  // namespace fewflow
