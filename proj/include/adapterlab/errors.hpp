#pragma once

#include <stdexcept>
#include <string>

namespace adapterlab {

// Shape/width disagreements between tensors or model pieces.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

// A caller violated an operation's precondition.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

// Backward was asked about a node that is not on the live tape.
struct StaleTapeError : std::runtime_error {
    explicit StaleTapeError(const std::string& msg) : std::runtime_error("stale tape: " + msg) {}
};

// Token id outside the configured vocabulary.
struct VocabError : std::runtime_error {
    explicit VocabError(const std::string& msg) : std::runtime_error("vocab error: " + msg) {}
};

// Candidate pool too small for the requested candidate set.
struct PoolError : std::runtime_error {
    explicit PoolError(const std::string& msg) : std::runtime_error("pool error: " + msg) {}
};

// Unknown block/slot position.
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

// Bad run configuration (schema violations, unknown strategy, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Filesystem failures, always carrying the path.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

// Checkpoint payload failed its checksum or digest binding.
struct IntegrityError : std::runtime_error {
    explicit IntegrityError(const std::string& msg) : std::runtime_error("integrity error: " + msg) {}
};

// Checkpoint scope selected zero parameters.
struct ScopeError : std::runtime_error {
    explicit ScopeError(const std::string& msg) : std::runtime_error("scope error: " + msg) {}
};

}  // namespace adapterlab
