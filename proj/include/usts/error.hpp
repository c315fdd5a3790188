#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace usts {

enum class ErrorCode {
    Dimension,
    Config,
    Io,
    Format,
    Contract,
    EmptyDataset,
    DegenerateNode,
    NonFinite,
    Usage,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::Dimension: return "DIMENSION";
        case ErrorCode::Config: return "CONFIG";
        case ErrorCode::Io: return "IO";
        case ErrorCode::Format: return "FORMAT";
        case ErrorCode::Contract: return "CONTRACT";
        case ErrorCode::EmptyDataset: return "EMPTY_DATASET";
        case ErrorCode::DegenerateNode: return "DEGENERATE_NODE";
        case ErrorCode::NonFinite: return "NON_FINITE";
        case ErrorCode::Usage: return "USAGE";
    }
    return "UNKNOWN";
}

/// Base exception for every failure raised by the library. The code is what
/// the command-line tool reports as its machine-parsable error token.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error(ErrorCode::Dimension, w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error(ErrorCode::Config, w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error(ErrorCode::Io, w) {}
};
struct FormatError : Error {
    explicit FormatError(const std::string& w) : Error(ErrorCode::Format, w) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& w) : Error(ErrorCode::Contract, w) {}
};
struct EmptyDatasetError : Error {
    explicit EmptyDatasetError(const std::string& w) : Error(ErrorCode::EmptyDataset, w) {}
};
struct DegenerateNodeError : Error {
    explicit DegenerateNodeError(const std::string& w) : Error(ErrorCode::DegenerateNode, w) {}
};
struct NonFiniteError : Error {
    explicit NonFiniteError(const std::string& w) : Error(ErrorCode::NonFinite, w) {}
};
struct UsageError : Error {
    explicit UsageError(const std::string& w) : Error(ErrorCode::Usage, w) {}
};

}  // namespace usts
