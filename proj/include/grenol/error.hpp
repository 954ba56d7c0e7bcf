#pragma once

#include <stdexcept>
#include <string>

namespace grenol {

/// Incompatible tensor shapes passed to an operation.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Malformed or invalid input data (CSV tables, subject lookups, metric names).
class DataError : public std::runtime_error {
public:
    enum class Kind {
        missing_column,
        duplicate_roi,
        non_finite,
        roi_count,
        invalid_value,
        unknown_subject,
        unknown_metric,
        io,
    };

    DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Non-finite loss or other numeric breakdown during training/sampling.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Checkpoint file is unreadable, truncated, or incompatible with the expected model.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace grenol
