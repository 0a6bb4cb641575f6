#pragma once

#include <stdexcept>
#include <string>

namespace pvae {

/** Process exit codes used by the command-line harness. */
enum class ExitCode : int {
    ok = 0,
    config = 2,
    data = 3,
    numerical = 4,
};

/** Invalid configuration or precondition on user-facing parameters. */
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** Missing, malformed or inconsistent data on disk. */
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** Non-finite values, divergence and similar numerical breakdowns. */
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/** Incompatible tensor or image shapes; the message names the operation. */
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& op, const std::string& what)
        : std::invalid_argument(op + ": " + what), op_(op) {}

    const std::string& op() const noexcept { return op_; }

private:
    std::string op_;
};

} // namespace pvae
