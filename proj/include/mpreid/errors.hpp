// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpreid {

// Exit codes used by the command-line tool.
enum class ExitCode : int {
    ok = 0,
    validation = 2,
    numeric = 3,
    generator = 4,
};

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::validation; }
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

// Misuse of an API contract (e.g. backward on a non-scalar).
class ContractError : public Error {
public:
    using Error::Error;
};

// Operation invoked in the wrong state (e.g. backward twice on one tape).
class StateError : public Error {
public:
    using Error::Error;
};

class InputError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class InvariantError : public Error {
public:
    using Error::Error;
};

class EvaluationError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    ParseError(const std::string& message, std::size_t line)
        : Error("line " + std::to_string(line) + ": " + message), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class GenerationError : public Error {
public:
    GenerationError(const std::string& message, std::vector<std::int64_t> identities)
        : Error(message), identities_(std::move(identities)) {}
    const std::vector<std::int64_t>& identities() const noexcept { return identities_; }
    ExitCode exit_code() const noexcept override { return ExitCode::generator; }

private:
    std::vector<std::int64_t> identities_;
};

// Training aborted because a loss became non-finite.
class TrainingAbort : public NumericError {
public:
    TrainingAbort(const std::string& message, std::size_t step)
        : NumericError(message), step_(step) {}
    std::size_t step() const noexcept { return step_; }

private:
    std::size_t step_;
};

}  // namespace mpreid
