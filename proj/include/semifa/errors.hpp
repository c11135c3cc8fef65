#pragma once

#include <stdexcept>
#include <string>

namespace semifa {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid configuration or precondition on a tuning parameter (CLI exit code 2).
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed input data or schema mismatch (CLI exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

/// A value lies outside the domain of the function it was passed to.
class DomainError : public DataError {
public:
    using DataError::DataError;
};

/// Non-finite values, failed factorizations, or a violated numerical invariant (CLI exit code 4).
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Degenerate quantity: zero posterior mass, zero variance, too few replicates.
class DegenerateError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Rethrows the exception being handled with `context` prepended, keeping its library type.
[[noreturn]] inline void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const DegenerateError& e) {
        throw DegenerateError(context + ": " + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(context + ": " + e.what());
    } catch (const DomainError& e) {
        throw DomainError(context + ": " + e.what());
    } catch (const DataError& e) {
        throw DataError(context + ": " + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(context + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(context + ": " + e.what());
    }
}

}  // namespace semifa
