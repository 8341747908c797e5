#pragma once

#include <stdexcept>
#include <string>

namespace wcm {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (argument/dimension/degenerate/invariant -> 2,
// stage dependency -> 3, format -> 4).

class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

class ArgumentError : public std::runtime_error {
public:
    explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inputs that are mathematically out of domain (near-zero norm vectors,
// antipodal embedding pairs).
class DegenerateInputError : public std::runtime_error {
public:
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

class InvariantError : public std::runtime_error {
public:
    explicit InvariantError(const std::string& msg) : std::runtime_error(msg) {}
};

// A pipeline stage was invoked before the stages it depends on.
class StageDependencyError : public std::runtime_error {
public:
    explicit StageDependencyError(const std::string& msg) : std::runtime_error(msg) {}
};

// Unreadable or version-mismatched artifact files.
class FormatError : public std::runtime_error {
public:
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace wcm
