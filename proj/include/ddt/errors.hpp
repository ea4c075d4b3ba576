#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ddt {

// Invalid configuration value. `field()` is the dotted path of the offending
// key, e.g. "train.peak_lr".
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// Malformed binary file. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(std::uint64_t offset, const std::string& what)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// A dataset item failed to load.
class LoadError : public std::runtime_error {
public:
    LoadError(std::string path, const std::string& what)
        : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

class SamplingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace ddt
