#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fedvirt {

// A caller broke an operation's precondition (shape mismatch, bad label,
// missing positive pair, ...). Maps to CLI exit code 3.
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// A sanctioned operation produced NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Malformed binary input. `offset` is the byte position where parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::uint64_t offset);
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

// Invalid configuration. The message always carries the offending key path.
// Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key_path, const std::string& what);
  const std::string& key_path() const { return key_path_; }

 private:
  std::string key_path_;
};

}  // namespace fedvirt
