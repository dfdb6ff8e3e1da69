#include "fedvirt/errors.h"

namespace fedvirt {

ParseError::ParseError(const std::string& what, std::uint64_t offset)
    : std::runtime_error(what + " (at byte offset " + std::to_string(offset) +
                         ")"),
      offset_(offset) {}

ConfigError::ConfigError(const std::string& key_path, const std::string& what)
    : std::runtime_error("config key '" + key_path + "': " + what),
      key_path_(key_path) {}

}  // namespace fedvirt
