#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "qualdyn/errors.hpp"

namespace qualdyn::cli {

enum ExitCode : int { kSuccess = 0, kValidation = 1, kNumerical = 2, kNotConverged = 3 };

/// Invalid experiment configuration; `field` is the dotted path of the offending key.
class ConfigError : public PreconditionError {
public:
    ConfigError(const std::string& field, const std::string& what)
        : PreconditionError(field + ": " + what), field_(field) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

inline constexpr const char* kVersion = "0.1.0";

/// Applies `key.sub=value` to a config tree. The value is read as JSON when it
/// parses, otherwise as a string.
void apply_override(nlohmann::ordered_json& config, const std::string& assignment);

/// Hex SHA-256 of a file's bytes.
std::string file_digest(const std::string& path);

/// Entry point shared by the executable and the tests. `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qualdyn::cli
