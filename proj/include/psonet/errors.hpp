#pragma once

#include <stdexcept>
#include <string>

namespace psonet {

// Invalid user input: bad config values, malformed files, out-of-range
// scores. The CLI maps this to exit code 2; everything else exits 1.
class ValidationError : public std::runtime_error {
public:
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace psonet
