#pragma once

#include <stdexcept>
#include <string>

namespace tokenlab {

struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct input_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Restricted or truncated distribution carries no mass.
struct degenerate_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Response too short for the requested partition budget (2k > T).
struct partition_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct alignment_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct group_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct geometry_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct io_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace tokenlab
