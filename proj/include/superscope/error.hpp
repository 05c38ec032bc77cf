#pragma once

#include <stdexcept>
#include <string>

namespace superscope {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// dimension / index mismatches
struct shape_error : error {
    using error::error;
};

// malformed files, unreadable paths
struct io_error : error {
    using error::error;
};

// bad parameters or unresolvable targets
struct config_error : error {
    using error::error;
};

} // namespace superscope
