#pragma once

namespace lprobe {

inline constexpr const char* kToolkitVersion = "0.1.0";

}  // namespace lprobe
