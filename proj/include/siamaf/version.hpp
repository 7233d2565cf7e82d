#pragma once

namespace siamaf {

inline constexpr const char* kVersion = "1.0.0";

}  // namespace siamaf
