#pragma once

namespace sonostack {

inline constexpr const char* kVersion = "0.1.0";

} // namespace sonostack
