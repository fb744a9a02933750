#pragma once

namespace phylosmc {
inline constexpr const char* kVersion = "0.1.0";
}
