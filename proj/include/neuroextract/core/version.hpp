#pragma once

namespace neuroextract {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace neuroextract
