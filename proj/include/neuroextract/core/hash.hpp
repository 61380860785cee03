#pragma once

#include <string>
#include <string_view>

namespace neuroextract {

/// Lowercase hex SHA-256 of `bytes`.
std::string sha256_hex(std::string_view bytes);

/// First 16 hex characters of sha256_hex; used as the config hash stamped
/// into every output artifact.
std::string short_hash(std::string_view bytes);

}  // namespace neuroextract
