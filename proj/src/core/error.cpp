#include "neuroextract/core/error.hpp"

namespace neuroextract {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Format: return "format";
    case ErrorKind::Unsupported: return "unsupported";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Io: return "io";
    case ErrorKind::Geometry: return "geometry";
    case ErrorKind::Bounds: return "bounds";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::DegenerateInput: return "degenerate-input";
    case ErrorKind::Domain: return "domain";
    case ErrorKind::Config: return "config";
    case ErrorKind::Data: return "data";
    case ErrorKind::ExtractionFailed: return "extraction-failed";
    case ErrorKind::Split: return "split";
    case ErrorKind::Usage: return "usage";
  }
  return "unknown";
}

}  // namespace neuroextract
