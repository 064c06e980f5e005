#pragma once

#include <string>
#include <string_view>

#include "vloss/core/tensor.hpp"

namespace vloss {

/// The three supervision streams: boxes with pseudo masks, full panoptic
/// masks, and image-caption pairs.
enum class Stream { detection, panoptic, caption };

inline std::string_view to_string(Stream s) {
  switch (s) {
    case Stream::detection: return "detection";
    case Stream::panoptic: return "panoptic";
    case Stream::caption: return "caption";
  }
  return "?";
}

inline Stream parse_stream(std::string_view name) {
  if (name == "detection") return Stream::detection;
  if (name == "panoptic") return Stream::panoptic;
  if (name == "caption") return Stream::caption;
  throw ValidationError("unknown stream '" + std::string(name) + "'");
}

}  // namespace vloss
