#pragma once

// Versioned container shared by every persisted model.
//
//   0  char[8] "LSEGMODL"
//   8  u32     container version
//  12  u32     section tag (ModelSection)
//  16  ...     section payload, little-endian

#include <cstdint>
#include <string>
#include <string_view>

#include "layerseg/binary_io.hpp"

namespace layerseg {

inline constexpr std::string_view kModelMagic = "LSEGMODL";
inline constexpr std::uint32_t kModelVersion = 1;

enum class ModelSection : std::uint32_t { shape_prior = 1, appearance = 2 };

inline std::string section_name(std::uint32_t tag) {
  switch (tag) {
    case static_cast<std::uint32_t>(ModelSection::shape_prior):
      return "shape-prior";
    case static_cast<std::uint32_t>(ModelSection::appearance):
      return "appearance";
    default:
      return "unknown(" + std::to_string(tag) + ")";
  }
}

inline void write_model_header(io::Writer& w, ModelSection section) {
  w.bytes(kModelMagic);
  w.u32(kModelVersion);
  w.u32(static_cast<std::uint32_t>(section));
}

inline void read_model_header(io::Reader& r, ModelSection expected) {
  if (r.bytes(kModelMagic.size()) != kModelMagic) {
    throw FormatError("'" + r.origin() + "' is not a model file (bad magic)");
  }
  const std::uint32_t version = r.u32();
  if (version != kModelVersion) {
    throw FormatError("model file '" + r.origin() + "' has version " + std::to_string(version) +
                      ", this build reads version " + std::to_string(kModelVersion));
  }
  const std::uint32_t tag = r.u32();
  if (tag != static_cast<std::uint32_t>(expected)) {
    throw FormatError("model file '" + r.origin() + "' holds a " + section_name(tag) +
                      " section, expected " +
                      section_name(static_cast<std::uint32_t>(expected)));
  }
}

}  // namespace layerseg
