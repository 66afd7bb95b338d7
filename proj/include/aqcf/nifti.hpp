#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include "aqcf/data.hpp"

namespace aqcf {

enum class NiftiType : std::int16_t { uint8 = 2, int16 = 4, float32 = 16, float64 = 64 };

/// Voxel-to-world affine rows (srow_x, srow_y, srow_z).
using Affine = std::array<std::array<double, 4>, 3>;

struct NiftiVolume {
  Tensor data;  // [X, Y, Z], float64 values
  Spacing spacing{1.0, 1.0, 1.0};
  Affine affine{{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}}};
  NiftiType datatype = NiftiType::float32;
};

/// Axis codes of an affine: the world direction each voxel axis points to,
/// e.g. "RAS" for the identity, "LPS" for diag(-1, -1, 1).
std::string orientation_of(const Affine& affine);

/// Axis permutation and flips bringing the volume to `target` codes (e.g. "RAS").
NiftiVolume reorient(const NiftiVolume& v, const std::string& target);

/// RAS for CT, LAS for MRI.
std::string canonical_orientation(Modality m);

/// Uncompressed single-file (n+1) or pair (ni1, .hdr/.img) NIfTI-1 of datatype
/// uint8, int16, float32 or float64, either byte order. When `target` is set
/// the volume is reoriented to it.
NiftiVolume read_nifti(const std::string& path, const std::optional<std::string>& target = std::nullopt);
NiftiVolume read_nifti_bytes(const std::string& bytes, const std::optional<std::string>& target = std::nullopt);

/// Single-file little-endian n+1 with the sform set from `affine`.
void write_nifti(const std::string& path, const NiftiVolume& v);
std::string write_nifti_bytes(const NiftiVolume& v);

/// Reads image (and label when given) reoriented to the modality's canonical orientation.
RawVolume load_volume(const ManifestEntry& entry);

}  // namespace aqcf
