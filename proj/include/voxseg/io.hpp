#pragma once

#include <string>
#include <vector>

#include "voxseg/volume.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// Portable raw volume format:
//   8-byte magic "VOXRAW01"
//   uint32 little-endian metadata length
//   UTF-8 JSON metadata: {"dims":[D,H,W], "spacing":[sd,sh,sw],
//                         "dtype":"f32", "kind":"image"|"label", "id":...}
//   D*H*W little-endian float32 payload
// ---------------------------------------------------------------------------

void write_vox(const std::string& path, const Volume& v);
void write_vox_labels(const std::string& path, const LabelMap& l);

Volume load_volume_vox(const std::string& path);
LabelMap load_labels_vox(const std::string& path);

// ---------------------------------------------------------------------------
// NIfTI-1 reader (.nii / .nii.gz): little-endian single-file images with
// datatype uint8 / int16 / int32 / float32 / float64, cast to float32.
// ---------------------------------------------------------------------------

Volume load_volume_nifti(const std::string& path);
LabelMap load_labels_nifti(const std::string& path);

/// Minimal single-file NIfTI-1 label writer: uint8 payload, pixdim copied
/// from the map's spacing. Readable by load_labels_nifti.
void write_nifti_labels(const std::string& path, const LabelMap& l);

/// Dispatch on extension: .vox, or .nii/.nii.gz.
Volume load_volume(const std::string& path);
LabelMap load_labels(const std::string& path);

// ---------------------------------------------------------------------------
// Dataset manifest: JSON {"cases":[{"id":..,"image":..,"labels":..}, ...]}.
// Relative paths are resolved against the manifest's directory.
// ---------------------------------------------------------------------------

struct CaseEntry {
  std::string id;
  std::string image_path;
  std::string labels_path;
};

std::vector<CaseEntry> load_manifest(const std::string& path);
void write_manifest(const std::string& path, const std::vector<CaseEntry>& cases);

}  // namespace voxseg
