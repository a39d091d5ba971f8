// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mpreid/tensor.hpp"

namespace mpreid {

using TensorMap = std::map<std::string, Tensor>;

/// Single-file named-tensor archive.
///
/// Layout: 8-byte magic "MPRTNSR1", u64 little-endian manifest length, a
/// JSON manifest {"tensors":[{"name","shape","dtype":"f64","offset"}]},
/// then the raw little-endian float64 buffers. Offsets are relative to the
/// first byte after the manifest. Entries are written in name order.
void save_archive(const std::filesystem::path& path, const TensorMap& tensors);
TensorMap load_archive(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

}  // namespace mpreid
