// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mpreid/prompts.hpp"
#include "mpreid/tensor.hpp"

namespace mpreid {

/// Closed attribute schema: ordered names, each with its allowed values.
struct AttributeSchema {
    std::vector<std::pair<std::string, std::vector<std::string>>> fields;

    static AttributeSchema pedestrian();
    const std::vector<std::string>* values(const std::string& name) const;
    bool contains(const std::string& name) const { return values(name) != nullptr; }
    /// Throws InputError if the record uses unknown names or values or misses a field.
    void validate(const AttributeRecord& record) const;
    double combinations() const;
};

struct SyntheticDatasetSpec {
    std::size_t identities = 64;
    std::size_t samples_per_identity = 8;
    std::size_t image_size = 32;
    double noise = 0.05;
    std::size_t cameras = 4;
    // Strength of the per-camera color transform; zero disables it.
    double camera_shift = 1.0;
    std::uint64_t seed = 0;
    // Identities [0, train_identities) train; the rest form query and gallery.
    // Zero selects half of the identities.
    std::size_t train_identities = 0;
    // Query samples per test identity; zero selects samples_per_identity / 4 (at least 1).
    std::size_t query_per_identity = 0;
    AttributeSchema schema = AttributeSchema::pedestrian();

    std::size_t resolved_train_identities() const;
    std::size_t resolved_query_per_identity() const;
    void validate() const;
};

struct PersonRecord {
    Tensor image;  // image_size x image_size x 3, values in [0, 1]
    std::int64_t identity = 0;
    std::size_t camera = 0;
    AttributeRecord attributes;
};

struct SyntheticDataset {
    SyntheticDatasetSpec spec;
    std::vector<AttributeRecord> identities;  // every identity, sorted by id
    std::vector<PersonRecord> train;
    std::vector<PersonRecord> query;
    std::vector<PersonRecord> gallery;
};

/// Deterministic color-block pedestrians with per-camera tint and Gaussian noise.
SyntheticDataset generate_synthetic(const SyntheticDatasetSpec& spec);

/// Noise-free, untinted rendering of one attribute vector.
Tensor render_person(const AttributeRecord& record, std::size_t image_size);

/// Per-camera affine color transform: out = matrix * rgb + offset. Generation
/// adds noise to the result and clamps it to [0, 1].
struct CameraTint {
    std::array<double, 9> matrix{};  // row-major 3x3
    std::array<double, 3> offset{};

    std::array<double, 3> apply(const std::array<double, 3>& rgb) const;
};

/// Identity plus a random channel gain, cross-channel mix and offset scaled
/// by strength.
CameraTint camera_tint(std::uint64_t seed, std::size_t camera, double strength = 1.0);

/// CSV with header "id,<attr>,...". Errors carry the offending line number.
std::vector<AttributeRecord> import_attribute_table(const std::filesystem::path& path,
                                                    const AttributeSchema* schema = nullptr);
std::vector<AttributeRecord> parse_attribute_table(const std::string& text, const AttributeSchema* schema = nullptr);
std::string format_attribute_table(const std::vector<AttributeRecord>& records);

/// Directory with records.jsonl, images.mpt and attributes.csv.
void save_dataset(const std::filesystem::path& dir, const SyntheticDataset& data);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

}  // namespace mpreid
