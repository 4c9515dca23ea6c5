#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>

#include "aligntree/types.hpp"

namespace aligntree {

// "ATAC" v1 container, all integers and floats little-endian:
//
//   magic "ATAC" | version u32 = 1 | d_model u32 | n_layers u32 | n_positions u32
//   | positions i32 x n_positions | role u8 | record_count u64
//   then per record: prompt_id u64 | label u8 | n_tokens u32 | |I|*L*d f32
//
// Tensors are row-major over (position, layer, hidden).
inline constexpr char kDatasetMagic[4] = {'A', 'T', 'A', 'C'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetFileHeader {
  std::uint32_t version = kDatasetVersion;
  TensorShape shape;
  Role role = Role::DirectionSvmTrain;
  std::uint64_t record_count = 0;

  std::size_t byte_size() const noexcept { return 4 + 4 * 4 + 4 * shape.positions.size() + 1 + 8; }
  std::size_t record_byte_size() const noexcept { return 8 + 1 + 4 + 4 * shape.element_count(); }
};

std::uint64_t write_dataset(const ActivationDataset& dataset, std::ostream& sink);
ActivationDataset read_dataset(std::istream& source);
DatasetFileHeader read_dataset_header(std::istream& source);

std::uint64_t write_dataset_file(const ActivationDataset& dataset, const std::filesystem::path& path);
ActivationDataset read_dataset_file(const std::filesystem::path& path);

// Content hash of a dataset file (hex), recorded as training provenance.
std::string file_fingerprint(const std::filesystem::path& path);

// Manifest document:
//   {"roles": {"forest_train": "ft.atac", ...}, "disjoint": [["forest_train", "test"], ...]}
// Relative paths resolve against the manifest's directory.
SplitManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const SplitManifest& manifest, const std::filesystem::path& path);

// Loads every dataset named by the manifest, checks shape agreement across
// roles and disjointness. Throws ManifestError.
std::map<Role, ActivationDataset> load_manifest_datasets(const SplitManifest& manifest);

}  // namespace aligntree
