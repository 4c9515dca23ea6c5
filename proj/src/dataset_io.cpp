#include "aligntree/dataset_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "json.hpp"

#include "aligntree/codec.hpp"
#include "aligntree/error.hpp"

namespace aligntree {
namespace {

// Tensors larger than this per record are treated as a corrupted header.
constexpr unsigned __int128 kMaxRecordElements = static_cast<unsigned __int128>(1) << 36;
constexpr std::size_t kReadChunkFloats = 1 << 16;

class ByteWriter {
 public:
  explicit ByteWriter(std::ostream& out) : out_(out) {}

  template <typename T>
  void put(T value) {
    using U = std::make_unsigned_t<T>;
    auto bits = static_cast<U>(value);
    std::array<char, sizeof(T)> buf;
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
    write(buf.data(), buf.size());
  }
  void put_f32(std::span<const float> values) {
    const auto bytes = pack_f32_le(values);
    write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
  }
  void write(const char* data, std::size_t n) {
    out_.write(data, static_cast<std::streamsize>(n));
    if (!out_) fail(ErrorCode::IoError, "write to dataset sink failed");
    count_ += n;
  }
  std::uint64_t count() const noexcept { return count_; }

 private:
  std::ostream& out_;
  std::uint64_t count_ = 0;
};

class ByteReader {
 public:
  explicit ByteReader(std::istream& in) : in_(in) {}

  void read(void* dst, std::size_t n, const char* what) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n)
      fail(ErrorCode::TruncationError, std::string("stream ended while reading ") + what);
  }
  template <typename T>
  T get(const char* what) {
    std::array<unsigned char, sizeof(T)> buf;
    read(buf.data(), buf.size(), what);
    std::make_unsigned_t<T> bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::make_unsigned_t<T>>(buf[i]) << (8 * i);
    return static_cast<T>(bits);
  }
  // Grows the destination only as bytes actually arrive, so a corrupted
  // length cannot trigger a huge up-front allocation.
  void get_f32(std::vector<float>& dst, std::size_t count) {
    dst.clear();
    std::vector<std::uint8_t> buf;
    while (dst.size() < count) {
      const auto n = std::min(kReadChunkFloats, count - dst.size());
      buf.resize(n * 4);
      read(buf.data(), buf.size(), "activation tensor");
      const auto floats = unpack_f32_le(buf);
      dst.insert(dst.end(), floats.begin(), floats.end());
    }
  }
  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::istream& in_;
};

}  // namespace

std::uint64_t write_dataset(const ActivationDataset& dataset, std::ostream& sink) {
  dataset.validate();
  ByteWriter w(sink);
  w.write(kDatasetMagic, 4);
  w.put<std::uint32_t>(kDatasetVersion);
  w.put<std::uint32_t>(dataset.shape.d_model);
  w.put<std::uint32_t>(dataset.shape.n_layers);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(dataset.shape.positions.size()));
  for (auto p : dataset.shape.positions.values()) w.put<std::int32_t>(p);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(dataset.role));
  w.put<std::uint64_t>(dataset.records.size());
  for (const auto& r : dataset.records) {
    w.put<std::uint64_t>(r.prompt_id);
    w.put<std::uint8_t>(r.label);
    w.put<std::uint32_t>(r.n_tokens);
    w.put_f32(r.activations);
  }
  sink.flush();
  if (!sink) fail(ErrorCode::IoError, "flush of dataset sink failed");
  return w.count();
}

DatasetFileHeader read_dataset_header(std::istream& source) {
  ByteReader r(source);
  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, kDatasetMagic, 4) != 0) fail(ErrorCode::FormatError, "bad magic, not an ATAC container");
  DatasetFileHeader h;
  h.version = r.get<std::uint32_t>("version");
  if (h.version != kDatasetVersion)
    fail(ErrorCode::UnsupportedVersion, "container version " + std::to_string(h.version) + " (expected 1)");
  h.shape.d_model = r.get<std::uint32_t>("d_model");
  h.shape.n_layers = r.get<std::uint32_t>("n_layers");
  const auto n_positions = r.get<std::uint32_t>("n_positions");
  if (h.shape.d_model == 0 || h.shape.n_layers == 0 || n_positions == 0)
    fail(ErrorCode::FormatError, "zero dimension in header");
  const auto elements = static_cast<unsigned __int128>(h.shape.d_model) * h.shape.n_layers * n_positions;
  if (elements > kMaxRecordElements) fail(ErrorCode::FormatError, "implausible tensor size in header");

  std::vector<std::int32_t> positions;
  for (std::uint32_t i = 0; i < n_positions; ++i) positions.push_back(r.get<std::int32_t>("position list"));
  try {
    h.shape.positions = TokenPositionSet(std::move(positions));
  } catch (const Error& e) {
    fail(ErrorCode::FormatError, std::string("position list: ") + e.what());
  }
  h.role = role_from_byte(r.get<std::uint8_t>("role"));
  h.record_count = r.get<std::uint64_t>("record_count");
  return h;
}

ActivationDataset read_dataset(std::istream& source) {
  const auto header = read_dataset_header(source);
  ByteReader r(source);
  ActivationDataset ds;
  ds.shape = header.shape;
  ds.role = header.role;
  const auto elements = header.shape.element_count();
  for (std::uint64_t i = 0; i < header.record_count; ++i) {
    ActivationRecord rec;
    rec.prompt_id = r.get<std::uint64_t>("prompt_id");
    rec.label = r.get<std::uint8_t>("label");
    rec.n_tokens = r.get<std::uint32_t>("n_tokens");
    r.get_f32(rec.activations, elements);
    ds.records.push_back(std::move(rec));
  }
  if (!r.at_end()) fail(ErrorCode::FormatError, "trailing bytes after the declared record_count");
  ds.validate();
  return ds;
}

std::uint64_t write_dataset_file(const ActivationDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  return write_dataset(dataset, out);
}

ActivationDataset read_dataset_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return read_dataset(in);
}

std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fingerprint_hex(bytes);
}

SplitManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open manifest " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("manifest: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("roles") || !doc["roles"].is_object())
    fail(ErrorCode::FormatError, "manifest: missing 'roles' object");
  SplitManifest m;
  const auto base = path.parent_path();
  for (const auto& [name, value] : doc["roles"].items()) {
    if (!value.is_string()) fail(ErrorCode::FormatError, "manifest: role path must be a string");
    std::filesystem::path p = value.get<std::string>();
    if (p.is_relative()) p = base / p;
    m.paths[role_from_string(name)] = p.string();
  }
  if (doc.contains("disjoint")) {
    for (const auto& pair : doc["disjoint"]) {
      if (!pair.is_array() || pair.size() != 2) fail(ErrorCode::FormatError, "manifest: disjoint entries are pairs");
      m.disjoint.emplace_back(role_from_string(pair[0].get<std::string>()),
                              role_from_string(pair[1].get<std::string>()));
    }
  }
  return m;
}

void save_manifest(const SplitManifest& manifest, const std::filesystem::path& path) {
  nlohmann::json doc;
  doc["roles"] = nlohmann::json::object();
  for (const auto& [role, p] : manifest.paths) doc["roles"][std::string(to_string(role))] = p;
  doc["disjoint"] = nlohmann::json::array();
  for (const auto& [a, b] : manifest.disjoint)
    doc["disjoint"].push_back({std::string(to_string(a)), std::string(to_string(b))});
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out << doc.dump(2) << "\n";
}

std::map<Role, ActivationDataset> load_manifest_datasets(const SplitManifest& manifest) {
  std::map<Role, ActivationDataset> out;
  const TensorShape* shape = nullptr;
  for (const auto& [role, p] : manifest.paths) {
    auto ds = read_dataset_file(p);
    if (ds.role != role)
      fail(ErrorCode::ManifestError, p + " declares role " + std::string(to_string(ds.role)) + ", manifest says " +
                                         std::string(to_string(role)));
    out.emplace(role, std::move(ds));
    if (!shape) {
      shape = &out.at(role).shape;
    } else if (!(*shape == out.at(role).shape)) {
      fail(ErrorCode::ManifestError, "dataset shapes disagree across roles");
    }
  }
  std::map<Role, const ActivationDataset*> view;
  for (const auto& [role, ds] : out) view[role] = &ds;
  check_disjoint(manifest, view);
  return out;
}

}  // namespace aligntree
