#pragma once

#include <atomic>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <unistd.h>

#include "aligntree/error.hpp"
#include "aligntree/types.hpp"

namespace testing {

// Error code raised by f, or nullopt when it returns normally.
template <typename F>
std::optional<aligntree::ErrorCode> code_of(F&& f) {
  try {
    f();
  } catch (const aligntree::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("aligntree_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline aligntree::TokenPositionSet random_positions(std::mt19937_64& rng, bool with_final = true) {
  std::vector<std::int32_t> front, back;
  std::bernoulli_distribution coin(0.5);
  for (std::int32_t p = 0; p < 4; ++p)
    if (coin(rng)) front.push_back(p);
  for (std::int32_t p = -5; p <= -1; ++p)
    if (coin(rng) || (with_final && p == -1)) back.push_back(p);
  if (front.empty() && back.empty()) back.push_back(-1);
  front.insert(front.end(), back.begin(), back.end());
  return aligntree::TokenPositionSet(front);
}

// Labels alternate so both classes are present whenever n >= 2.
inline aligntree::ActivationDataset random_dataset(std::mt19937_64& rng, const aligntree::TensorShape& shape,
                                                   std::size_t n, aligntree::Role role = aligntree::Role::Test,
                                                   std::uint64_t id_offset = 0) {
  aligntree::ActivationDataset ds;
  ds.shape = shape;
  ds.role = role;
  std::normal_distribution<float> normal(0.0f, 1.0f);
  std::uniform_int_distribution<std::uint32_t> tokens(1, 100);
  for (std::size_t i = 0; i < n; ++i) {
    aligntree::ActivationRecord r;
    r.prompt_id = id_offset + i;
    r.label = static_cast<std::uint8_t>(i % 2);
    r.n_tokens = tokens(rng);
    r.activations.resize(shape.element_count());
    for (auto& v : r.activations) v = normal(rng);
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace testing
