#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "dgbench/tensor.hpp"

namespace dgb {

/// Flat binary archive of named tensors (little-endian).
///
/// Layout: "DGBT" magic, u32 version, u32 entry count, then per entry
/// u32 name length, name bytes, u8 dtype, u32 rank, i64 dims, raw payload.
/// Entries are kept sorted by name so that saving is deterministic.
class TensorArchive {
 public:
  using Payload = std::variant<std::vector<double>, std::vector<float>, std::vector<std::int32_t>>;

  struct Entry {
    std::vector<std::int64_t> shape;
    Payload payload;
  };

  void put(const std::string& name, const Tensor& t);
  void put_f32(const std::string& name, std::vector<std::int64_t> shape, std::vector<float> values);
  void put_i32(const std::string& name, std::vector<std::int64_t> shape,
               std::vector<std::int32_t> values);

  [[nodiscard]] bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  [[nodiscard]] const Entry& entry(const std::string& name) const;
  [[nodiscard]] Tensor tensor(const std::string& name) const;
  [[nodiscard]] const std::vector<float>& f32(const std::string& name) const;
  [[nodiscard]] const std::vector<std::int32_t>& i32(const std::string& name) const;
  [[nodiscard]] const std::map<std::string, Entry>& entries() const { return entries_; }

  /// Writes to a temporary sibling and renames it into place.
  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);

 private:
  std::map<std::string, Entry> entries_;
};

/// Writes `contents` to `path` atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

}  // namespace dgb
