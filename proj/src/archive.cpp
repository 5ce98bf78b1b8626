#include "dgbench/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <unistd.h>

namespace dgb {

namespace {

constexpr char kMagic[4] = {'D', 'G', 'B', 'T'};
constexpr std::uint32_t kVersion = 1;

enum class DType : std::uint8_t { f64 = 1, f32 = 2, i32 = 3 };

template <typename T>
void put_pod(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_pod(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error("tensor archive truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

template <typename T>
std::vector<T> get_array(const std::string& in, std::size_t& pos, std::size_t n) {
  if (pos + n * sizeof(T) > in.size()) throw Error("tensor archive truncated");
  std::vector<T> v(n);
  std::memcpy(v.data(), in.data() + pos, n * sizeof(T));
  pos += n * sizeof(T);
  return v;
}

std::size_t numel(const std::vector<std::int64_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

}  // namespace

void TensorArchive::put(const std::string& name, const Tensor& t) {
  std::vector<std::int64_t> shape(t.shape.begin(), t.shape.end());
  entries_[name] = Entry{std::move(shape), t.data};
}

void TensorArchive::put_f32(const std::string& name, std::vector<std::int64_t> shape,
                            std::vector<float> values) {
  if (numel(shape) != values.size()) throw Error("put_f32: shape/value size mismatch for " + name);
  entries_[name] = Entry{std::move(shape), std::move(values)};
}

void TensorArchive::put_i32(const std::string& name, std::vector<std::int64_t> shape,
                            std::vector<std::int32_t> values) {
  if (numel(shape) != values.size()) throw Error("put_i32: shape/value size mismatch for " + name);
  entries_[name] = Entry{std::move(shape), std::move(values)};
}

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("tensor archive has no entry '" + name + "'");
  return it->second;
}

Tensor TensorArchive::tensor(const std::string& name) const {
  const Entry& e = entry(name);
  const auto* values = std::get_if<std::vector<double>>(&e.payload);
  if (values == nullptr) throw Error("tensor archive entry '" + name + "' is not f64");
  Tensor t;
  t.shape.assign(e.shape.begin(), e.shape.end());
  t.data = *values;
  return t;
}

const std::vector<float>& TensorArchive::f32(const std::string& name) const {
  const auto* values = std::get_if<std::vector<float>>(&entry(name).payload);
  if (values == nullptr) throw Error("tensor archive entry '" + name + "' is not f32");
  return *values;
}

const std::vector<std::int32_t>& TensorArchive::i32(const std::string& name) const {
  const auto* values = std::get_if<std::vector<std::int32_t>>(&entry(name).payload);
  if (values == nullptr) throw Error("tensor archive entry '" + name + "' is not i32");
  return *values;
}

void TensorArchive::save(const std::filesystem::path& path) const {
  std::string out;
  out.append(kMagic, 4);
  put_pod(out, kVersion);
  put_pod(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    put_pod(out, static_cast<std::uint32_t>(name.size()));
    out.append(name);
    std::visit(
        [&](const auto& values) {
          using V = typename std::decay_t<decltype(values)>::value_type;
          DType dt = std::is_same_v<V, double>  ? DType::f64
                     : std::is_same_v<V, float> ? DType::f32
                                                : DType::i32;
          put_pod(out, static_cast<std::uint8_t>(dt));
          put_pod(out, static_cast<std::uint32_t>(e.shape.size()));
          for (auto d : e.shape) put_pod(out, d);
          out.append(reinterpret_cast<const char*>(values.data()), values.size() * sizeof(V));
        },
        e.payload);
  }
  write_file_atomic(path, out);
}

TensorArchive TensorArchive::load(const std::filesystem::path& path) {
  const std::string in = read_file(path);
  if (in.size() < 12 || in.compare(0, 4, kMagic, 4) != 0) {
    throw Error(fmt::format("{}: not a tensor archive", path.string()));
  }
  std::size_t pos = 4;
  const auto version = get_pod<std::uint32_t>(in, pos);
  if (version != kVersion) {
    throw Error(fmt::format("{}: unsupported archive version {}", path.string(), version));
  }
  const auto count = get_pod<std::uint32_t>(in, pos);
  TensorArchive ar;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_pod<std::uint32_t>(in, pos);
    if (pos + len > in.size()) throw Error(path.string() + ": tensor archive truncated");
    std::string name = in.substr(pos, len);
    pos += len;
    const auto dt = static_cast<DType>(get_pod<std::uint8_t>(in, pos));
    const auto rank = get_pod<std::uint32_t>(in, pos);
    Entry e;
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(get_pod<std::int64_t>(in, pos));
    const std::size_t n = numel(e.shape);
    switch (dt) {
      case DType::f64: e.payload = get_array<double>(in, pos, n); break;
      case DType::f32: e.payload = get_array<float>(in, pos, n); break;
      case DType::i32: e.payload = get_array<std::int32_t>(in, pos, n); break;
      default: throw Error(fmt::format("{}: unknown dtype in entry '{}'", path.string(), name));
    }
    ar.entries_.emplace(std::move(name), std::move(e));
  }
  return ar;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp =
      path.parent_path() / fmt::format(".{}.tmp.{}", path.filename().string(), ::getpid());
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open " + tmp.string() + " for writing");
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw Error("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(fmt::format("cannot move {} into place: {}", path.string(), ec.message()));
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace dgb
