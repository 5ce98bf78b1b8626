#include "dgbench/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

namespace dgb {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t seed, const std::string& salt) {
  // FNV-1a keeps the salt stable across standard libraries, unlike std::hash.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : salt) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return mix_seed(seed, h);
}

double sample_beta(Rng& rng, double a, double b) {
  std::gamma_distribution<double> ga(a, 1.0);
  std::gamma_distribution<double> gb(b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y == 0.0) return 0.5;
  return x / (x + y);
}

std::size_t shape_numel(const std::vector<int>& dims) {
  std::size_t n = 1;
  for (int d : dims) {
    if (d < 0) throw Error("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> dims, double fill_value)
    : shape(std::move(dims)), data(shape_numel(shape), fill_value) {}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

std::string Tensor::shape_string() const { return fmt::format("[{}]", fmt::join(shape, "x")); }

Tensor slice_rows(const Tensor& t, int begin, int end) {
  const int cols = t.dim(1);
  Tensor out({end - begin, cols});
  std::copy(t.data.begin() + static_cast<std::ptrdiff_t>(begin) * cols,
            t.data.begin() + static_cast<std::ptrdiff_t>(end) * cols, out.data.begin());
  return out;
}

Tensor slice_batch(const Tensor& maps, int begin, int end) {
  const int c = maps.dim(0), n = maps.dim(1), hw = maps.dim(2) * maps.dim(3);
  const int m = end - begin;
  Tensor out({c, m, maps.dim(2), maps.dim(3)});
  for (int ch = 0; ch < c; ++ch) {
    const auto src = maps.data.begin() + (static_cast<std::ptrdiff_t>(ch) * n + begin) * hw;
    std::copy(src, src + static_cast<std::ptrdiff_t>(m) * hw,
              out.data.begin() + static_cast<std::ptrdiff_t>(ch) * m * hw);
  }
  return out;
}

Tensor concat_batch(const std::vector<const Tensor*>& parts) {
  if (parts.empty()) throw Error("concat_batch: no parts");
  const int c = parts[0]->dim(0), h = parts[0]->dim(2), w = parts[0]->dim(3);
  int n = 0;
  for (const Tensor* p : parts) {
    if (p->dim(0) != c || p->dim(2) != h || p->dim(3) != w) {
      throw Error("concat_batch: incompatible shapes");
    }
    n += p->dim(1);
  }
  Tensor out({c, n, h, w});
  const std::ptrdiff_t hw = static_cast<std::ptrdiff_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    auto dst = out.data.begin() + static_cast<std::ptrdiff_t>(ch) * n * hw;
    for (const Tensor* p : parts) {
      const int m = p->dim(1);
      const auto src = p->data.begin() + static_cast<std::ptrdiff_t>(ch) * m * hw;
      dst = std::copy(src, src + m * hw, dst);
    }
  }
  return out;
}

}  // namespace dgb
