#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dgb {

/// Base error for everything the harness reports to callers.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Rng = std::mt19937_64;

/// splitmix64 finalizer; used to derive independent streams from one seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t mix_seed(std::uint64_t seed, const std::string& salt);

double sample_beta(Rng& rng, double a, double b);

/// Dense row-major tensor of doubles.
///
/// Feature maps are laid out channel-major as {C, N, H, W} so that a
/// convolution is a single GEMM over all images of a batch and per-channel
/// reductions (batch norm) walk contiguous memory. Feature matrices are
/// {N, F}; logits are {N, classes}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> dims, double fill = 0.0);

  [[nodiscard]] std::size_t size() const { return data.size(); }
  [[nodiscard]] bool empty() const { return data.empty(); }
  [[nodiscard]] int dim(std::size_t i) const { return shape.at(i); }
  [[nodiscard]] int rank() const { return static_cast<int>(shape.size()); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// 2-D element access for {rows, cols} tensors.
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  [[nodiscard]] double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * shape[1] + c];
  }

  void fill(double v);
  [[nodiscard]] bool same_shape(const Tensor& other) const { return shape == other.shape; }
  [[nodiscard]] std::string shape_string() const;

  bool operator==(const Tensor&) const = default;
};

std::size_t shape_numel(const std::vector<int>& dims);

/// Rows [begin, end) of an {N, F} tensor.
Tensor slice_rows(const Tensor& t, int begin, int end);

/// Images [begin, end) of a {C, N, H, W} feature map.
Tensor slice_batch(const Tensor& maps, int begin, int end);

/// Concatenates {C, n_i, H, W} maps along N.
Tensor concat_batch(const std::vector<const Tensor*>& parts);

}  // namespace dgb
