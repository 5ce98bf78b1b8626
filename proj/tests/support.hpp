#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dgbench/algorithms.hpp"
#include "dgbench/backbone.hpp"

namespace dgbtest {

/// ~400-parameter model used by the finite-difference checks.
inline dgb::BackboneConfig toy_config(int classes = 3, std::uint64_t seed = 11) {
  dgb::BackboneConfig c;
  c.channels = {2, 2, 2, 2};
  c.num_classes = classes;
  c.init_seed = seed;
  return c;
}

inline std::vector<dgb::DomainBatch> toy_batches(int domains, int n, int classes, std::uint64_t seed,
                                                 int size = 16) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> px(0.0, 1.0);
  std::vector<dgb::DomainBatch> out;
  for (int d = 0; d < domains; ++d) {
    dgb::DomainBatch b;
    b.domain = "d" + std::to_string(d);
    b.images = dgb::Tensor({3, n, size, size});
    for (double& v : b.images.data) v = px(rng);
    for (int i = 0; i < n; ++i) b.labels.push_back(static_cast<int>((i + d) % classes));
    out.push_back(std::move(b));
  }
  return out;
}

/// ||a - b|| / max(||a||, ||b||).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max(std::sqrt(na), std::sqrt(nb));
  return denom == 0.0 ? std::sqrt(diff) : std::sqrt(diff) / denom;
}

/// Central differences of `loss` over every entry of `params`.
inline std::vector<double> numeric_gradient(const std::vector<dgb::Param*>& params,
                                            const std::function<double()>& loss,
                                            double h = 1e-6) {
  std::vector<double> g;
  for (dgb::Param* p : params) {
    for (double& v : p->value.data) {
      const double keep = v;
      v = keep + h;
      const double up = loss();
      v = keep - h;
      const double down = loss();
      v = keep;
      g.push_back((up - down) / (2 * h));
    }
  }
  return g;
}

inline std::vector<double> analytic_gradient(const std::vector<dgb::Param*>& params) {
  std::vector<double> g;
  for (const dgb::Param* p : params) g.insert(g.end(), p->grad.data.begin(), p->grad.data.end());
  return g;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dgbench_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace dgbtest
