#include "dgbench/algorithms.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <fmt/format.h>

namespace dgb {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapR = Eigen::Map<const MatR>;
using MapR = Eigen::Map<MatR>;

const std::vector<std::string> kNames = {"ERM",   "SWAD", "RSC",    "GroupDRO", "Fishr", "CORAL",
                                         "MMD",   "SagNet", "IRM",  "Mixup",    "MixStyle"};

double require_param(const AlgorithmParams& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing algorithm parameter '" + name + "'");
  return it->second;
}

void check_batches(std::span<const DomainBatch> batches, bool equal_sizes) {
  if (batches.empty()) throw Error("need at least one domain batch");
  for (const auto& b : batches) {
    if (b.size() == 0) throw Error("empty batch for domain '" + b.domain + "'");
    if (b.images.rank() != 4 || b.images.dim(1) != b.size()) {
      throw Error("batch for domain '" + b.domain + "' has mismatched images and labels");
    }
  }
  if (equal_sizes) {
    for (const auto& b : batches) {
      if (b.size() != batches[0].size()) throw Error("domain batches must have equal sizes");
    }
  }
}

/// Concatenated view of one step's domain batches.
struct Union {
  Tensor images;
  std::vector<int> labels;
  std::vector<int> offsets;  // domain d occupies rows [offsets[d], offsets[d+1])

  [[nodiscard]] int domains() const { return static_cast<int>(offsets.size()) - 1; }
  [[nodiscard]] std::span<const int> labels_of(int d) const {
    return std::span<const int>(labels).subspan(offsets[d], offsets[d + 1] - offsets[d]);
  }
};

Union make_union(std::span<const DomainBatch> batches) {
  Union u;
  std::vector<const Tensor*> parts;
  u.offsets.push_back(0);
  for (const auto& b : batches) {
    parts.push_back(&b.images);
    u.labels.insert(u.labels.end(), b.labels.begin(), b.labels.end());
    u.offsets.push_back(static_cast<int>(u.labels.size()));
  }
  u.images = parts.size() == 1 ? batches[0].images : concat_batch(parts);
  return u;
}

std::vector<Tensor> split_rows(const Tensor& t, const std::vector<int>& offsets) {
  std::vector<Tensor> out;
  for (std::size_t d = 0; d + 1 < offsets.size(); ++d) {
    out.push_back(slice_rows(t, offsets[d], offsets[d + 1]));
  }
  return out;
}

void add_rows(Tensor& dst, const std::vector<Tensor>& parts, const std::vector<int>& offsets,
              double scale) {
  const int cols = dst.dim(1);
  for (std::size_t d = 0; d < parts.size(); ++d) {
    const auto base = static_cast<std::size_t>(offsets[d]) * cols;
    for (std::size_t i = 0; i < parts[d].size(); ++i) dst[base + i] += scale * parts[d][i];
  }
}

/// Forward through the backbone and head; keeps what backward needs.
struct Pass {
  Tensor maps;
  Tensor features;
  Tensor logits;
};

Pass forward_all(Model& model, const Tensor& images) {
  Pass p;
  p.maps = model.forward_blocks(images, 0, kNumBlocks, true);
  p.features = Model::pool(p.maps);
  p.logits = model.head_forward(p.features);
  return p;
}

/// Backward from logit (and optional extra feature) gradients into the model.
void backward_all(Model& model, const Pass& p, const Tensor& dlogits,
                  const Tensor* dfeatures_extra = nullptr) {
  Tensor df = model.head_backward(p.features, dlogits);
  if (dfeatures_extra != nullptr) {
    for (std::size_t i = 0; i < df.size(); ++i) df[i] += (*dfeatures_extra)[i];
  }
  model.backward_blocks(Model::pool_backward(df, p.maps.shape), 0, kNumBlocks);
}

/// mean_ij sum_g exp(-g |x_i - y_j|^2); gradients are scaled by `scale`.
double kernel_mean(const Tensor& x, const Tensor& y, std::span<const double> gammas, double scale,
                   Tensor* dx, Tensor* dy, std::vector<double>* dgammas) {
  const int n = x.dim(0), m = y.dim(0), f = x.dim(1);
  const double norm = 1.0 / (static_cast<double>(n) * m);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < m; ++j) {
      double d2 = 0.0;
      for (int k = 0; k < f; ++k) {
        const double diff = x.at(i, k) - y.at(j, k);
        d2 += diff * diff;
      }
      double dk_dd2 = 0.0;
      for (std::size_t g = 0; g < gammas.size(); ++g) {
        const double kv = std::exp(-gammas[g] * d2);
        total += kv;
        dk_dd2 += -gammas[g] * kv;
        if (dgammas != nullptr) (*dgammas)[g] += scale * norm * (-d2 * kv);
      }
      if (dx != nullptr || dy != nullptr) {
        const double c = scale * norm * dk_dd2 * 2.0;
        for (int k = 0; k < f; ++k) {
          const double diff = x.at(i, k) - y.at(j, k);
          if (dx != nullptr) dx->at(i, k) += c * diff;
          if (dy != nullptr) dy->at(j, k) -= c * diff;
        }
      }
    }
  }
  return total * norm;
}

}  // namespace

const std::vector<std::string>& algorithm_names() { return kNames; }

AlgorithmKind parse_algorithm(const std::string& name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return static_cast<AlgorithmKind>(i);
  }
  throw Error("unknown algorithm '" + name + "'");
}

std::string algorithm_name(AlgorithmKind kind) { return kNames.at(static_cast<std::size_t>(kind)); }

// ---------------------------------------------------------------------------
// Primitives

Tensor softmax(const Tensor& logits) {
  const int n = logits.dim(0), c = logits.dim(1);
  Tensor p(logits.shape);
  for (int i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits.at(i, k));
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      p.at(i, k) = std::exp(logits.at(i, k) - mx);
      z += p.at(i, k);
    }
    for (int k = 0; k < c; ++k) p.at(i, k) /= z;
  }
  return p;
}

double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits,
                     double scale) {
  const int n = logits.dim(0), c = logits.dim(1);
  if (n == 0) throw Error("cross_entropy: empty batch");
  if (static_cast<int>(labels.size()) != n) throw Error("cross_entropy: label count mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) throw Error("cross_entropy: label out of range");
    double mx = logits.at(i, 0);
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits.at(i, k));
    double z = 0.0;
    for (int k = 0; k < c; ++k) z += std::exp(logits.at(i, k) - mx);
    const double lse = mx + std::log(z);
    total += lse - logits.at(i, y);
    if (dlogits != nullptr) {
      for (int k = 0; k < c; ++k) {
        const double pk = std::exp(logits.at(i, k) - lse);
        dlogits->at(i, k) += scale * (pk - (k == y ? 1.0 : 0.0)) / n;
      }
    }
  }
  return total / n;
}

double soft_cross_entropy(const Tensor& logits, const Tensor& targets, Tensor* dlogits,
                          double scale) {
  const int n = logits.dim(0), c = logits.dim(1);
  if (n == 0) throw Error("soft_cross_entropy: empty batch");
  if (!targets.same_shape(logits)) throw Error("soft_cross_entropy: target shape mismatch");
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    double mx = logits.at(i, 0);
    for (int k = 1; k < c; ++k) mx = std::max(mx, logits.at(i, k));
    double z = 0.0;
    for (int k = 0; k < c; ++k) z += std::exp(logits.at(i, k) - mx);
    const double lse = mx + std::log(z);
    double tsum = 0.0;
    for (int k = 0; k < c; ++k) {
      total += targets.at(i, k) * (lse - logits.at(i, k));
      tsum += targets.at(i, k);
    }
    if (dlogits != nullptr) {
      for (int k = 0; k < c; ++k) {
        const double pk = std::exp(logits.at(i, k) - lse);
        dlogits->at(i, k) += scale * (tsum * pk - targets.at(i, k)) / n;
      }
    }
  }
  return total / n;
}

double irm_scale_gradient(const Tensor& logits, std::span<const int> labels, Tensor* dlogits,
                          double scale) {
  // risk(w) = mean_i CE(w z_i); d/dw at w=1 is mean_i sum_c (p_ic - y_ic) z_ic.
  const int n = logits.dim(0), c = logits.dim(1);
  const Tensor p = softmax(logits);
  double g = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    double pz = 0.0;
    for (int k = 0; k < c; ++k) pz += p.at(i, k) * logits.at(i, k);
    g += pz - logits.at(i, y);
    if (dlogits != nullptr) {
      for (int k = 0; k < c; ++k) {
        const double e = p.at(i, k) - (k == y ? 1.0 : 0.0);
        dlogits->at(i, k) += scale * (e + p.at(i, k) * (logits.at(i, k) - pz)) / n;
      }
    }
  }
  return g / n;
}

std::vector<double> groupdro_update(std::span<const double> q, std::span<const double> losses,
                                    double eta) {
  if (eta < 0) throw Error("GroupDRO eta must be non-negative");
  if (q.size() != losses.size()) throw Error("GroupDRO: q and losses differ in length");
  std::vector<double> out(q.size());
  double total = 0.0;
  for (std::size_t d = 0; d < q.size(); ++d) {
    if (q[d] < 0) throw Error("GroupDRO: q must be a probability vector");
    out[d] = q[d] * std::exp(eta * losses[d]);
    total += out[d];
  }
  if (!(total > 0.0) || !std::isfinite(total)) throw Error("GroupDRO: degenerate weights");
  for (double& v : out) v /= total;
  return out;
}

double coral_penalty(std::span<const Tensor> features, std::vector<Tensor>* dfeatures) {
  const int domains = static_cast<int>(features.size());
  if (domains < 2) throw Error("CORAL needs at least two domains");
  const int f = features[0].dim(1);
  std::vector<Eigen::VectorXd> means;
  std::vector<MatR> centered, covs;
  for (const auto& x : features) {
    const int n = x.dim(0);
    if (n < 2) throw Error("CORAL needs at least two samples per domain");
    if (x.dim(1) != f) throw Error("CORAL: feature widths differ");
    CMapR xm(x.data.data(), n, f);
    Eigen::VectorXd mu = xm.colwise().mean().transpose();
    MatR xc = xm.rowwise() - mu.transpose();
    covs.push_back((xc.transpose() * xc) / (n - 1));
    means.push_back(std::move(mu));
    centered.push_back(std::move(xc));
  }
  if (dfeatures != nullptr) {
    dfeatures->resize(static_cast<std::size_t>(domains));
    for (int d = 0; d < domains; ++d) {
      auto& g = (*dfeatures)[static_cast<std::size_t>(d)];
      if (!g.same_shape(features[static_cast<std::size_t>(d)])) g = Tensor(features[static_cast<std::size_t>(d)].shape);
    }
  }
  const double pairs = domains * (domains - 1) / 2.0;
  double total = 0.0;
  for (int a = 0; a < domains; ++a) {
    for (int b = a + 1; b < domains; ++b) {
      const Eigen::VectorXd dmu = means[a] - means[b];
      const MatR dcov = covs[a] - covs[b];
      total += dmu.squaredNorm() + dcov.squaredNorm();
      if (dfeatures == nullptr) continue;
      for (int side = 0; side < 2; ++side) {
        const int d = side == 0 ? a : b;
        const double sign = side == 0 ? 1.0 : -1.0;
        const int n = features[static_cast<std::size_t>(d)].dim(0);
        auto& g = (*dfeatures)[static_cast<std::size_t>(d)];
        MapR gm(g.data.data(), n, f);
        const Eigen::RowVectorXd dmean_row = (sign * 2.0 / n / pairs) * dmu.transpose();
        gm.rowwise() += dmean_row;
        gm.noalias() += (sign * 4.0 / (n - 1) / pairs) * centered[d] * dcov;
      }
    }
  }
  return total / pairs;
}

double mmd_penalty(std::span<const Tensor> features, std::span<const double> gammas,
                   std::vector<Tensor>* dfeatures, std::vector<double>* dgammas) {
  const int domains = static_cast<int>(features.size());
  if (domains < 2) throw Error("MMD needs at least two domains");
  if (gammas.empty()) throw Error("MMD needs at least one bandwidth");
  for (double g : gammas) {
    if (!(g > 0.0)) throw Error(fmt::format("MMD bandwidth must be positive, got {}", g));
  }
  if (dfeatures != nullptr) {
    dfeatures->resize(static_cast<std::size_t>(domains));
    for (int d = 0; d < domains; ++d) {
      auto& g = (*dfeatures)[static_cast<std::size_t>(d)];
      if (!g.same_shape(features[static_cast<std::size_t>(d)])) g = Tensor(features[static_cast<std::size_t>(d)].shape);
    }
  }
  if (dgammas != nullptr) dgammas->assign(gammas.size(), 0.0);
  const double pairs = domains * (domains - 1) / 2.0;
  auto grad = [&](int d) -> Tensor* {
    return dfeatures != nullptr ? &(*dfeatures)[static_cast<std::size_t>(d)] : nullptr;
  };
  double total = 0.0;
  for (int a = 0; a < domains; ++a) {
    for (int b = a + 1; b < domains; ++b) {
      const Tensor& xa = features[static_cast<std::size_t>(a)];
      const Tensor& xb = features[static_cast<std::size_t>(b)];
      total += kernel_mean(xa, xa, gammas, 1.0 / pairs, grad(a), grad(a), dgammas);
      total += kernel_mean(xb, xb, gammas, 1.0 / pairs, grad(b), grad(b), dgammas);
      total -= 2.0 * kernel_mean(xa, xb, gammas, -2.0 / pairs, grad(a), grad(b), dgammas);
    }
  }
  return total / pairs;
}

double median_sq_distance(std::span<const Tensor> features, std::vector<Tensor>* dfeatures,
                          double scale) {
  struct Row {
    int domain;
    int index;
  };
  std::vector<Row> rows;
  for (std::size_t d = 0; d < features.size(); ++d) {
    for (int i = 0; i < features[d].dim(0); ++i) rows.push_back({static_cast<int>(d), i});
  }
  if (rows.size() < 2) throw Error("median distance needs at least two samples");
  const int f = features[0].dim(1);
  struct PairDist {
    double d2;
    std::size_t i, j;
  };
  std::vector<PairDist> dists;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = i + 1; j < rows.size(); ++j) {
      double d2 = 0.0;
      for (int k = 0; k < f; ++k) {
        const double diff = features[rows[i].domain].at(rows[i].index, k) -
                            features[rows[j].domain].at(rows[j].index, k);
        d2 += diff * diff;
      }
      dists.push_back({d2, i, j});
    }
  }
  auto by_value = [](const PairDist& a, const PairDist& b) {
    return a.d2 < b.d2 || (a.d2 == b.d2 && (a.i < b.i || (a.i == b.i && a.j < b.j)));
  };
  std::sort(dists.begin(), dists.end(), by_value);
  const std::size_t m = dists.size();
  std::vector<std::pair<const PairDist*, double>> picks;
  if (m % 2 == 1) {
    picks.emplace_back(&dists[m / 2], 1.0);
  } else {
    picks.emplace_back(&dists[m / 2 - 1], 0.5);
    picks.emplace_back(&dists[m / 2], 0.5);
  }
  double median = 0.0;
  for (auto [p, w] : picks) median += w * p->d2;
  if (dfeatures != nullptr) {
    for (auto [p, w] : picks) {
      const Row& ri = rows[p->i];
      const Row& rj = rows[p->j];
      for (int k = 0; k < f; ++k) {
        const double diff =
            features[ri.domain].at(ri.index, k) - features[rj.domain].at(rj.index, k);
        (*dfeatures)[ri.domain].at(ri.index, k) += scale * w * 2.0 * diff;
        (*dfeatures)[rj.domain].at(rj.index, k) -= scale * w * 2.0 * diff;
      }
    }
  }
  return median;
}

Tensor per_sample_head_gradients(const Tensor& features, const Tensor& logits,
                                 std::span<const int> labels) {
  const int n = features.dim(0), f = features.dim(1), c = logits.dim(1);
  const Tensor p = softmax(logits);
  Tensor g({n, c * f + c});
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < c; ++k) {
      const double e = p.at(i, k) - (k == labels[static_cast<std::size_t>(i)] ? 1.0 : 0.0);
      for (int j = 0; j < f; ++j) g.at(i, k * f + j) = e * features.at(i, j);
      g.at(i, c * f + k) = e;
    }
  }
  return g;
}

std::vector<double> gradient_variance(const Tensor& g) {
  const int n = g.dim(0), p = g.dim(1);
  std::vector<double> mean(static_cast<std::size_t>(p), 0.0), var(static_cast<std::size_t>(p), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < p; ++k) mean[k] += g.at(i, k) / n;
  }
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < p; ++k) var[k] += (g.at(i, k) - mean[k]) * (g.at(i, k) - mean[k]) / n;
  }
  return var;
}

double fishr_penalty_from_variances(std::span<const std::vector<double>> variances) {
  if (variances.size() < 2) return 0.0;
  const std::size_t p = variances[0].size();
  std::vector<double> mean(p, 0.0);
  for (const auto& v : variances) {
    if (v.size() != p) throw Error("Fishr: variance vectors differ in length");
    for (std::size_t k = 0; k < p; ++k) mean[k] += v[k] / static_cast<double>(variances.size());
  }
  double total = 0.0;
  for (const auto& v : variances) {
    for (std::size_t k = 0; k < p; ++k) total += (v[k] - mean[k]) * (v[k] - mean[k]);
  }
  return total;
}

double sample_mixup_lambda(double alpha, Rng& rng) {
  if (!(alpha > 0.0)) throw Error(fmt::format("mixup alpha must be positive, got {}", alpha));
  return sample_beta(rng, alpha, alpha);
}

MixedBatch mixup_batch(const DomainBatch& a, const DomainBatch& b, int num_classes, double lambda) {
  if (a.size() != b.size() || !a.images.same_shape(b.images)) {
    throw Error("mixup needs equal batch sizes");
  }
  if (lambda < 0.0 || lambda > 1.0) throw Error("mixup lambda must be in [0,1]");
  MixedBatch out;
  out.lambda = lambda;
  out.images = Tensor(a.images.shape);
  for (std::size_t i = 0; i < a.images.size(); ++i) {
    out.images[i] = lambda * a.images[i] + (1.0 - lambda) * b.images[i];
  }
  out.soft_labels = Tensor({a.size(), num_classes});
  for (int i = 0; i < a.size(); ++i) {
    out.soft_labels.at(i, a.labels[static_cast<std::size_t>(i)]) += lambda;
    out.soft_labels.at(i, b.labels[static_cast<std::size_t>(i)]) += 1.0 - lambda;
  }
  return out;
}

MixedBatch mixup_batch(const DomainBatch& a, const DomainBatch& b, int num_classes, double alpha,
                       std::uint64_t seed) {
  Rng rng(seed);
  return mixup_batch(a, b, num_classes, sample_mixup_lambda(alpha, rng));
}

// ---------------------------------------------------------------------------
// InstanceStatMix

std::pair<Tensor, Tensor> instance_channel_stats(const Tensor& maps) {
  const int c = maps.dim(0), n = maps.dim(1), hw = maps.dim(2) * maps.dim(3);
  Tensor mean({c, n}), stdev({c, n});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const double* x = maps.data.data() + (static_cast<std::size_t>(ch) * n + i) * hw;
      double mu = 0.0, var = 0.0;
      for (int p = 0; p < hw; ++p) mu += x[p];
      mu /= hw;
      for (int p = 0; p < hw; ++p) var += (x[p] - mu) * (x[p] - mu);
      mean.at(ch, i) = mu;
      stdev.at(ch, i) = std::sqrt(var / hw);
    }
  }
  return {mean, stdev};
}

Tensor InstanceStatMix::forward(const Tensor& x, std::vector<int> perm,
                                std::vector<double> stat_weight,
                                std::vector<double> content_weight) {
  if (x.rank() != 4) throw Error("instance statistics mixing needs {C, N, H, W} feature maps");
  const int c = x.dim(0), n = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (static_cast<int>(perm.size()) != n || static_cast<int>(stat_weight.size()) != n ||
      static_cast<int>(content_weight.size()) != n) {
    throw Error("instance statistics mixing: per-instance arguments have the wrong length");
  }
  shape_ = x.shape;
  perm_ = std::move(perm);
  a_ = std::move(stat_weight);
  b_ = std::move(content_weight);
  mean_.assign(static_cast<std::size_t>(c) * n, 0.0);
  stdev_.assign(static_cast<std::size_t>(c) * n, 0.0);
  xhat_ = Tensor(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const std::size_t cn = static_cast<std::size_t>(ch) * n + i;
      const double* src = x.data.data() + cn * hw;
      double mu = 0.0, var = 0.0;
      for (int p = 0; p < hw; ++p) mu += src[p];
      mu /= hw;
      for (int p = 0; p < hw; ++p) var += (src[p] - mu) * (src[p] - mu);
      const double sd = std::sqrt(var / hw + kEps);
      mean_[cn] = mu;
      stdev_[cn] = sd;
      double* xh = xhat_.data.data() + cn * hw;
      for (int p = 0; p < hw; ++p) xh[p] = (src[p] - mu) / sd;
    }
  }
  Tensor y(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const std::size_t cn = static_cast<std::size_t>(ch) * n + i;
      const std::size_t cd = static_cast<std::size_t>(ch) * n + perm_[i];
      const double a = a_[i], b = b_[i];
      const double s = a * stdev_[cn] + (1.0 - a) * stdev_[cd];
      const double m = a * mean_[cn] + (1.0 - a) * mean_[cd];
      const double* xo = xhat_.data.data() + cn * hw;
      const double* xd = xhat_.data.data() + cd * hw;
      double* dst = y.data.data() + cn * hw;
      for (int p = 0; p < hw; ++p) dst[p] = s * (b * xo[p] + (1.0 - b) * xd[p]) + m;
    }
  }
  return y;
}

Tensor InstanceStatMix::backward(const Tensor& dy) const {
  const int c = shape_[0], n = shape_[1], hw = shape_[2] * shape_[3];
  Tensor dxhat(shape_);
  std::vector<double> dmean(mean_.size(), 0.0), dstd(stdev_.size(), 0.0);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const std::size_t cn = static_cast<std::size_t>(ch) * n + i;
      const std::size_t cd = static_cast<std::size_t>(ch) * n + perm_[i];
      const double a = a_[i], b = b_[i];
      const double s = a * stdev_[cn] + (1.0 - a) * stdev_[cd];
      const double* g = dy.data.data() + cn * hw;
      const double* xo = xhat_.data.data() + cn * hw;
      const double* xd = xhat_.data.data() + cd * hw;
      double ds = 0.0, dm = 0.0;
      double* gxo = dxhat.data.data() + cn * hw;
      double* gxd = dxhat.data.data() + cd * hw;
      for (int p = 0; p < hw; ++p) {
        ds += g[p] * (b * xo[p] + (1.0 - b) * xd[p]);
        dm += g[p];
        gxo[p] += b * s * g[p];
        gxd[p] += (1.0 - b) * s * g[p];
      }
      dstd[cn] += a * ds;
      dstd[cd] += (1.0 - a) * ds;
      dmean[cn] += a * dm;
      dmean[cd] += (1.0 - a) * dm;
    }
  }
  Tensor dx(shape_);
  for (std::size_t cn = 0; cn < mean_.size(); ++cn) {
    const double* xh = xhat_.data.data() + cn * hw;
    const double* gx = dxhat.data.data() + cn * hw;
    double mg = 0.0, mgx = 0.0;
    for (int p = 0; p < hw; ++p) {
      mg += gx[p];
      mgx += gx[p] * xh[p];
    }
    mg /= hw;
    mgx /= hw;
    double* d = dx.data.data() + cn * hw;
    for (int p = 0; p < hw; ++p) {
      d[p] = (gx[p] - mg - xh[p] * mgx) / stdev_[cn] + dmean[cn] / hw + dstd[cn] * xh[p] / hw;
    }
  }
  return dx;
}

Tensor mixstyle_features(const Tensor& maps, double alpha, double p_apply, Rng& rng,
                         InstanceStatMix* state, bool* applied) {
  if (maps.rank() != 4) {
    throw Error("MixStyle applies to intermediate feature maps, not pooled head features");
  }
  if (!(alpha > 0.0)) throw Error("MixStyle alpha must be positive");
  if (p_apply < 0.0 || p_apply > 1.0) throw Error("MixStyle p must be in [0,1]");
  if (applied != nullptr) *applied = false;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (p_apply == 0.0 || unit(rng) >= p_apply) return maps;
  const int n = maps.dim(1);
  if (n < 2) throw Error("MixStyle needs at least two instances");
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> lambda(static_cast<std::size_t>(n));
  for (double& l : lambda) l = sample_beta(rng, alpha, alpha);
  InstanceStatMix local;
  InstanceStatMix& mix = state != nullptr ? *state : local;
  if (applied != nullptr) *applied = true;
  return mix.forward(maps, std::move(perm), std::move(lambda),
                     std::vector<double>(static_cast<std::size_t>(n), 1.0));
}

Tensor mixstyle_features(const Tensor& maps, double alpha, double p_apply, std::uint64_t seed) {
  Rng rng(seed);
  return mixstyle_features(maps, alpha, p_apply, rng);
}

// ---------------------------------------------------------------------------
// RSC

int rsc_muted_count(int feature_dim, double percentile) {
  if (percentile < 0.0 || percentile >= 100.0) {
    throw Error(fmt::format("RSC percentile must be in [0, 100), got {}", percentile));
  }
  const int m = static_cast<int>(std::ceil(percentile / 100.0 * feature_dim - 1e-9));
  // At least one unit survives so the rescale stays finite.
  return std::clamp(m, 0, feature_dim - 1);
}

std::vector<int> rsc_muted_units(std::span<const double> saliency, double percentile) {
  const int f = static_cast<int>(saliency.size());
  const int m = rsc_muted_count(f, percentile);
  std::vector<int> order(static_cast<std::size_t>(f));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return saliency[a] > saliency[b]; });
  order.resize(static_cast<std::size_t>(m));
  std::sort(order.begin(), order.end());
  return order;
}

RscOutput rsc_forward(const Linear& head, const Tensor& features, std::span<const int> labels,
                      double percentile) {
  const int n = features.dim(0), f = features.dim(1);
  const int m = rsc_muted_count(f, percentile);
  const double keep_scale = static_cast<double>(f) / (f - m);
  RscOutput out;
  out.scaled_mask = Tensor({n, f}, m == 0 ? 1.0 : keep_scale);
  if (m > 0) {
    const Tensor& w = head.weight.value;
    for (int i = 0; i < n; ++i) {
      const int y = labels[static_cast<std::size_t>(i)];
      std::span<const double> saliency(w.data.data() + static_cast<std::size_t>(y) * f,
                                       static_cast<std::size_t>(f));
      for (int j : rsc_muted_units(saliency, percentile)) out.scaled_mask.at(i, j) = 0.0;
    }
  }
  Tensor masked(features.shape);
  for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = features[i] * out.scaled_mask[i];
  out.logits = head.forward(masked);
  return out;
}

// ---------------------------------------------------------------------------
// SWAD

std::vector<double> smooth_losses(std::span<const double> losses, int window) {
  if (window < 1) throw Error("smoothing window must be >= 1");
  std::vector<double> out(losses.size());
  for (std::size_t t = 0; t < losses.size(); ++t) {
    const std::size_t lo = t + 1 >= static_cast<std::size_t>(window) ? t + 1 - window : 0;
    double s = 0.0;
    for (std::size_t u = lo; u <= t; ++u) s += losses[u];
    out[t] = s / static_cast<double>(t - lo + 1);
  }
  return out;
}

SwadWindow select_swad_window(std::span<const double> val_losses, double r, int tolerance,
                              int smoothing) {
  if (val_losses.empty()) throw Error("SWAD needs at least one evaluation");
  if (r < 0.0) throw Error("SWAD tolerance ratio must be non-negative");
  if (tolerance < 1) throw Error("SWAD tolerance must be >= 1");
  const std::vector<double> s = smooth_losses(val_losses, smoothing);
  const double threshold = (1.0 + r) * *std::min_element(s.begin(), s.end());
  SwadWindow w;
  const int n = static_cast<int>(s.size());
  while (w.start < n && s[static_cast<std::size_t>(w.start)] > threshold) ++w.start;
  w.end = n - 1;
  int above = 0;
  for (int t = w.start + 1; t < n; ++t) {
    above = s[static_cast<std::size_t>(t)] > threshold ? above + 1 : 0;
    if (above == tolerance) {
      w.end = t - tolerance;
      break;
    }
  }
  return w;
}

NamedTensors average_states(std::span<const NamedTensors> states) {
  if (states.empty()) throw Error("weight averaging needs at least one checkpoint");
  NamedTensors avg = states[0];
  for (std::size_t k = 1; k < states.size(); ++k) {
    if (states[k].size() != avg.size()) throw Error("weight averaging: checkpoints differ in tensors");
    for (auto& [name, t] : avg) {
      auto it = states[k].find(name);
      if (it == states[k].end()) throw Error("weight averaging: checkpoint lacks '" + name + "'");
      if (!it->second.same_shape(t)) {
        throw Error(fmt::format("weight averaging: '{}' has shape {} vs {}", name,
                                it->second.shape_string(), t.shape_string()));
      }
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += it->second[i];
    }
  }
  const double inv = 1.0 / static_cast<double>(states.size());
  if (states.size() > 1) {
    for (auto& [name, t] : avg) {
      for (double& v : t.data) v *= inv;
    }
  }
  return avg;
}

// ---------------------------------------------------------------------------
// Objectives

namespace {

class Erm : public Algorithm {
 public:
  explicit Erm(AlgorithmKind kind = AlgorithmKind::ERM) : Algorithm(kind) {}

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    const Pass p = forward_all(model, u.images);
    Tensor dz(p.logits.shape);
    StepResult r;
    r.loss = cross_entropy(p.logits, u.labels, &dz);
    r.terms["ce"] = r.loss;
    backward_all(model, p, dz);
    return r;
  }
};

class Swad : public Erm {
 public:
  Swad() : Erm(AlgorithmKind::SWAD) {}
  [[nodiscard]] bool averages_weights() const override { return true; }
};

class Irm : public Algorithm {
 public:
  explicit Irm(double lambda) : Algorithm(AlgorithmKind::IRM), lambda_(lambda) {
    if (lambda < 0) throw Error("lambda_irm must be non-negative");
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    const Pass p = forward_all(model, u.images);
    Tensor dz(p.logits.shape);
    StepResult r;
    const double ce = cross_entropy(p.logits, u.labels, &dz);
    double penalty = 0.0;
    if (lambda_ != 0.0) {
      const std::vector<Tensor> parts = split_rows(p.logits, u.offsets);
      for (int d = 0; d < u.domains(); ++d) {
        const double g = irm_scale_gradient(parts[d], u.labels_of(d));
        penalty += g * g;
        Tensor dpart(parts[d].shape);
        irm_scale_gradient(parts[d], u.labels_of(d), &dpart, 2.0 * g);
        add_rows(dz, {dpart}, {u.offsets[d], u.offsets[d + 1]}, lambda_);
      }
    }
    r.loss = lambda_ == 0.0 ? ce : ce + lambda_ * penalty;
    r.terms = {{"ce", ce}, {"penalty", penalty}};
    backward_all(model, p, dz);
    return r;
  }

 private:
  double lambda_;
};

class GroupDro : public Algorithm {
 public:
  GroupDro(double eta, bool update) : Algorithm(AlgorithmKind::GroupDRO), eta_(eta), update_(update) {
    if (eta < 0) throw Error("GroupDRO eta must be non-negative");
  }

  void set_weights(std::vector<double> q) { q_ = std::move(q); }
  [[nodiscard]] const std::vector<double>& weights() const { return q_; }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    if (q_.size() != static_cast<std::size_t>(u.domains())) {
      q_.assign(static_cast<std::size_t>(u.domains()), 1.0 / u.domains());
    }
    const Pass p = forward_all(model, u.images);
    const std::vector<Tensor> parts = split_rows(p.logits, u.offsets);
    std::vector<double> losses;
    for (int d = 0; d < u.domains(); ++d) losses.push_back(cross_entropy(parts[d], u.labels_of(d)));
    if (update_) q_ = groupdro_update(q_, losses, eta_);
    Tensor dz(p.logits.shape);
    StepResult r;
    for (int d = 0; d < u.domains(); ++d) {
      Tensor dpart(parts[d].shape);
      cross_entropy(parts[d], u.labels_of(d), &dpart, q_[d]);
      add_rows(dz, {dpart}, {u.offsets[d], u.offsets[d + 1]}, 1.0);
      r.loss += q_[d] * losses[d];
      r.terms[fmt::format("q{}", d)] = q_[d];
    }
    backward_all(model, p, dz);
    return r;
  }

 private:
  double eta_;
  bool update_;
  std::vector<double> q_;
};

/// ERM plus a lambda-weighted penalty on per-domain penultimate features.
class FeatureAlignment : public Algorithm {
 public:
  FeatureAlignment(AlgorithmKind kind, double lambda, std::vector<double> bandwidths)
      : Algorithm(kind), lambda_(lambda), bandwidths_(std::move(bandwidths)) {
    if (lambda < 0) throw Error("alignment weight must be non-negative");
    for (double b : bandwidths_) {
      if (!(b > 0)) throw Error("MMD bandwidth multipliers must be positive");
    }
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    const Pass p = forward_all(model, u.images);
    Tensor dz(p.logits.shape);
    const double ce = cross_entropy(p.logits, u.labels, &dz);
    StepResult r;
    double penalty = 0.0;
    Tensor dfeat(p.features.shape);
    if (lambda_ != 0.0) {
      const std::vector<Tensor> feats = split_rows(p.features, u.offsets);
      std::vector<Tensor> grads;
      if (kind() == AlgorithmKind::CORAL) {
        penalty = coral_penalty(feats, &grads);
      } else {
        penalty = mmd_with_median(feats, grads);
      }
      add_rows(dfeat, grads, u.offsets, lambda_);
    }
    r.loss = lambda_ == 0.0 ? ce : ce + lambda_ * penalty;
    r.terms = {{"ce", ce}, {"penalty", penalty}};
    backward_all(model, p, dz, &dfeat);
    return r;
  }

 private:
  double mmd_with_median(const std::vector<Tensor>& feats, std::vector<Tensor>& grads) const {
    double median = median_sq_distance(feats);
    const bool scaled = median > 1e-12;
    if (!scaled) median = 1.0;
    std::vector<double> gammas;
    for (double b : bandwidths_) gammas.push_back(1.0 / (b * median));
    std::vector<double> dgammas;
    const double penalty = mmd_penalty(feats, gammas, &grads, &dgammas);
    if (scaled) {
      // gamma_b = 1 / (b * median) => dgamma_b / dmedian = -gamma_b / median.
      double dmedian = 0.0;
      for (std::size_t k = 0; k < gammas.size(); ++k) dmedian += dgammas[k] * (-gammas[k] / median);
      median_sq_distance(feats, &grads, dmedian);
    }
    return penalty;
  }

  double lambda_;
  std::vector<double> bandwidths_;
};

class Fishr : public Algorithm {
 public:
  Fishr(double lambda, bool full_covariance)
      : Algorithm(AlgorithmKind::Fishr), lambda_(lambda), full_(full_covariance) {
    if (lambda < 0) throw Error("lambda_fishr must be non-negative");
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    const Pass p = forward_all(model, u.images);
    Tensor dz(p.logits.shape);
    Tensor dfeat(p.features.shape);
    const double ce = cross_entropy(p.logits, u.labels, &dz);
    double penalty = 0.0;
    if (lambda_ != 0.0 && u.domains() >= 2) penalty = penalty_and_grad(p, u, dz, dfeat);
    StepResult r;
    r.loss = lambda_ == 0.0 ? ce : ce + lambda_ * penalty;
    r.terms = {{"ce", ce}, {"penalty", penalty}};
    backward_all(model, p, dz, &dfeat);
    return r;
  }

 private:
  double penalty_and_grad(const Pass& p, const Union& u, Tensor& dz, Tensor& dfeat) const {
    const int domains = u.domains();
    const int f = p.features.dim(1), c = p.logits.dim(1);
    const std::vector<Tensor> feats = split_rows(p.features, u.offsets);
    const std::vector<Tensor> logits = split_rows(p.logits, u.offsets);
    std::vector<Tensor> grads;
    std::vector<MatR> centered, stats;
    for (int d = 0; d < domains; ++d) {
      grads.push_back(per_sample_head_gradients(feats[d], logits[d], u.labels_of(d)));
      const Tensor& g = grads.back();
      const int n = g.dim(0), dim = g.dim(1);
      CMapR gm(g.data.data(), n, dim);
      MatR gc = gm.rowwise() - gm.colwise().mean();
      if (full_) {
        stats.push_back((gc.transpose() * gc) / n);
      } else {
        stats.push_back(gc.array().square().colwise().sum().matrix() / n);
      }
      centered.push_back(std::move(gc));
    }
    MatR mean = MatR::Zero(stats[0].rows(), stats[0].cols());
    for (const auto& s : stats) mean += s / domains;
    double penalty = 0.0;
    for (int d = 0; d < domains; ++d) {
      const MatR diff = stats[d] - mean;
      penalty += diff.squaredNorm();
      // dPenalty/dstat_d = 2 (stat_d - mean); the mean's own term cancels.
      const MatR a = lambda_ * 2.0 * diff;
      const int n = grads[d].dim(0);
      MatR dg;
      if (full_) {
        dg = (2.0 / n) * centered[d] * a;
      } else {
        dg = (2.0 / n) * (centered[d].array().rowwise() * a.row(0).array()).matrix();
      }
      // g_i = [e_i (x) f_i, e_i] with e_i = p_i - y_i.
      const Tensor prob = softmax(logits[d]);
      for (int i = 0; i < n; ++i) {
        const int row = u.offsets[d] + i;
        const int y = u.labels_of(d)[static_cast<std::size_t>(i)];
        std::vector<double> de(static_cast<std::size_t>(c), 0.0);
        for (int k = 0; k < c; ++k) {
          const double e = prob.at(i, k) - (k == y ? 1.0 : 0.0);
          double acc = dg(i, c * f + k);
          for (int j = 0; j < f; ++j) {
            acc += dg(i, k * f + j) * feats[d].at(i, j);
            dfeat.at(row, j) += dg(i, k * f + j) * e;
          }
          de[k] = acc;
        }
        double pde = 0.0;
        for (int k = 0; k < c; ++k) pde += prob.at(i, k) * de[k];
        for (int k = 0; k < c; ++k) dz.at(row, k) += prob.at(i, k) * (de[k] - pde);
      }
    }
    return penalty;
  }

  double lambda_;
  bool full_;
};

class Mixup : public Algorithm {
 public:
  Mixup(double alpha, std::optional<double> fixed_lambda, int num_classes)
      : Algorithm(AlgorithmKind::Mixup), alpha_(alpha), fixed_(fixed_lambda), classes_(num_classes) {
    if (!(alpha > 0)) throw Error("mixup_alpha must be positive");
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches,
                               Rng& rng) override {
    check_batches(batches, true);
    model.zero_grad();
    const int domains = static_cast<int>(batches.size());
    // Inter-domain pairing: a random cycle over the domains.
    std::vector<int> perm(static_cast<std::size_t>(domains));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<MixedBatch> mixed(static_cast<std::size_t>(domains));
    for (int k = 0; k < domains; ++k) {
      const int i = perm[k], j = perm[(k + 1) % domains];
      const double lambda = fixed_ ? *fixed_ : sample_mixup_lambda(alpha_, rng);
      mixed[i] = mixup_batch(batches[i], batches[j], classes_, lambda);
    }
    std::vector<const Tensor*> parts;
    for (const auto& m : mixed) parts.push_back(&m.images);
    const Tensor images = parts.size() == 1 ? mixed[0].images : concat_batch(parts);
    const int n = batches[0].size();
    Tensor targets({n * domains, classes_});
    for (int d = 0; d < domains; ++d) {
      std::copy(mixed[d].soft_labels.data.begin(), mixed[d].soft_labels.data.end(),
                targets.data.begin() + static_cast<std::ptrdiff_t>(d) * n * classes_);
    }
    const Pass p = forward_all(model, images);
    Tensor dz(p.logits.shape);
    StepResult r;
    r.loss = soft_cross_entropy(p.logits, targets, &dz);
    r.terms["ce"] = r.loss;
    backward_all(model, p, dz);
    return r;
  }

 private:
  double alpha_;
  std::optional<double> fixed_;
  int classes_;
};

class MixStyle : public Algorithm {
 public:
  MixStyle(double alpha, double p, std::vector<int> after_blocks)
      : Algorithm(AlgorithmKind::MixStyle), alpha_(alpha), p_(p), after_(std::move(after_blocks)) {
    if (!(alpha > 0)) throw Error("mixstyle_alpha must be positive");
    if (p < 0 || p > 1) throw Error("mixstyle_p must be in [0,1]");
    std::sort(after_.begin(), after_.end());
    after_.erase(std::unique(after_.begin(), after_.end()), after_.end());
    for (int b : after_) {
      if (b < 1 || b >= kNumBlocks) {
        throw Error(fmt::format(
            "MixStyle can follow blocks 1..{} only; block {} feeds the head features", kNumBlocks - 1,
            b));
      }
    }
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches,
                               Rng& rng) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    std::vector<InstanceStatMix> mixes(after_.size());
    std::vector<bool> applied(after_.size(), false);
    Tensor h = u.images;
    int start = 0;
    for (std::size_t k = 0; k < after_.size(); ++k) {
      h = model.forward_blocks(h, start, after_[k], true);
      bool on = false;
      h = mixstyle_features(h, alpha_, p_, rng, &mixes[k], &on);
      applied[k] = on;
      start = after_[k];
    }
    Pass p;
    p.maps = model.forward_blocks(h, start, kNumBlocks, true);
    p.features = Model::pool(p.maps);
    p.logits = model.head_forward(p.features);
    Tensor dz(p.logits.shape);
    StepResult r;
    r.loss = cross_entropy(p.logits, u.labels, &dz);
    r.terms["ce"] = r.loss;

    Tensor df = model.head_backward(p.features, dz);
    Tensor g = Model::pool_backward(df, p.maps.shape);
    int end = kNumBlocks;
    for (std::size_t k = after_.size(); k-- > 0;) {
      g = model.backward_blocks(g, after_[k], end);
      if (g.empty()) return r;
      if (applied[k]) g = mixes[k].backward(g);
      end = after_[k];
    }
    model.backward_blocks(g, 0, end);
    return r;
  }

 private:
  double alpha_;
  double p_;
  std::vector<int> after_;
};

class Rsc : public Algorithm {
 public:
  explicit Rsc(double percentile) : Algorithm(AlgorithmKind::RSC), percentile_(percentile) {
    (void)rsc_muted_count(1, percentile);
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches, Rng&) override {
    check_batches(batches, false);
    model.zero_grad();
    const Union u = make_union(batches);
    Pass p;
    p.maps = model.forward_blocks(u.images, 0, kNumBlocks, true);
    p.features = Model::pool(p.maps);
    const RscOutput out = rsc_forward(model.head(), p.features, u.labels, percentile_);
    Tensor masked(p.features.shape);
    for (std::size_t i = 0; i < masked.size(); ++i) masked[i] = p.features[i] * out.scaled_mask[i];
    Tensor dz(out.logits.shape);
    StepResult r;
    r.loss = cross_entropy(out.logits, u.labels, &dz);
    r.terms["ce"] = r.loss;
    Tensor df = model.head_backward(masked, dz);
    for (std::size_t i = 0; i < df.size(); ++i) df[i] *= out.scaled_mask[i];
    model.backward_blocks(Model::pool_backward(df, p.maps.shape), 0, kNumBlocks);
    return r;
  }

 private:
  double percentile_;
};

class SagNet : public Algorithm {
 public:
  SagNet(double adv_weight, bool randomize, int feature_dim, int num_classes, std::uint64_t seed)
      : Algorithm(AlgorithmKind::SagNet),
        adv_weight_(adv_weight),
        randomize_(randomize),
        style_head_("style_head", feature_dim, num_classes, kAuxGroup) {
    if (adv_weight < 0) throw Error("sagnet_adv_w must be non-negative");
    style_head_.reinit(seed);
  }

  std::vector<Param*> extra_parameters() override {
    return {&style_head_.weight, &style_head_.bias};
  }

  SagNetLosses losses_and_gradients(Model& model, std::span<const DomainBatch> batches, Rng& rng) {
    check_batches(batches, false);
    model.zero_grad();
    style_head_.weight.grad.fill(0.0);
    style_head_.bias.grad.fill(0.0);
    const Union u = make_union(batches);
    const Tensor maps = model.forward_blocks(u.images, 0, kNumBlocks, true);
    const int n = maps.dim(1);

    // Content branch: features carrying another instance's style.
    InstanceStatMix style_swap, content_swap;
    Tensor content_maps = maps, style_maps = maps;
    if (randomize_) {
      content_maps = style_swap.forward(maps, random_perm(n, rng), std::vector<double>(n, 0.0),
                                        std::vector<double>(n, 1.0));
      style_maps = content_swap.forward(maps, random_perm(n, rng), std::vector<double>(n, 1.0),
                                        std::vector<double>(n, 0.0));
    }
    const Tensor fc = Model::pool(content_maps);
    const Tensor zc = model.head_forward(fc);
    Tensor dzc(zc.shape);
    SagNetLosses out;
    out.content = cross_entropy(zc, u.labels, &dzc);

    // Style branch: features carrying another instance's content.
    const Tensor fs = Model::pool(style_maps);
    const Tensor zs = style_head_.forward(fs);
    Tensor dzs(zs.shape);
    out.style = cross_entropy(zs, u.labels, &dzs);
    out.adversarial = -out.style;

    Tensor dmaps = Model::pool_backward(model.head_backward(fc, dzc), maps.shape);
    if (randomize_) dmaps = style_swap.backward(dmaps);
    // The style head descends its loss; the extractor receives the reversed
    // gradient scaled by the adversarial weight.
    const Tensor dfs = style_head_.backward(fs, dzs);
    if (adv_weight_ != 0.0) {
      Tensor dstyle = Model::pool_backward(dfs, maps.shape);
      if (randomize_) dstyle = content_swap.backward(dstyle);
      for (std::size_t i = 0; i < dmaps.size(); ++i) dmaps[i] -= adv_weight_ * dstyle[i];
    }
    model.backward_blocks(dmaps, 0, kNumBlocks);
    return out;
  }

  StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches,
                               Rng& rng) override {
    const SagNetLosses l = losses_and_gradients(model, batches, rng);
    StepResult r;
    r.loss = adv_weight_ == 0.0 ? l.content : l.content + adv_weight_ * l.adversarial;
    r.terms = {{"content", l.content}, {"style", l.style}, {"adversarial", l.adversarial}};
    return r;
  }

 private:
  static std::vector<int> random_perm(int n, Rng& rng) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    return perm;
  }

  double adv_weight_;
  bool randomize_;
  Linear style_head_;
};

}  // namespace

const std::vector<std::string>& algorithm_param_names(AlgorithmKind kind) {
  static const std::map<AlgorithmKind, std::vector<std::string>> names = {
      {AlgorithmKind::ERM, {}},
      {AlgorithmKind::SWAD, {"swad_r"}},
      {AlgorithmKind::RSC, {"rsc_p"}},
      {AlgorithmKind::GroupDRO, {"eta_dro"}},
      {AlgorithmKind::Fishr, {"lambda_fishr"}},
      {AlgorithmKind::CORAL, {"lambda_coral"}},
      {AlgorithmKind::MMD, {"lambda_mmd"}},
      {AlgorithmKind::SagNet, {"sagnet_adv_w"}},
      {AlgorithmKind::IRM, {"lambda_irm"}},
      {AlgorithmKind::Mixup, {"mixup_alpha"}},
      {AlgorithmKind::MixStyle, {"mixstyle_alpha", "mixstyle_p"}},
  };
  return names.at(kind);
}

std::unique_ptr<Algorithm> make_algorithm(AlgorithmKind kind, const AlgorithmParams& params,
                                          const AlgorithmOptions& options) {
  switch (kind) {
    case AlgorithmKind::ERM: return std::make_unique<Erm>();
    case AlgorithmKind::SWAD:
      if (require_param(params, "swad_r") < 0) throw Error("swad_r must be non-negative");
      return std::make_unique<Swad>();
    case AlgorithmKind::RSC: return std::make_unique<Rsc>(require_param(params, "rsc_p"));
    case AlgorithmKind::GroupDRO:
      return std::make_unique<GroupDro>(require_param(params, "eta_dro"),
                                        options.groupdro_update_weights);
    case AlgorithmKind::Fishr:
      return std::make_unique<Fishr>(require_param(params, "lambda_fishr"),
                                     options.fishr_full_covariance);
    case AlgorithmKind::CORAL:
      return std::make_unique<FeatureAlignment>(kind, require_param(params, "lambda_coral"),
                                                std::vector<double>{});
    case AlgorithmKind::MMD:
      return std::make_unique<FeatureAlignment>(kind, require_param(params, "lambda_mmd"),
                                                options.mmd_bandwidths);
    case AlgorithmKind::SagNet:
      if (options.feature_dim <= 0) throw Error("SagNet needs the backbone feature width");
      return std::make_unique<SagNet>(require_param(params, "sagnet_adv_w"),
                                      options.sagnet_randomize, options.feature_dim,
                                      options.num_classes, options.seed);
    case AlgorithmKind::IRM: return std::make_unique<Irm>(require_param(params, "lambda_irm"));
    case AlgorithmKind::Mixup:
      return std::make_unique<Mixup>(require_param(params, "mixup_alpha"),
                                     options.mixup_fixed_lambda, options.num_classes);
    case AlgorithmKind::MixStyle:
      return std::make_unique<MixStyle>(require_param(params, "mixstyle_alpha"),
                                        require_param(params, "mixstyle_p"),
                                        options.mixstyle_after_blocks);
  }
  throw Error("unhandled algorithm");
}

double erm_loss(Model& model, std::span<const DomainBatch> batches) {
  Erm erm;
  Rng rng(0);
  return erm.compute_gradients(model, batches, rng).loss;
}

double irm_loss(Model& model, std::span<const DomainBatch> batches, double lambda) {
  if (batches.size() == 1) {
    fmt::print(stderr, "warning: IRM with a single domain; the penalty has one term\n");
  }
  Irm irm(lambda);
  Rng rng(0);
  return irm.compute_gradients(model, batches, rng).loss;
}

std::pair<double, std::vector<double>> groupdro_loss(Model& model,
                                                     std::span<const DomainBatch> batches,
                                                     double eta, std::span<const double> q) {
  GroupDro dro(eta, true);
  dro.set_weights({q.begin(), q.end()});
  Rng rng(0);
  const double loss = dro.compute_gradients(model, batches, rng).loss;
  return {loss, dro.weights()};
}

double fishr_penalty(Model& model, std::span<const DomainBatch> batches) {
  check_batches(batches, false);
  if (batches.size() < 2) return 0.0;
  const Union u = make_union(batches);
  const Pass p = forward_all(model, u.images);
  std::vector<std::vector<double>> variances;
  for (int d = 0; d < u.domains(); ++d) {
    const Tensor f = slice_rows(p.features, u.offsets[d], u.offsets[d + 1]);
    const Tensor z = slice_rows(p.logits, u.offsets[d], u.offsets[d + 1]);
    variances.push_back(gradient_variance(per_sample_head_gradients(f, z, u.labels_of(d))));
  }
  return fishr_penalty_from_variances(variances);
}

SagNetLosses sagnet_losses(Model& model, std::span<const DomainBatch> batches, double adv_weight,
                           bool randomize, std::uint64_t seed) {
  SagNet sag(adv_weight, randomize, model.config().feature_dim(), model.config().num_classes, seed);
  Rng rng(seed);
  return sag.losses_and_gradients(model, batches, rng);
}

}  // namespace dgb
