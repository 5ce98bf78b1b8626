#pragma once

#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgbench/backbone.hpp"
#include "dgbench/tensor.hpp"

namespace dgb {

enum class AlgorithmKind { ERM, SWAD, RSC, GroupDRO, Fishr, CORAL, MMD, SagNet, IRM, Mixup, MixStyle };

/// Canonical names, in leaderboard order.
const std::vector<std::string>& algorithm_names();
AlgorithmKind parse_algorithm(const std::string& name);
std::string algorithm_name(AlgorithmKind kind);

/// One equal-size minibatch drawn from a single training domain.
struct DomainBatch {
  Tensor images;  // {3, n, H, W}
  std::vector<int> labels;
  std::string domain;

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
};

using AlgorithmParams = std::map<std::string, double>;

// ---------------------------------------------------------------------------
// Loss primitives. Gradient outputs are optional and *accumulated*.

Tensor softmax(const Tensor& logits);

/// Mean cross-entropy; adds `scale * dLoss/dlogits` to `dlogits` when given.
double cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits = nullptr,
                     double scale = 1.0);

/// Mean cross-entropy against soft targets ({N, C}, rows summing to 1).
double soft_cross_entropy(const Tensor& logits, const Tensor& targets, Tensor* dlogits = nullptr,
                          double scale = 1.0);

/// d/dw of the mean risk of w*logits at w = 1 (the IRMv1 dummy-scale gradient).
double irm_scale_gradient(const Tensor& logits, std::span<const int> labels,
                          Tensor* dlogits = nullptr, double scale = 1.0);

/// GroupDRO exponentiated-gradient step: q_d <- q_d exp(eta * loss_d), renormalized.
std::vector<double> groupdro_update(std::span<const double> q, std::span<const double> losses,
                                    double eta);

/// Mean over domain pairs of |mu_a - mu_b|^2 + |Cov_a - Cov_b|_F^2 (unbiased covariance).
double coral_penalty(std::span<const Tensor> features, std::vector<Tensor>* dfeatures = nullptr);

/// Mean over domain pairs of the biased multi-kernel MMD^2 with kernels
/// exp(-gamma |x - y|^2), summed over `gammas`. `dgammas` receives dPenalty/dgamma.
double mmd_penalty(std::span<const Tensor> features, std::span<const double> gammas,
                   std::vector<Tensor>* dfeatures = nullptr, std::vector<double>* dgammas = nullptr);

/// Median of squared distances over all unordered pairs of rows across `features`.
/// When `dfeatures` is given, adds `scale * dMedian/dfeatures`.
double median_sq_distance(std::span<const Tensor> features, std::vector<Tensor>* dfeatures = nullptr,
                          double scale = 1.0);

/// Per-sample gradients of the cross-entropy w.r.t. head weight and bias:
/// row i is [(p_i - y_i) outer f_i (row-major C x F), p_i - y_i].
Tensor per_sample_head_gradients(const Tensor& features, const Tensor& logits,
                                 std::span<const int> labels);

/// Per-coordinate population variance over rows.
std::vector<double> gradient_variance(const Tensor& per_sample_gradients);

/// sum_d |v_d - mean_d v_d|^2.
double fishr_penalty_from_variances(std::span<const std::vector<double>> variances);

struct MixedBatch {
  Tensor images;
  Tensor soft_labels;  // {n, C}
  double lambda = 1.0;
};

double sample_mixup_lambda(double alpha, Rng& rng);
/// x = lambda * x_a + (1 - lambda) * x_b; labels mixed the same way.
MixedBatch mixup_batch(const DomainBatch& a, const DomainBatch& b, int num_classes, double lambda);
MixedBatch mixup_batch(const DomainBatch& a, const DomainBatch& b, int num_classes, double alpha,
                       std::uint64_t seed);

/// Per-instance channel-statistics mixing on {C, N, H, W} maps:
///   y_n = (a_n s_n + (1-a_n) s_pi(n)) * (b_n xhat_n + (1-b_n) xhat_pi(n))
///         + (a_n m_n + (1-a_n) m_pi(n))
/// with m, s the spatial mean and standard deviation of each instance-channel.
/// MixStyle uses a = lambda, b = 1; SagNet's style randomization a = 0, b = 1;
/// its content randomization a = 1, b = 0.
class InstanceStatMix {
 public:
  static constexpr double kEps = 1e-6;

  Tensor forward(const Tensor& x, std::vector<int> perm, std::vector<double> stat_weight,
                 std::vector<double> content_weight);
  [[nodiscard]] Tensor backward(const Tensor& dy) const;

 private:
  std::vector<int> shape_;
  std::vector<int> perm_;
  std::vector<double> a_, b_;
  std::vector<double> mean_, stdev_;
  Tensor xhat_;
};

/// Instance channel means {C, N} and standard deviations (population, no eps).
std::pair<Tensor, Tensor> instance_channel_stats(const Tensor& maps);

/// MixStyle on one intermediate feature map; `state` (optional) keeps the
/// mixing for a later backward pass. Throws on pooled {N, F} features.
Tensor mixstyle_features(const Tensor& maps, double alpha, double p_apply, Rng& rng,
                         InstanceStatMix* state = nullptr, bool* applied = nullptr);
Tensor mixstyle_features(const Tensor& maps, double alpha, double p_apply, std::uint64_t seed);

/// RSC: number of units muted for `p` percent of `feature_dim` units.
int rsc_muted_count(int feature_dim, double percentile);
/// Indices of the ceil(p% * F) largest saliencies; ties go to the lower index.
std::vector<int> rsc_muted_units(std::span<const double> saliency, double percentile);

struct RscOutput {
  Tensor logits;
  Tensor scaled_mask;  // {N, F}: 0 on muted units, F / (F - muted) elsewhere
};
/// Saliency of unit j for sample i is d logit_{y_i} / d f_ij.
RscOutput rsc_forward(const Linear& head, const Tensor& features, std::span<const int> labels,
                      double percentile);

struct SwadWindow {
  int start = 0;  // inclusive evaluation index
  int end = 0;    // inclusive evaluation index
};
std::vector<double> smooth_losses(std::span<const double> losses, int window);
/// Window over evaluation indices on the smoothed validation-loss curve.
/// start: first index whose smoothed loss is within (1 + r) of the curve's
/// minimum; end: the index before the first run of `tolerance` consecutive
/// evaluations above that threshold (or the last index).
SwadWindow select_swad_window(std::span<const double> val_losses, double r, int tolerance = 3,
                              int smoothing = 3);
NamedTensors average_states(std::span<const NamedTensors> states);

// ---------------------------------------------------------------------------
// Training objectives.

struct StepResult {
  double loss = 0.0;
  std::map<std::string, double> terms;
};

struct AlgorithmOptions {
  int num_classes = 10;
  /// Penultimate width; needed by objectives with their own heads (SagNet).
  int feature_dim = 0;
  std::uint64_t seed = 0;
  std::vector<double> mmd_bandwidths{1.0, 5.0, 10.0};
  bool fishr_full_covariance = false;
  /// Block boundaries (1..3) after which MixStyle is inserted.
  std::vector<int> mixstyle_after_blocks{1, 2, 3};
  /// Overrides Mixup's Beta draw (1.0 reproduces ERM).
  std::optional<double> mixup_fixed_lambda;
  bool sagnet_randomize = true;
  /// When false GroupDRO reuses its current q instead of stepping it.
  bool groupdro_update_weights = true;
};

class Algorithm {
 public:
  virtual ~Algorithm() = default;

  [[nodiscard]] AlgorithmKind kind() const { return kind_; }

  /// Zeroes gradients, evaluates the step objective on one batch per domain
  /// and leaves its gradient in the trainable parameters.
  virtual StepResult compute_gradients(Model& model, std::span<const DomainBatch> batches,
                                       Rng& rng) = 0;

  /// Parameters owned by the algorithm that the optimizer must also update.
  virtual std::vector<Param*> extra_parameters() { return {}; }
  [[nodiscard]] virtual bool averages_weights() const { return false; }

 protected:
  explicit Algorithm(AlgorithmKind kind) : kind_(kind) {}

 private:
  AlgorithmKind kind_;
};

/// Required parameter names per algorithm (names match the shipped space file).
const std::vector<std::string>& algorithm_param_names(AlgorithmKind kind);

std::unique_ptr<Algorithm> make_algorithm(AlgorithmKind kind, const AlgorithmParams& params,
                                          const AlgorithmOptions& options = {});

// Model-level conveniences built on the objectives above (they run a
// training-mode forward pass, so batch-norm running statistics advance).
double erm_loss(Model& model, std::span<const DomainBatch> batches);
double irm_loss(Model& model, std::span<const DomainBatch> batches, double lambda);
std::pair<double, std::vector<double>> groupdro_loss(Model& model,
                                                     std::span<const DomainBatch> batches,
                                                     double eta, std::span<const double> q);
double fishr_penalty(Model& model, std::span<const DomainBatch> batches);

struct SagNetLosses {
  double content = 0.0;
  double style = 0.0;
  double adversarial = 0.0;
};
SagNetLosses sagnet_losses(Model& model, std::span<const DomainBatch> batches, double adv_weight,
                           bool randomize, std::uint64_t seed);

}  // namespace dgb
