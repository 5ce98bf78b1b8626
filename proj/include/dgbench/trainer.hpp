#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgbench/algorithms.hpp"
#include "dgbench/backbone.hpp"
#include "dgbench/dataset.hpp"
#include "dgbench/registry.hpp"

namespace dgb {

struct TrainConfig {
  int iterations = 2000;
  int eval_every = 100;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool augment = true;
  FreezePolicy freeze;
  /// Checkpoint written by `pretrain`; empty trains from scratch.
  std::string pretrained;
  std::array<int, kNumBlocks> channels{32, 64, 128, 128};
  /// Print `iter=... loss=... lr=...` at every evaluation.
  bool verbose = false;
  /// Evaluation batch size (memory only; results do not depend on it).
  int eval_batch = 256;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EvalResult {
  std::string split;
  double accuracy = 0.0;
  std::size_t n_examples = 0;
  std::size_t correct = 0;
  double loss = 0.0;  // mean cross-entropy
};

/// Cosine annealing from `lr_max` at t = 0 to 0 at t = T.
double lr_at(int t, int total, double lr_max);

/// Top-1 accuracy with inference-mode normalization and no augmentation.
/// Does not modify the model.
EvalResult evaluate(Model& model, const MultiDomainDataset& ds,
                    const std::vector<std::size_t>& indices, const std::string& split = "eval",
                    int batch = 256);

/// Adam with coupled L2 weight decay over trainable parameters.
class Adam {
 public:
  Adam(std::vector<Param*> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step(double lr);

 private:
  std::vector<Param*> params_;
  std::vector<std::vector<double>> m_, v_;
  double wd_, b1_, b2_, eps_;
  long t_ = 0;
};

/// Flip, padded random crop and colour jitter, applied per image in place.
void augment_images(Tensor& images, Rng& rng);

/// One equal-size batch per training domain, sampled from shuffled epochs.
class DomainSampler {
 public:
  DomainSampler(const MultiDomainDataset& ds, std::map<std::string, std::vector<std::size_t>> sets,
                int batch_size, std::uint64_t seed, bool augment);
  std::vector<DomainBatch> next();

 private:
  const MultiDomainDataset& ds_;
  std::map<std::string, std::vector<std::size_t>> sets_;
  std::map<std::string, std::size_t> cursor_;
  int batch_;
  bool augment_;
  Rng rng_;
};

struct LoopResult {
  std::vector<double> train_losses;  // one per completed step
  std::vector<double> val_losses;    // one per evaluation
  std::vector<double> val_accuracies;
  std::vector<int> eval_steps;
  std::vector<NamedTensors> snapshots;  // weight-averaging runs only
  int iterations = 0;                   // completed steps
  bool diverged = false;
};

/// Optimizes `model` for cfg.iterations steps (or until divergence, after
/// which the model holds the last evaluated finite state).
LoopResult train_loop(Model& model, Algorithm& algorithm, const MultiDomainDataset& ds,
                      const std::map<std::string, std::vector<std::size_t>>& train_sets,
                      const std::vector<std::size_t>& val_set, const HParamPoint& hparams,
                      const TrainConfig& cfg, std::uint64_t seed, std::ostream* progress = nullptr);

struct TrialContext {
  std::string setting_id;
  int trial_index = 0;
  std::uint64_t seed = 0;
  /// When set, the checkpoint and record are written there.
  const RunRegistry* registry = nullptr;
  std::ostream* progress = nullptr;
};

struct TrialOutcome {
  TrialRecord record;
  LoopResult loop;
  std::optional<SwadWindow> swad_window;
  NamedTensors final_state;
  bool diverged() const { return loop.diverged; }
};

/// Model for a trial: built from the seed streams, optionally loaded from a
/// pretrained checkpoint, then frozen.
Model build_trial_model(const MultiDomainDataset& ds, const TrainConfig& cfg,
                        const HParamPoint& hparams, std::uint64_t seed);

TrialOutcome run_trial(const MultiDomainDataset& ds, const SplitPlan& plan, AlgorithmKind algorithm,
                       const HParamPoint& hparams, const TrainConfig& cfg,
                       const TrialContext& context);

}  // namespace dgb
