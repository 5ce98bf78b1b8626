#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgbench/algorithms.hpp"
#include "dgbench/dataset.hpp"
#include "dgbench/registry.hpp"
#include "dgbench/trainer.hpp"

namespace dgb {

/// Sampling distribution of one scalar hyperparameter.
///
/// For log_uniform, `low`/`high` are base-10 exponents.
struct ParamRange {
  enum class Kind { LogUniform, Uniform, Fixed };
  Kind kind = Kind::Fixed;
  double low = 0.0;
  double high = 0.0;

  static ParamRange log_uniform(double lo, double hi) { return {Kind::LogUniform, lo, hi}; }
  static ParamRange uniform(double lo, double hi) { return {Kind::Uniform, lo, hi}; }
  static ParamRange fixed(double v) { return {Kind::Fixed, v, v}; }

  [[nodiscard]] double sample(Rng& rng) const;
  [[nodiscard]] bool contains(double value) const;
  [[nodiscard]] double min_value() const;
  [[nodiscard]] double max_value() const;
  void validate(const std::string& name) const;

  bool operator==(const ParamRange&) const = default;
};

void to_json(nlohmann::json& j, const ParamRange& r);
void from_json(const nlohmann::json& j, ParamRange& r);

using AlgorithmSpace = std::map<std::string, ParamRange>;

/// Default per-algorithm spaces (the table shipped in config/algorithm_spaces.json).
const AlgorithmSpace& default_algorithm_space(AlgorithmKind kind);
std::map<std::string, AlgorithmSpace> load_algorithm_spaces(const std::filesystem::path& path);

struct HParamSpace {
  ParamRange learning_rate = ParamRange::log_uniform(-4.5, -3.0);
  std::vector<int> batch_sizes{32};
  ParamRange weight_decay = ParamRange::log_uniform(-6.0, -2.0);
  AlgorithmSpace algorithm;

  /// Learning-rate exponents on [-4.5, -3] from scratch, [-5, -3.5] when pretrained.
  static HParamSpace defaults(AlgorithmKind kind, bool pretrained);

  void validate() const;
  [[nodiscard]] bool contains(const HParamPoint& p) const;
};

void to_json(nlohmann::json& j, const HParamSpace& s);
void from_json(const nlohmann::json& j, HParamSpace& s);

/// `n_trials` independent draws; trial_seed of draw i is derived from (sweep_seed, i).
std::vector<HParamPoint> sample_hparams(const HParamSpace& space, int n_trials,
                                        std::uint64_t sweep_seed);

/// `<dataset>__<algorithm>__<scratch|pt-k<k>>__<test domains joined by +>`.
struct SettingKey {
  std::string dataset;
  std::string algorithm;
  std::string protocol;
  std::vector<std::string> test_domains;  // sorted

  bool operator==(const SettingKey&) const = default;
};

std::string make_setting_id(const SettingKey& key);
SettingKey parse_setting_id(const std::string& setting_id);

/// One setting of the modified protocol plus its sweep budget.
struct ExperimentConfig {
  std::string dataset;  // directory of a cached dataset
  std::string algorithm = "ERM";
  std::vector<std::string> training_domains;
  std::vector<std::string> test_domains;
  std::string pretrained;  // checkpoint path; empty trains from scratch
  int freeze_k = 0;
  int n_trials = 10;
  int extra_seeds = 2;
  double validation_fraction = 0.2;
  std::uint64_t split_seed = 0;
  TrainConfig train;
  /// Replaces entries of the default space; keys are `learning_rate`,
  /// `weight_decay`, `batch_sizes` or algorithm parameter names.
  nlohmann::json space_overrides = nlohmann::json::object();

  [[nodiscard]] AlgorithmKind algorithm_kind() const { return parse_algorithm(algorithm); }
  [[nodiscard]] SplitPlan plan() const;
  [[nodiscard]] HParamSpace space() const;
  [[nodiscard]] TrainConfig train_config() const;
  /// Uses the dataset directory's final component as the dataset name.
  [[nodiscard]] std::string setting_id() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

class SweepError : public Error {
 public:
  using Error::Error;
};

/// Ten search trials with seed s0 at indices [0, n_trials), then the
/// IID-best point rerun with seeds s0+1.. at the following indices.
/// Trials already in the registry are kept, so an interrupted sweep resumes.
std::vector<TrialRecord> run_sweep(const MultiDomainDataset& ds, const ExperimentConfig& exp,
                                   const RunRegistry& registry, std::uint64_t seed,
                                   std::ostream* progress = nullptr);

/// A trial stopped by divergence records fewer iterations than configured.
bool diverged(const TrialRecord& r, int iterations);

struct SelectionResult {
  std::vector<std::string> group;
  std::map<std::string, double> per_domain;
  /// Each evaluated combination of test domains with the trial chosen for it.
  std::vector<std::vector<std::string>> combinations;
  std::vector<int> selected;
  double average = 0.0;
};

/// Highest val_accuracy, ties to the lowest trial index.
const TrialRecord& iid_best(const std::vector<TrialRecord>& records);

/// An empty group means the test domains of the first record.
SelectionResult select_iid(const std::vector<TrialRecord>& records,
                           std::vector<std::string> group = {});
SelectionResult select_oracle(const std::vector<TrialRecord>& records, int k,
                              std::vector<std::string> group = {});

struct LeakageReport {
  std::vector<std::string> group;
  std::vector<double> iid;                  // per domain, in group order
  double iid_avg = 0.0;
  std::vector<std::vector<double>> oracle;  // [K-1][domain]
  std::vector<double> oracle_avg;
  std::vector<double> leakage;
  /// Relative drop from K = 1; undefined when leakage(1) is zero.
  std::vector<std::optional<double>> reduction;

  [[nodiscard]] std::string markdown(const std::string& title = "") const;
};

void to_json(nlohmann::json& j, const LeakageReport& r);

LeakageReport leakage_from_values(std::vector<std::string> group, std::vector<double> iid,
                                  std::vector<std::vector<double>> oracle);
LeakageReport leakage(const std::vector<TrialRecord>& records, std::vector<std::string> group = {});

/// Accuracy-vs-frozen-blocks series, one per test domain.
struct FreezeCurve {
  std::vector<int> ks;
  std::map<std::string, std::vector<double>> accuracy;
};

/// One sweep per k with everything else held fixed; each point is the mean
/// test accuracy over the seeds of the IID-selected hyperparameters.
FreezeCurve freeze_sweep(const MultiDomainDataset& ds, const ExperimentConfig& exp,
                         const std::vector<int>& ks, const RunRegistry& registry,
                         std::uint64_t seed, std::ostream* progress = nullptr);

struct PretrainConfig {
  std::string resembled;  // downstream domain whose nuisances the corpus copies
  bool overlapping_classes = true;
  int samples_per_class = 200;
  std::uint64_t corpus_seed = 1000;
  double validation_fraction = 0.2;
  HParamPoint hparams;
  TrainConfig train;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainResult {
  std::filesystem::path checkpoint;
  double corpus_accuracy = 0.0;  // held-out part of the corpus
};

/// ERM on a synthetic corpus; throws if training diverges.
PretrainResult pretrain(const MultiDomainDataset& corpus, const PretrainConfig& cfg,
                        const std::filesystem::path& checkpoint, std::uint64_t seed,
                        std::ostream* progress = nullptr);

/// Corpus for `cfg` given the downstream generator spec.
MultiDomainDataset make_pretrain_corpus(const DatasetSpec& downstream, const PretrainConfig& cfg);

}  // namespace dgb
