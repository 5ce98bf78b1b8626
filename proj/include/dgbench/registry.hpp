#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgbench/tensor.hpp"

namespace dgb {

/// One sampled configuration for a trial.
struct HParamPoint {
  double learning_rate = 1e-3;
  int batch_size_per_domain = 32;
  double weight_decay = 0.0;
  std::map<std::string, double> algorithm_params;
  std::uint64_t trial_seed = 0;

  bool operator==(const HParamPoint&) const = default;
};

/// Train / test domain assignment for one setting.
struct SplitPlan {
  std::set<std::string> training_domains;
  std::set<std::string> test_domains;
  double validation_fraction = 0.2;
  std::uint64_t split_seed = 0;

  /// Checks the plan on its own (disjointness, |training| >= 2, fraction range).
  void validate() const;
};

/// One trained model: its provenance and measured accuracies.
///
/// `trial_index` is not serialized; the registry derives it from the
/// record's directory name.
struct TrialRecord {
  std::string setting_id;
  HParamPoint hparams;
  std::uint64_t seed = 0;
  double val_accuracy = 0.0;
  std::map<std::string, double> test_accuracy;
  std::int64_t iterations = 0;
  double wall_time_s = 0.0;
  std::string checkpoint_path;
  int trial_index = 0;

  bool operator==(const TrialRecord&) const = default;

  /// Throws if accuracies are out of [0,1] or a test domain of `plan` is missing.
  void validate(const std::optional<SplitPlan>& plan = std::nullopt) const;
};

void to_json(nlohmann::json& j, const HParamPoint& h);
void from_json(const nlohmann::json& j, HParamPoint& h);
void to_json(nlohmann::json& j, const SplitPlan& p);
void from_json(const nlohmann::json& j, SplitPlan& p);

/// Serializes the eight record keys. Doubles are written with round-trip precision.
std::string serialize_record(const TrialRecord& r);
TrialRecord deserialize_record(const std::string& text, int trial_index = 0);

class DuplicateTrialError : public Error {
 public:
  using Error::Error;
};

class RecordParseError : public Error {
 public:
  using Error::Error;
};

/// On-disk store: `<root>/<setting_id>/<trial_idx>_<seed>/record.json`.
///
/// Records are immutable. Publishing uses link(2) on a fully written
/// temporary file, so a record is either absent or complete, and two
/// writers racing on the same trial cannot both succeed.
class RunRegistry {
 public:
  explicit RunRegistry(std::filesystem::path root);

  [[nodiscard]] const std::filesystem::path& root() const { return root_; }

  /// Directory for a trial (created on demand by callers that store checkpoints).
  [[nodiscard]] std::filesystem::path trial_dir(const std::string& setting_id, int trial_index,
                                                std::uint64_t seed) const;
  [[nodiscard]] bool contains(const std::string& setting_id, int trial_index,
                              std::uint64_t seed) const;

  std::filesystem::path write_trial(const TrialRecord& record) const;
  [[nodiscard]] std::vector<TrialRecord> read_all(const std::string& setting_id) const;
  [[nodiscard]] std::vector<std::string> settings() const;

 private:
  std::filesystem::path root_;
};

/// Validates that a setting id is a single safe path component.
void check_setting_id(const std::string& setting_id);

}  // namespace dgb
