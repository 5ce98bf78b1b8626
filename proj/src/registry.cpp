#include "dgbench/registry.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>

#include <fmt/format.h>
#include <unistd.h>

#include "dgbench/archive.hpp"

namespace dgb {

namespace fs = std::filesystem;
using nlohmann::json;

void SplitPlan::validate() const {
  if (training_domains.size() < 2) {
    throw Error(fmt::format("split plan needs at least 2 training domains, got {}",
                            training_domains.size()));
  }
  if (test_domains.empty()) throw Error("split plan has no test domains");
  for (const auto& d : test_domains) {
    if (training_domains.count(d) != 0) {
      throw Error("domain '" + d + "' is both a training and a test domain");
    }
  }
  if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
    throw Error(fmt::format("validation_fraction must be in (0,1), got {}", validation_fraction));
  }
}

void TrialRecord::validate(const std::optional<SplitPlan>& plan) const {
  check_setting_id(setting_id);
  auto in_unit = [](double v) { return std::isfinite(v) && v >= 0.0 && v <= 1.0; };
  if (!in_unit(val_accuracy)) throw Error(fmt::format("val_accuracy {} outside [0,1]", val_accuracy));
  for (const auto& [d, acc] : test_accuracy) {
    if (!in_unit(acc)) throw Error(fmt::format("test accuracy {} for '{}' outside [0,1]", acc, d));
  }
  if (!(hparams.learning_rate > 0.0)) throw Error("learning_rate must be positive");
  if (hparams.batch_size_per_domain <= 0) throw Error("batch_size_per_domain must be positive");
  if (hparams.weight_decay < 0.0) throw Error("weight_decay must be non-negative");
  if (plan) {
    for (const auto& d : plan->test_domains) {
      if (test_accuracy.count(d) == 0) throw Error("record lacks test accuracy for '" + d + "'");
    }
    for (const auto& [d, acc] : test_accuracy) {
      if (plan->test_domains.count(d) == 0) {
        throw Error("record references '" + d + "' which is not a test domain of its plan");
      }
    }
  }
}

void to_json(json& j, const HParamPoint& h) {
  j = json{{"learning_rate", h.learning_rate},
           {"batch_size_per_domain", h.batch_size_per_domain},
           {"weight_decay", h.weight_decay},
           {"algorithm_params", h.algorithm_params},
           {"trial_seed", h.trial_seed}};
}

void from_json(const json& j, HParamPoint& h) {
  j.at("learning_rate").get_to(h.learning_rate);
  j.at("batch_size_per_domain").get_to(h.batch_size_per_domain);
  j.at("weight_decay").get_to(h.weight_decay);
  h.algorithm_params = j.value("algorithm_params", std::map<std::string, double>{});
  h.trial_seed = j.value("trial_seed", std::uint64_t{0});
}

void to_json(json& j, const SplitPlan& p) {
  j = json{{"training_domains", p.training_domains},
           {"test_domains", p.test_domains},
           {"validation_fraction", p.validation_fraction},
           {"split_seed", p.split_seed}};
}

void from_json(const json& j, SplitPlan& p) {
  j.at("training_domains").get_to(p.training_domains);
  j.at("test_domains").get_to(p.test_domains);
  p.validation_fraction = j.value("validation_fraction", 0.2);
  p.split_seed = j.value("split_seed", std::uint64_t{0});
}

std::string serialize_record(const TrialRecord& r) {
  json j{{"setting_id", r.setting_id},       {"hparams", r.hparams},
         {"seed", r.seed},                   {"val_accuracy", r.val_accuracy},
         {"test_accuracy", r.test_accuracy}, {"iterations", r.iterations},
         {"wall_time_s", r.wall_time_s},     {"checkpoint_path", r.checkpoint_path}};
  return j.dump(2) + "\n";
}

TrialRecord deserialize_record(const std::string& text, int trial_index) {
  const json j = json::parse(text);
  TrialRecord r;
  j.at("setting_id").get_to(r.setting_id);
  j.at("hparams").get_to(r.hparams);
  j.at("seed").get_to(r.seed);
  j.at("val_accuracy").get_to(r.val_accuracy);
  j.at("test_accuracy").get_to(r.test_accuracy);
  j.at("iterations").get_to(r.iterations);
  j.at("wall_time_s").get_to(r.wall_time_s);
  j.at("checkpoint_path").get_to(r.checkpoint_path);
  r.trial_index = trial_index;
  return r;
}

void check_setting_id(const std::string& setting_id) {
  if (setting_id.empty() || setting_id == "." || setting_id == ".." ||
      setting_id.find('/') != std::string::npos || setting_id.find('\\') != std::string::npos) {
    throw Error("invalid setting id '" + setting_id + "'");
  }
}

RunRegistry::RunRegistry(fs::path root) : root_(std::move(root)) {}

fs::path RunRegistry::trial_dir(const std::string& setting_id, int trial_index,
                                std::uint64_t seed) const {
  check_setting_id(setting_id);
  if (trial_index < 0) throw Error("negative trial index");
  return root_ / setting_id / fmt::format("{:03d}_{}", trial_index, seed);
}

bool RunRegistry::contains(const std::string& setting_id, int trial_index,
                           std::uint64_t seed) const {
  return fs::exists(trial_dir(setting_id, trial_index, seed) / "record.json");
}

fs::path RunRegistry::write_trial(const TrialRecord& record) const {
  record.validate();
  const fs::path dir = trial_dir(record.setting_id, record.trial_index, record.seed);
  const fs::path target = dir / "record.json";
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
  if (fs::exists(target)) {
    throw DuplicateTrialError(fmt::format("trial {}/{:03d}_{} already recorded", record.setting_id,
                                          record.trial_index, record.seed));
  }
  const fs::path tmp = dir / fmt::format(".record.json.{}", ::getpid());
  write_file_atomic(tmp, serialize_record(record));
  // link(2) fails with EEXIST instead of clobbering, which rename(2) would not.
  if (::link(tmp.c_str(), target.c_str()) != 0) {
    const int err = errno;
    fs::remove(tmp, ec);
    if (err == EEXIST) {
      throw DuplicateTrialError(fmt::format("trial {}/{:03d}_{} already recorded",
                                            record.setting_id, record.trial_index, record.seed));
    }
    throw Error(fmt::format("cannot publish {}: {}", target.string(), std::strerror(err)));
  }
  fs::remove(tmp, ec);
  return target;
}

std::vector<TrialRecord> RunRegistry::read_all(const std::string& setting_id) const {
  check_setting_id(setting_id);
  std::vector<TrialRecord> out;
  const fs::path dir = root_ / setting_id;
  if (!fs::exists(dir)) return out;
  std::vector<fs::path> trial_dirs;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_directory()) trial_dirs.push_back(entry.path());
  }
  std::sort(trial_dirs.begin(), trial_dirs.end());
  for (const auto& td : trial_dirs) {
    const fs::path file = td / "record.json";
    if (!fs::exists(file)) continue;  // trial still running
    const std::string name = td.filename().string();
    const auto underscore = name.find('_');
    int index = 0;
    try {
      index = std::stoi(name.substr(0, underscore));
    } catch (const std::exception&) {
      throw RecordParseError("unexpected trial directory name: " + td.string());
    }
    try {
      out.push_back(deserialize_record(read_file(file), index));
    } catch (const json::exception& e) {
      throw RecordParseError(fmt::format("malformed record {}: {}", file.string(), e.what()));
    }
  }
  return out;
}

std::vector<std::string> RunRegistry::settings() const {
  std::vector<std::string> out;
  if (!fs::exists(root_)) return out;
  for (const auto& entry : fs::directory_iterator(root_)) {
    if (entry.is_directory()) out.push_back(entry.path().filename().string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace dgb
