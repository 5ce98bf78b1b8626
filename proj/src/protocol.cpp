#include "dgbench/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include <fmt/format.h>

#include "dgbench/archive.hpp"

namespace dgb {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Hyperparameter spaces

double ParamRange::sample(Rng& rng) const {
  switch (kind) {
    case Kind::LogUniform:
      return std::pow(10.0, std::uniform_real_distribution<double>(low, high)(rng));
    case Kind::Uniform: return std::uniform_real_distribution<double>(low, high)(rng);
    case Kind::Fixed: return low;
  }
  return low;
}

double ParamRange::min_value() const {
  return kind == Kind::LogUniform ? std::pow(10.0, low) : low;
}

double ParamRange::max_value() const {
  return kind == Kind::LogUniform ? std::pow(10.0, high) : high;
}

bool ParamRange::contains(double value) const {
  return std::isfinite(value) && value >= min_value() && value <= max_value();
}

void ParamRange::validate(const std::string& name) const {
  if (!std::isfinite(low) || !std::isfinite(high) || low > high) {
    throw Error(fmt::format("range of '{}' is empty or not finite", name));
  }
  if (kind == Kind::Fixed && low != high) throw Error(fmt::format("fixed '{}' has two values", name));
}

void to_json(json& j, const ParamRange& r) {
  switch (r.kind) {
    case ParamRange::Kind::LogUniform:
      j = json{{"dist", "log_uniform"}, {"low", r.low}, {"high", r.high}};
      break;
    case ParamRange::Kind::Uniform:
      j = json{{"dist", "uniform"}, {"low", r.low}, {"high", r.high}};
      break;
    case ParamRange::Kind::Fixed: j = json{{"dist", "fixed"}, {"value", r.low}}; break;
  }
}

void from_json(const json& j, ParamRange& r) {
  const std::string dist = j.at("dist").get<std::string>();
  if (dist == "fixed") {
    r = ParamRange::fixed(j.at("value").get<double>());
    return;
  }
  const double lo = j.at("low").get<double>(), hi = j.at("high").get<double>();
  if (dist == "log_uniform") r = ParamRange::log_uniform(lo, hi);
  else if (dist == "uniform") r = ParamRange::uniform(lo, hi);
  else throw Error("unknown distribution '" + dist + "'");
}

const AlgorithmSpace& default_algorithm_space(AlgorithmKind kind) {
  using R = ParamRange;
  static const std::map<AlgorithmKind, AlgorithmSpace> spaces = {
      {AlgorithmKind::ERM, {}},
      {AlgorithmKind::SWAD, {{"swad_r", R::fixed(0.2)}}},
      {AlgorithmKind::RSC, {{"rsc_p", R::uniform(0.0, 50.0)}}},
      {AlgorithmKind::GroupDRO, {{"eta_dro", R::log_uniform(-3.0, -1.0)}}},
      {AlgorithmKind::Fishr, {{"lambda_fishr", R::log_uniform(0.0, 3.0)}}},
      {AlgorithmKind::CORAL, {{"lambda_coral", R::log_uniform(-1.0, 1.0)}}},
      {AlgorithmKind::MMD, {{"lambda_mmd", R::log_uniform(-1.0, 1.0)}}},
      {AlgorithmKind::SagNet, {{"sagnet_adv_w", R::log_uniform(-2.0, 1.0)}}},
      {AlgorithmKind::IRM, {{"lambda_irm", R::log_uniform(-1.0, 2.0)}}},
      {AlgorithmKind::Mixup, {{"mixup_alpha", R::log_uniform(-1.0, 1.0)}}},
      {AlgorithmKind::MixStyle,
       {{"mixstyle_alpha", R::log_uniform(-1.0, 0.0)}, {"mixstyle_p", R::uniform(0.3, 0.7)}}},
  };
  return spaces.at(kind);
}

std::map<std::string, AlgorithmSpace> load_algorithm_spaces(const fs::path& path) {
  std::map<std::string, AlgorithmSpace> out;
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
  for (auto& [name, space] : j.items()) {
    const AlgorithmKind kind = parse_algorithm(name);
    AlgorithmSpace s = space.get<AlgorithmSpace>();
    const auto& expected = algorithm_param_names(kind);
    for (const auto& [p, r] : s) {
      if (std::find(expected.begin(), expected.end(), p) == expected.end()) {
        throw Error(fmt::format("{}: '{}' is not a parameter of {}", path.string(), p, name));
      }
      r.validate(p);
    }
    out[name] = std::move(s);
  }
  return out;
}

HParamSpace HParamSpace::defaults(AlgorithmKind kind, bool pretrained) {
  HParamSpace s;
  if (pretrained) s.learning_rate = ParamRange::log_uniform(-5.0, -3.5);
  s.algorithm = default_algorithm_space(kind);
  return s;
}

void HParamSpace::validate() const {
  learning_rate.validate("learning_rate");
  weight_decay.validate("weight_decay");
  if (learning_rate.min_value() <= 0.0) throw Error("learning rate must be positive");
  if (weight_decay.min_value() < 0.0) throw Error("weight decay must be non-negative");
  if (batch_sizes.empty()) throw Error("no batch sizes to choose from");
  for (int b : batch_sizes) {
    if (b < 2) throw Error(fmt::format("batch size {} is too small", b));
  }
  for (const auto& [name, r] : algorithm) r.validate(name);
}

bool HParamSpace::contains(const HParamPoint& p) const {
  if (!learning_rate.contains(p.learning_rate) || !weight_decay.contains(p.weight_decay)) return false;
  if (std::find(batch_sizes.begin(), batch_sizes.end(), p.batch_size_per_domain) == batch_sizes.end()) {
    return false;
  }
  if (p.algorithm_params.size() != algorithm.size()) return false;
  for (const auto& [name, r] : algorithm) {
    auto it = p.algorithm_params.find(name);
    if (it == p.algorithm_params.end() || !r.contains(it->second)) return false;
  }
  return true;
}

void to_json(json& j, const HParamSpace& s) {
  j = json{{"learning_rate", s.learning_rate},
           {"batch_sizes", s.batch_sizes},
           {"weight_decay", s.weight_decay},
           {"algorithm", s.algorithm}};
}

void from_json(const json& j, HParamSpace& s) {
  j.at("learning_rate").get_to(s.learning_rate);
  j.at("batch_sizes").get_to(s.batch_sizes);
  j.at("weight_decay").get_to(s.weight_decay);
  s.algorithm = j.value("algorithm", AlgorithmSpace{});
}

std::vector<HParamPoint> sample_hparams(const HParamSpace& space, int n_trials,
                                        std::uint64_t sweep_seed) {
  space.validate();
  if (n_trials < 1) throw Error("need at least one trial");
  std::vector<HParamPoint> out;
  for (int i = 0; i < n_trials; ++i) {
    const std::uint64_t trial_seed = mix_seed(sweep_seed, static_cast<std::uint64_t>(i));
    Rng rng(trial_seed);
    HParamPoint p;
    p.learning_rate = space.learning_rate.sample(rng);
    p.batch_size_per_domain = space.batch_sizes[std::uniform_int_distribution<std::size_t>(
        0, space.batch_sizes.size() - 1)(rng)];
    p.weight_decay = space.weight_decay.sample(rng);
    for (const auto& [name, r] : space.algorithm) p.algorithm_params[name] = r.sample(rng);
    p.trial_seed = trial_seed;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Settings and experiment configs

std::string make_setting_id(const SettingKey& key) {
  std::vector<std::string> doms = key.test_domains;
  std::sort(doms.begin(), doms.end());
  std::string joined;
  for (const auto& d : doms) joined += (joined.empty() ? "" : "+") + d;
  const std::string id = fmt::format("{}__{}__{}__{}", key.dataset, key.algorithm, key.protocol, joined);
  check_setting_id(id);
  return id;
}

SettingKey parse_setting_id(const std::string& setting_id) {
  std::vector<std::string> parts;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = setting_id.find("__", pos);
    parts.push_back(setting_id.substr(pos, next == std::string::npos ? next : next - pos));
    if (next == std::string::npos) break;
    pos = next + 2;
  }
  if (parts.size() != 4 || parts[3].empty()) {
    throw Error("setting id '" + setting_id + "' is not dataset__algorithm__protocol__domains");
  }
  SettingKey key{parts[0], parts[1], parts[2], {}};
  pos = 0;
  while (true) {
    const std::size_t next = parts[3].find('+', pos);
    key.test_domains.push_back(parts[3].substr(pos, next == std::string::npos ? next : next - pos));
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  std::sort(key.test_domains.begin(), key.test_domains.end());
  return key;
}

SplitPlan ExperimentConfig::plan() const {
  SplitPlan p;
  p.training_domains = {training_domains.begin(), training_domains.end()};
  p.test_domains = {test_domains.begin(), test_domains.end()};
  p.validation_fraction = validation_fraction;
  p.split_seed = split_seed;
  return p;
}

HParamSpace ExperimentConfig::space() const {
  const AlgorithmKind kind = algorithm_kind();
  HParamSpace s = HParamSpace::defaults(kind, !pretrained.empty());
  const auto& names = algorithm_param_names(kind);
  for (auto& [key, value] : space_overrides.items()) {
    if (key == "learning_rate") value.get_to(s.learning_rate);
    else if (key == "weight_decay") value.get_to(s.weight_decay);
    else if (key == "batch_sizes") value.get_to(s.batch_sizes);
    else if (std::find(names.begin(), names.end(), key) != names.end()) value.get_to(s.algorithm[key]);
    else throw Error(fmt::format("space override '{}' does not apply to {}", key, algorithm));
  }
  s.validate();
  return s;
}

TrainConfig ExperimentConfig::train_config() const {
  TrainConfig c = train;
  c.pretrained = pretrained;
  c.freeze.frozen_blocks = freeze_k;
  return c;
}

std::string ExperimentConfig::setting_id() const {
  fs::path p(dataset);
  if (!p.has_filename()) p = p.parent_path();
  const std::string protocol = pretrained.empty() ? "scratch" : fmt::format("pt-k{}", freeze_k);
  return make_setting_id({p.filename().string(), algorithm, protocol, test_domains});
}

void ExperimentConfig::validate() const {
  if (dataset.empty()) throw Error("experiment has no dataset");
  (void)algorithm_kind();
  plan().validate();
  if (freeze_k < 0 || freeze_k > kNumBlocks) {
    throw Error(fmt::format("freeze_k must be in [0, {}], got {}", kNumBlocks, freeze_k));
  }
  if (freeze_k > 0 && pretrained.empty()) {
    throw Error("freezing blocks requires a pretrained checkpoint");
  }
  if (n_trials < 1) throw Error("n_trials must be positive");
  if (extra_seeds < 0) throw Error("extra_seeds must be non-negative");
  train_config().validate();
  (void)space();
}

void to_json(json& j, const ExperimentConfig& c) {
  j = json{{"dataset", c.dataset},
           {"algorithm", c.algorithm},
           {"training_domains", c.training_domains},
           {"test_domains", c.test_domains},
           {"pretrained", c.pretrained},
           {"freeze_k", c.freeze_k},
           {"n_trials", c.n_trials},
           {"extra_seeds", c.extra_seeds},
           {"validation_fraction", c.validation_fraction},
           {"split_seed", c.split_seed},
           {"train", c.train},
           {"space", c.space_overrides}};
}

void from_json(const json& j, ExperimentConfig& c) {
  const ExperimentConfig d;
  j.at("dataset").get_to(c.dataset);
  c.algorithm = j.value("algorithm", d.algorithm);
  j.at("training_domains").get_to(c.training_domains);
  j.at("test_domains").get_to(c.test_domains);
  c.pretrained = j.value("pretrained", d.pretrained);
  c.freeze_k = j.value("freeze_k", d.freeze_k);
  c.n_trials = j.value("n_trials", d.n_trials);
  c.extra_seeds = j.value("extra_seeds", d.extra_seeds);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.split_seed = j.value("split_seed", d.split_seed);
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.space_overrides = j.value("space", json::object());
}

// ---------------------------------------------------------------------------
// Sweep

bool diverged(const TrialRecord& r, int iterations) { return r.iterations < iterations; }

std::vector<TrialRecord> run_sweep(const MultiDomainDataset& ds, const ExperimentConfig& exp,
                                   const RunRegistry& registry, std::uint64_t seed,
                                   std::ostream* progress) {
  exp.validate();
  const std::string setting = exp.setting_id();
  const SplitPlan plan = exp.plan();
  const TrainConfig cfg = exp.train_config();
  const AlgorithmKind kind = exp.algorithm_kind();
  const auto points = sample_hparams(exp.space(), exp.n_trials, mix_seed(seed, setting));

  auto run = [&](int index, std::uint64_t trial_seed, const HParamPoint& hp) {
    if (registry.contains(setting, index, trial_seed)) return;
    if (progress != nullptr) {
      *progress << fmt::format("{} trial {} seed {} lr={:.3g}\n", setting, index, trial_seed,
                               hp.learning_rate);
    }
    const TrialContext ctx{setting, index, trial_seed, &registry, progress};
    const auto out = run_trial(ds, plan, kind, hp, cfg, ctx);
    if (progress != nullptr) {
      *progress << fmt::format("{} trial {} val={:.4f}{}\n", setting, index, out.record.val_accuracy,
                               out.diverged() ? " (diverged)" : "");
    }
  };

  for (int i = 0; i < exp.n_trials; ++i) run(i, seed, points[static_cast<std::size_t>(i)]);

  std::vector<TrialRecord> search;
  for (auto& r : registry.read_all(setting)) {
    if (r.trial_index < exp.n_trials) search.push_back(std::move(r));
  }
  if (std::all_of(search.begin(), search.end(),
                  [&](const TrialRecord& r) { return diverged(r, cfg.iterations); })) {
    throw SweepError(fmt::format("all {} search trials of '{}' diverged", search.size(), setting));
  }
  const HParamPoint best = iid_best(search).hparams;
  for (int j = 1; j <= exp.extra_seeds; ++j) {
    run(exp.n_trials + j - 1, seed + static_cast<std::uint64_t>(j), best);
  }
  return registry.read_all(setting);
}

// ---------------------------------------------------------------------------
// Selection

namespace {

std::vector<std::string> resolve_group(const std::vector<TrialRecord>& records,
                                       std::vector<std::string> group) {
  if (records.empty()) throw Error("selection needs at least one record");
  if (group.empty()) {
    for (const auto& [d, acc] : records.front().test_accuracy) group.push_back(d);
  }
  if (group.empty()) throw Error("selection group is empty");
  if (std::set<std::string>(group.begin(), group.end()).size() != group.size()) {
    throw Error("selection group repeats a domain");
  }
  for (const auto& r : records) {
    for (const auto& d : group) {
      if (r.test_accuracy.count(d) == 0) {
        throw Error(fmt::format("trial {} has no accuracy for '{}'", r.trial_index, d));
      }
    }
  }
  return group;
}

// Positions of every size-k subset, in lexicographic order.
std::vector<std::vector<int>> combinations(int n, int k) {
  std::vector<std::vector<int>> out;
  std::vector<int> c(static_cast<std::size_t>(k));
  std::iota(c.begin(), c.end(), 0);
  while (true) {
    out.push_back(c);
    int i = k - 1;
    while (i >= 0 && c[static_cast<std::size_t>(i)] == n - k + i) --i;
    if (i < 0) break;
    ++c[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k; ++j) c[static_cast<std::size_t>(j)] = c[static_cast<std::size_t>(j - 1)] + 1;
  }
  return out;
}

// Index of the maximizing record; ties go to the lowest trial index.
template <class Score>
std::size_t argmax_record(const std::vector<TrialRecord>& records, Score score) {
  std::size_t best = 0;
  double best_score = score(records[0]);
  for (std::size_t i = 1; i < records.size(); ++i) {
    const double s = score(records[i]);
    if (s > best_score || (s == best_score && records[i].trial_index < records[best].trial_index)) {
      best = i;
      best_score = s;
    }
  }
  return best;
}

double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

const TrialRecord& iid_best(const std::vector<TrialRecord>& records) {
  if (records.empty()) throw Error("selection needs at least one record");
  return records[argmax_record(records, [](const TrialRecord& r) { return r.val_accuracy; })];
}

SelectionResult select_iid(const std::vector<TrialRecord>& records, std::vector<std::string> group) {
  SelectionResult out;
  out.group = resolve_group(records, std::move(group));
  const TrialRecord& best = iid_best(records);
  std::vector<double> values;
  for (const auto& d : out.group) {
    out.per_domain[d] = best.test_accuracy.at(d);
    values.push_back(out.per_domain[d]);
  }
  out.combinations = {out.group};
  out.selected = {best.trial_index};
  out.average = mean(values);
  return out;
}

SelectionResult select_oracle(const std::vector<TrialRecord>& records, int k,
                              std::vector<std::string> group) {
  SelectionResult out;
  out.group = resolve_group(records, std::move(group));
  const int g = static_cast<int>(out.group.size());
  if (k < 1 || k > g) throw Error(fmt::format("K = {} is outside [1, {}]", k, g));

  std::vector<double> sum(static_cast<std::size_t>(g), 0.0);
  std::vector<int> count(static_cast<std::size_t>(g), 0);
  for (const auto& combo : combinations(g, k)) {
    const std::size_t best = argmax_record(records, [&](const TrialRecord& r) {
      double s = 0.0;
      for (int p : combo) s += r.test_accuracy.at(out.group[static_cast<std::size_t>(p)]);
      return s / k;
    });
    std::vector<std::string> names;
    for (int p : combo) {
      const auto& d = out.group[static_cast<std::size_t>(p)];
      names.push_back(d);
      sum[static_cast<std::size_t>(p)] += records[best].test_accuracy.at(d);
      ++count[static_cast<std::size_t>(p)];
    }
    out.combinations.push_back(std::move(names));
    out.selected.push_back(records[best].trial_index);
  }
  std::vector<double> values;
  for (int p = 0; p < g; ++p) {
    const double v = sum[static_cast<std::size_t>(p)] / count[static_cast<std::size_t>(p)];
    out.per_domain[out.group[static_cast<std::size_t>(p)]] = v;
    values.push_back(v);
  }
  out.average = mean(values);
  return out;
}

// ---------------------------------------------------------------------------
// Leakage

LeakageReport leakage_from_values(std::vector<std::string> group, std::vector<double> iid,
                                  std::vector<std::vector<double>> oracle) {
  if (group.empty() || iid.size() != group.size()) throw Error("IID values do not match the group");
  if (oracle.empty()) throw Error("leakage needs oracle values for K = 1");
  LeakageReport r;
  r.group = std::move(group);
  r.iid = std::move(iid);
  r.iid_avg = mean(r.iid);
  for (auto& row : oracle) {
    if (row.size() != r.group.size()) throw Error("oracle values do not match the group");
    r.oracle_avg.push_back(mean(row));
    r.leakage.push_back(r.oracle_avg.back() - r.iid_avg);
  }
  r.oracle = std::move(oracle);
  for (double l : r.leakage) {
    if (r.leakage[0] == 0.0) r.reduction.emplace_back(std::nullopt);
    else r.reduction.emplace_back((r.leakage[0] - l) / r.leakage[0]);
  }
  return r;
}

LeakageReport leakage(const std::vector<TrialRecord>& records, std::vector<std::string> group) {
  const auto iid = select_iid(records, std::move(group));
  auto percent = [&](const SelectionResult& s) {
    std::vector<double> v;
    for (const auto& d : iid.group) v.push_back(100.0 * s.per_domain.at(d));
    return v;
  };
  std::vector<std::vector<double>> oracle;
  for (int k = 1; k <= static_cast<int>(iid.group.size()); ++k) {
    oracle.push_back(percent(select_oracle(records, k, iid.group)));
  }
  return leakage_from_values(iid.group, percent(iid), std::move(oracle));
}

std::string LeakageReport::markdown(const std::string& title) const {
  std::string out = "| " + title + " |";
  std::string rule = "|---|";
  for (const auto& d : group) {
    out += " " + d + " |";
    rule += "---|";
  }
  out += " Avg | leakage | reduction |\n" + rule + "---|---|---|\n";
  auto row = [&](const std::string& label, const std::vector<double>& values, double avg,
                 const std::string& leak, const std::string& red) {
    out += "| " + label + " |";
    for (double v : values) out += fmt::format(" {:.2f} |", v);
    out += fmt::format(" {:.2f} | {} | {} |\n", avg, leak, red);
  };
  row("IID", iid, iid_avg, "0.00", "/");
  for (std::size_t k = 0; k < oracle.size(); ++k) {
    const std::string red =
        reduction[k] ? fmt::format("-{:.0f}%", 100.0 * *reduction[k]) : std::string("—");
    row(fmt::format("Oracle K={}", k + 1), oracle[k], oracle_avg[k], fmt::format("{:.2f}", leakage[k]),
        red);
  }
  return out;
}

void to_json(json& j, const LeakageReport& r) {
  json reduction = json::array();
  for (const auto& x : r.reduction) reduction.push_back(x ? json(*x) : json(nullptr));
  j = json{{"group", r.group},         {"iid", r.iid},
           {"iid_avg", r.iid_avg},     {"oracle", r.oracle},
           {"oracle_avg", r.oracle_avg}, {"leakage", r.leakage},
           {"reduction", reduction}};
}

// ---------------------------------------------------------------------------
// Freeze sweep and pretraining

FreezeCurve freeze_sweep(const MultiDomainDataset& ds, const ExperimentConfig& exp,
                         const std::vector<int>& ks, const RunRegistry& registry, std::uint64_t seed,
                         std::ostream* progress) {
  if (ks.empty()) throw Error("freeze sweep needs at least one k");
  if (exp.pretrained.empty()) throw Error("freeze sweep needs a pretrained checkpoint");
  if (!fs::exists(exp.pretrained)) {
    throw Error("pretrained checkpoint '" + exp.pretrained + "' does not exist");
  }
  FreezeCurve curve;
  for (int k : ks) {
    ExperimentConfig e = exp;
    e.freeze_k = k;
    const auto records = run_sweep(ds, e, registry, seed, progress);
    std::vector<TrialRecord> search, seeds;
    for (const auto& r : records) {
      (r.trial_index < e.n_trials ? search : seeds).push_back(r);
    }
    seeds.push_back(iid_best(search));
    curve.ks.push_back(k);
    for (const auto& d : exp.test_domains) {
      double s = 0.0;
      for (const auto& r : seeds) s += r.test_accuracy.at(d);
      curve.accuracy[d].push_back(s / static_cast<double>(seeds.size()));
    }
  }
  return curve;
}

void to_json(json& j, const PretrainConfig& c) {
  j = json{{"resembled", c.resembled},
           {"overlapping_classes", c.overlapping_classes},
           {"samples_per_class", c.samples_per_class},
           {"corpus_seed", c.corpus_seed},
           {"validation_fraction", c.validation_fraction},
           {"hparams", c.hparams},
           {"train", c.train}};
}

void from_json(const json& j, PretrainConfig& c) {
  const PretrainConfig d;
  j.at("resembled").get_to(c.resembled);
  c.overlapping_classes = j.value("overlapping_classes", d.overlapping_classes);
  c.samples_per_class = j.value("samples_per_class", d.samples_per_class);
  c.corpus_seed = j.value("corpus_seed", d.corpus_seed);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.hparams = j.contains("hparams") ? j.at("hparams").get<HParamPoint>() : d.hparams;
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
}

MultiDomainDataset make_pretrain_corpus(const DatasetSpec& downstream, const PretrainConfig& cfg) {
  auto it = std::find_if(downstream.domains.begin(), downstream.domains.end(),
                         [&](const SyntheticDomainSpec& s) { return s.name == cfg.resembled; });
  if (it == downstream.domains.end()) {
    throw Error("resembled domain '" + cfg.resembled + "' is not in the dataset spec");
  }
  PretrainCorpusSpec spec;
  spec.resembled = *it;
  spec.overlapping_classes = cfg.overlapping_classes;
  spec.num_classes = downstream.options.num_classes;
  spec.samples_per_class = cfg.samples_per_class;
  spec.seed = cfg.corpus_seed;
  return generate_pretrain_corpus(spec, downstream.options);
}

PretrainResult pretrain(const MultiDomainDataset& corpus, const PretrainConfig& cfg,
                        const fs::path& checkpoint, std::uint64_t seed, std::ostream* progress) {
  corpus.validate();
  if (cfg.validation_fraction <= 0.0 || cfg.validation_fraction >= 1.0) {
    throw Error("validation_fraction must be in (0, 1)");
  }
  TrainConfig tc = cfg.train;
  tc.pretrained.clear();
  tc.freeze.frozen_blocks = 0;
  tc.validate();

  // Stratified hold-out over all corpus examples.
  Rng split_rng(mix_seed(seed, "pretrain-split"));
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < corpus.examples.size(); ++i) by_class[corpus.examples[i].label].push_back(i);
  std::vector<std::size_t> train, val;
  for (auto& [c, idx] : by_class) {
    std::shuffle(idx.begin(), idx.end(), split_rng);
    const auto n_val = static_cast<std::size_t>(std::lround(cfg.validation_fraction * idx.size()));
    val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  if (train.empty() || val.empty()) throw Error("pretraining corpus is too small to split");

  BackboneConfig bc;
  bc.channels = tc.channels;
  bc.num_classes = corpus.num_classes();
  bc.init_seed = mix_seed(seed, "pretrain-init");
  Model model(bc);
  AlgorithmOptions opts;
  opts.num_classes = corpus.num_classes();
  opts.feature_dim = bc.feature_dim();
  auto erm = make_algorithm(AlgorithmKind::ERM, {}, opts);
  const auto loop = train_loop(model, *erm, corpus, {{corpus.domains.front(), train}}, val,
                               cfg.hparams, tc, mix_seed(seed, "pretrain-train"),
                               tc.verbose ? progress : nullptr);
  if (loop.diverged) {
    throw Error(fmt::format("pretraining diverged after {} iterations", loop.iterations));
  }
  PretrainResult out;
  out.checkpoint = checkpoint;
  out.corpus_accuracy = evaluate(model, corpus, val, "pretrain-val", tc.eval_batch).accuracy;
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  save_checkpoint(model, checkpoint);
  return out;
}

}  // namespace dgb
