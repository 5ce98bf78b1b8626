// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <set>

#include <fmt/format.h>

#include "dgbench/archive.hpp"
#include "dgbench/protocol.hpp"
#include "dgbench/trainer.hpp"
#include "support.hpp"

using namespace dgb;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

TrialRecord rec(int index, double val, std::map<std::string, double> test) {
  TrialRecord r;
  r.setting_id = "s";
  r.trial_index = index;
  r.val_accuracy = val;
  r.test_accuracy = std::move(test);
  return r;
}

// Random record set over the first g of {a,b,c,d}; values are multiples of
// 1/denom so sums stay exact and ties occur.
std::vector<TrialRecord> random_records(Rng& rng, int g, int n, unsigned denom,
                                        std::vector<std::string>& group) {
  static const std::vector<std::string> names{"a", "b", "c", "d"};
  group.assign(names.begin(), names.begin() + g);
  std::vector<TrialRecord> records;
  for (int i = 0; i < n; ++i) {
    std::map<std::string, double> t;
    for (const auto& d : group) t[d] = static_cast<double>(rng() % (denom + 1)) / denom;
    records.push_back(rec(i, static_cast<double>(rng() % (denom + 1)) / denom, t));
  }
  std::shuffle(records.begin(), records.end(), rng);
  return records;
}

const TrialRecord& by_index(const std::vector<TrialRecord>& records, int index) {
  return *std::find_if(records.begin(), records.end(),
                       [&](const TrialRecord& r) { return r.trial_index == index; });
}

Outcome table3() {
  const auto r = leakage_from_values({"quickdraw", "real", "sketch"}, {11.09, 60.75, 47.98},
                                     {{11.42, 62.57, 48.30}, {10.95, 62.54, 48.03}, {10.81, 62.54, 48.07}});
  const std::string got = fmt::format(
      "Avg {:.2f}/{:.2f}/{:.2f}/{:.2f} leakage {:.2f}/{:.2f}/{:.2f} reduction -{:.0f}%/-{:.0f}%", r.iid_avg,
      r.oracle_avg[0], r.oracle_avg[1], r.oracle_avg[2], r.leakage[0], r.leakage[1], r.leakage[2],
      100 * r.reduction[1].value_or(0), 100 * r.reduction[2].value_or(0));
  const std::string want = "Avg 39.94/40.76/40.51/40.47 leakage 0.82/0.57/0.53 reduction -31%/-35%";
  return {got == want, got};
}

Outcome selection_equivalence() {
  Rng rng(2024);
  int mismatches = 0, checks = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    std::vector<std::string> group;
    const int g = 1 + static_cast<int>(rng() % 4);
    const auto records = random_records(rng, g, 1 + static_cast<int>(rng() % 6), 4, group);

    // IID: highest validation accuracy, lowest index on ties.
    const TrialRecord* best = nullptr;
    for (const auto& r : records) {
      if (!best || r.val_accuracy > best->val_accuracy ||
          (r.val_accuracy == best->val_accuracy && r.trial_index < best->trial_index)) {
        best = &r;
      }
    }
    const auto iid = select_iid(records, group);
    ++checks;
    mismatches += iid.per_domain != best->test_accuracy || iid.selected != std::vector<int>{best->trial_index};

    // Oracle: every K-subset by bitmask, best summed accuracy on it.
    for (int k = 1; k <= g; ++k) {
      std::map<std::string, std::vector<double>> per;
      std::vector<int> chosen;
      for (unsigned mask = 0; mask < (1u << g); ++mask) {
        if (__builtin_popcount(mask) != k) continue;
        int pick = -1;
        double pick_sum = 0.0;
        for (const auto& r : records) {
          double s = 0.0;
          for (int d = 0; d < g; ++d) {
            if (mask & (1u << d)) s += r.test_accuracy.at(group[static_cast<std::size_t>(d)]);
          }
          if (pick < 0 || s > pick_sum || (s == pick_sum && r.trial_index < pick)) {
            pick = r.trial_index;
            pick_sum = s;
          }
        }
        chosen.push_back(pick);
        for (int d = 0; d < g; ++d) {
          const auto& name = group[static_cast<std::size_t>(d)];
          if (mask & (1u << d)) per[name].push_back(by_index(records, pick).test_accuracy.at(name));
        }
      }
      std::map<std::string, double> expect;
      for (const auto& [d, v] : per) {
        double s = 0.0;
        for (double x : v) s += x;
        expect[d] = s / static_cast<double>(v.size());
      }
      const auto got = select_oracle(records, k, group);
      auto got_sel = got.selected, want_sel = chosen;
      std::sort(got_sel.begin(), got_sel.end());
      std::sort(want_sel.begin(), want_sel.end());
      ++checks;
      mismatches += got.per_domain != expect || got_sel != want_sel;
    }
  }
  return {mismatches == 0, fmt::format("{} mismatches in {} selections over 1000 instances", mismatches, checks)};
}

Outcome leakage_properties() {
  Rng rng(99);
  long violations = 0, checks = 0;
  for (int inst = 0; inst < 10000; ++inst) {
    std::vector<std::string> group;
    const int g = 2 + static_cast<int>(rng() % 3);
    const auto records = random_records(rng, g, 1 + static_cast<int>(rng() % 12), 256, group);
    const auto r = leakage(records, group);
    for (std::size_t k = 0; k < r.oracle.size(); ++k) {
      violations += r.oracle_avg[k] < r.iid_avg;
      violations += r.leakage[k] > r.leakage[0];
      for (std::size_t d = 0; d < group.size(); ++d) violations += r.oracle[k][d] > r.oracle[0][d];
      checks += 2 + static_cast<long>(group.size());
    }
  }
  return {violations == 0, fmt::format("{} violations in {} checks", violations, checks)};
}

AlgorithmParams degenerate_params(AlgorithmKind kind) {
  switch (kind) {
    case AlgorithmKind::SWAD: return {{"swad_r", 0.2}};
    case AlgorithmKind::RSC: return {{"rsc_p", 0.0}};
    case AlgorithmKind::GroupDRO: return {{"eta_dro", 0.0}};
    case AlgorithmKind::Fishr: return {{"lambda_fishr", 0.0}};
    case AlgorithmKind::CORAL: return {{"lambda_coral", 0.0}};
    case AlgorithmKind::MMD: return {{"lambda_mmd", 0.0}};
    case AlgorithmKind::SagNet: return {{"sagnet_adv_w", 0.0}};
    case AlgorithmKind::IRM: return {{"lambda_irm", 0.0}};
    case AlgorithmKind::Mixup: return {{"mixup_alpha", 0.2}};
    case AlgorithmKind::MixStyle: return {{"mixstyle_alpha", 0.1}, {"mixstyle_p", 0.0}};
    default: return {};
  }
}

AlgorithmParams active_params(AlgorithmKind kind) {
  switch (kind) {
    case AlgorithmKind::SWAD: return {{"swad_r", 0.2}};
    case AlgorithmKind::RSC: return {{"rsc_p", 50.0}};
    case AlgorithmKind::GroupDRO: return {{"eta_dro", 0.5}};
    case AlgorithmKind::Fishr: return {{"lambda_fishr", 5.0}};
    case AlgorithmKind::CORAL: return {{"lambda_coral", 2.0}};
    case AlgorithmKind::MMD: return {{"lambda_mmd", 2.0}};
    case AlgorithmKind::SagNet: return {{"sagnet_adv_w", 0.7}};
    case AlgorithmKind::IRM: return {{"lambda_irm", 3.0}};
    case AlgorithmKind::Mixup: return {{"mixup_alpha", 0.5}};
    case AlgorithmKind::MixStyle: return {{"mixstyle_alpha", 0.3}, {"mixstyle_p", 1.0}};
    default: return {};
  }
}

AlgorithmOptions toy_options(const BackboneConfig& cfg) {
  AlgorithmOptions o;
  o.num_classes = cfg.num_classes;
  o.feature_dim = cfg.feature_dim();
  o.seed = 5;
  return o;
}

Outcome reductions() {
  const auto cfg = dgbtest::toy_config();
  const auto batches = dgbtest::toy_batches(3, 4, 3, 12);
  double worst = 0.0;
  std::string worst_name;
  int n = 0;
  for (const auto& name : algorithm_names()) {
    const auto kind = parse_algorithm(name);
    if (kind == AlgorithmKind::ERM) continue;
    Model m(cfg);
    const double erm = erm_loss(m, batches);
    auto opts = toy_options(cfg);
    opts.mixup_fixed_lambda = 1.0;
    opts.sagnet_randomize = false;
    auto alg = make_algorithm(kind, degenerate_params(kind), opts);
    Rng rng(1);
    const double diff = std::abs(alg->compute_gradients(m, batches, rng).loss - erm);
    if (diff >= worst) {
      worst = diff;
      worst_name = name;
    }
    ++n;
  }
  return {n == 10 && worst <= 1e-12, fmt::format("{} algorithms, max |loss - ERM| = {:.3g} ({})", n, worst, worst_name)};
}

Outcome gradient_checks() {
  const auto cfg = dgbtest::toy_config();
  const auto batches = dgbtest::toy_batches(2, 4, 3, 31);
  int params = 0;
  {
    Model probe(cfg);
    params = static_cast<int>(probe.parameter_count());
  }
  double worst = 0.0;
  std::string worst_name;
  for (const auto& name : algorithm_names()) {
    const auto kind = parse_algorithm(name);
    Model m(cfg);
    auto opts = toy_options(cfg);
    opts.groupdro_update_weights = false;
    auto alg = make_algorithm(kind, active_params(kind), opts);
    auto loss_of = [&](const std::string& term) {
      Rng rng(77);
      auto r = alg->compute_gradients(m, batches, rng);
      return term.empty() ? r.loss : r.terms.at(term);
    };
    loss_of("");
    auto model_params = m.parameters();
    const auto analytic = dgbtest::analytic_gradient(model_params);
    const auto numeric = dgbtest::numeric_gradient(model_params, [&] { return loss_of(""); });
    double err = dgbtest::relative_error(analytic, numeric);
    // Parameters owned by the objective (SagNet's style head) follow their own loss.
    auto extra = alg->extra_parameters();
    if (!extra.empty()) {
      loss_of("");
      const auto a2 = dgbtest::analytic_gradient(extra);
      const auto n2 = dgbtest::numeric_gradient(extra, [&] { return loss_of("style"); });
      err = std::max(err, dgbtest::relative_error(a2, n2));
    }
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  }
  return {params <= 500 && worst <= 1e-4,
          fmt::format("{} algorithms, {} parameters, max relative error {:.2e} ({})", algorithm_names().size(),
                      params, worst, worst_name)};
}

MultiDomainDataset freeze_dataset() {
  std::vector<SyntheticDomainSpec> specs;
  for (int d = 0; d < 3; ++d) {
    SyntheticDomainSpec s;
    s.name = "d" + std::to_string(d);
    s.rotation_deg = 10.0 * d;
    s.background_hue = 0.3 * d;
    s.noise_std = 0.02;
    s.samples_per_class = 12;
    s.seed = 40 + static_cast<std::uint64_t>(d);
    specs.push_back(s);
  }
  GeneratorOptions o;
  o.num_classes = 3;
  o.height = 16;
  o.width = 16;
  return generate(specs, o);
}

Outcome freezing(const fs::path& work) {
  const auto ds = freeze_dataset();
  BackboneConfig bc;
  bc.channels = {4, 6, 8, 8};
  bc.num_classes = 3;
  const Model pre(bc);
  save_checkpoint(pre, work / "freeze_pre.bin");
  SplitPlan plan;
  plan.training_domains = {"d0", "d1"};
  plan.test_domains = {"d2"};
  plan.split_seed = 1;
  HParamPoint h;
  h.learning_rate = 3e-3;
  h.batch_size_per_domain = 6;
  h.weight_decay = 1e-4;
  h.trial_seed = 9;
  bool ok = true;
  std::string detail;
  for (int k = 1; k <= 4; ++k) {
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.eval_every = 100;
    cfg.channels = bc.channels;
    cfg.augment = false;
    cfg.pretrained = (work / "freeze_pre.bin").string();
    cfg.freeze.frozen_blocks = k;
    const Model start = build_trial_model(ds, cfg, h, 3);
    const auto out = run_trial(ds, plan, AlgorithmKind::ERM, h, cfg, TrialContext{"freeze", 0, 3, nullptr, nullptr});
    Model end(start.config());
    end.load_state(out.final_state);
    int unchanged = 0, moved = 0;
    for (int g = 0; g < kNumBlocks; ++g) {
      const bool same = checksum(end, g) == checksum(start, g);
      if (g < k) unchanged += same;
      else moved += !same;
    }
    ok = ok && out.record.iterations == 200 && unchanged == k && moved == kNumBlocks - k;
    detail += fmt::format("{}k={}: {}/{} frozen unchanged", k == 1 ? "" : ", ", k, unchanged, k);
  }
  return {ok, detail + " after 200 steps"};
}

Outcome protocol_budget(const fs::path& work) {
  const fs::path src = DGBENCH_SOURCE_DIR;
  const auto spec = nlohmann::json::parse(read_file(src / "specs/synth6.json")).get<DatasetSpec>();
  auto exp = nlohmann::json::parse(read_file(src / "exp/erm_scratch.json")).get<ExperimentConfig>();
  const auto ds = generate(spec.domains, spec.options);
  save_dataset(ds, work / "data" / spec.options.name);
  exp.dataset = work / "data" / spec.options.name;
  const RunRegistry registry(work / "runs");
  const std::uint64_t seed = 0;
  const auto records = run_sweep(ds, exp, registry, seed);

  int on_disk = 0;
  for (const auto& e : fs::recursive_directory_iterator(registry.root())) on_disk += e.path().filename() == "record.json";
  const auto stored = registry.read_all(exp.setting_id());
  std::set<int> indices;
  bool ok = on_disk == 12 && stored.size() == 12 && exp.train.iterations == 200;
  for (const auto& r : stored) {
    indices.insert(r.trial_index);
    ok = ok && r.iterations == 200;
  }
  ok = ok && indices.size() == 12 && *indices.begin() == 0 && *indices.rbegin() == 11;
  // Replicas reuse the val-best search hparams under new seeds.
  std::vector<TrialRecord> search(stored.begin(), stored.begin() + 10);
  const auto& best = iid_best(search);
  for (int j = 1; j <= 2; ++j) {
    const auto& r = by_index(stored, 9 + j);
    auto a = r.hparams, b = best.hparams;
    a.trial_seed = b.trial_seed = 0;
    ok = ok && a == b && r.seed == seed + static_cast<std::uint64_t>(j);
  }
  return {ok, fmt::format("{} records on disk (10 search + 2 replicas of trial {}), 200 iterations each", on_disk,
                          best.trial_index)};
}

Outcome lp_ft_demo(const fs::path& work) {
  DatasetSpec spec;
  spec.options.name = "demo";
  spec.options.num_classes = 6;
  spec.options.height = 16;
  spec.options.width = 16;
  auto domain = [](std::string name, double rot, double hue, double noise, std::uint64_t seed) {
    SyntheticDomainSpec d;
    d.name = std::move(name);
    d.rotation_deg = rot;
    d.background_hue = hue;
    d.noise_std = noise;
    d.samples_per_class = 40;
    d.seed = seed;
    return d;
  };
  // "near" shares the pretraining corpus' nuisances; "far" is the most
  // dissimilar domain (largest hue gap to the corpus).
  spec.domains = {domain("near", 0, 0.0, 0.08, 1), domain("t1", 20, 0.05, 0.08, 2),
                  domain("t2", 10, 0.3, 0.08, 3), domain("far", 20, 0.4, 0.10, 4)};
  const auto ds = generate(spec.domains, spec.options);
  const std::array<int, 4> channels{8, 16, 32, 32};

  int near_ok = 0, far_ok = 0;
  std::string detail;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PretrainConfig pc;
    pc.resembled = "near";
    pc.samples_per_class = 200;
    pc.corpus_seed = 1000 + seed;
    pc.hparams.learning_rate = 2e-3;
    pc.hparams.batch_size_per_domain = 32;
    pc.train.iterations = 300;
    pc.train.eval_every = 300;
    pc.train.channels = channels;
    pc.train.augment = false;
    const auto corpus = make_pretrain_corpus(spec, pc);
    const auto pre = pretrain(corpus, pc, work / fmt::format("demo_pre_{}.bin", seed), seed);

    ExperimentConfig e;
    e.dataset = "demo";
    e.training_domains = {"t1", "t2"};
    e.test_domains = {"near", "far"};
    e.pretrained = pre.checkpoint.string();
    e.n_trials = 1;
    e.extra_seeds = 0;
    e.train.iterations = 200;
    e.train.eval_every = 200;
    e.train.channels = channels;
    e.train.augment = false;
    e.space_overrides = {{"learning_rate", {{"dist", "fixed"}, {"value", 3e-3}}},
                         {"weight_decay", {{"dist", "fixed"}, {"value", 0.0}}},
                         {"batch_sizes", {32}}};
    const RunRegistry registry(work / fmt::format("demo_runs_{}", seed));
    const auto curve = freeze_sweep(ds, e, {0, 4}, registry, seed);
    const auto& near = curve.accuracy.at("near");
    const auto& far = curve.accuracy.at("far");
    near_ok += near[1] >= near[0];
    far_ok += far[0] >= far[1];
    detail += fmt::format("{}seed {} near LP {:.3f}/FT {:.3f} far FT {:.3f}/LP {:.3f}", seed ? "; " : "", seed,
                          near[1], near[0], far[0], far[1]);
  }
  return {near_ok >= 4 && far_ok >= 4,
          fmt::format("LP>=FT on near {}/5, FT>=LP on far {}/5 [{}]", near_ok, far_ok, detail)};
}

}  // namespace

int main() {
  const auto work = dgbtest::scratch_dir("acceptance");
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"leakage table arithmetic", table3},
      {"selection matches brute force", selection_equivalence},
      {"leakage properties", leakage_properties},
      {"algorithm reductions to ERM", reductions},
      {"gradient checks", gradient_checks},
      {"freezing soundness", [&] { return freezing(work); }},
      {"protocol budget", [&] { return protocol_budget(work); }},
      {"LP vs FT leakage demo", [&] { return lp_ft_demo(work); }},
  };
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, fmt::format("error: {}", e.what())};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << fmt::format("{} {} ({:.1f}s): {}", o.pass ? "PASS" : "FAIL", name, secs, o.detail) << std::endl;
  }
  std::cout << fmt::format("{} of {} criteria passed", criteria.size() - static_cast<std::size_t>(failed),
                           criteria.size())
            << std::endl;
  return failed == 0 ? 0 : 1;
}
