#include <doctest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "dgbench/trainer.hpp"
#include "support.hpp"

using namespace dgb;

namespace {

MultiDomainDataset small_dataset(int classes = 3, int per_class = 12, int size = 16) {
  std::vector<SyntheticDomainSpec> specs;
  for (int d = 0; d < 3; ++d) {
    SyntheticDomainSpec s;
    s.name = "d" + std::to_string(d);
    s.rotation_deg = 10.0 * d;
    s.background_hue = 0.3 * d;
    s.noise_std = 0.02;
    s.samples_per_class = per_class;
    s.seed = 40 + static_cast<std::uint64_t>(d);
    specs.push_back(s);
  }
  GeneratorOptions o;
  o.num_classes = classes;
  o.height = size;
  o.width = size;
  return generate(specs, o);
}

SplitPlan small_plan() {
  SplitPlan p;
  p.training_domains = {"d0", "d1"};
  p.test_domains = {"d2"};
  p.split_seed = 1;
  return p;
}

TrainConfig small_config(int iterations, int eval_every) {
  TrainConfig c;
  c.iterations = iterations;
  c.eval_every = eval_every;
  c.channels = {4, 6, 8, 8};
  c.augment = false;
  return c;
}

HParamPoint small_hparams(double lr = 3e-3) {
  HParamPoint h;
  h.learning_rate = lr;
  h.batch_size_per_domain = 6;
  h.weight_decay = 1e-5;
  h.trial_seed = 9;
  return h;
}

}  // namespace

TEST_CASE("cosine schedule") {
  CHECK(lr_at(0, 100, 0.1) == doctest::Approx(0.1));
  CHECK(lr_at(100, 100, 0.1) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(lr_at(50, 100, 0.1) == doctest::Approx(0.05));
  double prev = 1.0;
  for (int t = 0; t <= 100; ++t) {
    const double lr = lr_at(t, 100, 0.1);
    CHECK(lr <= prev);
    CHECK(lr >= 0.0);
    CHECK(lr <= 0.1);
    prev = lr;
  }
  CHECK_THROWS_AS(lr_at(101, 100, 0.1), Error);
  CHECK_THROWS_AS(lr_at(-1, 100, 0.1), Error);
}

TEST_CASE("config validation and JSON") {
  TrainConfig c = small_config(100, 30);
  CHECK_THROWS_AS(c.validate(), Error);
  c.eval_every = 25;
  CHECK_NOTHROW(c.validate());
  c.freeze.frozen_blocks = 2;
  c.pretrained = "x.bin";
  nlohmann::json j = c;
  auto back = j.get<TrainConfig>();
  CHECK(back.iterations == 100);
  CHECK(back.freeze.frozen_blocks == 2);
  CHECK(back.pretrained == "x.bin");
  CHECK(back.channels == c.channels);
  TrainConfig d;
  CHECK(d.iterations == 2000);
  CHECK(d.eval_every == 100);
}

TEST_CASE("evaluation counts correct predictions and is pure") {
  auto ds = small_dataset();
  BackboneConfig bc;
  bc.channels = {4, 6, 8, 8};
  bc.num_classes = 3;
  Model m(bc);
  std::vector<std::size_t> idx(ds.examples.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto before = m.state();
  auto r = evaluate(m, ds, idx, "all", 7);
  CHECK(m.state() == before);
  // Independent recount over single-example forwards.
  std::size_t correct = 0;
  for (std::size_t i : idx) {
    Tensor z = m.logits(images_to_tensor(ds, {i}), false);
    int best = 0;
    for (int k = 1; k < 3; ++k) {
      if (z.at(0, k) > z.at(0, best)) best = k;
    }
    correct += best == ds.examples[i].label;
  }
  CHECK(r.correct == correct);
  CHECK(r.n_examples == idx.size());
  CHECK(r.accuracy == static_cast<double>(correct) / static_cast<double>(idx.size()));
  CHECK(evaluate(m, ds, idx, "all", 1000).accuracy == r.accuracy);
  CHECK_THROWS_AS(evaluate(m, ds, {}, "empty"), Error);

  // A constant predictor scores 1/C on balanced data.
  for (Param* p : m.parameters()) {
    if (p->group == kHeadGroup) p->value.fill(0.0);
  }
  m.head().bias.value[1] = 1.0;
  CHECK(evaluate(m, ds, idx).accuracy == doctest::Approx(1.0 / 3));
}

TEST_CASE("Adam moves parameters along the negative gradient") {
  Param p{"w", Tensor({2}, 1.0), Tensor({2}), 0, true};
  p.grad.data = {0.5, -2.0};
  Adam opt({&p}, 0.0);
  opt.step(0.1);
  CHECK(p.value[0] == doctest::Approx(0.9));
  CHECK(p.value[1] == doctest::Approx(1.1));
  Param frozen{"f", Tensor({1}, 1.0), Tensor({1}, 1.0), 0, false};
  Adam opt2({&frozen}, 0.1);
  opt2.step(0.1);
  CHECK(frozen.value[0] == 1.0);
}

TEST_CASE("augmentation keeps shape and range") {
  auto batches = dgbtest::toy_batches(1, 5, 3, 2, 8);
  Tensor img = batches[0].images;
  Rng rng(1);
  augment_images(img, rng);
  CHECK(img.shape == batches[0].images.shape);
  bool in_range = true;
  for (double v : img.data) in_range = in_range && v >= 0.0 && v <= 1.0;
  CHECK(in_range);
  CHECK(img.data != batches[0].images.data);
}

TEST_CASE("ERM smoke run lowers the training loss") {
  auto ds = small_dataset(3, 20);
  auto plan = small_plan();
  auto cfg = small_config(120, 40);
  std::ostringstream log;
  cfg.verbose = true;
  TrialContext ctx{"smoke", 0, 1, nullptr, &log};
  auto out = run_trial(ds, plan, AlgorithmKind::ERM, small_hparams(), cfg, ctx);
  const auto& l = out.loop.train_losses;
  REQUIRE(l.size() == 120);
  const double first = std::accumulate(l.begin(), l.begin() + 10, 0.0) / 10;
  const double last = std::accumulate(l.end() - 10, l.end(), 0.0) / 10;
  CHECK(last < first);
  CHECK(out.record.iterations == 120);
  CHECK(out.record.test_accuracy.count("d2") == 1);
  CHECK(out.record.val_accuracy == doctest::Approx(out.loop.val_accuracies.back()));
  CHECK(log.str().find("iter=40 loss=") != std::string::npos);
  CHECK(log.str().find("iter=120 loss=") != std::string::npos);
}

TEST_CASE("trials are deterministic") {
  auto ds = small_dataset();
  auto cfg = small_config(20, 10);
  cfg.augment = true;
  TrialContext ctx{"det", 0, 5, nullptr, nullptr};
  auto a = run_trial(ds, small_plan(), AlgorithmKind::MixStyle,
                     [] {
                       auto h = small_hparams();
                       h.algorithm_params = {{"mixstyle_alpha", 0.3}, {"mixstyle_p", 0.5}};
                       return h;
                     }(),
                     cfg, ctx);
  auto b = run_trial(ds, small_plan(), AlgorithmKind::MixStyle, a.record.hparams, cfg, ctx);
  CHECK(a.record.val_accuracy == b.record.val_accuracy);
  CHECK(a.record.test_accuracy == b.record.test_accuracy);
  CHECK(a.final_state == b.final_state);
  ctx.seed = 6;
  auto c = run_trial(ds, small_plan(), AlgorithmKind::MixStyle, a.record.hparams, cfg, ctx);
  CHECK_FALSE(c.final_state == a.final_state);
}

TEST_CASE("frozen blocks survive a full trial") {
  auto ds = small_dataset();
  const auto dir = dgbtest::scratch_dir("trainer_freeze");
  BackboneConfig bc;
  bc.channels = {4, 6, 8, 8};
  bc.num_classes = 3;
  Model pre(bc);
  save_checkpoint(pre, dir / "pre.bin");
  for (int k = 1; k <= 4; ++k) {
    CAPTURE(k);
    auto cfg = small_config(20, 10);
    cfg.pretrained = (dir / "pre.bin").string();
    cfg.freeze.frozen_blocks = k;
    const Model start = build_trial_model(ds, cfg, small_hparams(), 3);
    TrialContext ctx{"freeze", 0, 3, nullptr, nullptr};
    auto out = run_trial(ds, small_plan(), AlgorithmKind::ERM, small_hparams(), cfg, ctx);
    Model end(start.config());
    end.load_state(out.final_state);
    for (int g = 0; g < kNumBlocks; ++g) {
      if (g < k) CHECK(checksum(end, g) == checksum(start, g));
      else CHECK(checksum(end, g) != checksum(start, g));
    }
  }
}

TEST_CASE("SWAD records the window average of its snapshots") {
  auto ds = small_dataset();
  auto cfg = small_config(60, 5);
  auto hp = small_hparams();
  hp.algorithm_params = {{"swad_r", 0.2}};
  TrialContext ctx{"swad", 0, 2, nullptr, nullptr};
  auto out = run_trial(ds, small_plan(), AlgorithmKind::SWAD, hp, cfg, ctx);
  REQUIRE(out.swad_window.has_value());
  const auto& snaps = out.loop.snapshots;
  CHECK(snaps.size() == 12);
  const auto w = *out.swad_window;
  const auto expect_window = select_swad_window(out.loop.val_losses, 0.2);
  CHECK(w.start == expect_window.start);
  CHECK(w.end == expect_window.end);
  for (const auto& [name, t] : out.final_state) {
    for (std::size_t i = 0; i < t.size(); i += 7) {
      double s = 0.0;
      for (int k = w.start; k <= w.end; ++k) s += snaps[static_cast<std::size_t>(k)].at(name)[i];
      CHECK(t[i] == doctest::Approx(s / (w.end - w.start + 1)).epsilon(1e-12));
    }
  }
}

TEST_CASE("divergence keeps the last finite checkpoint") {
  auto ds = small_dataset();
  auto cfg = small_config(40, 10);
  auto hp = small_hparams(1e300);
  TrialContext ctx{"diverge", 0, 1, nullptr, nullptr};
  auto out = run_trial(ds, small_plan(), AlgorithmKind::ERM, hp, cfg, ctx);
  CHECK(out.diverged());
  CHECK(out.record.iterations < 40);
  for (const auto& [name, t] : out.final_state) {
    for (double v : t.data) REQUIRE(std::isfinite(v));
  }
  CHECK(out.record.val_accuracy >= 0.0);
}

TEST_CASE("trials write checkpoints and records") {
  auto ds = small_dataset();
  const auto root = dgbtest::scratch_dir("trainer_registry");
  RunRegistry reg(root);
  TrialContext ctx{"setting", 3, 7, &reg, nullptr};
  auto out = run_trial(ds, small_plan(), AlgorithmKind::ERM, small_hparams(), small_config(10, 5), ctx);
  auto all = reg.read_all("setting");
  REQUIRE(all.size() == 1);
  CHECK(all[0] == out.record);
  CHECK(all[0].trial_index == 3);
  CHECK(std::filesystem::exists(root / all[0].checkpoint_path));
  CHECK(load_checkpoint(root / all[0].checkpoint_path).state() == out.final_state);
  CHECK_THROWS_AS(
      run_trial(ds, small_plan(), AlgorithmKind::ERM, small_hparams(), small_config(10, 5), ctx),
      DuplicateTrialError);
}
