#include "dgbench/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

#include <fmt/format.h>

namespace dgb {

namespace fs = std::filesystem;
using json = nlohmann::json;

void TrainConfig::validate() const {
  if (iterations <= 0) throw Error("iterations must be positive");
  if (eval_every <= 0) throw Error("eval_every must be positive");
  if (iterations % eval_every != 0) {
    throw Error(fmt::format("eval_every ({}) must divide iterations ({})", eval_every, iterations));
  }
  if (freeze.frozen_blocks < 0 || freeze.frozen_blocks > kNumBlocks) {
    throw Error(fmt::format("freeze_k must be in [0, {}]", kNumBlocks));
  }
  if (eval_batch <= 0) throw Error("eval_batch must be positive");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"iterations", c.iterations}, {"eval_every", c.eval_every},
           {"beta1", c.beta1},           {"beta2", c.beta2},
           {"adam_eps", c.adam_eps},     {"augment", c.augment},
           {"freeze_k", c.freeze.frozen_blocks}, {"pretrained", c.pretrained},
           {"channels", c.channels},     {"verbose", c.verbose},
           {"eval_batch", c.eval_batch}};
}

void from_json(const json& j, TrainConfig& c) {
  TrainConfig d;
  c.iterations = j.value("iterations", d.iterations);
  c.eval_every = j.value("eval_every", d.eval_every);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.augment = j.value("augment", d.augment);
  c.freeze.frozen_blocks = j.value("freeze_k", d.freeze.frozen_blocks);
  c.pretrained = j.value("pretrained", d.pretrained);
  c.channels = j.value("channels", d.channels);
  c.verbose = j.value("verbose", d.verbose);
  c.eval_batch = j.value("eval_batch", d.eval_batch);
}

double lr_at(int t, int total, double lr_max) {
  if (total <= 0) throw Error("schedule length must be positive");
  if (t < 0 || t > total) throw Error(fmt::format("step {} outside schedule [0, {}]", t, total));
  return 0.5 * lr_max * (1.0 + std::cos(std::numbers::pi * t / total));
}

EvalResult evaluate(Model& model, const MultiDomainDataset& ds,
                    const std::vector<std::size_t>& indices, const std::string& split, int batch) {
  if (indices.empty()) throw Error("cannot evaluate on an empty '" + split + "' set");
  EvalResult r;
  r.split = split;
  r.n_examples = indices.size();
  double loss_sum = 0.0;
  for (std::size_t lo = 0; lo < indices.size(); lo += static_cast<std::size_t>(batch)) {
    const std::size_t hi = std::min(indices.size(), lo + static_cast<std::size_t>(batch));
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<std::ptrdiff_t>(lo),
                                         indices.begin() + static_cast<std::ptrdiff_t>(hi));
    const Tensor z = model.logits(images_to_tensor(ds, chunk), false);
    std::vector<int> labels;
    for (std::size_t i : chunk) labels.push_back(ds.examples[i].label);
    loss_sum += cross_entropy(z, labels) * static_cast<double>(chunk.size());
    for (int i = 0; i < z.dim(0); ++i) {
      int best = 0;
      for (int k = 1; k < z.dim(1); ++k) {
        if (z.at(i, k) > z.at(i, best)) best = k;
      }
      r.correct += best == labels[static_cast<std::size_t>(i)];
    }
  }
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.n_examples);
  r.loss = loss_sum / static_cast<double>(r.n_examples);
  return r;
}

Adam::Adam(std::vector<Param*> params, double weight_decay, double beta1, double beta2, double eps)
    : wd_(weight_decay), b1_(beta1), b2_(beta2), eps_(eps) {
  if (weight_decay < 0) throw Error("weight decay must be non-negative");
  for (Param* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->value.size(), 0.0);
    v_.emplace_back(p->value.size(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param& p = *params_[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] + wd_ * p.value[i];
      m[i] = b1_ * m[i] + (1 - b1_) * g;
      v[i] = b2_ * v[i] + (1 - b2_) * g * g;
      p.value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void augment_images(Tensor& images, Rng& rng) {
  const int n = images.dim(1), h = images.dim(2), w = images.dim(3);
  const int pad = std::max(1, static_cast<int>(std::lround(4.0 * h / 32.0)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-pad, pad);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> src(hw);
  for (int i = 0; i < n; ++i) {
    const bool flip = unit(rng) < 0.5;
    const int dy = shift(rng), dx = shift(rng);
    const double brightness = 0.8 + 0.4 * unit(rng);
    const double contrast = 0.8 + 0.4 * unit(rng);
    for (int c = 0; c < 3; ++c) {
      double* img = images.data.data() + (static_cast<std::size_t>(c) * n + i) * hw;
      std::copy(img, img + hw, src.begin());
      double mean = 0.0;
      for (double v : src) mean += v;
      mean /= static_cast<double>(hw);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int sy = y + dy;
          const int sx0 = x + dx;
          const int sx = flip ? w - 1 - sx0 : sx0;
          double v = 0.0;  // zero padding outside the source
          if (sy >= 0 && sy < h && sx0 >= 0 && sx0 < w) v = src[static_cast<std::size_t>(sy) * w + sx];
          v = (v - mean) * contrast + mean;
          img[static_cast<std::size_t>(y) * w + x] = std::clamp(v * brightness, 0.0, 1.0);
        }
      }
    }
  }
}

DomainSampler::DomainSampler(const MultiDomainDataset& ds,
                             std::map<std::string, std::vector<std::size_t>> sets, int batch_size,
                             std::uint64_t seed, bool augment)
    : ds_(ds), sets_(std::move(sets)), batch_(batch_size), augment_(augment), rng_(seed) {
  if (batch_size <= 0) throw Error("batch_size_per_domain must be positive");
  for (auto& [name, idx] : sets_) {
    if (idx.empty()) throw Error("training domain '" + name + "' has no examples");
    std::shuffle(idx.begin(), idx.end(), rng_);
    cursor_[name] = 0;
  }
}

std::vector<DomainBatch> DomainSampler::next() {
  std::vector<DomainBatch> out;
  for (auto& [name, idx] : sets_) {
    std::vector<std::size_t> pick;
    auto& cur = cursor_[name];
    while (static_cast<int>(pick.size()) < batch_) {
      if (cur == idx.size()) {
        std::shuffle(idx.begin(), idx.end(), rng_);
        cur = 0;
      }
      pick.push_back(idx[cur++]);
    }
    DomainBatch b;
    b.domain = name;
    b.images = images_to_tensor(ds_, pick);
    for (std::size_t i : pick) b.labels.push_back(ds_.examples[i].label);
    if (augment_) augment_images(b.images, rng_);
    out.push_back(std::move(b));
  }
  return out;
}

namespace {

bool all_finite(const std::vector<Param*>& params, bool grads) {
  for (const Param* p : params) {
    const auto& data = grads ? p->grad.data : p->value.data;
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

LoopResult train_loop(Model& model, Algorithm& algorithm, const MultiDomainDataset& ds,
                      const std::map<std::string, std::vector<std::size_t>>& train_sets,
                      const std::vector<std::size_t>& val_set, const HParamPoint& hparams,
                      const TrainConfig& cfg, std::uint64_t seed, std::ostream* progress) {
  cfg.validate();
  if (!(hparams.learning_rate > 0)) throw Error("learning rate must be positive");
  std::vector<Param*> params;
  for (Param* p : model.parameters()) {
    if (p->trainable) params.push_back(p);
  }
  for (Param* p : algorithm.extra_parameters()) params.push_back(p);
  Adam opt(params, hparams.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps);
  DomainSampler sampler(ds, train_sets, hparams.batch_size_per_domain, mix_seed(seed, "data"),
                        cfg.augment);
  Rng alg_rng(mix_seed(seed, "algorithm"));

  LoopResult out;
  NamedTensors last_good = model.state();
  const int total = cfg.iterations;
  for (int t = 0; t < total; ++t) {
    const auto batches = sampler.next();
    const StepResult step = algorithm.compute_gradients(model, batches, alg_rng);
    bool finite = std::isfinite(step.loss) && all_finite(params, true);
    const double lr = lr_at(t, total, hparams.learning_rate);
    if (finite) {
      opt.step(lr);
      finite = all_finite(params, false);
    }
    if (!finite) {
      model.load_state(last_good);
      out.diverged = true;
      if (progress != nullptr) *progress << fmt::format("iter={} loss=nan lr={:.6g} diverged\n", t, lr);
      break;
    }
    out.train_losses.push_back(step.loss);
    out.iterations = t + 1;
    if (out.iterations % cfg.eval_every == 0) {
      const EvalResult ev = evaluate(model, ds, val_set, "val", cfg.eval_batch);
      out.val_losses.push_back(ev.loss);
      out.val_accuracies.push_back(ev.accuracy);
      out.eval_steps.push_back(out.iterations);
      last_good = model.state();
      if (algorithm.averages_weights()) out.snapshots.push_back(last_good);
      if (progress != nullptr) {
        *progress << fmt::format("iter={} loss={:.6g} lr={:.6g}\n", out.iterations, step.loss, lr);
      }
    }
  }
  return out;
}

Model build_trial_model(const MultiDomainDataset& ds, const TrainConfig& cfg,
                        const HParamPoint& hparams, std::uint64_t seed) {
  BackboneConfig bc;
  bc.channels = cfg.channels;
  bc.num_classes = ds.num_classes();
  bc.init_seed = mix_seed(mix_seed(seed, hparams.trial_seed), "init");
  if (!cfg.pretrained.empty()) bc.channels = read_checkpoint_config(cfg.pretrained).channels;
  Model model(bc);
  if (!cfg.pretrained.empty()) load_pretrained(model, cfg.pretrained);
  model.apply_freeze(cfg.freeze);
  return model;
}

TrialOutcome run_trial(const MultiDomainDataset& ds, const SplitPlan& plan, AlgorithmKind algorithm,
                       const HParamPoint& hparams, const TrainConfig& cfg,
                       const TrialContext& context) {
  cfg.validate();
  plan.validate();
  if (context.registry != nullptr &&
      context.registry->contains(context.setting_id, context.trial_index, context.seed)) {
    throw DuplicateTrialError(fmt::format("trial {} (seed {}) of '{}' already recorded",
                                          context.trial_index, context.seed, context.setting_id));
  }
  const auto start = std::chrono::steady_clock::now();
  const DatasetSplits splits = make_splits(ds, plan);
  Model model = build_trial_model(ds, cfg, hparams, context.seed);

  AlgorithmOptions opts;
  opts.num_classes = ds.num_classes();
  opts.feature_dim = model.config().feature_dim();
  opts.seed = mix_seed(model.config().init_seed, "algorithm-init");
  auto alg = make_algorithm(algorithm, hparams.algorithm_params, opts);

  TrialOutcome out;
  const std::uint64_t stream = mix_seed(mix_seed(context.seed, hparams.trial_seed), "train");
  std::ostream* progress = cfg.verbose ? context.progress : nullptr;
  out.loop = train_loop(model, *alg, ds, splits.train, splits.all_val(), hparams, cfg, stream,
                        progress);

  if (alg->averages_weights() && !out.loop.snapshots.empty()) {
    const SwadWindow w = select_swad_window(out.loop.val_losses, hparams.algorithm_params.at("swad_r"));
    out.swad_window = w;
    model.load_state(average_states(std::span<const NamedTensors>(out.loop.snapshots)
                                        .subspan(static_cast<std::size_t>(w.start),
                                                 static_cast<std::size_t>(w.end - w.start + 1))));
  }

  TrialRecord& rec = out.record;
  rec.setting_id = context.setting_id;
  rec.hparams = hparams;
  rec.seed = context.seed;
  rec.trial_index = context.trial_index;
  rec.iterations = out.loop.iterations;
  rec.val_accuracy = evaluate(model, ds, splits.all_val(), "val", cfg.eval_batch).accuracy;
  for (const auto& [domain, idx] : splits.test) {
    rec.test_accuracy[domain] = evaluate(model, ds, idx, domain, cfg.eval_batch).accuracy;
  }
  out.final_state = model.state();

  if (context.registry != nullptr) {
    const fs::path dir =
        context.registry->trial_dir(context.setting_id, context.trial_index, context.seed);
    fs::create_directories(dir);
    save_checkpoint(model, dir / "weights.bin");
    rec.checkpoint_path = fs::relative(dir / "weights.bin", context.registry->root()).string();
  }
  rec.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rec.validate(plan);
  if (context.registry != nullptr) context.registry->write_trial(rec);
  return out;
}

}  // namespace dgb
