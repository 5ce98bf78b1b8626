#include "dgbench/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Core>
#include <fmt/format.h>
#include <fmt/ranges.h>

#include "dgbench/archive.hpp"

namespace dgb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;

Param make_param(std::string name, std::vector<int> shape, int group) {
  Param p;
  p.name = std::move(name);
  p.value = Tensor(shape);
  p.grad = Tensor(std::move(shape));
  p.group = group;
  return p;
}

void kaiming_init(Param& p, int fan_in, std::uint64_t seed) {
  Rng rng(mix_seed(seed, p.name));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& v : p.value.data) v = dist(rng);
}

int block_of(const std::string& name) {
  if (name.rfind("block", 0) == 0 && name.size() > 5) return name[5] - '0';
  if (name.rfind("head.", 0) == 0) return kHeadGroup;
  return -1;
}

}  // namespace

void BackboneConfig::validate() const {
  for (int c : channels) {
    if (c <= 0) throw Error("backbone channels must be positive");
  }
  if (num_classes < 2) throw Error("backbone needs at least 2 classes");
}

void to_json(json& j, const BackboneConfig& c) {
  j = json{{"num_blocks", kNumBlocks},
           {"channels", c.channels},
           {"feature_dim", c.feature_dim()},
           {"num_classes", c.num_classes},
           {"init_seed", c.init_seed}};
}

void from_json(const json& j, BackboneConfig& c) {
  if (j.value("num_blocks", kNumBlocks) != kNumBlocks) throw Error("backbone must have 4 blocks");
  j.at("channels").get_to(c.channels);
  j.at("num_classes").get_to(c.num_classes);
  c.init_seed = j.value("init_seed", std::uint64_t{0});
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int group)
    : weight(make_param(std::move(name), {out_channels, in_channels, kernel, kernel}, group)),
      in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(kernel / 2) {}

namespace {

using StrideMapR = Eigen::Map<MatR, 0, Eigen::OuterStride<>>;

// Columns for images [b0, b1) into `cols` ({rows, (b1-b0)*ho*wo}, row-major).
void im2col(const double* x, int n, int h, int w, int in, int kernel, int stride, int pad, int ho,
            int wo, int b0, int b1, double* cols) {
  const std::size_t width = static_cast<std::size_t>(b1 - b0) * ho * wo;
  for (int ci = 0; ci < in; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        double* dst = cols + static_cast<std::size_t>((ci * kernel + ky) * kernel + kx) * width;
        for (int b = b0; b < b1; ++b) {
          const double* src = x + (static_cast<std::size_t>(ci) * n + b) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            double* row = dst + (static_cast<std::size_t>(b - b0) * ho + oy) * wo;
            if (iy < 0 || iy >= h) {
              std::fill(row, row + wo, 0.0);
              continue;
            }
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              row[ox] = (ix >= 0 && ix < w) ? src[iy * w + ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, int n, int h, int w, int in, int kernel, int stride, int pad,
                int ho, int wo, int b0, int b1, double* dx) {
  const std::size_t width = static_cast<std::size_t>(b1 - b0) * ho * wo;
  for (int ci = 0; ci < in; ++ci) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const double* src = cols + static_cast<std::size_t>((ci * kernel + ky) * kernel + kx) * width;
        for (int b = b0; b < b1; ++b) {
          double* dst = dx + (static_cast<std::size_t>(ci) * n + b) * h * w;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const double* row = src + (static_cast<std::size_t>(b - b0) * ho + oy) * wo;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < w) dst[iy * w + ix] += row[ox];
            }
          }
        }
      }
    }
  }
}

// Images per im2col chunk; keeps the column buffer cache-sized.
int chunk_images(int rows, int ho, int wo) {
  return std::max(1, (1 << 16) / std::max(1, rows * ho * wo));
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
  if (x.rank() != 4 || x.dim(0) != in_) {
    throw Error(fmt::format("{}: expected {} input channels, got {}", weight.name, in_,
                            x.shape_string()));
  }
  input_ = x;
  const int n = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * pad_ - kernel_) / stride_ + 1;
  const int wo = (w + 2 * pad_ - kernel_) / stride_ + 1;
  const int rows = in_ * kernel_ * kernel_;
  const int cols = n * ho * wo;
  const int chunk = chunk_images(rows, ho, wo);
  std::vector<double> buf(static_cast<std::size_t>(rows) * chunk * ho * wo);
  Tensor y({out_, n, ho, wo});
  const CMapR wm(weight.value.data.data(), out_, rows);
  for (int b0 = 0; b0 < n; b0 += chunk) {
    const int b1 = std::min(n, b0 + chunk);
    const int width = (b1 - b0) * ho * wo;
    im2col(x.data.data(), n, h, w, in_, kernel_, stride_, pad_, ho, wo, b0, b1, buf.data());
    StrideMapR(y.data.data() + static_cast<std::size_t>(b0) * ho * wo, out_, width,
               Eigen::OuterStride<>(cols))
        .noalias() = wm * CMapR(buf.data(), rows, width);
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy, bool need_dx) {
  const int rows = in_ * kernel_ * kernel_;
  const int n = input_.dim(1), h = input_.dim(2), w = input_.dim(3);
  const int ho = dy.dim(2), wo = dy.dim(3);
  const int cols = n * ho * wo;
  const int chunk = chunk_images(rows, ho, wo);
  std::vector<double> buf(static_cast<std::size_t>(rows) * chunk * ho * wo);
  MatR dcols;
  Tensor dx;
  if (need_dx) dx = Tensor(input_.shape);
  MapR dw(weight.grad.data.data(), out_, rows);
  const CMapR wm(weight.value.data.data(), out_, rows);
  using CStrideMapR = Eigen::Map<const MatR, 0, Eigen::OuterStride<>>;
  for (int b0 = 0; b0 < n; b0 += chunk) {
    const int b1 = std::min(n, b0 + chunk);
    const int width = (b1 - b0) * ho * wo;
    const CStrideMapR dy_m(dy.data.data() + static_cast<std::size_t>(b0) * ho * wo, out_, width,
                           Eigen::OuterStride<>(cols));
    im2col(input_.data.data(), n, h, w, in_, kernel_, stride_, pad_, ho, wo, b0, b1, buf.data());
    dw.noalias() += dy_m * CMapR(buf.data(), rows, width).transpose();
    if (need_dx) {
      dcols.noalias() = wm.transpose() * dy_m;
      col2im_add(dcols.data(), n, h, w, in_, kernel_, stride_, pad_, ho, wo, b0, b1,
                 dx.data.data());
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string bn_name, int channels, int group)
    : gamma(make_param(bn_name + ".gamma", {channels}, group)),
      beta(make_param(bn_name + ".beta", {channels}, group)),
      running_mean({channels}, 0.0),
      running_var({channels}, 1.0),
      name(std::move(bn_name)) {
  gamma.value.fill(1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  const int c = x.dim(0);
  const std::size_t m = x.size() / static_cast<std::size_t>(c);
  Tensor y(x.shape);
  xhat_ = Tensor(x.shape);
  inv_std_.assign(static_cast<std::size_t>(c), 0.0);
  cached_training_ = training;
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data.data() + ch * m;
    double mean = 0.0, var = 0.0;
    if (training) {
      for (std::size_t i = 0; i < m; ++i) mean += src[i];
      mean /= static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) var += (src[i] - mean) * (src[i] - mean);
      var /= static_cast<double>(m);
      const double unbiased = m > 1 ? var * m / static_cast<double>(m - 1) : var;
      running_mean[ch] = (1.0 - kMomentum) * running_mean[ch] + kMomentum * mean;
      running_var[ch] = (1.0 - kMomentum) * running_var[ch] + kMomentum * unbiased;
    } else {
      mean = running_mean[ch];
      var = running_var[ch];
    }
    const double inv = 1.0 / std::sqrt(var + kEps);
    inv_std_[ch] = inv;
    const double g = gamma.value[ch], b = beta.value[ch];
    double* xh = xhat_.data.data() + ch * m;
    double* dst = y.data.data() + ch * m;
    for (std::size_t i = 0; i < m; ++i) {
      xh[i] = (src[i] - mean) * inv;
      dst[i] = g * xh[i] + b;
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& dy, bool need_dx) {
  const int c = dy.dim(0);
  const std::size_t m = dy.size() / static_cast<std::size_t>(c);
  Tensor dx;
  if (need_dx) dx = Tensor(dy.shape);
  for (int ch = 0; ch < c; ++ch) {
    const double* g = dy.data.data() + ch * m;
    const double* xh = xhat_.data.data() + ch * m;
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      sum_dy += g[i];
      sum_dy_xh += g[i] * xh[i];
    }
    gamma.grad[ch] += sum_dy_xh;
    beta.grad[ch] += sum_dy;
    if (!need_dx) continue;
    const double scale = gamma.value[ch] * inv_std_[ch];
    double* d = dx.data.data() + ch * m;
    if (cached_training_) {
      const double mdy = sum_dy / static_cast<double>(m);
      const double mdyx = sum_dy_xh / static_cast<double>(m);
      for (std::size_t i = 0; i < m; ++i) d[i] = scale * (g[i] - mdy - xh[i] * mdyx);
    } else {
      for (std::size_t i = 0; i < m; ++i) d[i] = scale * g[i];
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int in_features, int out_features, int group)
    : weight(make_param(name + ".weight", {out_features, in_features}, group)),
      bias(make_param(name + ".bias", {out_features}, group)) {}

void Linear::reinit(std::uint64_t seed) {
  const int in = weight.value.dim(1);
  Rng rng(mix_seed(seed, weight.name));
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (double& v : weight.value.data) v = dist(rng);
  bias.value.fill(0.0);
}

Tensor Linear::forward(const Tensor& x) const {
  const int n = x.dim(0), in = weight.value.dim(1), out = weight.value.dim(0);
  if (x.dim(1) != in) {
    throw Error(fmt::format("{}: expected {} features, got {}", weight.name, in, x.dim(1)));
  }
  Tensor y({n, out});
  MapR ym(y.data.data(), n, out);
  ym.noalias() = CMapR(x.data.data(), n, in) * CMapR(weight.value.data.data(), out, in).transpose();
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) ym(i, o) += bias.value[o];
  }
  return y;
}

Tensor Linear::backward(const Tensor& x, const Tensor& dy) {
  const int n = x.dim(0), in = weight.value.dim(1), out = weight.value.dim(0);
  CMapR dym(dy.data.data(), n, out);
  MapR(weight.grad.data.data(), out, in).noalias() += dym.transpose() * CMapR(x.data.data(), n, in);
  for (int i = 0; i < n; ++i) {
    for (int o = 0; o < out; ++o) bias.grad[o] += dym(i, o);
  }
  Tensor dx({n, in});
  MapR(dx.data.data(), n, in).noalias() = dym * CMapR(weight.value.data.data(), out, in);
  return dx;
}

// ---------------------------------------------------------------------------
// ResidualBlock

namespace {

Tensor relu_forward(const Tensor& x, Tensor& mask) {
  Tensor y(x.shape);
  mask = Tensor(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool on = x[i] > 0.0;
    y[i] = on ? x[i] : 0.0;
    mask[i] = on ? 1.0 : 0.0;
  }
  return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& mask) {
  Tensor dx(dy.shape);
  for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * mask[i];
  return dx;
}

}  // namespace

ResidualBlock::ResidualBlock(int index, int in_channels, int out_channels, int stride,
                             bool with_stem)
    : with_stem_(with_stem) {
  const std::string prefix = fmt::format("block{}", index);
  int unit_in = in_channels;
  if (with_stem_) {
    stem_conv_ = Conv2d(prefix + ".stem.conv.weight", 3, in_channels, 3, 1, index);
    stem_bn_ = BatchNorm2d(prefix + ".stem.bn", in_channels, index);
  }
  conv1_ = Conv2d(prefix + ".conv1.weight", unit_in, out_channels, 3, stride, index);
  bn1_ = BatchNorm2d(prefix + ".bn1", out_channels, index);
  conv2_ = Conv2d(prefix + ".conv2.weight", out_channels, out_channels, 3, 1, index);
  bn2_ = BatchNorm2d(prefix + ".bn2", out_channels, index);
  projected_ = stride != 1 || unit_in != out_channels;
  if (projected_) {
    proj_conv_ = Conv2d(prefix + ".proj.conv.weight", unit_in, out_channels, 1, stride, index);
    proj_bn_ = BatchNorm2d(prefix + ".proj.bn", out_channels, index);
  }
}

Tensor ResidualBlock::forward(const Tensor& x_in, bool training) {
  Tensor x = x_in;
  if (with_stem_) {
    x = relu_forward(stem_bn_.forward(stem_conv_.forward(x_in), training), stem_mask_);
  }
  Tensor h = relu_forward(bn1_.forward(conv1_.forward(x), training), mask1_);
  Tensor out = bn2_.forward(conv2_.forward(h), training);
  if (projected_) {
    const Tensor s = proj_bn_.forward(proj_conv_.forward(x), training);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += x[i];
  }
  return relu_forward(out, mask_out_);
}

Tensor ResidualBlock::backward(const Tensor& dy, bool need_dx) {
  const Tensor dsum = relu_backward(dy, mask_out_);
  Tensor dh = conv2_.backward(bn2_.backward(dsum, true), true);
  const bool need_input = need_dx || with_stem_;
  Tensor dx = conv1_.backward(bn1_.backward(relu_backward(dh, mask1_), true), need_input);
  if (!need_input) {
    if (projected_) proj_conv_.backward(proj_bn_.backward(dsum, true), false);
    return {};
  }
  if (projected_) {
    const Tensor ds = proj_conv_.backward(proj_bn_.backward(dsum, true), true);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += ds[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dsum[i];
  }
  if (with_stem_) {
    return stem_conv_.backward(stem_bn_.backward(relu_backward(dx, stem_mask_), true), need_dx);
  }
  return need_dx ? dx : Tensor{};
}

std::vector<Param*> ResidualBlock::parameters() {
  std::vector<Param*> out;
  if (with_stem_) out.insert(out.end(), {&stem_conv_.weight, &stem_bn_.gamma, &stem_bn_.beta});
  out.insert(out.end(), {&conv1_.weight, &bn1_.gamma, &bn1_.beta, &conv2_.weight, &bn2_.gamma,
                         &bn2_.beta});
  if (projected_) out.insert(out.end(), {&proj_conv_.weight, &proj_bn_.gamma, &proj_bn_.beta});
  return out;
}

std::vector<std::pair<std::string, Tensor*>> ResidualBlock::buffers() {
  std::vector<BatchNorm2d*> bns;
  if (with_stem_) bns.push_back(&stem_bn_);
  bns.insert(bns.end(), {&bn1_, &bn2_});
  if (projected_) bns.push_back(&proj_bn_);
  std::vector<std::pair<std::string, Tensor*>> out;
  for (BatchNorm2d* bn : bns) {
    out.emplace_back(bn->name + ".running_mean", &bn->running_mean);
    out.emplace_back(bn->name + ".running_var", &bn->running_var);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const BackboneConfig& config) : config_(config) {
  config_.validate();
  const auto& ch = config_.channels;
  blocks_[0] = ResidualBlock(0, ch[0], ch[0], 1, true);
  for (int b = 1; b < kNumBlocks; ++b) blocks_[b] = ResidualBlock(b, ch[b - 1], ch[b], 2, false);
  head_ = Linear("head", config_.feature_dim(), config_.num_classes, kHeadGroup);
  for (Param* p : parameters()) {
    if (p->group >= kNumBlocks || p->value.rank() != 4) continue;
    const int fan_in = p->value.dim(1) * p->value.dim(2) * p->value.dim(3);
    kaiming_init(*p, fan_in, config_.init_seed);
  }
  reinit_head();
}

void Model::reinit_head() { head_.reinit(config_.init_seed); }

void Model::apply_freeze(const FreezePolicy& policy) {
  if (policy.frozen_blocks < 0 || policy.frozen_blocks > kNumBlocks) {
    throw Error(fmt::format("frozen block count must be in [0, {}], got {}", kNumBlocks,
                            policy.frozen_blocks));
  }
  frozen_blocks_ = policy.frozen_blocks;
  for (Param* p : parameters()) p->trainable = p->group >= frozen_blocks_;
}

Tensor Model::forward_blocks(const Tensor& x, int first, int last, bool training) {
  Tensor h = x;
  for (int b = first; b < last; ++b) h = blocks_[b].forward(h, training && block_trainable(b));
  return h;
}

Tensor Model::backward_blocks(const Tensor& dy, int first, int last) {
  Tensor g = dy;
  for (int b = last - 1; b >= first; --b) {
    if (!block_trainable(b) || g.empty()) return {};
    g = blocks_[b].backward(g, b > frozen_blocks_);
  }
  return g;
}

Tensor Model::pool(const Tensor& maps) {
  const int c = maps.dim(0), n = maps.dim(1);
  const int hw = maps.dim(2) * maps.dim(3);
  Tensor f({n, c});
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      const double* src = maps.data.data() + (static_cast<std::size_t>(ch) * n + i) * hw;
      double s = 0.0;
      for (int p = 0; p < hw; ++p) s += src[p];
      f.at(i, ch) = s / hw;
    }
  }
  return f;
}

Tensor Model::pool_backward(const Tensor& dfeatures, const std::vector<int>& map_shape) {
  Tensor d(map_shape);
  const int c = map_shape[0], n = map_shape[1], hw = map_shape[2] * map_shape[3];
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < n; ++i) {
      double* dst = d.data.data() + (static_cast<std::size_t>(ch) * n + i) * hw;
      const double g = dfeatures.at(i, ch) / hw;
      std::fill(dst, dst + hw, g);
    }
  }
  return d;
}

Tensor Model::features(const Tensor& images, bool training) {
  return pool(forward_blocks(images, 0, kNumBlocks, training));
}

Tensor Model::logits(const Tensor& images, bool training) {
  return head_forward(features(images, training));
}

std::vector<Param*> Model::parameters() {
  std::vector<Param*> out;
  for (auto& b : blocks_) {
    auto ps = b.parameters();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  out.push_back(&head_.weight);
  out.push_back(&head_.bias);
  return out;
}

std::vector<const Param*> Model::parameters() const {
  auto ps = const_cast<Model*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

std::vector<std::pair<std::string, Tensor*>> Model::buffers() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& b : blocks_) {
    auto bs = b.buffers();
    out.insert(out.end(), bs.begin(), bs.end());
  }
  return out;
}

void Model::zero_grad() {
  for (Param* p : parameters()) p->grad.fill(0.0);
}

std::size_t Model::parameter_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const Param* p : parameters()) {
    if (!trainable_only || p->trainable) n += p->value.size();
  }
  return n;
}

std::size_t Model::head_parameter_count() const {
  return head_.weight.value.size() + head_.bias.value.size();
}

NamedTensors Model::state() const {
  NamedTensors s;
  auto* self = const_cast<Model*>(this);
  for (Param* p : self->parameters()) s.emplace(p->name, p->value);
  for (auto& [name, t] : self->buffers()) s.emplace(name, *t);
  return s;
}

void Model::load_state(const NamedTensors& state) {
  auto assign = [&](const std::string& name, Tensor& dst) {
    auto it = state.find(name);
    if (it == state.end()) throw Error("state is missing tensor '" + name + "'");
    if (!it->second.same_shape(dst)) {
      throw Error(fmt::format("state tensor '{}' has shape {}, expected {}", name,
                              it->second.shape_string(), dst.shape_string()));
    }
    dst.data = it->second.data;
  };
  for (Param* p : parameters()) assign(p->name, p->value);
  for (auto& [name, t] : buffers()) assign(name, *t);
}

void save_checkpoint(const Model& model, const fs::path& path) {
  TensorArchive ar;
  for (const auto& [name, t] : model.state()) ar.put(name, t);
  ar.save(path);
  const json sidecar{{"format", "dgbench-checkpoint"}, {"backbone", model.config()}};
  write_file_atomic(fs::path(path.string() + ".json"), sidecar.dump(2) + "\n");
}

BackboneConfig read_checkpoint_config(const fs::path& path) {
  const fs::path sidecar(path.string() + ".json");
  if (!fs::exists(path)) throw Error("checkpoint not found: " + path.string());
  if (!fs::exists(sidecar)) throw Error("checkpoint sidecar not found: " + sidecar.string());
  const json j = json::parse(read_file(sidecar));
  if (j.value("format", "") != "dgbench-checkpoint") {
    throw Error("not a checkpoint sidecar: " + sidecar.string());
  }
  return j.at("backbone").get<BackboneConfig>();
}

Model load_checkpoint(const fs::path& path) {
  Model model(read_checkpoint_config(path));
  const TensorArchive ar = TensorArchive::load(path);
  NamedTensors state;
  for (const auto& [name, e] : ar.entries()) state.emplace(name, ar.tensor(name));
  model.load_state(state);
  return model;
}

void load_pretrained(Model& model, const fs::path& path) {
  const BackboneConfig ckpt_config = read_checkpoint_config(path);
  const TensorArchive ar = TensorArchive::load(path);
  std::vector<std::string> problems;
  std::vector<std::pair<Tensor*, Tensor>> updates;
  auto stage = [&](const std::string& name, Tensor& dst) {
    if (block_of(name) < 0 || block_of(name) >= kNumBlocks) return;
    if (!ar.contains(name)) {
      problems.push_back(name + " (missing)");
      return;
    }
    Tensor src = ar.tensor(name);
    if (!src.same_shape(dst)) {
      problems.push_back(fmt::format("{} (checkpoint {}, model {})", name, src.shape_string(),
                                     dst.shape_string()));
      return;
    }
    updates.emplace_back(&dst, std::move(src));
  };
  for (Param* p : model.parameters()) stage(p->name, p->value);
  for (auto& [name, t] : model.buffers()) stage(name, *t);
  if (!problems.empty()) {
    std::string msg = fmt::format("checkpoint {} (channels {}) does not fit the model:",
                                  path.string(), fmt::join(ckpt_config.channels, ","));
    for (const auto& p : problems) msg += "\n  " + p;
    throw Error(msg);
  }
  for (auto& [dst, src] : updates) dst->data = std::move(src.data);
  model.reinit_head();
}

std::uint64_t checksum(const Model& model, int group, bool include_buffers) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : model.state()) {
    if (block_of(name) != group) continue;
    if (!include_buffers && name.find("running_") != std::string::npos) continue;
    for (double v : t.data) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof(bits));
      for (int k = 0; k < 8; ++k) {
        h ^= (bits >> (8 * k)) & 0xFF;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

}  // namespace dgb
