#include "dgbench/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dgbench/archive.hpp"

namespace dgb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kGlyphCells = 7;

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

int hamming(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  int d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
  return d;
}

std::vector<std::vector<std::uint8_t>> glyph_family(std::uint64_t template_seed, int count) {
  std::vector<std::vector<std::uint8_t>> family;
  Rng rng(mix_seed(template_seed, "glyphs"));
  std::bernoulli_distribution on(0.5);
  while (static_cast<int>(family.size()) < count) {
    std::vector<std::uint8_t> g(kGlyphCells * kGlyphCells);
    for (auto& cell : g) cell = on(rng) ? 1 : 0;
    const int filled = std::accumulate(g.begin(), g.end(), 0);
    if (filled < 12 || filled > 37) continue;
    bool distinct = true;
    for (const auto& other : family) distinct = distinct && hamming(g, other) >= 12;
    if (distinct) family.push_back(std::move(g));
  }
  return family;
}

void render_example(const std::vector<std::uint8_t>& glyph, const SyntheticDomainSpec& spec,
                    int height, int width, Rng& rng, std::vector<float>& out) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale_px = std::min(height, width) / 32.0;
  const double shift_x = (unit(rng) * 4.0 - 2.0) * scale_px;
  const double shift_y = (unit(rng) * 4.0 - 2.0) * scale_px;
  const double angle = (spec.rotation_deg + (unit(rng) * 16.0 - 8.0)) * std::numbers::pi / 180.0;
  const double cell = 0.62 * std::min(height, width) / kGlyphCells * (0.9 + 0.2 * unit(rng));
  const double value_jitter = unit(rng) * 0.1 - 0.05;

  const Rgb bg = hsv_to_rgb(spec.background_hue, 0.65, 0.45 + value_jitter);
  const Rgb fg = hsv_to_rgb(spec.background_hue + 0.5, 0.75, 0.92 - value_jitter);

  const double cx = width / 2.0 + shift_x;
  const double cy = height / 2.0 + shift_y;
  const double cos_a = std::cos(angle), sin_a = std::sin(angle);
  const double half = kGlyphCells * cell / 2.0;

  out.assign(static_cast<std::size_t>(height) * width * 3, 0.0f);
  std::normal_distribution<double> noise(0.0, spec.noise_std > 0 ? spec.noise_std : 1.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      // 2x2 supersampling of the inverse-rotated glyph.
      double coverage = 0.0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx - cx;
          const double py = y + 0.25 + 0.5 * sy - cy;
          const double gx = cos_a * px + sin_a * py + half;
          const double gy = -sin_a * px + cos_a * py + half;
          const int col = static_cast<int>(std::floor(gx / cell));
          const int row = static_cast<int>(std::floor(gy / cell));
          if (row >= 0 && row < kGlyphCells && col >= 0 && col < kGlyphCells &&
              glyph[static_cast<std::size_t>(row) * kGlyphCells + col] != 0) {
            coverage += 0.25;
          }
        }
      }
      const double rgb[3] = {bg.r + coverage * (fg.r - bg.r), bg.g + coverage * (fg.g - bg.g),
                             bg.b + coverage * (fg.b - bg.b)};
      for (int ch = 0; ch < 3; ++ch) {
        double v = rgb[ch];
        if (spec.noise_std > 0) v += noise(rng);
        out[(static_cast<std::size_t>(y) * width + x) * 3 + ch] =
            static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
}

std::vector<std::string> sorted_subdirs(const fs::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_directory() && e.path().filename().string().front() != '.') {
      names.push_back(e.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

}  // namespace

int MultiDomainDataset::domain_index(const std::string& domain) const {
  auto it = std::find(domains.begin(), domains.end(), domain);
  if (it == domains.end()) throw Error("dataset '" + name + "' has no domain '" + domain + "'");
  return static_cast<int>(it - domains.begin());
}

void MultiDomainDataset::validate() const {
  if (classes.size() < 2) throw Error("dataset needs at least 2 classes");
  const std::size_t pixels = pixels_per_image();
  std::vector<std::size_t> counts(domains.size() * classes.size(), 0);
  for (const auto& e : examples) {
    if (e.domain < 0 || e.domain >= static_cast<int>(domains.size())) {
      throw Error("example references undeclared domain index " + std::to_string(e.domain));
    }
    if (e.label < 0 || e.label >= num_classes()) {
      throw Error("example label " + std::to_string(e.label) + " out of range");
    }
    if (e.image.size() != pixels) throw Error("example image has wrong size");
    for (float v : e.image) {
      if (!std::isfinite(v)) throw Error("example image has non-finite pixels");
    }
    ++counts[static_cast<std::size_t>(e.domain) * classes.size() + e.label];
  }
  for (std::size_t d = 0; d < domains.size(); ++d) {
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (counts[d * classes.size() + c] == 0) {
        throw Error(fmt::format("domain '{}' has no examples of class '{}'", domains[d], classes[c]));
      }
    }
  }
}

void to_json(json& j, const SyntheticDomainSpec& s) {
  j = json{{"name", s.name},
           {"rotation_deg", s.rotation_deg},
           {"background_hue", s.background_hue},
           {"noise_std", s.noise_std},
           {"samples_per_class", s.samples_per_class},
           {"seed", s.seed}};
}

void from_json(const json& j, SyntheticDomainSpec& s) {
  j.at("name").get_to(s.name);
  s.rotation_deg = j.value("rotation_deg", 0.0);
  s.background_hue = j.value("background_hue", 0.0);
  s.noise_std = j.value("noise_std", 0.0);
  s.samples_per_class = j.value("samples_per_class", 100);
  s.seed = j.value("seed", std::uint64_t{0});
}

void to_json(json& j, const GeneratorOptions& o) {
  j = json{{"name", o.name},
           {"num_classes", o.num_classes},
           {"height", o.height},
           {"width", o.width},
           {"template_seed", o.template_seed},
           {"template_offset", o.template_offset}};
}

void from_json(const json& j, GeneratorOptions& o) {
  const GeneratorOptions d;
  o.name = j.value("name", d.name);
  o.num_classes = j.value("num_classes", d.num_classes);
  o.height = j.value("height", d.height);
  o.width = j.value("width", d.width);
  o.template_seed = j.value("template_seed", d.template_seed);
  o.template_offset = j.value("template_offset", d.template_offset);
}

void to_json(json& j, const DatasetSpec& s) {
  j = s.options;
  j["domains"] = s.domains;
}

void from_json(const json& j, DatasetSpec& s) {
  j.get_to(s.options);
  j.at("domains").get_to(s.domains);
}

std::vector<std::uint8_t> glyph_template(std::uint64_t template_seed, int template_id) {
  return glyph_family(template_seed, template_id + 1).back();
}

namespace {

MultiDomainDataset render_domains(const std::vector<SyntheticDomainSpec>& specs,
                                  const GeneratorOptions& options) {
  if (options.num_classes < 2) throw Error("generate: need at least 2 classes");
  if (options.height < 8 || options.width < 8) throw Error("generate: images must be >= 8x8");
  std::set<std::string> names;
  for (const auto& s : specs) {
    if (s.name.empty()) throw Error("generate: empty domain name");
    if (!names.insert(s.name).second) throw Error("generate: duplicate domain name '" + s.name + "'");
    if (s.samples_per_class <= 0) throw Error("generate: samples_per_class must be positive");
    if (s.noise_std < 0) throw Error("generate: noise_std must be non-negative");
  }

  MultiDomainDataset ds;
  ds.name = options.name;
  ds.height = options.height;
  ds.width = options.width;
  for (int c = 0; c < options.num_classes; ++c) ds.classes.push_back(fmt::format("c{:02d}", c));
  const auto family = glyph_family(options.template_seed, options.template_offset + options.num_classes);

  for (std::size_t d = 0; d < specs.size(); ++d) {
    const auto& spec = specs[d];
    ds.domains.push_back(spec.name);
    for (int c = 0; c < options.num_classes; ++c) {
      const auto& glyph = family[static_cast<std::size_t>(options.template_offset + c)];
      for (int i = 0; i < spec.samples_per_class; ++i) {
        Rng rng(mix_seed(mix_seed(spec.seed, static_cast<std::uint64_t>(c)),
                         static_cast<std::uint64_t>(i)));
        LabeledExample ex;
        ex.label = c;
        ex.domain = static_cast<int>(d);
        render_example(glyph, spec, options.height, options.width, rng, ex.image);
        ds.examples.push_back(std::move(ex));
      }
    }
  }
  return ds;
}

}  // namespace

MultiDomainDataset generate(const std::vector<SyntheticDomainSpec>& specs,
                            const GeneratorOptions& options) {
  if (specs.size() < 3) {
    throw Error(fmt::format("generate: need at least 3 domains, got {}", specs.size()));
  }
  return render_domains(specs, options);
}

MultiDomainDataset generate_pretrain_corpus(const PretrainCorpusSpec& spec,
                                            const GeneratorOptions& downstream) {
  SyntheticDomainSpec domain = spec.resembled;
  domain.name = "pretrain";
  domain.samples_per_class = spec.samples_per_class;
  domain.seed = spec.seed;
  GeneratorOptions opts = downstream;
  opts.name = "pretrain";
  opts.num_classes = spec.num_classes;
  opts.template_offset = spec.overlapping_classes ? 0 : downstream.num_classes;
  return render_domains({domain}, opts);
}

MultiDomainDataset ingest_folder(const fs::path& root, int height, int width) {
  if (!fs::is_directory(root)) throw Error("ingest: not a directory: " + root.string());
  MultiDomainDataset ds;
  ds.name = root.filename().string();
  ds.height = height;
  ds.width = width;
  ds.domains = sorted_subdirs(root);
  if (ds.domains.empty()) throw Error("ingest: no domain directories under " + root.string());

  std::set<std::string> class_set;
  for (const auto& d : ds.domains) {
    for (const auto& c : sorted_subdirs(root / d)) class_set.insert(c);
  }
  ds.classes.assign(class_set.begin(), class_set.end());

  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    for (std::size_t c = 0; c < ds.classes.size(); ++c) {
      const fs::path dir = root / ds.domains[d] / ds.classes[c];
      if (!fs::is_directory(dir)) {
        throw Error(fmt::format("ingest: domain '{}' is missing class '{}' ({})", ds.domains[d],
                                ds.classes[c], dir.string()));
      }
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_regular_file() && e.path().filename().string().front() != '.') {
          files.push_back(e.path());
        }
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw Error("ingest: empty class directory " + dir.string());
      for (const auto& file : files) {
        cv::Mat bgr = cv::imread(file.string(), cv::IMREAD_COLOR);
        if (bgr.empty()) throw Error("ingest: cannot decode image " + file.string());
        cv::Mat resized, rgb;
        cv::resize(bgr, resized, cv::Size(width, height), 0, 0, cv::INTER_AREA);
        cv::cvtColor(resized, rgb, cv::COLOR_BGR2RGB);
        LabeledExample ex;
        ex.label = static_cast<int>(c);
        ex.domain = static_cast<int>(d);
        ex.image.resize(static_cast<std::size_t>(height) * width * 3);
        for (int y = 0; y < height; ++y) {
          const auto* row = rgb.ptr<cv::Vec3b>(y);
          for (int x = 0; x < width; ++x) {
            for (int ch = 0; ch < 3; ++ch) {
              ex.image[(static_cast<std::size_t>(y) * width + x) * 3 + ch] =
                  static_cast<float>(row[x][ch]) / 255.0f;
            }
          }
        }
        ds.examples.push_back(std::move(ex));
      }
    }
  }
  return ds;
}

void save_dataset(const MultiDomainDataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t n = ds.examples.size();
  std::vector<float> pixels;
  pixels.reserve(n * ds.pixels_per_image());
  std::vector<std::int32_t> labels, domains;
  for (const auto& e : ds.examples) {
    pixels.insert(pixels.end(), e.image.begin(), e.image.end());
    labels.push_back(e.label);
    domains.push_back(e.domain);
  }
  TensorArchive ar;
  const auto n64 = static_cast<std::int64_t>(n);
  ar.put_f32("images", {n64, ds.height, ds.width, 3}, std::move(pixels));
  ar.put_i32("labels", {n64}, std::move(labels));
  ar.put_i32("domains", {n64}, std::move(domains));
  ar.save(dir / "images.bin");
  const json meta{{"name", ds.name},
                  {"domains", ds.domains},
                  {"classes", ds.classes},
                  {"height", ds.height},
                  {"width", ds.width},
                  {"num_examples", n}};
  write_file_atomic(dir / "meta.json", meta.dump(2) + "\n");
}

MultiDomainDataset load_dataset(const fs::path& dir) {
  const json meta = json::parse(read_file(dir / "meta.json"));
  MultiDomainDataset ds;
  meta.at("name").get_to(ds.name);
  meta.at("domains").get_to(ds.domains);
  meta.at("classes").get_to(ds.classes);
  meta.at("height").get_to(ds.height);
  meta.at("width").get_to(ds.width);
  const TensorArchive ar = TensorArchive::load(dir / "images.bin");
  const auto& pixels = ar.f32("images");
  const auto& labels = ar.i32("labels");
  const auto& domains = ar.i32("domains");
  const std::size_t per = ds.pixels_per_image();
  if (pixels.size() != labels.size() * per || domains.size() != labels.size()) {
    throw Error("dataset cache " + dir.string() + " is inconsistent");
  }
  ds.examples.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto& e = ds.examples[i];
    e.image.assign(pixels.begin() + static_cast<std::ptrdiff_t>(i * per),
                   pixels.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    e.label = labels[i];
    e.domain = domains[i];
  }
  ds.validate();
  return ds;
}

std::vector<std::size_t> DatasetSplits::all_val() const {
  std::vector<std::size_t> out;
  for (const auto& [d, idx] : val) out.insert(out.end(), idx.begin(), idx.end());
  std::sort(out.begin(), out.end());
  return out;
}

DatasetSplits make_splits(const MultiDomainDataset& ds, const SplitPlan& plan) {
  plan.validate();
  for (const auto& d : plan.training_domains) (void)ds.domain_index(d);
  for (const auto& d : plan.test_domains) (void)ds.domain_index(d);

  const int num_classes = ds.num_classes();
  DatasetSplits splits;
  for (const auto& domain : plan.training_domains) {
    const int di = ds.domain_index(domain);
    std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(num_classes));
    std::size_t total = 0;
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      if (ds.examples[i].domain == di) {
        by_class[static_cast<std::size_t>(ds.examples[i].label)].push_back(i);
        ++total;
      }
    }
    // Largest-remainder allocation keeps each class within one example of
    // its proportional share while hitting the rounded domain total exactly.
    const auto n_val = static_cast<std::size_t>(std::llround(plan.validation_fraction * total));
    std::vector<std::size_t> alloc(by_class.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      const double exact = plan.validation_fraction * static_cast<double>(by_class[c].size());
      alloc[c] = static_cast<std::size_t>(std::floor(exact));
      assigned += alloc[c];
      remainders.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; assigned < n_val && k < remainders.size(); ++k, ++assigned) {
      ++alloc[remainders[k].second];
    }

    auto& train = splits.train[domain];
    auto& val = splits.val[domain];
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      auto idx = by_class[c];
      Rng rng(mix_seed(mix_seed(plan.split_seed, domain), static_cast<std::uint64_t>(c)));
      std::shuffle(idx.begin(), idx.end(), rng);
      val.insert(val.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(alloc[c]));
      train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(alloc[c]), idx.end());
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
  }
  for (const auto& domain : plan.test_domains) {
    const int di = ds.domain_index(domain);
    auto& test = splits.test[domain];
    for (std::size_t i = 0; i < ds.examples.size(); ++i) {
      if (ds.examples[i].domain == di) test.push_back(i);
    }
  }
  return splits;
}

Tensor images_to_tensor(const MultiDomainDataset& ds, const std::vector<std::size_t>& indices) {
  const int n = static_cast<int>(indices.size());
  const int h = ds.height, w = ds.width;
  Tensor t({3, n, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    const auto& img = ds.examples.at(indices[static_cast<std::size_t>(i)]).image;
    for (std::size_t p = 0; p < hw; ++p) {
      for (int c = 0; c < 3; ++c) {
        t.data[(static_cast<std::size_t>(c) * n + i) * hw + p] = img[p * 3 + c];
      }
    }
  }
  return t;
}

}  // namespace dgb
