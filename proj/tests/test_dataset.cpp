#include <doctest.h>

#include <fstream>
#include <map>
#include <set>

#include <opencv2/imgcodecs.hpp>

#include "dgbench/dataset.hpp"
#include "support.hpp"

using namespace dgb;

namespace {

std::vector<SyntheticDomainSpec> specs(int domains, int per_class) {
  std::vector<SyntheticDomainSpec> out;
  for (int d = 0; d < domains; ++d) {
    SyntheticDomainSpec s;
    s.name = "dom" + std::to_string(d);
    s.rotation_deg = 15.0 * d;
    s.background_hue = 0.15 * d;
    s.noise_std = 0.02 * d;
    s.samples_per_class = per_class;
    s.seed = 100 + static_cast<std::uint64_t>(d);
    out.push_back(s);
  }
  return out;
}

GeneratorOptions small_options(int classes) {
  GeneratorOptions o;
  o.num_classes = classes;
  o.height = 16;
  o.width = 16;
  return o;
}

void write_png(const std::filesystem::path& path, int value) {
  std::filesystem::create_directories(path.parent_path());
  cv::Mat img(12, 10, CV_8UC3, cv::Scalar(value, value / 2, 255 - value));
  cv::imwrite(path.string(), img);
}

}  // namespace

TEST_CASE("generated dataset counts and invariants") {
  GeneratorOptions o;
  o.num_classes = 10;
  auto ds = generate(specs(6, 100), o);
  CHECK(ds.examples.size() == 6000);
  CHECK_NOTHROW(ds.validate());
  std::map<std::pair<int, int>, int> counts;
  for (const auto& e : ds.examples) ++counts[{e.domain, e.label}];
  CHECK(counts.size() == 60);
  for (const auto& [k, n] : counts) CHECK(n == 100);
  bool in_range = true;
  for (const auto& e : ds.examples) {
    for (float v : e.image) in_range = in_range && v >= 0.0f && v <= 1.0f;
  }
  CHECK(in_range);
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  auto a = generate(specs(3, 5), small_options(4));
  auto b = generate(specs(3, 5), small_options(4));
  CHECK(a.examples.size() == b.examples.size());
  for (std::size_t i = 0; i < a.examples.size(); ++i) CHECK(a.examples[i].image == b.examples[i].image);

  auto s = specs(3, 5);
  s[0].seed = 999;
  auto c = generate(s, small_options(4));
  std::map<int, int> la, lc;
  int differ = 0;
  for (std::size_t i = 0; i < a.examples.size(); ++i) {
    if (a.examples[i].domain != 0) continue;
    ++la[a.examples[i].label];
    ++lc[c.examples[i].label];
    differ += a.examples[i].image != c.examples[i].image;
  }
  CHECK(la == lc);
  CHECK(differ == 20);
}

TEST_CASE("identical nuisances without noise give identical class images") {
  auto s = specs(3, 4);
  s[1] = s[0];
  s[1].name = "twin";
  s[0].noise_std = 0.0;
  s[1].noise_std = 0.0;
  auto ds = generate(s, small_options(3));
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    if (ds.examples[i].domain != 0) continue;
    const std::size_t twin = i + 12;
    CHECK(ds.examples[twin].domain == 1);
    CHECK(ds.examples[twin].label == ds.examples[i].label);
    CHECK(ds.examples[twin].image == ds.examples[i].image);
  }
}

TEST_CASE("generator rejects bad specs") {
  auto s = specs(3, 2);
  s[2].name = s[0].name;
  CHECK_THROWS_AS(generate(s, small_options(3)), Error);
  CHECK_THROWS_AS(generate(specs(2, 2), small_options(3)), Error);
  CHECK_THROWS_AS(generate(specs(3, 2), small_options(1)), Error);
}

TEST_CASE("glyph templates are distinct") {
  std::set<std::vector<std::uint8_t>> seen;
  for (int c = 0; c < 20; ++c) seen.insert(glyph_template(7, c));
  CHECK(seen.size() == 20);
  CHECK(glyph_template(7, 3) == glyph_template(7, 3));
}

TEST_CASE("pretraining corpus mirrors one domain") {
  auto s = specs(3, 2);
  PretrainCorpusSpec p;
  p.resembled = s[1];
  p.num_classes = 4;
  p.samples_per_class = 3;
  p.seed = 5;
  auto corpus = generate_pretrain_corpus(p, small_options(4));
  CHECK(corpus.domains == std::vector<std::string>{"pretrain"});
  CHECK(corpus.examples.size() == 12);
  CHECK_NOTHROW(corpus.validate());

  // Same seed and nuisances as the resembled domain render the same pixels.
  p.seed = s[1].seed;
  p.samples_per_class = 2;
  auto twin = generate_pretrain_corpus(p, small_options(4));
  auto ds = generate(s, small_options(4));
  std::vector<const LabeledExample*> dom1;
  for (const auto& e : ds.examples) {
    if (e.domain == 1) dom1.push_back(&e);
  }
  REQUIRE(dom1.size() == twin.examples.size());
  for (std::size_t i = 0; i < dom1.size(); ++i) CHECK(dom1[i]->image == twin.examples[i].image);

  p.overlapping_classes = false;
  auto disjoint = generate_pretrain_corpus(p, small_options(4));
  CHECK(disjoint.examples[0].image != twin.examples[0].image);
}

TEST_CASE("splits partition training domains with stratified validation") {
  GeneratorOptions o = small_options(10);
  auto s = specs(4, 100);
  auto ds = generate(s, o);
  SplitPlan plan;
  plan.training_domains = {"dom0", "dom1"};
  plan.test_domains = {"dom2", "dom3"};
  plan.validation_fraction = 0.2;
  plan.split_seed = 3;
  auto sp = make_splits(ds, plan);
  for (const auto& d : plan.training_domains) {
    CHECK(sp.train.at(d).size() == 800);
    CHECK(sp.val.at(d).size() == 200);
    std::set<std::size_t> tr(sp.train.at(d).begin(), sp.train.at(d).end());
    std::set<std::size_t> va(sp.val.at(d).begin(), sp.val.at(d).end());
    for (auto i : va) CHECK(tr.count(i) == 0);
    CHECK(tr.size() + va.size() == 1000);
    for (auto i : tr) CHECK(ds.domain_name(ds.examples[i]) == d);
    std::map<int, int> per_class;
    for (auto i : va) ++per_class[ds.examples[i].label];
    for (const auto& [c, n] : per_class) CHECK(std::abs(n - 20) <= 1);
  }
  for (const auto& d : plan.test_domains) CHECK(sp.test.at(d).size() == 1000);
  CHECK(sp.all_val().size() == 400);

  auto again = make_splits(ds, plan);
  CHECK(again.train == sp.train);
  CHECK(again.val == sp.val);

  SplitPlan unknown = plan;
  unknown.test_domains = {"nowhere"};
  CHECK_THROWS_AS(make_splits(ds, unknown), Error);
}

TEST_CASE("stratification holds for uneven class counts") {
  GeneratorOptions o = small_options(3);
  auto ds = generate(specs(3, 7), o);
  SplitPlan plan;
  plan.training_domains = {"dom0", "dom1"};
  plan.test_domains = {"dom2"};
  plan.validation_fraction = 0.3;
  auto sp = make_splits(ds, plan);
  for (const auto& d : plan.training_domains) {
    const double total = 21;
    std::map<int, int> per_class;
    for (auto i : sp.val.at(d)) ++per_class[ds.examples[i].label];
    const double n_val = static_cast<double>(sp.val.at(d).size());
    for (int c = 0; c < 3; ++c) CHECK(std::abs(per_class[c] - n_val * 7 / total) <= 1.0);
  }
}

TEST_CASE("NICO-style grouping keeps test domains out of training and validation") {
  std::vector<SyntheticDomainSpec> s;
  for (const std::string name : {"autumn", "rock", "dim", "grass", "outdoor", "water"}) {
    SyntheticDomainSpec d;
    d.name = name;
    d.samples_per_class = 3;
    d.seed = s.size();
    s.push_back(d);
  }
  auto ds = generate(s, small_options(2));
  SplitPlan plan;
  plan.training_domains = {"autumn", "rock", "dim"};
  plan.test_domains = {"grass", "outdoor", "water"};
  auto sp = make_splits(ds, plan);
  for (const auto& [d, idx] : sp.train) {
    for (auto i : idx) CHECK(plan.test_domains.count(ds.domain_name(ds.examples[i])) == 0);
  }
  for (auto i : sp.all_val()) CHECK(plan.test_domains.count(ds.domain_name(ds.examples[i])) == 0);
}

TEST_CASE("folder ingestion") {
  const auto root = dgbtest::scratch_dir("ingest_nico");
  const std::vector<std::string> doms{"autumn", "rock", "dim", "grass", "outdoor", "water"};
  for (const auto& d : doms) {
    for (const std::string c : {"bear", "cat"}) {
      write_png(root / d / c / "a.png", 40);
      write_png(root / d / c / "b.png", 200);
    }
  }
  auto ds = ingest_folder(root, 8, 8);
  CHECK(ds.domains == std::vector<std::string>{"autumn", "dim", "grass", "outdoor", "rock", "water"});
  CHECK(std::set<std::string>(ds.domains.begin(), ds.domains.end()) ==
        std::set<std::string>(doms.begin(), doms.end()));
  CHECK(ds.classes == std::vector<std::string>{"bear", "cat"});
  CHECK(ds.examples.size() == 24);
  CHECK(ds.examples[0].image.size() == 8 * 8 * 3);
  CHECK_NOTHROW(ds.validate());

  const auto four = dgbtest::scratch_dir("ingest_four");
  for (const std::string d : {"art", "cartoon", "photo", "sketch"}) {
    write_png(four / d / "dog" / "x.png", 10);
    write_png(four / d / "horse" / "x.png", 90);
  }
  CHECK(ingest_folder(four).domains.size() == 4);

  std::filesystem::remove_all(four / "photo" / "horse");
  try {
    (void)ingest_folder(four);
    FAIL("expected missing-class error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("horse") != std::string::npos);
  }
  std::filesystem::create_directories(four / "photo" / "horse");
  try {
    (void)ingest_folder(four);
    FAIL("expected empty-directory error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("horse") != std::string::npos);
  }
  std::ofstream(four / "photo" / "horse" / "broken.png") << "not an image";
  try {
    (void)ingest_folder(four);
    FAIL("expected decode error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("broken.png") != std::string::npos);
  }
}

TEST_CASE("dataset cache round-trips") {
  auto ds = generate(specs(3, 2), small_options(3));
  const auto dir = dgbtest::scratch_dir("cache") / "synth";
  save_dataset(ds, dir);
  auto back = load_dataset(dir);
  CHECK(back.name == ds.name);
  CHECK(back.domains == ds.domains);
  CHECK(back.classes == ds.classes);
  REQUIRE(back.examples.size() == ds.examples.size());
  for (std::size_t i = 0; i < ds.examples.size(); ++i) {
    CHECK(back.examples[i].image == ds.examples[i].image);
    CHECK(back.examples[i].label == ds.examples[i].label);
    CHECK(back.examples[i].domain == ds.examples[i].domain);
  }
  Tensor t = images_to_tensor(ds, {0, 5});
  CHECK(t.shape == std::vector<int>{3, 2, 16, 16});
  CHECK(t.data[(1 * 2 + 1) * 256 + 17] == ds.examples[5].image[17 * 3 + 1]);
}
