#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dgbench/registry.hpp"
#include "dgbench/tensor.hpp"

namespace dgb {

/// Image stored as interleaved HWC floats in [0,1].
struct LabeledExample {
  std::vector<float> image;
  int label = 0;
  int domain = 0;  // index into MultiDomainDataset::domains
};

struct MultiDomainDataset {
  std::string name;
  std::vector<std::string> domains;
  std::vector<std::string> classes;
  int height = 32;
  int width = 32;
  std::vector<LabeledExample> examples;

  [[nodiscard]] int num_classes() const { return static_cast<int>(classes.size()); }
  [[nodiscard]] int domain_index(const std::string& name) const;
  [[nodiscard]] const std::string& domain_name(const LabeledExample& e) const {
    return domains.at(static_cast<std::size_t>(e.domain));
  }
  [[nodiscard]] std::size_t pixels_per_image() const {
    return static_cast<std::size_t>(height) * width * 3;
  }

  /// Every example declared, finite and in range; every (domain, class) pair populated.
  void validate() const;
};

/// Nuisance parameters of one synthetic domain.
struct SyntheticDomainSpec {
  std::string name;
  double rotation_deg = 0.0;
  double background_hue = 0.0;
  double noise_std = 0.0;
  int samples_per_class = 100;
  std::uint64_t seed = 0;
};

/// Dataset-wide rendering settings shared by all domains.
struct GeneratorOptions {
  int num_classes = 10;
  int height = 32;
  int width = 32;
  std::uint64_t template_seed = 7;
  /// Offset into the template family; a corpus with disjoint classes uses
  /// templates [offset, offset + num_classes).
  int template_offset = 0;
  std::string name = "synthetic";
};

/// Pretraining corpus mirroring one downstream domain's nuisances.
struct PretrainCorpusSpec {
  SyntheticDomainSpec resembled;
  bool overlapping_classes = true;
  int num_classes = 10;
  int samples_per_class = 200;
  std::uint64_t seed = 0;
};

/// Generator config file: options plus one spec per domain.
struct DatasetSpec {
  GeneratorOptions options;
  std::vector<SyntheticDomainSpec> domains;
};

void to_json(nlohmann::json& j, const SyntheticDomainSpec& s);
void from_json(const nlohmann::json& j, SyntheticDomainSpec& s);
void to_json(nlohmann::json& j, const GeneratorOptions& o);
void from_json(const nlohmann::json& j, GeneratorOptions& o);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);

/// Glyph template for class `template_id`: a 7x7 binary grid, row-major.
std::vector<std::uint8_t> glyph_template(std::uint64_t template_seed, int template_id);

/// Renders a balanced dataset; the (class, index) jitter stream depends only
/// on each spec's seed, so specs with equal seeds and nuisances render equal images.
MultiDomainDataset generate(const std::vector<SyntheticDomainSpec>& specs,
                            const GeneratorOptions& options);

/// Single-domain corpus named "pretrain".
MultiDomainDataset generate_pretrain_corpus(const PretrainCorpusSpec& spec,
                                            const GeneratorOptions& downstream);

/// Reads `root/<domain>/<class>/<image>`; names sorted lexicographically.
MultiDomainDataset ingest_folder(const std::filesystem::path& root, int height = 32,
                                 int width = 32);

/// Dataset cache: `<dir>/meta.json` + `<dir>/images.bin`.
void save_dataset(const MultiDomainDataset& ds, const std::filesystem::path& dir);
MultiDomainDataset load_dataset(const std::filesystem::path& dir);

struct DatasetSplits {
  std::map<std::string, std::vector<std::size_t>> train;
  std::map<std::string, std::vector<std::size_t>> val;
  std::map<std::string, std::vector<std::size_t>> test;

  [[nodiscard]] std::vector<std::size_t> all_val() const;
};

/// Stratified train/val split of each training domain; each test domain whole.
DatasetSplits make_splits(const MultiDomainDataset& ds, const SplitPlan& plan);

/// Converts examples to a {3, n, H, W} tensor.
Tensor images_to_tensor(const MultiDomainDataset& ds, const std::vector<std::size_t>& indices);

}  // namespace dgb
