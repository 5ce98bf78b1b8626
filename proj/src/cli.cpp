#include "dgbench/cli.hpp"

#include <ostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "dgbench/archive.hpp"
#include "dgbench/protocol.hpp"
#include "dgbench/report.hpp"

namespace dgb {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  if (path.empty()) throw Error("this command needs --config");
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

template <class T>
T read_config(const fs::path& path) {
  try {
    return read_json(path).get<T>();
  } catch (const json::exception& e) {
    throw Error(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t next = s.find(',', pos);
    const std::string item = s.substr(pos, next == std::string::npos ? next : next - pos);
    if (!item.empty()) out.push_back(item);
    if (next == std::string::npos) break;
    pos = next + 1;
  }
  return out;
}

struct Globals {
  std::string registry = "runs";
  std::uint64_t seed = 0;
  std::string config;
};

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Domain-generalization evaluation harness", "dgbench"};
  app.fallthrough();
  app.require_subcommand(1);
  Globals g;
  app.add_option("--registry", g.registry, "Run registry root")->capture_default_str();
  app.add_option("--seed", g.seed, "Base seed for sampling and training")->capture_default_str();
  app.add_option("--config", g.config, "JSON config for the command");

  std::string data_dir = "data";
  auto* gen = app.add_subcommand("generate-data", "Render a synthetic dataset into the cache");
  gen->add_option("--data-dir", data_dir, "Cache root")->capture_default_str();

  std::string ingest_root, ingest_name;
  int height = 32, width = 32;
  auto* ingest = app.add_subcommand("ingest", "Cache an image-folder dataset");
  ingest->add_option("--root", ingest_root, "root/<domain>/<class>/<image>")->required();
  ingest->add_option("--name", ingest_name, "Dataset name")->required();
  ingest->add_option("--height", height)->capture_default_str();
  ingest->add_option("--width", width)->capture_default_str();
  ingest->add_option("--data-dir", data_dir, "Cache root")->capture_default_str();

  std::string checkpoint;
  auto* pre = app.add_subcommand("pretrain", "Train a backbone on a synthetic pretraining corpus");
  pre->add_option("--output", checkpoint, "Checkpoint path (overrides the config)");

  auto* sweep = app.add_subcommand("sweep", "Run the 10 + 2 trial sweep of one setting");

  std::string setting, strategy = "iid", group_arg;
  int k = 1;
  auto* select = app.add_subcommand("select", "Select a trial by IID or oracle selection");
  select->add_option("--setting", setting)->required();
  select->add_option("--strategy", strategy)->check(CLI::IsMember({"iid", "oracle"}))->capture_default_str();
  select->add_option("--k", k, "Test domains per combination (oracle)")->capture_default_str();
  select->add_option("--group", group_arg, "Comma-separated test domains");

  std::string json_out;
  auto* leak = app.add_subcommand("leakage", "IID-versus-oracle leakage report");
  leak->add_option("--setting", setting)->required();
  leak->add_option("--group", group_arg, "Comma-separated test domains");
  leak->add_option("--json", json_out, "Also write the report as JSON");

  std::string ks_arg = "0,1,2,3,4", stem = "freeze_curve";
  auto* freeze = app.add_subcommand("freeze-sweep", "Sweep the number of frozen blocks");
  freeze->add_option("--ks", ks_arg, "Comma-separated k values")->capture_default_str();
  freeze->add_option("--out", stem, "Output stem for .png and .csv")->capture_default_str();

  std::string dataset, protocol = "scratch", csv_out;
  int n_trials = 10, extra_seeds = 2;
  auto* board = app.add_subcommand("leaderboard", "Mean±std table over seeds with rankings");
  board->add_option("--dataset", dataset)->required();
  board->add_option("--protocol", protocol, "scratch or pt-k<k>")->capture_default_str();
  board->add_option("--n-trials", n_trials)->capture_default_str();
  board->add_option("--extra-seeds", extra_seeds)->capture_default_str();
  board->add_option("--csv", csv_out, "Also write the table as CSV");

  std::string protocol_b = "scratch";
  auto* shift = app.add_subcommand("rank-shift", "Kendall tau and rank deltas between protocols");
  shift->add_option("--dataset", dataset)->required();
  shift->add_option("--from", protocol, "First protocol")->required();
  shift->add_option("--to", protocol_b, "Second protocol")->capture_default_str();
  shift->add_option("--n-trials", n_trials)->capture_default_str();
  shift->add_option("--extra-seeds", extra_seeds)->capture_default_str();

  std::vector<std::string> argv_store{"dgbench"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    const RunRegistry registry(g.registry);
    if (gen->parsed()) {
      const auto spec = read_config<DatasetSpec>(g.config);
      const auto ds = generate(spec.domains, spec.options);
      const fs::path dir = fs::path(data_dir) / spec.options.name;
      save_dataset(ds, dir);
      out << fmt::format("{}: {} examples, {} domains, {} classes\n", dir.string(), ds.examples.size(),
                         ds.domains.size(), ds.classes.size());
    } else if (ingest->parsed()) {
      auto ds = ingest_folder(ingest_root, height, width);
      ds.name = ingest_name;
      const fs::path dir = fs::path(data_dir) / ingest_name;
      save_dataset(ds, dir);
      out << fmt::format("{}: {} examples, {} domains, {} classes\n", dir.string(), ds.examples.size(),
                         ds.domains.size(), ds.classes.size());
    } else if (pre->parsed()) {
      const json j = read_json(g.config);
      const auto cfg = j.get<PretrainConfig>();
      const auto spec = read_config<DatasetSpec>(j.at("data_spec").get<std::string>());
      if (checkpoint.empty()) {
        checkpoint = j.value("output", fmt::format("checkpoints/pretrain_{}.bin", cfg.resembled));
      }
      const auto corpus = make_pretrain_corpus(spec, cfg);
      const auto res = pretrain(corpus, cfg, checkpoint, g.seed, &out);
      out << fmt::format("{}: corpus accuracy {:.4f}\n", res.checkpoint.string(), res.corpus_accuracy);
    } else if (sweep->parsed()) {
      const auto exp = read_config<ExperimentConfig>(g.config);
      const auto ds = load_dataset(exp.dataset);
      const auto records = run_sweep(ds, exp, registry, g.seed, &out);
      const auto& best = iid_best(records);
      out << fmt::format("{}: {} records, IID-best trial {} (val {:.4f})\n", exp.setting_id(),
                         records.size(), best.trial_index, best.val_accuracy);
    } else if (select->parsed()) {
      const auto records = registry.read_all(setting);
      const auto group = split_list(group_arg);
      const auto s = strategy == "iid" ? select_iid(records, group) : select_oracle(records, k, group);
      json combos = json::array();
      for (std::size_t i = 0; i < s.combinations.size(); ++i) {
        combos.push_back({{"domains", s.combinations[i]}, {"trial", s.selected[i]}});
      }
      const json j{{"setting", setting},     {"strategy", strategy},
                   {"k", strategy == "iid" ? 0 : k}, {"per_domain", s.per_domain},
                   {"average", s.average},   {"combinations", combos}};
      out << j.dump(2) << "\n";
    } else if (leak->parsed()) {
      const auto records = registry.read_all(setting);
      const auto report = leakage(records, split_list(group_arg));
      out << report.markdown(parse_setting_id(setting).dataset);
      if (!json_out.empty()) write_file_atomic(json_out, json(report).dump(2) + "\n");
    } else if (freeze->parsed()) {
      const auto exp = read_config<ExperimentConfig>(g.config);
      const auto ds = load_dataset(exp.dataset);
      std::vector<int> ks;
      for (const auto& s : split_list(ks_arg)) ks.push_back(std::stoi(s));
      const auto curve = freeze_sweep(ds, exp, ks, registry, g.seed, &out);
      plot_freeze_curve(curve, stem);
      out << freeze_curve_csv(curve);
    } else if (board->parsed()) {
      const auto table = build_leaderboard(registry, dataset, protocol, n_trials, extra_seeds);
      out << table.markdown();
      if (!csv_out.empty()) write_file_atomic(csv_out, table.csv());
    } else if (shift->parsed()) {
      const auto a = build_leaderboard(registry, dataset, protocol, n_trials, extra_seeds);
      const auto b = build_leaderboard(registry, dataset, protocol_b, n_trials, extra_seeds);
      out << rank_shift(a, b).markdown();
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace dgb
