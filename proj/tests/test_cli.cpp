#include <doctest.h>

#include <sstream>

#include "dgbench/archive.hpp"
#include "dgbench/cli.hpp"
#include "dgbench/dataset.hpp"
#include "dgbench/registry.hpp"
#include "support.hpp"

using namespace dgb;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_CASE("usage errors exit with 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
  CHECK(cli({"sweep", "--no-such-flag"}).code == 2);
  CHECK(cli({"select"}).code == 2);
  const auto bad = cli({"select", "--setting", "x", "--strategy", "best"});
  CHECK(bad.code == 2);
  CHECK(bad.err.find("error:") == 0);
  CHECK(cli({"--help"}).code == 0);
  CHECK(cli({"--help"}).out.find("leaderboard") != std::string::npos);
}

TEST_CASE("runtime failures exit with 1") {
  const auto dir = dgbtest::scratch_dir("cli_fail");
  CHECK(cli({"sweep"}).code == 1);
  const auto r = cli({"--registry", (dir / "runs").string(), "leakage", "--setting", "syn__ERM__scratch__a"});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") == 0);
}

TEST_CASE("generate-data, select and leakage through the command line") {
  const auto dir = dgbtest::scratch_dir("cli_flow");
  write_file_atomic(dir / "spec.json", R"({"name": "mini", "num_classes": 2, "height": 8, "width": 8,
    "domains": [
      {"name": "a", "rotation_deg": 0, "background_hue": 0.1, "noise_std": 0.02, "samples_per_class": 3, "seed": 1},
      {"name": "b", "rotation_deg": 10, "background_hue": 0.2, "noise_std": 0.02, "samples_per_class": 3, "seed": 2},
      {"name": "c", "rotation_deg": 20, "background_hue": 0.3, "noise_std": 0.02, "samples_per_class": 3, "seed": 3}]})");
  const auto gen = cli({"--config", (dir / "spec.json").string(), "generate-data", "--data-dir", (dir / "data").string()});
  CHECK(gen.code == 0);
  CHECK(gen.out.find("18 examples, 3 domains, 2 classes") != std::string::npos);
  CHECK(load_dataset(dir / "data" / "mini").examples.size() == 18);

  const RunRegistry reg(dir / "runs");
  const std::string id = "mini__ERM__scratch__b+c";
  for (int i = 0; i < 3; ++i) {
    TrialRecord r;
    r.setting_id = id;
    r.trial_index = i;
    r.val_accuracy = 0.5 + 0.1 * i;
    r.test_accuracy = {{"b", 0.2 * (3 - i)}, {"c", 0.3}};
    r.iterations = 10;
    reg.write_trial(r);
  }
  const auto sel = cli({"--registry", reg.root().string(), "select", "--setting", id});
  CHECK(sel.code == 0);
  const auto j = nlohmann::json::parse(sel.out);
  CHECK(j.at("combinations")[0].at("trial") == 2);
  const auto leak = cli({"--registry", reg.root().string(), "leakage", "--setting", id, "--json",
                         (dir / "leak.json").string()});
  CHECK(leak.code == 0);
  CHECK(leak.out.find("| IID | 20.00 | 30.00 | 25.00 | 0.00 | / |") != std::string::npos);
  CHECK(nlohmann::json::parse(read_file(dir / "leak.json")).at("iid_avg") == doctest::Approx(25.0));
}
