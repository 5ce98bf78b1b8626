#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dgbench/protocol.hpp"
#include "dgbench/registry.hpp"

namespace dgb {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

MeanStd mean_std(const std::vector<double>& values);

/// "55.7±0.3" from accuracies in [0,1].
std::string format_cell(const MeanStd& v);

struct LeaderboardRow {
  std::string algorithm;
  std::map<std::string, MeanStd> cells;  // per test domain, accuracies in [0,1]
  MeanStd avg;
  int rank = 0;
};

struct LeaderboardTable {
  std::string dataset;
  std::string protocol;
  std::vector<std::string> domains;
  std::vector<LeaderboardRow> rows;  // canonical algorithm order

  [[nodiscard]] std::string markdown() const;
  [[nodiscard]] std::string csv() const;
  [[nodiscard]] std::vector<std::string> algorithms() const;
  [[nodiscard]] const LeaderboardRow& row(const std::string& algorithm) const;
};

class IncompleteSweepError : public Error {
 public:
  using Error::Error;
};

/// Builds a table from settings of one dataset and protocol tag.
///
/// Each setting contributes its test domains: the IID-best search trial
/// (index < n_trials) plus the seed replicas (index >= n_trials), and every
/// setting must hold exactly n_trials + extra_seeds records. Every algorithm
/// must cover every test group seen for the dataset and protocol.
LeaderboardTable build_leaderboard(const std::map<std::string, std::vector<TrialRecord>>& settings,
                                   const std::string& dataset, const std::string& protocol,
                                   int n_trials = 10, int extra_seeds = 2);
LeaderboardTable build_leaderboard(const RunRegistry& registry, const std::string& dataset,
                                   const std::string& protocol, int n_trials = 10,
                                   int extra_seeds = 2);

struct RankShift {
  std::vector<std::string> algorithms;
  std::map<std::string, int> rank_a;
  std::map<std::string, int> rank_b;
  std::map<std::string, int> delta;  // rank_b - rank_a
  double tau = 1.0;

  [[nodiscard]] std::string markdown() const;
};

/// Kendall tau between two rankings (permutations of 1..n).
double kendall_tau(const std::vector<int>& a, const std::vector<int>& b);

RankShift rank_shift(const LeaderboardTable& a, const LeaderboardTable& b);
RankShift rank_shift(const std::map<std::string, int>& rank_a, const std::map<std::string, int>& rank_b);

/// Writes `<stem>.png` and `<stem>.csv` (columns domain,k,accuracy).
void plot_freeze_curve(const FreezeCurve& curve, const std::filesystem::path& stem);
std::string freeze_curve_csv(const FreezeCurve& curve);

}  // namespace dgb
