#include "dgbench/report.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include <fmt/format.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dgbench/archive.hpp"

namespace dgb {

namespace fs = std::filesystem;

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw Error("mean of an empty sample");
  const double n = static_cast<double>(values.size());
  MeanStd out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.std = std::sqrt(ss / n);
  return out;
}

std::string format_cell(const MeanStd& v) {
  return fmt::format("{:.1f}±{:.1f}", 100.0 * v.mean, 100.0 * v.std);
}

// ---------------------------------------------------------------------------
// Leaderboard

namespace {

int canonical_position(const std::string& algorithm) {
  const auto& names = algorithm_names();
  auto it = std::find(names.begin(), names.end(), algorithm);
  return it == names.end() ? static_cast<int>(names.size()) : static_cast<int>(it - names.begin());
}

}  // namespace

LeaderboardTable build_leaderboard(const std::map<std::string, std::vector<TrialRecord>>& settings,
                                   const std::string& dataset, const std::string& protocol,
                                   int n_trials, int extra_seeds) {
  if (n_trials < 1 || extra_seeds < 0) throw Error("invalid sweep budget");
  std::map<std::pair<std::string, std::vector<std::string>>, const std::vector<TrialRecord>*> found;
  std::set<std::string> algorithms;
  std::set<std::vector<std::string>> groups;
  for (const auto& [id, records] : settings) {
    SettingKey key;
    try {
      key = parse_setting_id(id);
    } catch (const Error&) {
      continue;
    }
    if (key.dataset != dataset || key.protocol != protocol) continue;
    algorithms.insert(key.algorithm);
    groups.insert(key.test_domains);
    found[{key.algorithm, key.test_domains}] = &records;
  }
  if (found.empty()) {
    throw IncompleteSweepError(
        fmt::format("no settings for dataset '{}' with protocol '{}'", dataset, protocol));
  }

  const auto expected = static_cast<std::size_t>(n_trials + extra_seeds);
  std::vector<std::string> missing;
  for (const auto& alg : algorithms) {
    for (const auto& g : groups) {
      const std::string id = make_setting_id({dataset, alg, protocol, g});
      auto it = found.find({alg, g});
      if (it == found.end()) {
        missing.push_back(id + " (no records)");
      } else if (it->second->size() != expected) {
        missing.push_back(fmt::format("{} ({} of {} records)", id, it->second->size(), expected));
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "incomplete sweeps:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw IncompleteSweepError(msg);
  }

  LeaderboardTable table;
  table.dataset = dataset;
  table.protocol = protocol;
  std::set<std::string> domains;
  for (const auto& g : groups) domains.insert(g.begin(), g.end());
  table.domains.assign(domains.begin(), domains.end());

  for (const auto& alg : algorithms) {
    LeaderboardRow row;
    row.algorithm = alg;
    std::vector<double> seed_sum(static_cast<std::size_t>(extra_seeds + 1), 0.0);
    std::size_t n_domains = 0;
    for (const auto& g : groups) {
      const auto& records = *found.at({alg, g});
      std::vector<TrialRecord> search, seeds;
      for (const auto& r : records) (r.trial_index < n_trials ? search : seeds).push_back(r);
      if (search.empty() || seeds.size() != static_cast<std::size_t>(extra_seeds)) {
        throw IncompleteSweepError(fmt::format("{} lacks search trials or seed replicas",
                                               make_setting_id({dataset, alg, protocol, g})));
      }
      std::sort(seeds.begin(), seeds.end(),
                [](const TrialRecord& a, const TrialRecord& b) { return a.trial_index < b.trial_index; });
      seeds.insert(seeds.begin(), iid_best(search));
      for (const auto& d : g) {
        std::vector<double> acc;
        for (std::size_t j = 0; j < seeds.size(); ++j) {
          const double a = seeds[j].test_accuracy.at(d);
          acc.push_back(a);
          seed_sum[j] += a;
        }
        row.cells[d] = mean_std(acc);
        ++n_domains;
      }
    }
    std::vector<double> per_seed;
    for (double s : seed_sum) per_seed.push_back(s / static_cast<double>(n_domains));
    row.avg = mean_std(per_seed);
    // The mean over seeds of per-seed averages equals the mean of per-domain means.
    double avg = 0.0;
    for (const auto& d : table.domains) avg += row.cells.at(d).mean;
    row.avg.mean = avg / static_cast<double>(table.domains.size());
    table.rows.push_back(std::move(row));
  }

  std::vector<std::size_t> order(table.rows.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ra = table.rows[a];
    const auto& rb = table.rows[b];
    if (ra.avg.mean != rb.avg.mean) return ra.avg.mean > rb.avg.mean;
    return ra.algorithm < rb.algorithm;
  });
  for (std::size_t r = 0; r < order.size(); ++r) table.rows[order[r]].rank = static_cast<int>(r) + 1;

  std::sort(table.rows.begin(), table.rows.end(), [](const LeaderboardRow& a, const LeaderboardRow& b) {
    const int pa = canonical_position(a.algorithm), pb = canonical_position(b.algorithm);
    return pa != pb ? pa < pb : a.algorithm < b.algorithm;
  });
  return table;
}

LeaderboardTable build_leaderboard(const RunRegistry& registry, const std::string& dataset,
                                   const std::string& protocol, int n_trials, int extra_seeds) {
  std::map<std::string, std::vector<TrialRecord>> settings;
  for (const auto& id : registry.settings()) {
    SettingKey key;
    try {
      key = parse_setting_id(id);
    } catch (const Error&) {
      continue;
    }
    if (key.dataset == dataset && key.protocol == protocol) settings[id] = registry.read_all(id);
  }
  return build_leaderboard(settings, dataset, protocol, n_trials, extra_seeds);
}

std::vector<std::string> LeaderboardTable::algorithms() const {
  std::vector<std::string> out;
  for (const auto& r : rows) out.push_back(r.algorithm);
  return out;
}

const LeaderboardRow& LeaderboardTable::row(const std::string& algorithm) const {
  for (const auto& r : rows) {
    if (r.algorithm == algorithm) return r;
  }
  throw Error("no leaderboard row for '" + algorithm + "'");
}

std::string LeaderboardTable::markdown() const {
  std::string out = "| " + dataset + " |";
  std::string rule = "|---|";
  for (const auto& d : domains) {
    out += " " + d + " |";
    rule += "---|";
  }
  out += " Avg | Ranking |\n" + rule + "---|---|\n";
  for (const auto& r : rows) {
    out += "| " + r.algorithm + " |";
    for (const auto& d : domains) out += " " + format_cell(r.cells.at(d)) + " |";
    out += fmt::format(" {} | {} |\n", format_cell(r.avg), r.rank);
  }
  return out;
}

std::string LeaderboardTable::csv() const {
  std::string out = "algorithm";
  for (const auto& d : domains) out += fmt::format(",{0}_mean,{0}_std", d);
  out += ",avg_mean,avg_std,rank\n";
  for (const auto& r : rows) {
    out += r.algorithm;
    for (const auto& d : domains) out += fmt::format(",{},{}", r.cells.at(d).mean, r.cells.at(d).std);
    out += fmt::format(",{},{},{}\n", r.avg.mean, r.avg.std, r.rank);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rank shift

double kendall_tau(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) throw Error("rankings differ in length");
  const std::size_t n = a.size();
  if (n < 2) return 1.0;
  long s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const int da = (a[i] > a[j]) - (a[i] < a[j]);
      const int db = (b[i] > b[j]) - (b[i] < b[j]);
      s += da * db;
    }
  }
  return static_cast<double>(s) / (static_cast<double>(n) * static_cast<double>(n - 1) / 2.0);
}

RankShift rank_shift(const std::map<std::string, int>& rank_a, const std::map<std::string, int>& rank_b) {
  std::vector<std::string> only;
  for (const auto& [alg, r] : rank_a) {
    if (rank_b.count(alg) == 0) only.push_back(alg + " (first table only)");
  }
  for (const auto& [alg, r] : rank_b) {
    if (rank_a.count(alg) == 0) only.push_back(alg + " (second table only)");
  }
  if (!only.empty()) {
    std::string msg = "algorithm sets differ:";
    for (const auto& o : only) msg += " " + o;
    throw Error(msg);
  }
  RankShift out;
  std::vector<int> a, b;
  for (const auto& [alg, r] : rank_a) {
    out.algorithms.push_back(alg);
    out.rank_a[alg] = r;
    out.rank_b[alg] = rank_b.at(alg);
    out.delta[alg] = rank_b.at(alg) - r;
    a.push_back(r);
    b.push_back(rank_b.at(alg));
  }
  out.tau = kendall_tau(a, b);
  return out;
}

RankShift rank_shift(const LeaderboardTable& a, const LeaderboardTable& b) {
  std::map<std::string, int> ra, rb;
  for (const auto& r : a.rows) ra[r.algorithm] = r.rank;
  for (const auto& r : b.rows) rb[r.algorithm] = r.rank;
  return rank_shift(ra, rb);
}

std::string RankShift::markdown() const {
  std::vector<std::string> order = algorithms;
  std::sort(order.begin(), order.end(), [&](const std::string& x, const std::string& y) {
    return rank_a.at(x) < rank_a.at(y);
  });
  std::string out = "| Algorithm | rank A | rank B | delta |\n|---|---|---|---|\n";
  for (const auto& alg : order) {
    out += fmt::format("| {} | {} | {} | {:+d} |\n", alg, rank_a.at(alg), rank_b.at(alg), delta.at(alg));
  }
  out += fmt::format("\nKendall tau: {:.4f}\n", tau);
  return out;
}

// ---------------------------------------------------------------------------
// Freeze curve plot

namespace {

void check_curve(const FreezeCurve& curve) {
  if (curve.accuracy.empty()) throw Error("freeze curve has no series");
  if (curve.ks.size() < 2) throw Error("freeze curve needs at least two points");
  for (const auto& [d, ys] : curve.accuracy) {
    if (ys.size() != curve.ks.size()) throw Error("series '" + d + "' does not match the k values");
    for (double y : ys) {
      if (!(y >= 0.0 && y <= 1.0)) throw Error(fmt::format("series '{}' leaves [0, 1]: {}", d, y));
    }
  }
}

}  // namespace

std::string freeze_curve_csv(const FreezeCurve& curve) {
  check_curve(curve);
  std::string out = "domain,k,accuracy\n";
  for (const auto& [d, ys] : curve.accuracy) {
    for (std::size_t i = 0; i < ys.size(); ++i) out += fmt::format("{},{},{}\n", d, curve.ks[i], ys[i]);
  }
  return out;
}

void plot_freeze_curve(const FreezeCurve& curve, const fs::path& stem) {
  const std::string csv = freeze_curve_csv(curve);
  const int w = 640, h = 480, left = 70, right = 160, top = 30, bottom = 60;
  cv::Mat img(h, w, CV_8UC3, cv::Scalar(255, 255, 255));
  const int pw = w - left - right, ph = h - top - bottom;
  const auto [kmin, kmax] = std::minmax_element(curve.ks.begin(), curve.ks.end());
  const double span = std::max(1, *kmax - *kmin);
  auto px = [&](int k) { return left + static_cast<int>(std::lround((k - *kmin) / span * pw)); };
  auto py = [&](double y) { return top + static_cast<int>(std::lround((1.0 - y) * ph)); };

  const auto font = cv::FONT_HERSHEY_SIMPLEX;
  for (int t = 0; t <= 5; ++t) {
    const double y = t / 5.0;
    cv::line(img, {left, py(y)}, {left + pw, py(y)}, cv::Scalar(225, 225, 225), 1);
    cv::putText(img, fmt::format("{:.1f}", y), {left - 40, py(y) + 5}, font, 0.45, cv::Scalar(0, 0, 0), 1);
  }
  for (int k : curve.ks) {
    cv::line(img, {px(k), top + ph}, {px(k), top + ph + 5}, cv::Scalar(0, 0, 0), 1);
    cv::putText(img, std::to_string(k), {px(k) - 4, top + ph + 22}, font, 0.45, cv::Scalar(0, 0, 0), 1);
  }
  cv::rectangle(img, {left, top}, {left + pw, top + ph}, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, "frozen blocks k", {left + pw / 2 - 60, h - 15}, font, 0.5, cv::Scalar(0, 0, 0), 1);
  cv::putText(img, "acc", {10, top + ph / 2}, font, 0.5, cv::Scalar(0, 0, 0), 1);

  static const std::vector<cv::Scalar> palette = {
      {180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214}, {189, 103, 148}, {75, 86, 140}};
  int s = 0;
  for (const auto& [d, ys] : curve.accuracy) {
    const cv::Scalar color = palette[static_cast<std::size_t>(s) % palette.size()];
    for (std::size_t i = 0; i < ys.size(); ++i) {
      const cv::Point p{px(curve.ks[i]), py(ys[i])};
      cv::circle(img, p, 4, color, cv::FILLED, cv::LINE_AA);
      if (i > 0) cv::line(img, {px(curve.ks[i - 1]), py(ys[i - 1])}, p, color, 2, cv::LINE_AA);
    }
    const int ly = top + 15 + 22 * s;
    cv::line(img, {left + pw + 15, ly - 4}, {left + pw + 40, ly - 4}, color, 2, cv::LINE_AA);
    cv::putText(img, d, {left + pw + 46, ly}, font, 0.45, cv::Scalar(0, 0, 0), 1);
    ++s;
  }

  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  fs::path png = stem;
  png += ".png";
  fs::path csv_path = stem;
  csv_path += ".csv";
  if (!cv::imwrite(png.string(), img)) throw Error("could not write " + png.string());
  write_file_atomic(csv_path, csv);
}

}  // namespace dgb
