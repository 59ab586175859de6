#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "safe/report.hpp"

namespace {

using nlohmann::json;

json load_config_doc(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw safe::ConfigError(path, "cannot open config file");
  json doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) throw safe::ConfigError(path, "config is not valid JSON");
  return doc;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << content;
}

struct Stats {
  double mean = 0.0, stddev = 0.0;
};

Stats summarize(const std::vector<double>& xs) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - s.mean) * (x - s.mean);
  s.stddev = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1)) : 0.0;
  return s;
}

int cmd_run(const std::string& cfg_path, const std::vector<std::string>& sets,
            const std::string& out_dir) {
  json doc = load_config_doc(cfg_path);
  for (const std::string& s : sets) safe::apply_override(doc, s);
  safe::RunConfig cfg = safe::config_from_json(doc);

  safe::RunReport rep = safe::run_training(cfg);
  std::filesystem::path out(out_dir);
  write_file(out / "report.json", safe::report_to_json(rep).dump(2) + "\n");
  write_file(out / "rounds.csv", safe::rounds_csv(rep));

  const safe::RoundRecord& last = rep.rounds.back();
  std::printf("rounds: %zu  cloud c-acc: %.4f  cloud s-acc: %.4f  (%.1fs)\n", rep.rounds.size(),
              last.cloud_c_acc, last.cloud_s_acc, rep.duration_seconds);
  std::printf("wrote %s and %s\n", (out / "report.json").c_str(), (out / "rounds.csv").c_str());
  return 0;
}

int cmd_partition(const std::string& cfg_path, const std::string& out_dir) {
  safe::RunConfig cfg = safe::config_from_json(load_config_doc(cfg_path));
  safe::PartitionPreview pv = safe::partition_preview(cfg);

  std::printf("client");
  for (int j = 0; j < cfg.data.classes; ++j) std::printf("%8s", ("c" + std::to_string(j)).c_str());
  std::printf("%8s\n", "total");
  json counts = json::array();
  for (int i = 0; i < cfg.clients; ++i) {
    int total = 0;
    std::printf("%6d", i);
    for (int c : pv.counts[static_cast<size_t>(i)]) {
      std::printf("%8d", c);
      total += c;
    }
    std::printf("%8d\n", total);
    counts.push_back(pv.counts[static_cast<size_t>(i)]);
  }
  std::printf("totals");
  for (int c : pv.totals_per_class) std::printf("%8d", c);
  std::printf("\nachieved imbalance ratio: %.3f\n", pv.achieved_ratio);

  json out = {{"counts", counts},
              {"totals_per_class", pv.totals_per_class},
              {"achieved_ratio", pv.achieved_ratio}};
  write_file(std::filesystem::path(out_dir) / "partition.json", out.dump(2) + "\n");
  return 0;
}

int cmd_compare(const std::string& cfg_path, int seeds, const std::string& out_dir) {
  json doc = load_config_doc(cfg_path);
  safe::RunConfig base = safe::config_from_json(doc);

  json per_seed = json::array();
  std::vector<double> off_c, off_s, on_c, on_s;
  for (int s = 0; s < seeds; ++s) {
    safe::RunConfig cfg = base;
    cfg.seed = base.seed + static_cast<uint64_t>(s);
    json row = {{"seed", cfg.seed}};
    for (bool on : {false, true}) {
      cfg.toggles = on ? safe::Toggles{true, true, true, true}
                       : safe::Toggles{false, false, false, false};
      safe::RunReport rep = safe::run_training(cfg);
      const safe::RoundRecord& last = rep.rounds.back();
      json arm = {{"cloud_c_acc", last.cloud_c_acc},
                  {"cloud_s_acc", last.cloud_s_acc},
                  {"mean_client_c_acc", last.mean_client_c_acc()},
                  {"mean_client_s_acc", last.mean_client_s_acc()}};
      row[on ? "safe" : "fedavg"] = arm;
      (on ? on_c : off_c).push_back(last.cloud_c_acc);
      (on ? on_s : off_s).push_back(last.cloud_s_acc);
    }
    per_seed.push_back(row);
  }

  Stats oc = summarize(off_c), os = summarize(off_s);
  Stats nc = summarize(on_c), ns = summarize(on_s);
  std::printf("arm      cloud c-acc        cloud s-acc\n");
  std::printf("fedavg   %.4f +- %.4f   %.4f +- %.4f\n", oc.mean, oc.stddev, os.mean, os.stddev);
  std::printf("safe     %.4f +- %.4f   %.4f +- %.4f\n", nc.mean, nc.stddev, ns.mean, ns.stddev);

  json out = {{"seeds", seeds},
              {"per_seed", per_seed},
              {"fedavg",
               {{"cloud_c_acc_mean", oc.mean},
                {"cloud_c_acc_stddev", oc.stddev},
                {"cloud_s_acc_mean", os.mean},
                {"cloud_s_acc_stddev", os.stddev}}},
              {"safe",
               {{"cloud_c_acc_mean", nc.mean},
                {"cloud_c_acc_stddev", nc.stddev},
                {"cloud_s_acc_mean", ns.mean},
                {"cloud_s_acc_stddev", ns.stddev}}}};
  write_file(std::filesystem::path(out_dir) / "compare.json", out.dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"federated class-rectification simulator"};
  app.require_subcommand(1);

  std::string cfg_path, out_dir = ".";
  std::vector<std::string> sets;
  int seeds = 1;

  CLI::App* run = app.add_subcommand("run", "execute one training run");
  run->add_option("config", cfg_path, "JSON config file")->required();
  run->add_option("--set", sets, "override config entries (key=value, dotted paths)");
  run->add_option("--out", out_dir, "output directory");

  CLI::App* part = app.add_subcommand("partition", "preview the client data partition");
  part->add_option("config", cfg_path, "JSON config file")->required();
  part->add_option("--out", out_dir, "output directory");

  CLI::App* cmp = app.add_subcommand("compare", "baseline vs full mechanisms over seeds");
  cmp->add_option("config", cfg_path, "JSON config file")->required();
  cmp->add_option("--seeds", seeds, "number of master seeds")->check(CLI::PositiveNumber);
  cmp->add_option("--out", out_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(cfg_path, sets, out_dir);
    if (part->parsed()) return cmd_partition(cfg_path, out_dir);
    return cmd_compare(cfg_path, seeds, out_dir);
  } catch (const safe::ConfigError& e) {
    std::cerr << "invalid config: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
