// egg: command-line driver for graph classification, node clustering,
// gradient checking, rank-sensitivity sweeps, and embedding export.
//
// Grammar:
//   egg <classify|cluster|gradcheck|sensitivity|embed>
//       [--config <path>] [--seed N] [--jobs N] [--out DIR] [key=value ...]
//
// Exit codes: 0 success, 1 config error, 2 data error, 3 check failure.

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "egg/checks.hpp"
#include "egg/clustering.hpp"
#include "egg/gnn.hpp"
#include "egg/graph.hpp"
#include "egg/grassmann.hpp"
#include "egg/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitCheck = 3;

// ---------------------------------------------------------------- config --

struct ExperimentConfig {
  std::string task = "classify";  // classify | cluster
  std::string data_dir = "data";
  std::string dataset;
  std::string backbone = "gcn";  // gcn | gin
  std::size_t layers = 2;
  std::string pool = "egg";       // sum | avg | max | egg
  std::string rank_kind = "energy";  // energy | value | ratio | count
  double rank_value = 0.8;

  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double dropout = 0.0;
  std::size_t hidden_units = 64;

  double train_frac = 0.8;
  double val_frac = 0.1;
  double test_frac = 0.1;
  std::size_t degree_cap = 10;  // one-hot degree features when none are supplied

  std::size_t repetitions = 10;
  std::uint64_t seed = 0;
  std::string output_dir = "egg-out";

  // clustering
  std::size_t clusters = 0;  // 0: use the number of label classes
  std::vector<double> ratios = {0.2, 0.5, 0.8};
  bool row_normalize = true;
  double edge_val_frac = 0.05;
  double edge_test_frac = 0.10;
  std::size_t vgae_hidden = 32;
  std::size_t vgae_latent = 16;
  std::size_t vgae_epochs = 200;
  double vgae_lr = 0.01;

  // sensitivity
  std::vector<double> r_list = {0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};

  // gradcheck
  std::size_t trials = 100;
};

json config_to_json(const ExperimentConfig& c) {
  return json{{"task", c.task},
              {"data_dir", c.data_dir},
              {"dataset", c.dataset},
              {"backbone", c.backbone},
              {"layers", c.layers},
              {"pool", c.pool},
              {"rank_kind", c.rank_kind},
              {"rank_value", c.rank_value},
              {"learning_rate", c.learning_rate},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"max_epochs", c.max_epochs},
              {"patience", c.patience},
              {"dropout", c.dropout},
              {"hidden_units", c.hidden_units},
              {"train_frac", c.train_frac},
              {"val_frac", c.val_frac},
              {"test_frac", c.test_frac},
              {"degree_cap", c.degree_cap},
              {"repetitions", c.repetitions},
              {"seed", c.seed},
              {"output_dir", c.output_dir},
              {"clusters", c.clusters},
              {"ratios", c.ratios},
              {"row_normalize", c.row_normalize},
              {"edge_val_frac", c.edge_val_frac},
              {"edge_test_frac", c.edge_test_frac},
              {"vgae_hidden", c.vgae_hidden},
              {"vgae_latent", c.vgae_latent},
              {"vgae_epochs", c.vgae_epochs},
              {"vgae_lr", c.vgae_lr},
              {"r_list", c.r_list},
              {"trials", c.trials}};
}

void apply_config_key(ExperimentConfig& c, const std::string& key, const json& v) {
  try {
    if (key == "task") c.task = v.get<std::string>();
    else if (key == "data_dir") c.data_dir = v.get<std::string>();
    else if (key == "dataset") c.dataset = v.get<std::string>();
    else if (key == "backbone") c.backbone = v.get<std::string>();
    else if (key == "layers") c.layers = v.get<std::size_t>();
    else if (key == "pool") c.pool = v.get<std::string>();
    else if (key == "rank_kind") c.rank_kind = v.get<std::string>();
    else if (key == "rank_value") c.rank_value = v.get<double>();
    else if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "weight_decay") c.weight_decay = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
    else if (key == "patience") c.patience = v.get<std::size_t>();
    else if (key == "dropout") c.dropout = v.get<double>();
    else if (key == "hidden_units") c.hidden_units = v.get<std::size_t>();
    else if (key == "train_frac") c.train_frac = v.get<double>();
    else if (key == "val_frac") c.val_frac = v.get<double>();
    else if (key == "test_frac") c.test_frac = v.get<double>();
    else if (key == "degree_cap") c.degree_cap = v.get<std::size_t>();
    else if (key == "repetitions") c.repetitions = v.get<std::size_t>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "output_dir") c.output_dir = v.get<std::string>();
    else if (key == "clusters") c.clusters = v.get<std::size_t>();
    else if (key == "ratios") c.ratios = v.get<std::vector<double>>();
    else if (key == "row_normalize") c.row_normalize = v.get<bool>();
    else if (key == "edge_val_frac") c.edge_val_frac = v.get<double>();
    else if (key == "edge_test_frac") c.edge_test_frac = v.get<double>();
    else if (key == "vgae_hidden") c.vgae_hidden = v.get<std::size_t>();
    else if (key == "vgae_latent") c.vgae_latent = v.get<std::size_t>();
    else if (key == "vgae_epochs") c.vgae_epochs = v.get<std::size_t>();
    else if (key == "vgae_lr") c.vgae_lr = v.get<double>();
    else if (key == "r_list") c.r_list = v.get<std::vector<double>>();
    else if (key == "trials") c.trials = v.get<std::size_t>();
    else throw ConfigError("unknown config key '" + key + "'");
  } catch (const json::exception& e) {
    throw ConfigError("bad value for config key '" + key + "': " + e.what());
  }
}

void apply_config_object(ExperimentConfig& c, const json& j, const std::string& origin) {
  if (!j.is_object()) throw ConfigError(origin + ": config must be a JSON object");
  for (const auto& item : j.items()) apply_config_key(c, item.key(), item.value());
}

template <typename T>
bool one_of(const T& v, std::initializer_list<T> allowed) {
  return std::find(allowed.begin(), allowed.end(), v) != allowed.end();
}

void validate_config(const ExperimentConfig& c) {
  if (!one_of<std::string>(c.task, {"classify", "cluster"}))
    throw ConfigError("task must be 'classify' or 'cluster'");
  if (!one_of<std::string>(c.backbone, {"gcn", "gin"}))
    throw ConfigError("backbone must be 'gcn' or 'gin'");
  if (!one_of<std::string>(c.pool, {"sum", "avg", "max", "egg"}))
    throw ConfigError("pool must be one of sum, avg, max, egg");
  if (!one_of<std::string>(c.rank_kind, {"energy", "value", "ratio", "count"}))
    throw ConfigError("rank_kind must be one of energy, value, ratio, count");
  if (c.layers < 1) throw ConfigError("layers must be >= 1");
  if (c.repetitions < 1) throw ConfigError("repetitions must be >= 1");
  if (std::abs(c.train_frac + c.val_frac + c.test_frac - 1.0) > 1e-9)
    throw ConfigError("train_frac + val_frac + test_frac must equal 1");
}

egg::RankPolicy make_policy(const std::string& kind, double value) {
  try {
    if (kind == "energy") return egg::RankPolicy::energy(value);
    if (kind == "value") return egg::RankPolicy::value_threshold(value);
    if (kind == "ratio") return egg::RankPolicy::fixed_ratio(value);
    if (kind == "count")
      return egg::RankPolicy::fixed_count(static_cast<std::size_t>(std::llround(value)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid rank policy: ") + e.what());
  }
  throw ConfigError("unknown rank policy kind '" + kind + "'");
}

egg::PoolConfig make_pool(const ExperimentConfig& c) {
  egg::PoolConfig p;
  if (c.pool == "sum") p.kind = egg::PoolKind::kSum;
  else if (c.pool == "avg") p.kind = egg::PoolKind::kAvg;
  else if (c.pool == "max") p.kind = egg::PoolKind::kMax;
  else p.kind = egg::PoolKind::kEgg;
  p.policy = make_policy(c.rank_kind, c.rank_value);
  return p;
}

// ---------------------------------------------------------------- output --

fs::path make_run_dir(const ExperimentConfig& c, const std::string& command) {
  const auto now = std::chrono::system_clock::now();
  const std::time_t tt = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  localtime_r(&tt, &tm);
  std::ostringstream stamp;
  stamp << std::put_time(&tm, "%Y%m%d-%H%M%S");
  fs::path base = fs::path(c.output_dir) / (command + "-" + stamp.str());
  fs::path dir = base;
  for (int suffix = 2; fs::exists(dir); ++suffix)
    dir = base.string() + "-" + std::to_string(suffix);
  fs::create_directories(dir / "runs");
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_summary(const fs::path& dir, const json& summary) {
  write_text(dir / "summary.json", summary.dump(2) + "\n");
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

// ----------------------------------------------------------- parallelism --

// Runs `body(i)` for i in [0, count), at most `jobs` forked workers at a
// time. Each worker owns its repetition and writes its own files; the parent
// only merges afterwards, so results are independent of scheduling. Returns
// the worst exit code.
int parallel_for(std::size_t count, std::size_t jobs,
                 const std::function<void(std::size_t)>& body) {
  auto guarded = [&](std::size_t i) -> int {
    try {
      body(i);
      return kExitOk;
    } catch (const ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitConfig;
    } catch (const DataError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitData;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kExitData;
    }
  };

  if (jobs <= 1) {
    for (std::size_t i = 0; i < count; ++i)
      if (int rc = guarded(i); rc != kExitOk) return rc;
    return kExitOk;
  }

  std::map<pid_t, std::size_t> running;
  std::size_t next = 0;
  int worst = kExitOk;
  while (next < count || !running.empty()) {
    while (next < count && running.size() < jobs) {
      const pid_t pid = fork();
      if (pid < 0) throw std::runtime_error("fork failed");
      if (pid == 0) _exit(guarded(next));
      running.emplace(pid, next);
      ++next;
    }
    int status = 0;
    const pid_t done = wait(&status);
    if (done < 0) throw std::runtime_error("wait failed");
    running.erase(done);
    const int rc = WIFEXITED(status) ? WEXITSTATUS(status) : kExitData;
    worst = std::max(worst, rc);
  }
  return worst;
}

// ------------------------------------------------------------- data prep --

egg::GraphSet load_classification_data(const ExperimentConfig& c) {
  if (c.dataset.empty()) throw ConfigError("dataset name is required");
  egg::GraphSet gs;
  try {
    gs = egg::load_tu_dataset(c.data_dir, c.dataset);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  if (gs.feature_dim == 0) egg::degree_onehot(gs, c.degree_cap);
  if (gs.class_count < 2) throw DataError("dataset has fewer than two graph classes");
  return gs;
}

egg::Graph load_clustering_data(const ExperimentConfig& c) {
  if (c.dataset.empty()) throw ConfigError("dataset name is required");
  const std::string stem = (fs::path(c.data_dir) / c.dataset).string();
  try {
    return egg::load_citation(stem + ".content", stem + ".cites", nullptr, c.row_normalize);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

egg::ClassifierConfig model_config(const ExperimentConfig& c, const egg::GraphSet& gs,
                                   std::uint64_t seed) {
  egg::ClassifierConfig mc;
  mc.backbone = c.backbone == "gin" ? egg::Backbone::kGin : egg::Backbone::kGcn;
  mc.conv_layers = c.layers;
  mc.hidden_units = c.hidden_units;
  mc.feature_dim = gs.feature_dim;
  mc.class_count = gs.class_count;
  mc.pool = make_pool(c);
  mc.dropout = c.dropout;
  mc.seed = seed;
  return mc;
}

egg::TrainConfig train_config(const ExperimentConfig& c, std::uint64_t seed) {
  egg::TrainConfig tc;
  tc.learning_rate = c.learning_rate;
  tc.weight_decay = c.weight_decay;
  tc.batch_size = c.batch_size;
  tc.max_epochs = c.max_epochs;
  tc.patience = c.patience;
  tc.dropout = c.dropout;
  tc.hidden_units = c.hidden_units;
  tc.pool = make_pool(c);
  tc.seed = seed;
  return tc;
}

// One seeded classification repetition; returns the summary fields.
json classify_repetition(const ExperimentConfig& c, const egg::GraphSet& base,
                         const egg::PoolConfig& pool, std::uint64_t seed,
                         const fs::path& csv_path) {
  egg::GraphSet gs = base;
  egg::split_graphs(gs, c.train_frac, c.val_frac, c.test_frac, seed);
  egg::ClassifierConfig mc = model_config(c, gs, seed);
  mc.pool = pool;
  egg::ClassifierModel model(mc);
  egg::TrainConfig tc = train_config(c, seed);
  tc.pool = pool;
  egg::RunRecord rec = egg::train_classifier(gs, model, tc);
  write_text(csv_path, egg::run_record_csv(rec));
  return json{{"seed", seed},
              {"test_accuracy", rec.test_accuracy},
              {"stop_epoch", rec.stop_epoch},
              {"best_epoch", rec.best_epoch}};
}

json metrics_to_json(const egg::ClusterMetrics& m) {
  return json{{"acc", m.acc}, {"nmi", m.nmi}, {"ari", m.ari}, {"completeness", m.completeness}};
}

// ----------------------------------------------------------------- tasks --

int cmd_classify(const ExperimentConfig& c, std::size_t jobs) {
  const egg::GraphSet gs = load_classification_data(c);
  const egg::PoolConfig pool = make_pool(c);
  const fs::path dir = make_run_dir(c, "classify");

  int rc = parallel_for(c.repetitions, jobs, [&](std::size_t i) {
    const json rep = classify_repetition(c, gs, pool, c.seed + i,
                                         dir / "runs" / ("rep_" + std::to_string(i) + ".csv"));
    write_text(dir / "runs" / ("rep_" + std::to_string(i) + ".json"), rep.dump(2) + "\n");
  });
  if (rc != kExitOk) return rc;

  json runs = json::array();
  std::vector<double> accs;
  for (std::size_t i = 0; i < c.repetitions; ++i) {
    std::ifstream in(dir / "runs" / ("rep_" + std::to_string(i) + ".json"));
    json rep = json::parse(in);
    rep["repetition"] = i;
    accs.push_back(rep.at("test_accuracy").get<double>());
    runs.push_back(std::move(rep));
  }
  const auto [mean, sd] = mean_std(accs);
  write_summary(dir, json{{"command", "classify"},
                          {"config", config_to_json(c)},
                          {"runs", runs},
                          {"mean_test_accuracy", mean},
                          {"std_test_accuracy", sd}});
  std::cout << "classify: " << c.dataset << " mean test accuracy " << mean << " +/- " << sd
            << " over " << c.repetitions << " repetitions\n";
  std::cout << "results: " << dir.string() << "\n";
  return kExitOk;
}

int cmd_cluster(const ExperimentConfig& c, std::size_t jobs) {
  const egg::Graph g = load_clustering_data(c);
  if (g.node_labels.empty()) throw DataError("clustering requires node labels");
  int max_label = 0;
  for (int l : g.node_labels) max_label = std::max(max_label, l);
  const std::size_t k =
      c.clusters > 0 ? c.clusters : static_cast<std::size_t>(max_label) + 1;
  const fs::path dir = make_run_dir(c, "cluster");

  int rc = parallel_for(c.repetitions, jobs, [&](std::size_t i) {
    const std::uint64_t seed = c.seed + i;
    egg::EdgeSplit split = egg::split_edges(
        g, 1.0 - c.edge_val_frac - c.edge_test_frac, c.edge_val_frac, c.edge_test_frac, seed);
    egg::VgaeConfig vc;
    vc.hidden = c.vgae_hidden;
    vc.latent = c.vgae_latent;
    vc.epochs = c.vgae_epochs;
    vc.lr = c.vgae_lr;
    vc.seed = seed;
    egg::VgaeState state = egg::train_vgae(g, split, vc);

    std::ostringstream curve;
    curve << "epoch,loss\n";
    curve.precision(17);
    for (std::size_t e = 0; e < state.losses.size(); ++e)
      curve << (e + 1) << ',' << state.losses[e] << '\n';
    write_text(dir / "runs" / ("rep_" + std::to_string(i) + ".csv"), curve.str());

    json rows = json::array();
    egg::ClusterResult base = egg::kmeans(state.mu, k, seed);
    egg::ClusterMetrics bm = egg::cluster_metrics(
        base.assignment, g.node_labels, std::max(k, static_cast<std::size_t>(max_label) + 1));
    rows.push_back(json{{"policy", "none"}, {"metrics", metrics_to_json(bm)}});
    for (double x : c.ratios) {
      egg::ClusterResult r =
          egg::egg_cluster(state.mu, egg::RankPolicy::fixed_ratio(x), k, g.node_labels, seed);
      rows.push_back(json{{"policy", "x=" + json(x).dump()},
                          {"metrics", metrics_to_json(r.metrics)},
                          {"rank", r.rank},
                          {"captured_energy", r.captured_energy}});
    }
    write_text(dir / "runs" / ("rep_" + std::to_string(i) + ".json"),
               json{{"seed", seed}, {"rows", rows}}.dump(2) + "\n");
  });
  if (rc != kExitOk) return rc;

  // merge by repetition index, then aggregate per policy row
  std::vector<json> reps;
  for (std::size_t i = 0; i < c.repetitions; ++i) {
    std::ifstream in(dir / "runs" / ("rep_" + std::to_string(i) + ".json"));
    reps.push_back(json::parse(in));
  }
  json table = json::array();
  const std::size_t n_rows = reps.front().at("rows").size();
  for (std::size_t row = 0; row < n_rows; ++row) {
    std::map<std::string, std::vector<double>> metric_samples;
    std::vector<double> energies, ranks;
    for (const json& rep : reps) {
      const json& r = rep.at("rows").at(row);
      for (const auto& item : r.at("metrics").items())
        metric_samples[item.key()].push_back(item.value().get<double>());
      if (r.contains("captured_energy")) {
        energies.push_back(r.at("captured_energy").get<double>());
        ranks.push_back(r.at("rank").get<double>());
      }
    }
    json entry{{"policy", reps.front().at("rows").at(row).at("policy")}};
    for (const auto& [name, samples] : metric_samples) {
      const auto [mean, sd] = mean_std(samples);
      entry["mean_" + name] = mean;
      entry["std_" + name] = sd;
    }
    if (!energies.empty()) {
      entry["mean_captured_energy"] = mean_std(energies).first;
      entry["mean_rank"] = mean_std(ranks).first;
    }
    table.push_back(std::move(entry));
  }
  write_summary(dir, json{{"command", "cluster"},
                          {"config", config_to_json(c)},
                          {"clusters", k},
                          {"table", table}});
  std::cout << "cluster: " << c.dataset << ", " << c.repetitions << " repetitions\n";
  for (const json& row : table) {
    std::cout << "  " << row.at("policy").get<std::string>()
              << "  acc " << row.at("mean_acc").get<double>()
              << "  nmi " << row.at("mean_nmi").get<double>()
              << "  ari " << row.at("mean_ari").get<double>()
              << "  cs " << row.at("mean_completeness").get<double>();
    if (row.contains("mean_captured_energy"))
      std::cout << "  y " << row.at("mean_captured_energy").get<double>();
    std::cout << "\n";
  }
  std::cout << "results: " << dir.string() << "\n";
  return kExitOk;
}

int cmd_gradcheck(const ExperimentConfig& c) {
  const auto reports = egg::checks::run_gradcheck(c.seed, c.trials);
  const fs::path dir = make_run_dir(c, "gradcheck");
  json rows = json::array();
  bool all_pass = true;
  for (const auto& r : reports) {
    std::cout << (r.pass ? "pass" : "FAIL") << "  " << r.name << "  trials " << r.trials
              << "  max_err " << r.max_err << "  threshold " << r.threshold << "\n";
    rows.push_back(json{{"suite", r.name},
                        {"trials", r.trials},
                        {"max_err", r.max_err},
                        {"threshold", r.threshold},
                        {"pass", r.pass}});
    all_pass = all_pass && r.pass;
  }
  write_summary(dir, json{{"command", "gradcheck"},
                          {"config", config_to_json(c)},
                          {"suites", rows},
                          {"pass", all_pass}});
  std::cout << "results: " << dir.string() << "\n";
  return all_pass ? kExitOk : kExitCheck;
}

int cmd_sensitivity(const ExperimentConfig& c, std::size_t jobs) {
  if (c.r_list.empty()) throw ConfigError("r_list must not be empty");
  for (double r : c.r_list)
    if (r <= 0.0 || r >= 1.0) throw ConfigError("r_list entries must lie in (0,1)");
  const egg::GraphSet gs = load_classification_data(c);
  const fs::path dir = make_run_dir(c, "sensitivity");

  const std::size_t total = c.r_list.size() * c.repetitions;
  int rc = parallel_for(total, jobs, [&](std::size_t idx) {
    const std::size_t ri = idx / c.repetitions;
    const std::size_t rep = idx % c.repetitions;
    egg::PoolConfig pool{egg::PoolKind::kEgg, egg::RankPolicy::energy(c.r_list[ri])};
    const std::string tag = "r" + std::to_string(ri) + "_rep" + std::to_string(rep);
    const json out = classify_repetition(c, gs, pool, c.seed + rep,
                                         dir / "runs" / (tag + ".csv"));
    write_text(dir / "runs" / (tag + ".json"), out.dump(2) + "\n");
  });
  if (rc != kExitOk) return rc;

  std::ostringstream csv;
  csv << "r,mean_acc,std_acc\n";
  csv.precision(17);
  json rows = json::array();
  for (std::size_t ri = 0; ri < c.r_list.size(); ++ri) {
    std::vector<double> accs;
    for (std::size_t rep = 0; rep < c.repetitions; ++rep) {
      std::ifstream in(dir / "runs" /
                       ("r" + std::to_string(ri) + "_rep" + std::to_string(rep) + ".json"));
      accs.push_back(json::parse(in).at("test_accuracy").get<double>());
    }
    const auto [mean, sd] = mean_std(accs);
    csv << c.r_list[ri] << ',' << mean << ',' << sd << '\n';
    rows.push_back(json{{"r", c.r_list[ri]}, {"mean_acc", mean}, {"std_acc", sd}});
  }
  write_text(dir / "sensitivity.csv", csv.str());
  write_summary(dir, json{{"command", "sensitivity"},
                          {"config", config_to_json(c)},
                          {"rows", rows}});
  std::cout << "sensitivity: " << rows.size() << " threshold values, "
            << c.repetitions << " repetitions each\n";
  std::cout << "results: " << dir.string() << "\n";
  return kExitOk;
}

// Flattened Grassmann embedding of one graph under a trained classifier:
// convolutions, then the projector of the graph-level rectification. GIN
// backbones concatenate per-layer embeddings (jumping knowledge).
std::vector<double> graph_embedding(egg::ClassifierModel& model, const egg::Graph& g,
                                    const egg::RankPolicy& policy) {
  egg::Tape t;
  egg::Value h = t.leaf(g.features);
  egg::PoolConfig pool{egg::PoolKind::kEgg, policy};
  std::vector<double> out;
  if (model.config.backbone == egg::Backbone::kGcn) {
    auto a_hat = std::make_shared<egg::SparseMatrix>(egg::normalize_adjacency(g));
    for (egg::GcnLayer& layer : model.gcn_layers) h = egg::gcn_forward(layer, t, a_hat, h);
    const egg::Matrix& v = t.value(egg::global_pool(t, h, pool));
    out.assign(v.data(), v.data() + v.size());
    return out;
  }
  for (egg::GinLayer& layer : model.gin_layers) {
    h = egg::gin_forward(layer, t, g, h);
    const egg::Matrix& v = t.value(egg::global_pool(t, h, pool));
    out.insert(out.end(), v.data(), v.data() + v.size());
  }
  return out;
}

int cmd_embed(const ExperimentConfig& c) {
  const fs::path dir = make_run_dir(c, "embed");
  std::ostringstream csv;
  csv.precision(17);
  std::size_t rows = 0, width = 0;

  if (c.task == "classify") {
    egg::GraphSet gs = load_classification_data(c);
    const egg::PoolConfig pool = make_pool(c);
    egg::split_graphs(gs, c.train_frac, c.val_frac, c.test_frac, c.seed);
    egg::ClassifierModel model(model_config(c, gs, c.seed));
    egg::train_classifier(gs, model, train_config(c, c.seed));
    for (std::size_t i = 0; i < gs.graphs.size(); ++i) {
      const auto emb = graph_embedding(model, gs.graphs[i], pool.policy);
      csv << i << ',' << gs.graphs[i].label;
      for (double v : emb) csv << ',' << v;
      csv << '\n';
      ++rows;
      width = emb.size();
    }
  } else {
    egg::Graph g = load_clustering_data(c);
    egg::EdgeSplit split = egg::split_edges(
        g, 1.0 - c.edge_val_frac - c.edge_test_frac, c.edge_val_frac, c.edge_test_frac, c.seed);
    egg::VgaeConfig vc;
    vc.hidden = c.vgae_hidden;
    vc.latent = c.vgae_latent;
    vc.epochs = c.vgae_epochs;
    vc.lr = c.vgae_lr;
    vc.seed = c.seed;
    egg::VgaeState state = egg::train_vgae(g, split, vc);
    egg::GrassmannPoint pt = egg::rectify(state.mu, egg::RectifyMode::kNodeLevel,
                                          make_policy(c.rank_kind, c.rank_value));
    for (std::size_t i = 0; i < g.node_count; ++i) {
      csv << i << ',' << (i < g.node_labels.size() ? g.node_labels[i] : -1);
      for (std::size_t j = 0; j < pt.rank; ++j) csv << ',' << pt.basis(i, j);
      csv << '\n';
      ++rows;
      width = pt.rank;
    }
  }

  write_text(dir / "embeddings.csv", csv.str());
  write_summary(dir, json{{"command", "embed"},
                          {"config", config_to_json(c)},
                          {"rows", rows},
                          {"embedding_width", width}});
  std::cout << "embed: wrote " << rows << " rows of width " << (2 + width) << "\n";
  std::cout << "results: " << dir.string() << "\n";
  return kExitOk;
}

// ------------------------------------------------------------------ main --

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, CommonArgs& a, bool config_required) {
  auto* opt = sub->add_option("--config", a.config_path, "JSON config file");
  if (config_required) opt->required();
  sub->add_option("--seed", a.seed, "base random seed (overrides config)");
  sub->add_option("--jobs", a.jobs, "max parallel worker processes")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", a.out, "output directory (overrides config)");
  sub->add_option("overrides", a.overrides, "key=value config overrides");
}

ExperimentConfig build_config(const CommonArgs& a) {
  ExperimentConfig c;
  if (!a.config_path.empty()) {
    std::ifstream in(a.config_path);
    if (!in) throw ConfigError("cannot open config file " + a.config_path);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError(a.config_path + ": " + e.what());
    }
    apply_config_object(c, j, a.config_path);
  }
  for (const std::string& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("override '" + kv + "' is not of the form key=value");
    const std::string key = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;  // unquoted strings pass through verbatim
    }
    apply_config_key(c, key, value);
  }
  if (a.seed) c.seed = *a.seed;
  if (a.out) c.output_dir = *a.out;
  validate_config(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"egg: graph representation learning on the Grassmann manifold"};
  app.require_subcommand(1);

  CommonArgs classify_args, cluster_args, gradcheck_args, sensitivity_args, embed_args;
  add_common(app.add_subcommand("classify", "graph classification experiment"),
             classify_args, true);
  add_common(app.add_subcommand("cluster", "node clustering experiment"), cluster_args, true);
  add_common(app.add_subcommand("gradcheck", "gradient verification suites"),
             gradcheck_args, false);
  add_common(app.add_subcommand("sensitivity", "rank-threshold sensitivity sweep"),
             sensitivity_args, true);
  add_common(app.add_subcommand("embed", "embedding export"), embed_args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (app.got_subcommand("classify")) {
      ExperimentConfig c = build_config(classify_args);
      c.task = "classify";
      return cmd_classify(c, classify_args.jobs);
    }
    if (app.got_subcommand("cluster")) {
      ExperimentConfig c = build_config(cluster_args);
      c.task = "cluster";
      return cmd_cluster(c, cluster_args.jobs);
    }
    if (app.got_subcommand("gradcheck")) {
      return cmd_gradcheck(build_config(gradcheck_args));
    }
    if (app.got_subcommand("sensitivity")) {
      ExperimentConfig c = build_config(sensitivity_args);
      c.task = "classify";
      return cmd_sensitivity(c, sensitivity_args.jobs);
    }
    if (app.got_subcommand("embed")) {
      return cmd_embed(build_config(embed_args));
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitConfig;
}
