#ifndef EGG_GRAPH_HPP
#define EGG_GRAPH_HPP

#include <zlib.h>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "egg/matrix.hpp"
#include "egg/rng.hpp"

namespace egg {

enum class Split { kTrain, kVal, kTest };

// Undirected attributed graph. Edges are stored once with u < v, zero-based,
// no self-loops (self-loops enter only through adjacency normalization).
struct Graph {
  std::size_t node_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  Matrix features;               // node_count x d
  int label = -1;                // graph-level class, -1 when absent
  std::vector<int> node_labels;  // per-node classes for node-level tasks

  void add_edge(std::size_t u, std::size_t v) {
    if (u >= node_count || v >= node_count)
      throw std::out_of_range("edge endpoint outside graph");
    if (u == v) return;  // self-loops dropped
    if (u > v) std::swap(u, v);
    edges.emplace_back(u, v);
  }

  void dedupe_edges() {
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  }

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> d(node_count, 0);
    for (const auto& [u, v] : edges) {
      ++d[u];
      ++d[v];
    }
    return d;
  }
};

struct GraphSet {
  std::vector<Graph> graphs;
  std::size_t class_count = 0;
  std::size_t feature_dim = 0;
  std::vector<Split> split;  // empty until split_graphs runs
};

// Positive/negative edge partition for link-prediction training.
struct EdgeSplit {
  std::vector<std::pair<std::size_t, std::size_t>> train_pos, val_pos, test_pos;
  std::vector<std::pair<std::size_t, std::size_t>> train_neg, val_neg, test_neg;
};

// D^{-1/2} (A + I) D^{-1/2} with degrees taken after adding self-loops.
inline SparseMatrix normalize_adjacency(const Graph& g) {
  const std::size_t n = g.node_count;
  std::vector<double> deg(n, 1.0);  // self-loop
  for (const auto& [u, v] : g.edges) {
    deg[u] += 1.0;
    deg[v] += 1.0;
  }
  std::vector<std::size_t> r, c;
  std::vector<double> w;
  r.reserve(2 * g.edges.size() + n);
  for (std::size_t i = 0; i < n; ++i) {
    r.push_back(i);
    c.push_back(i);
    w.push_back(1.0 / deg[i]);
  }
  for (const auto& [u, v] : g.edges) {
    const double val = 1.0 / std::sqrt(deg[u] * deg[v]);
    r.push_back(u);
    c.push_back(v);
    w.push_back(val);
    r.push_back(v);
    c.push_back(u);
    w.push_back(val);
  }
  return SparseMatrix::from_triplets(n, n, std::move(r), std::move(c), std::move(w));
}

// Adjacency rebuilt from an explicit edge list (e.g. train positives only).
inline SparseMatrix normalize_adjacency(
    std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  Graph g;
  g.node_count = n;
  for (const auto& [u, v] : edges) g.add_edge(u, v);
  g.dedupe_edges();
  return normalize_adjacency(g);
}

// Binary adjacency plus (1 + eps) self weight, the GIN aggregation operator.
inline SparseMatrix gin_aggregation(const Graph& g, double eps = 0.0) {
  std::vector<std::size_t> r, c;
  std::vector<double> w;
  for (std::size_t i = 0; i < g.node_count; ++i) {
    r.push_back(i);
    c.push_back(i);
    w.push_back(1.0 + eps);
  }
  for (const auto& [u, v] : g.edges) {
    r.push_back(u);
    c.push_back(v);
    w.push_back(1.0);
    r.push_back(v);
    c.push_back(u);
    w.push_back(1.0);
  }
  return SparseMatrix::from_triplets(g.node_count, g.node_count, std::move(r), std::move(c),
                                     std::move(w));
}

namespace detail {

// Reads all lines of `path` or `path + ".gz"`; zlib handles both compressed
// and plain content transparently.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::string actual = path;
  if (!std::filesystem::exists(actual)) {
    if (std::filesystem::exists(actual + ".gz"))
      actual += ".gz";
    else
      throw std::runtime_error("missing input file: " + path);
  }
  gzFile f = gzopen(actual.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open: " + actual);
  std::vector<std::string> lines;
  std::string current;
  char buf[1 << 16];
  int got;
  while ((got = gzread(f, buf, sizeof(buf))) > 0) {
    for (int i = 0; i < got; ++i) {
      if (buf[i] == '\n') {
        if (!current.empty() && current.back() == '\r') current.pop_back();
        lines.push_back(std::move(current));
        current.clear();
      } else {
        current.push_back(buf[i]);
      }
    }
  }
  gzclose(f);
  if (!current.empty()) lines.push_back(std::move(current));
  return lines;
}

inline std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  for (std::string& s : out) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
  }
  return out;
}

inline long parse_long(const std::string& s, const std::string& file, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(file + ":" + std::to_string(line_no) + ": bad integer '" + s + "'");
  }
}

inline double parse_double(const std::string& s, const std::string& file, std::size_t line_no) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw std::runtime_error(file + ":" + std::to_string(line_no) + ": bad number '" + s + "'");
  }
}

}  // namespace detail

// One-hot degree features capped at `cap` (dimension cap + 1).
inline void degree_onehot(GraphSet& gs, std::size_t cap) {
  if (cap < 1) throw std::invalid_argument("degree_onehot: cap must be >= 1");
  for (Graph& g : gs.graphs) {
    g.features = Matrix(g.node_count, cap + 1);
    const auto deg = g.degrees();
    for (std::size_t i = 0; i < g.node_count; ++i)
      g.features(i, std::min(deg[i], cap)) = 1.0;
  }
  gs.feature_dim = cap + 1;
}

// TUDataset format loader. Expects `<name>_A.txt`, `<name>_graph_indicator.txt`,
// `<name>_graph_labels.txt` and optionally `<name>_node_labels.txt` /
// `<name>_node_attributes.txt` under `directory` (optionally gzipped).
inline GraphSet load_tu_dataset(const std::string& directory, const std::string& name) {
  namespace fs = std::filesystem;
  const std::string base = (fs::path(directory) / name).string() + "_";

  const auto indicator = detail::read_lines(base + "graph_indicator.txt");
  const auto graph_labels = detail::read_lines(base + "graph_labels.txt");

  GraphSet gs;
  gs.graphs.resize(graph_labels.size());

  // node id (1-based, global) -> (graph index, local index)
  std::vector<std::pair<std::size_t, std::size_t>> node_of(indicator.size());
  for (std::size_t i = 0; i < indicator.size(); ++i) {
    if (indicator[i].empty())
      throw std::runtime_error(base + "graph_indicator.txt:" + std::to_string(i + 1) +
                               ": empty line");
    const long gid = detail::parse_long(indicator[i], base + "graph_indicator.txt", i + 1);
    if (gid < 1 || static_cast<std::size_t>(gid) > gs.graphs.size())
      throw std::runtime_error(base + "graph_indicator.txt:" + std::to_string(i + 1) +
                               ": graph id out of range");
    Graph& g = gs.graphs[gid - 1];
    node_of[i] = {static_cast<std::size_t>(gid - 1), g.node_count};
    ++g.node_count;
  }

  // graph labels, remapped to contiguous zero-based ids
  std::map<long, int> label_map;
  for (std::size_t i = 0; i < graph_labels.size(); ++i)
    label_map.emplace(detail::parse_long(graph_labels[i], base + "graph_labels.txt", i + 1), 0);
  int next = 0;
  for (auto& [raw, id] : label_map) id = next++;
  for (std::size_t i = 0; i < graph_labels.size(); ++i)
    gs.graphs[i].label =
        label_map.at(detail::parse_long(graph_labels[i], base + "graph_labels.txt", i + 1));
  gs.class_count = label_map.size();

  // edges
  std::size_t duplicate_edges = 0;
  const auto edge_lines = detail::read_lines(base + "A.txt");
  for (std::size_t i = 0; i < edge_lines.size(); ++i) {
    if (edge_lines[i].empty()) continue;
    const auto fields = detail::split_fields(edge_lines[i], ',');
    if (fields.size() != 2)
      throw std::runtime_error(base + "A.txt:" + std::to_string(i + 1) + ": expected 'u, v'");
    const long u = detail::parse_long(fields[0], base + "A.txt", i + 1);
    const long v = detail::parse_long(fields[1], base + "A.txt", i + 1);
    if (u < 1 || v < 1 || static_cast<std::size_t>(u) > node_of.size() ||
        static_cast<std::size_t>(v) > node_of.size())
      throw std::runtime_error(base + "A.txt:" + std::to_string(i + 1) + ": node id out of range");
    const auto [gu, lu] = node_of[u - 1];
    const auto [gv, lv] = node_of[v - 1];
    if (gu != gv)
      throw std::runtime_error(base + "A.txt:" + std::to_string(i + 1) +
                               ": edge crosses graph boundary");
    gs.graphs[gu].add_edge(lu, lv);
  }
  for (Graph& g : gs.graphs) {
    const std::size_t before = g.edges.size();
    g.dedupe_edges();
    duplicate_edges += before - g.edges.size();
  }
  (void)duplicate_edges;

  // features: concat(one-hot node labels, attributes) when both exist
  std::vector<std::vector<double>> label_onehot(node_of.size());
  std::size_t label_dim = 0;
  if (fs::exists(base + "node_labels.txt") || fs::exists(base + "node_labels.txt.gz")) {
    const auto lines = detail::read_lines(base + "node_labels.txt");
    if (lines.size() != node_of.size())
      throw std::runtime_error(base + "node_labels.txt: ragged file (node count mismatch)");
    std::map<long, int> nl_map;
    std::vector<long> raw(lines.size());
    for (std::size_t i = 0; i < lines.size(); ++i) {
      raw[i] = detail::parse_long(lines[i], base + "node_labels.txt", i + 1);
      nl_map.emplace(raw[i], 0);
    }
    int id = 0;
    for (auto& [k, v] : nl_map) v = id++;
    label_dim = nl_map.size();
    for (std::size_t i = 0; i < lines.size(); ++i) {
      label_onehot[i].assign(label_dim, 0.0);
      label_onehot[i][nl_map.at(raw[i])] = 1.0;
    }
  }
  std::vector<std::vector<double>> attrs(node_of.size());
  std::size_t attr_dim = 0;
  if (fs::exists(base + "node_attributes.txt") || fs::exists(base + "node_attributes.txt.gz")) {
    const auto lines = detail::read_lines(base + "node_attributes.txt");
    if (lines.size() != node_of.size())
      throw std::runtime_error(base + "node_attributes.txt: ragged file (node count mismatch)");
    for (std::size_t i = 0; i < lines.size(); ++i) {
      for (const std::string& s : detail::split_fields(lines[i], ','))
        attrs[i].push_back(detail::parse_double(s, base + "node_attributes.txt", i + 1));
      if (attr_dim == 0)
        attr_dim = attrs[i].size();
      else if (attrs[i].size() != attr_dim)
        throw std::runtime_error(base + "node_attributes.txt:" + std::to_string(i + 1) +
                                 ": ragged attribute row");
    }
  }

  gs.feature_dim = label_dim + attr_dim;
  if (gs.feature_dim > 0) {
    for (Graph& g : gs.graphs) g.features = Matrix(g.node_count, gs.feature_dim);
    for (std::size_t i = 0; i < node_of.size(); ++i) {
      const auto [gi, li] = node_of[i];
      Matrix& x = gs.graphs[gi].features;
      for (std::size_t j = 0; j < label_dim; ++j) x(li, j) = label_onehot[i][j];
      for (std::size_t j = 0; j < attr_dim; ++j) x(li, label_dim + j) = attrs[i][j];
    }
  } else {
    // feature-less dataset: one-hot degrees capped at the observed maximum
    std::size_t max_deg = 1;
    for (const Graph& g : gs.graphs)
      for (std::size_t d : g.degrees()) max_deg = std::max(max_deg, d);
    degree_onehot(gs, max_deg);
  }
  return gs;
}

// Citation-network loader (tab-separated `.content` / `.cites`). Returns a
// single graph carrying per-node labels; unknown ids in the cites file are
// skipped and counted into `skipped_citations` when provided.
inline Graph load_citation(const std::string& content_file, const std::string& cites_file,
                           std::size_t* skipped_citations = nullptr,
                           bool row_normalize = false) {
  const auto content = detail::read_lines(content_file);
  Graph g;
  std::unordered_map<std::string, std::size_t> id_of;
  std::vector<std::vector<double>> feats;
  std::vector<std::string> raw_labels;
  for (std::size_t i = 0; i < content.size(); ++i) {
    if (content[i].empty()) continue;
    auto fields = detail::split_fields(content[i], '\t');
    if (fields.size() < 3)
      throw std::runtime_error(content_file + ":" + std::to_string(i + 1) +
                               ": expected id, features, label");
    if (!id_of.emplace(fields[0], feats.size()).second)
      throw std::runtime_error(content_file + ":" + std::to_string(i + 1) +
                               ": duplicate node id '" + fields[0] + "'");
    std::vector<double> row;
    row.reserve(fields.size() - 2);
    for (std::size_t j = 1; j + 1 < fields.size(); ++j)
      row.push_back(detail::parse_double(fields[j], content_file, i + 1));
    if (row.empty())
      throw std::runtime_error(content_file + ":" + std::to_string(i + 1) +
                               ": empty feature row");
    feats.push_back(std::move(row));
    raw_labels.push_back(fields.back());
  }
  if (feats.empty()) throw std::runtime_error(content_file + ": no nodes");
  const std::size_t d = feats[0].size();
  for (std::size_t i = 0; i < feats.size(); ++i)
    if (feats[i].size() != d)
      throw std::runtime_error(content_file + ": ragged feature rows");

  g.node_count = feats.size();
  g.features = Matrix(g.node_count, d);
  for (std::size_t i = 0; i < feats.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) g.features(i, j) = feats[i][j];
  if (row_normalize) {
    for (std::size_t i = 0; i < g.node_count; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += g.features(i, j);
      if (s > 0.0)
        for (std::size_t j = 0; j < d; ++j) g.features(i, j) /= s;
    }
  }

  std::map<std::string, int> lab_map;
  for (const std::string& s : raw_labels) lab_map.emplace(s, 0);
  int id = 0;
  for (auto& [k, v] : lab_map) v = id++;
  g.node_labels.resize(g.node_count);
  for (std::size_t i = 0; i < g.node_count; ++i) g.node_labels[i] = lab_map.at(raw_labels[i]);

  std::size_t skipped = 0;
  const auto cites = detail::read_lines(cites_file);
  for (std::size_t i = 0; i < cites.size(); ++i) {
    if (cites[i].empty()) continue;
    const auto fields = detail::split_fields(cites[i], '\t');
    if (fields.size() != 2)
      throw std::runtime_error(cites_file + ":" + std::to_string(i + 1) +
                               ": expected 'cited<TAB>citing'");
    const auto a = id_of.find(fields[0]);
    const auto b = id_of.find(fields[1]);
    if (a == id_of.end() || b == id_of.end()) {
      ++skipped;
      continue;
    }
    g.add_edge(a->second, b->second);
  }
  g.dedupe_edges();
  if (skipped_citations) *skipped_citations = skipped;
  return g;
}

// Stratified train/val/test assignment, deterministic in the seed.
inline void split_graphs(GraphSet& gs, double train_frac, double val_frac, double test_frac,
                         std::uint64_t seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1");
  gs.split.assign(gs.graphs.size(), Split::kTrain);
  std::vector<std::vector<std::size_t>> by_class(gs.class_count);
  for (std::size_t i = 0; i < gs.graphs.size(); ++i) by_class[gs.graphs[i].label].push_back(i);

  RngStream rng(seed, /*stream=*/0xA11);
  for (auto& members : by_class)
    for (std::size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[rng.below(i)]);

  // Global split sizes, apportioned to classes by largest remainder so the
  // totals hit the requested fractions while staying stratified.
  const std::size_t total = gs.graphs.size();
  const auto apportion = [&](double frac, std::size_t global, bool reverse_ties) {
    std::vector<std::size_t> quota(by_class.size());
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t used = 0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      const double exact = frac * static_cast<double>(by_class[c].size());
      quota[c] = static_cast<std::size_t>(exact);
      used += quota[c];
      const double tie = reverse_ties ? static_cast<double>(by_class.size() - c) * 1e-12
                                      : static_cast<double>(c) * -1e-12;
      rema.emplace_back(exact - static_cast<double>(quota[c]) + tie, c);
    }
    std::stable_sort(rema.rbegin(), rema.rend());
    for (std::size_t i = 0; used < global && i < rema.size(); ++i) {
      const std::size_t c = rema[i].second;
      if (quota[c] < by_class[c].size()) {
        ++quota[c];
        ++used;
      }
    }
    return quota;
  };
  const std::size_t n_test = static_cast<std::size_t>(std::llround(test_frac * total));
  const std::size_t n_val = static_cast<std::size_t>(std::llround(val_frac * total));
  const auto test_quota = apportion(test_frac, n_test, false);
  const auto val_quota = apportion(val_frac, n_val, true);

  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto& members = by_class[c];
    std::size_t te = test_quota[c];
    std::size_t va = std::min(val_quota[c], members.size() - std::min(te, members.size()));
    te = std::min(te, members.size());
    for (std::size_t i = 0; i < members.size(); ++i) {
      if (i < te)
        gs.split[members[i]] = Split::kTest;
      else if (i < te + va)
        gs.split[members[i]] = Split::kVal;
      else
        gs.split[members[i]] = Split::kTrain;
    }
  }
}

// Partitions undirected edges into train/val/test positives and samples an
// equal count of true non-edges per split, without replacement.
inline EdgeSplit split_edges(const Graph& g, double train_frac, double val_frac,
                             double test_frac, std::uint64_t seed) {
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
    throw std::invalid_argument("split fractions must sum to 1");
  if (g.edges.size() < 10) throw std::invalid_argument("split_edges: graph has < 10 edges");

  std::vector<std::pair<std::size_t, std::size_t>> edges = g.edges;
  RngStream rng(seed, /*stream=*/0xED6E);
  for (std::size_t i = edges.size(); i > 1; --i)
    std::swap(edges[i - 1], edges[rng.below(i)]);

  const std::size_t e = edges.size();
  const std::size_t n_val = static_cast<std::size_t>(std::llround(val_frac * e));
  const std::size_t n_test = static_cast<std::size_t>(std::llround(test_frac * e));
  if (n_val + n_test >= e) throw std::invalid_argument("split_edges: fractions leave no train");

  EdgeSplit out;
  out.val_pos.assign(edges.begin(), edges.begin() + n_val);
  out.test_pos.assign(edges.begin() + n_val, edges.begin() + n_val + n_test);
  out.train_pos.assign(edges.begin() + n_val + n_test, edges.end());

  // negatives: uniform over non-edges, no replacement, shared across splits
  std::set<std::pair<std::size_t, std::size_t>> edge_set(g.edges.begin(), g.edges.end());
  std::set<std::pair<std::size_t, std::size_t>> taken;
  const std::size_t n = g.node_count;
  const std::size_t possible = n * (n - 1) / 2;
  if (possible < 2 * e)
    throw std::runtime_error("split_edges: graph too dense to sample negatives");
  auto sample_negatives = [&](std::size_t count) {
    std::vector<std::pair<std::size_t, std::size_t>> neg;
    std::size_t guard = 0;
    while (neg.size() < count) {
      if (++guard > 1000 * count + 100000)
        throw std::runtime_error("split_edges: negative sampling stalled (graph too dense)");
      std::size_t u = rng.below(n), v = rng.below(n);
      if (u == v) continue;
      if (u > v) std::swap(u, v);
      const std::pair<std::size_t, std::size_t> p{u, v};
      if (edge_set.count(p) || taken.count(p)) continue;
      taken.insert(p);
      neg.push_back(p);
    }
    return neg;
  };
  out.train_neg = sample_negatives(out.train_pos.size());
  out.val_neg = sample_negatives(out.val_pos.size());
  out.test_neg = sample_negatives(out.test_pos.size());
  return out;
}

}  // namespace egg

#endif  // EGG_GRAPH_HPP
