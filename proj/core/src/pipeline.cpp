#include "modprobe/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "modprobe/cluster.hpp"
#include "modprobe/corrvis.hpp"
#include "modprobe/errors.hpp"
#include "modprobe/featvis.hpp"
#include "modprobe/lesion.hpp"
#include "modprobe/model.hpp"
#include "modprobe/rng.hpp"
#include "modprobe/trainer.hpp"

namespace modprobe {

namespace fs = std::filesystem;

namespace {

constexpr int kRandomSubclusters = 19;

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string shortest_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

int parse_int(const std::string& key, const std::string& value) {
  int v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw InvalidArgument("config: bad integer for " + key + ": '" + value + "'");
  return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size())
    throw InvalidArgument("config: bad unsigned integer for " + key + ": '" + value + "'");
  return v;
}

double parse_real(const std::string& key, const std::string& value) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || p != value.data() + value.size() || !std::isfinite(v))
    throw InvalidArgument("config: bad number for " + key + ": '" + value + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw InvalidArgument("config: bad boolean for " + key + ": '" + value + "'");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : value) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string join(const std::vector<std::string>& parts) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "," : "") + parts[i];
  return out;
}

// ---- layout -----------------------------------------------------------------

std::vector<int> k_list(const RunConfig& cfg) {
  return cfg.k_sweep.empty() ? std::vector<int>{cfg.k} : cfg.k_sweep;
}

fs::path out_root(const RunConfig& cfg) { return fs::path(cfg.out); }

fs::path model_file(const RunConfig& cfg, int r) {
  return out_root(cfg) / "models" / ("net" + std::to_string(r) + ".nnmod");
}

// Graphs are k-independent and live directly under out/net<r>/.
fs::path graph_dir(const RunConfig& cfg, int r) {
  return out_root(cfg) / ("net" + std::to_string(r));
}

fs::path graph_file(const RunConfig& cfg, int r, GraphBasis basis) {
  return graph_dir(cfg, r) / ("graph_" + basis_name(basis) + "-global.txt");
}

fs::path analysis_root(const RunConfig& cfg, int k) {
  return cfg.k_sweep.empty() ? out_root(cfg)
                             : out_root(cfg) / ("k" + std::to_string(k));
}

fs::path analysis_net_dir(const RunConfig& cfg, int k, int r) {
  return analysis_root(cfg, k) / ("net" + std::to_string(r));
}

fs::path partition_file(const RunConfig& cfg, int k, int r, const std::string& method) {
  return analysis_net_dir(cfg, k, r) / ("partition_" + method + ".txt");
}

fs::path stats_dir(const RunConfig& cfg, int k) { return analysis_root(cfg, k) / "stats"; }

std::string artifact_header(const RunConfig& cfg, const std::string& stage) {
  return "modprobe " + stage + " config=" + config_hash(cfg) +
         " seed=" + std::to_string(cfg.seed);
}

void write_text_file(const fs::path& path, const std::string& body) {
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!f) throw FormatError("short write: " + path.string());
}

void write_config_resolved(const RunConfig& cfg) {
  fs::create_directories(out_root(cfg));
  write_text_file(out_root(cfg) / "config.resolved",
                  "# config=" + config_hash(cfg) + "\n" + serialize_config(cfg));
}

fs::path incomplete_marker(const RunConfig& cfg) { return out_root(cfg) / "INCOMPLETE"; }

// Stage wrapper: keeps the INCOMPLETE marker while work is in flight so an
// abort leaves the partial outputs flagged, and prefixes errors with the
// stage name.
template <typename Fn>
void stage(const RunConfig& cfg, const std::string& name, Fn&& fn) {
  write_config_resolved(cfg);
  write_text_file(incomplete_marker(cfg),
                  "stage " + name + " config=" + config_hash(cfg) + "\n");
  const auto t0 = std::chrono::steady_clock::now();
  try {
    fn();
  } catch (const std::exception& e) {
    throw std::runtime_error("stage " + name + " failed: " + e.what());
  }
  fs::remove(incomplete_marker(cfg));
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "[" << name << "] done in " << std::fixed << std::setprecision(1) << secs
            << "s\n"
            << std::defaultfloat << std::flush;
}

ComputeOptions compute_options(const RunConfig& cfg) {
  ComputeOptions opts;
  opts.conv_gemm_f32 = cfg.conv_gemm_f32;
  return opts;
}

LabeledDataset take_prefix(const LabeledDataset& data, std::size_t n) {
  LabeledDataset out = data;
  n = std::min(n, data.size());
  out.images.resize(n * data.example_floats());
  out.labels.resize(n);
  return out;
}

NetworkModel load_model_checked(const RunConfig& cfg, int r) {
  const fs::path path = model_file(cfg, r);
  if (!fs::exists(path))
    throw InvalidArgument("missing model file " + path.string() +
                          " (run the train stage first)");
  return load_model(path);
}

Partitioning load_partition_checked(const RunConfig& cfg, int k, int r,
                                    const std::string& method) {
  const fs::path path = partition_file(cfg, k, r, method);
  if (!fs::exists(path))
    throw InvalidArgument("missing partition " + path.string() +
                          " (run the cluster stage first)");
  return load_partition(path);
}

std::map<int, int> layer_width_map(const Partitioning& part) {
  std::map<int, int> width;
  for (const NodeId& id : part.nodes) width[id.layer] += 1;
  return width;
}

std::vector<Metric> wanted_metrics(const RunConfig& cfg,
                                   std::initializer_list<Metric> universe) {
  std::vector<Metric> out;
  for (Metric m : universe)
    if (std::find(cfg.metrics.begin(), cfg.metrics.end(), m) != cfg.metrics.end())
      out.push_back(m);
  return out;
}

// True subcluster first, then its 19 seeded random stand-ins. The seed
// depends only on (config seed, k, replicate, method, subcluster index), so
// lesion / featvis / corrvis score the same random sets.
std::vector<Subcluster> masks_for(const RunConfig& cfg, int k, int r,
                                  const std::string& method, const Subcluster& sub,
                                  int sub_idx, int layer_width) {
  std::vector<Subcluster> masks{sub};
  const std::uint64_t seed =
      derive_seed(cfg.seed, fnv1a64("randsets"), static_cast<std::uint64_t>(k),
                  static_cast<std::uint64_t>(r), fnv1a64(method),
                  static_cast<std::uint64_t>(sub_idx));
  std::vector<Subcluster> random =
      sample_random_subclusters(sub, layer_width, kRandomSubclusters, seed);
  masks.insert(masks.end(), random.begin(), random.end());
  return masks;
}

}  // namespace

// ---- config ------------------------------------------------------------------

Method parse_method(const std::string& name) {
  if (name == "weights-global") return {GraphBasis::weights, false};
  if (name == "weights-local") return {GraphBasis::weights, true};
  if (name == "activations-global") return {GraphBasis::activations, false};
  if (name == "activations-local") return {GraphBasis::activations, true};
  throw InvalidArgument(
      "unknown method '" + name +
      "' (expected weights|activations crossed with global|local, e.g. weights-global)");
}

std::string basis_name(GraphBasis basis) {
  return basis == GraphBasis::weights ? "weights" : "activations";
}

void apply_config_override(RunConfig& cfg, const std::string& key,
                           const std::string& value) {
  if (key == "dataset") cfg.dataset = value;
  else if (key == "mnist_dir") cfg.mnist_dir = value;
  else if (key == "arch") cfg.arch = value;
  else if (key == "replicates") cfg.replicates = parse_int(key, value);
  else if (key == "k") cfg.k = parse_int(key, value);
  else if (key == "k_sweep") {
    cfg.k_sweep.clear();
    for (const std::string& v : split_list(value)) cfg.k_sweep.push_back(parse_int(key, v));
  } else if (key == "methods") {
    cfg.methods = split_list(value);
  } else if (key == "metrics") {
    cfg.metrics.clear();
    for (const std::string& v : split_list(value)) cfg.metrics.push_back(parse_metric(v));
  } else if (key == "seed") cfg.seed = parse_u64(key, value);
  else if (key == "out") cfg.out = value;
  else if (key == "workers") cfg.workers = parse_int(key, value);
  else if (key == "val_fraction") cfg.val_fraction = parse_real(key, value);
  else if (key == "vis_steps") cfg.vis_steps = parse_int(key, value);
  else if (key == "epochs") cfg.epochs = parse_int(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "learning_rate") cfg.learning_rate = parse_real(key, value);
  else if (key == "conv_gemm_f32") cfg.conv_gemm_f32 = parse_bool(key, value);
  else if (key == "alpha") cfg.alpha = parse_real(key, value);
  else throw InvalidArgument("config: unknown key '" + key + "'");
}

RunConfig load_config_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InvalidArgument("cannot open config file: " + path.string());
  RunConfig cfg;
  std::string line;
  int line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string stripped = strip(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config " + path.string() + ":" + std::to_string(line_no) +
                            ": expected key=value");
    apply_config_override(cfg, strip(stripped.substr(0, eq)),
                          strip(stripped.substr(eq + 1)));
  }
  return cfg;
}

void resolve_config(RunConfig& cfg) {
  const TrainConfig defaults = default_train_config(cfg.arch);
  if (cfg.epochs == 0) cfg.epochs = defaults.epochs;
  if (cfg.batch_size == 0) cfg.batch_size = defaults.batch_size;
  if (cfg.workers == 0) {
    if (const char* env = std::getenv("MODPROBE_WORKERS"))
      cfg.workers = parse_int("MODPROBE_WORKERS", env);
    else
      cfg.workers = 1;
  }
}

void validate_config(const RunConfig& cfg) {
  detail::require(cfg.dataset == "mnist" || cfg.dataset == "halves",
                  "config: dataset must be mnist or halves");
  default_train_config(cfg.arch);  // throws on unknown architecture
  detail::require(cfg.replicates >= 1, "config: replicates must be >= 1");
  detail::require(cfg.replicates <= 25,
                  "config: replicates beyond the Bates table (max 25)");
  detail::require(cfg.k >= 2, "config: k must be >= 2");
  for (int k : cfg.k_sweep) detail::require(k >= 2, "config: k_sweep values must be >= 2");
  detail::require(!cfg.methods.empty(), "config: at least one method required");
  for (const std::string& m : cfg.methods) parse_method(m);
  detail::require(!cfg.metrics.empty(), "config: at least one metric required");
  detail::require(cfg.workers >= 1, "config: workers must be >= 1");
  detail::require(cfg.val_fraction > 0.0 && cfg.val_fraction < 1.0,
                  "config: val_fraction must be in (0,1)");
  detail::require(cfg.vis_steps >= 1, "config: vis_steps must be >= 1");
  detail::require(cfg.epochs >= 1, "config: epochs must be >= 1");
  detail::require(cfg.batch_size >= 1, "config: batch_size must be >= 1");
  detail::require(cfg.learning_rate > 0.0, "config: learning_rate must be positive");
  detail::require(cfg.alpha > 0.0 && cfg.alpha < 1.0, "config: alpha must be in (0,1)");
}

std::string serialize_config(const RunConfig& cfg) {
  std::vector<std::string> k_sweep;
  for (int k : cfg.k_sweep) k_sweep.push_back(std::to_string(k));
  std::vector<std::string> metrics;
  for (Metric m : cfg.metrics) metrics.push_back(metric_name(m));
  std::string out;
  out += "alpha=" + shortest_double(cfg.alpha) + "\n";
  out += "arch=" + cfg.arch + "\n";
  out += "batch_size=" + std::to_string(cfg.batch_size) + "\n";
  out += "conv_gemm_f32=" + std::string(cfg.conv_gemm_f32 ? "true" : "false") + "\n";
  out += "dataset=" + cfg.dataset + "\n";
  out += "epochs=" + std::to_string(cfg.epochs) + "\n";
  out += "k=" + std::to_string(cfg.k) + "\n";
  out += "k_sweep=" + join(k_sweep) + "\n";
  out += "learning_rate=" + shortest_double(cfg.learning_rate) + "\n";
  out += "methods=" + join(cfg.methods) + "\n";
  out += "metrics=" + join(metrics) + "\n";
  out += "mnist_dir=" + cfg.mnist_dir + "\n";
  out += "out=" + cfg.out + "\n";
  out += "replicates=" + std::to_string(cfg.replicates) + "\n";
  out += "seed=" + std::to_string(cfg.seed) + "\n";
  out += "val_fraction=" + shortest_double(cfg.val_fraction) + "\n";
  out += "vis_steps=" + std::to_string(cfg.vis_steps) + "\n";
  out += "workers=" + std::to_string(cfg.workers) + "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  // Execution details that cannot change results stay out of the hash.
  RunConfig canon = cfg;
  canon.out = "";
  canon.workers = 1;
  const std::uint64_t h = fnv1a64(serialize_config(canon));
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf, 16);
}

// ---- data --------------------------------------------------------------------

namespace {

fs::path find_idx(const fs::path& dir, const std::string& stem) {
  for (const std::string& name : {stem, stem + ".gz"}) {
    const fs::path p = dir / name;
    if (fs::exists(p)) return p;
  }
  throw InvalidArgument("missing dataset file " + (dir / stem).string() + "[.gz]");
}

}  // namespace

void preflight_dataset(const RunConfig& cfg) {
  const fs::path dir(cfg.mnist_dir);
  for (const char* stem : {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                           "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"})
    find_idx(dir, stem);
}

PipelineData load_pipeline_data(const RunConfig& cfg) {
  const fs::path dir(cfg.mnist_dir);
  LabeledDataset base_train = load_idx_pair(find_idx(dir, "train-images-idx3-ubyte"),
                                            find_idx(dir, "train-labels-idx1-ubyte"));
  LabeledDataset base_test = load_idx_pair(find_idx(dir, "t10k-images-idx3-ubyte"),
                                           find_idx(dir, "t10k-labels-idx1-ubyte"));
  if (cfg.dataset == "halves") {
    base_train = make_halves_dataset(base_train, derive_seed(cfg.seed, fnv1a64("halves"), 0));
    base_test = make_halves_dataset(base_test, derive_seed(cfg.seed, fnv1a64("halves"), 1));
  }
  std::vector<LabeledDataset> parts =
      split_dataset(base_train, {1.0 - cfg.val_fraction, cfg.val_fraction},
                    {"train", "validation"}, derive_seed(cfg.seed, fnv1a64("split")));
  PipelineData data;
  data.train = std::move(parts[0]);
  data.validation = std::move(parts[1]);
  data.test = std::move(base_test);
  data.test.split_tag = "test";
  return data;
}

// ---- worker pool ---------------------------------------------------------------

void parallel_for(int tasks, int workers, const std::function<void(int)>& fn) {
  detail::require(tasks >= 0, "parallel_for: negative task count");
  detail::require(workers >= 1, "parallel_for: worker count must be >= 1");
  if (tasks == 0) return;
  if (workers == 1 || tasks == 1) {
    for (int t = 0; t < tasks; ++t) fn(t);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  const int n_threads = std::min(workers, tasks);
  pool.reserve(n_threads);
  for (int w = 0; w < n_threads; ++w) {
    pool.emplace_back([&] {
      while (true) {
        const int t = next.fetch_add(1);
        if (t >= tasks) return;
        try {
          fn(t);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          next.store(tasks);  // drain remaining work
          return;
        }
      }
    });
  }
  for (std::thread& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

// ---- stages --------------------------------------------------------------------

void run_train(const RunConfig& cfg) {
  stage(cfg, "train", [&] {
    const PipelineData data = load_pipeline_data(cfg);
    fs::create_directories(out_root(cfg) / "models");
    const bool conv = cfg.arch.rfind("cnn", 0) == 0;
    // Conv per-epoch eval is expensive; log against a fixed test prefix and
    // leave full-test evaluation to the analysis stages.
    const LabeledDataset eval_set =
        conv ? take_prefix(data.test, 2000) : data.test;

    for (int r = 0; r < cfg.replicates; ++r) {
      const std::uint64_t net_seed = cfg.seed + static_cast<std::uint64_t>(r);
      ArchitectureSpec arch;
      arch.name = cfg.arch;
      arch.input = InputShape{data.train.height, data.train.width, data.train.channels};
      arch.class_count = data.train.class_count;
      NetworkModel model = init_params(arch, net_seed);

      TrainConfig tc = default_train_config(cfg.arch);
      tc.epochs = cfg.epochs;
      tc.batch_size = cfg.batch_size;
      tc.learning_rate = cfg.learning_rate;
      tc.seed = net_seed;
      tc.compute = compute_options(cfg);

      std::cout << "[train] net " << r << " (" << cfg.arch << ", seed " << net_seed
                << ", " << tc.epochs << " epochs)\n"
                << std::flush;
      const TrainResult result =
          train(model, data.train, tc, &eval_set, [&](const EpochLog& log) {
            std::cout << "[train] net " << r << " epoch " << log.epoch << "/"
                      << tc.epochs << " loss=" << log.train_loss
                      << " acc=" << log.train_accuracy << " eval=" << log.eval_accuracy
                      << "\n"
                      << std::flush;
          });

      save_model(model, model_file(cfg, r));
      write_text_file(model_file(cfg, r).replace_extension(".meta"),
                      artifact_header(cfg, "train") + " net=" + std::to_string(r) +
                          " net_seed=" + std::to_string(net_seed) + "\n");
      save_train_log(result,
                     out_root(cfg) / "models" / ("net" + std::to_string(r) + ".train.csv"),
                     artifact_header(cfg, "train") + " net=" + std::to_string(r));
    }
  });
}

void run_graphify(const RunConfig& cfg) {
  stage(cfg, "graphify", [&] {
    bool need_weights = false, need_acts = false;
    for (const std::string& m : cfg.methods) {
      const Method method = parse_method(m);
      (method.basis == GraphBasis::weights ? need_weights : need_acts) = true;
    }
    // Weight graphs are pure functions of the parameters; only activation
    // graphs need the validation split.
    PipelineData data;
    if (need_acts) data = load_pipeline_data(cfg);

    for (int r = 0; r < cfg.replicates; ++r) {
      const NetworkModel model = load_model_checked(cfg, r);
      fs::create_directories(graph_dir(cfg, r));
      if (need_weights) {
        const NeuronGraph g = weight_graph(model);
        save_graph(g, graph_file(cfg, r, GraphBasis::weights),
                   "config " + config_hash(cfg) + " seed " + std::to_string(cfg.seed));
        std::cout << "[graphify] net " << r << " weights-global: " << g.node_count()
                  << " nodes, " << g.edge_count() << " edges\n"
                  << std::flush;
      }
      if (need_acts) {
        const NeuronGraph g = activation_graph(model, data.validation);
        save_graph(g, graph_file(cfg, r, GraphBasis::activations),
                   "config " + config_hash(cfg) + " seed " + std::to_string(cfg.seed));
        std::cout << "[graphify] net " << r << " activations-global: " << g.node_count()
                  << " nodes, " << g.edge_count() << " edges\n"
                  << std::flush;
      }
    }
  });
}

void run_cluster(const RunConfig& cfg) {
  stage(cfg, "cluster", [&] {
    bool any_local_acts = false;
    for (const std::string& m : cfg.methods) {
      const Method method = parse_method(m);
      if (method.local && method.basis == GraphBasis::activations) any_local_acts = true;
    }
    PipelineData data;
    if (any_local_acts) data = load_pipeline_data(cfg);

    for (const int k : k_list(cfg)) {
      for (int r = 0; r < cfg.replicates; ++r) {
        const NetworkModel model = load_model_checked(cfg, r);
        fs::create_directories(analysis_net_dir(cfg, k, r));

        // Global partitionings, one per basis in use (local methods align
        // their per-layer k against the same-basis global result).
        std::map<GraphBasis, Partitioning> global_parts;
        const auto global_for = [&](GraphBasis basis) -> const Partitioning& {
          auto it = global_parts.find(basis);
          if (it != global_parts.end()) return it->second;
          const fs::path gpath = graph_file(cfg, r, basis);
          if (!fs::exists(gpath))
            throw InvalidArgument("missing graph " + gpath.string() +
                                  " (run the graphify stage first)");
          const NeuronGraph g = load_graph(gpath);
          Partitioning part = spectral_cluster(
              g, k,
              derive_seed(cfg.seed, fnv1a64("cluster"), static_cast<std::uint64_t>(k),
                          static_cast<std::uint64_t>(r), fnv1a64(basis_name(g.basis))));
          return global_parts.emplace(basis, std::move(part)).first->second;
        };

        for (const std::string& name : cfg.methods) {
          const Method method = parse_method(name);
          Partitioning part;
          if (!method.local) {
            part = global_for(method.basis);
          } else {
            part = cluster_local(
                method.basis, model,
                method.basis == GraphBasis::activations ? &data.validation : nullptr,
                global_for(method.basis),
                derive_seed(cfg.seed, fnv1a64("cluster-local"),
                            static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(r),
                            fnv1a64(basis_name(method.basis))));
          }
          save_partition(part, partition_file(cfg, k, r, name),
                         "config " + config_hash(cfg) + " seed " + std::to_string(cfg.seed));
          std::cout << "[cluster] k=" << k << " net " << r << " " << name << ": k="
                    << part.k << " over " << part.node_count() << " nodes\n"
                    << std::flush;
        }
      }
    }
  });
}

void run_lesion(const RunConfig& cfg) {
  stage(cfg, "lesion", [&] {
    const std::vector<Metric> wanted =
        wanted_metrics(cfg, {Metric::acc_drop, Metric::class_range});
    if (wanted.empty()) {
      std::cout << "[lesion] no lesion metrics requested, skipping\n" << std::flush;
      return;
    }
    const PipelineData data = load_pipeline_data(cfg);
    const ComputeOptions opts = compute_options(cfg);

    for (const int k : k_list(cfg)) {
      for (int r = 0; r < cfg.replicates; ++r) {
        const NetworkModel model = load_model_checked(cfg, r);
        const ClassCounts baseline = evaluate_classes(model, data.test, opts);
        for (const std::string& method : cfg.methods) {
          const Partitioning part = load_partition_checked(cfg, k, r, method);
          const std::vector<Subcluster> subs = derive_subclusters(part);
          const std::map<int, int> widths = layer_width_map(part);

          std::vector<std::vector<Subcluster>> masks(subs.size());
          for (std::size_t i = 0; i < subs.size(); ++i)
            masks[i] = masks_for(cfg, k, r, method, subs[i], static_cast<int>(i),
                                 widths.at(subs[i].layer));

          std::vector<std::vector<LesionResult>> results(
              subs.size(), std::vector<LesionResult>(1 + kRandomSubclusters));
          const int per_sub = 1 + kRandomSubclusters;
          parallel_for(static_cast<int>(subs.size()) * per_sub, cfg.workers, [&](int t) {
            const int i = t / per_sub, m = t % per_sub;
            results[i][m] = lesion_measure(model, baseline, masks[i][m], data.test, opts);
          });

          std::vector<MeasurementRecord> records;
          for (std::size_t i = 0; i < subs.size(); ++i) {
            for (Metric metric : wanted) {
              const auto value_of = [&](const LesionResult& lr) {
                return metric == Metric::acc_drop ? lr.acc_drop : lr.class_range;
              };
              MeasurementRecord rec;
              rec.method = method;
              rec.network = r;
              rec.layer = subs[i].layer;
              rec.cluster_id = subs[i].cluster_id;
              rec.size = static_cast<int>(subs[i].neurons.size());
              rec.metric = metric;
              rec.value_true = value_of(results[i][0]);
              for (int m = 1; m < per_sub; ++m)
                rec.values_random.push_back(value_of(results[i][m]));
              records.push_back(std::move(rec));
            }
          }
          write_measurements(analysis_net_dir(cfg, k, r) / ("lesion_" + method + ".csv"),
                             records, artifact_header(cfg, "lesion"));
          std::cout << "[lesion] k=" << k << " net " << r << " " << method << ": "
                    << subs.size() << " subclusters\n"
                    << std::flush;
        }
      }
    }
  });
}

void run_featvis(const RunConfig& cfg) {
  stage(cfg, "featvis", [&] {
    const std::vector<Metric> wanted =
        wanted_metrics(cfg, {Metric::vis_score, Metric::softmax_entropy});
    if (wanted.empty()) {
      std::cout << "[featvis] no feature-visualization metrics requested, skipping\n"
                << std::flush;
      return;
    }
    const ComputeOptions opts = compute_options(cfg);

    for (const int k : k_list(cfg)) {
      for (int r = 0; r < cfg.replicates; ++r) {
        const NetworkModel model = load_model_checked(cfg, r);
        const std::vector<NeuronLayer> nls = neuron_layers(model);
        for (const std::string& method : cfg.methods) {
          const Partitioning part = load_partition_checked(cfg, k, r, method);
          const std::vector<Subcluster> all_subs = derive_subclusters(part);
          const std::map<int, int> widths = layer_width_map(part);

          // Input-layer subclusters have no incoming weights to maximize.
          std::vector<std::pair<int, Subcluster>> subs;
          for (std::size_t i = 0; i < all_subs.size(); ++i)
            if (nls[all_subs[i].layer].weight_layer >= 0)
              subs.emplace_back(static_cast<int>(i), all_subs[i]);

          std::vector<std::vector<Subcluster>> masks(subs.size());
          for (std::size_t i = 0; i < subs.size(); ++i)
            masks[i] = masks_for(cfg, k, r, method, subs[i].second, subs[i].first,
                                 widths.at(subs[i].second.layer));

          const int per_sub = 1 + kRandomSubclusters;
          std::vector<std::vector<FeatureVisualization>> results(
              subs.size(), std::vector<FeatureVisualization>(per_sub));
          parallel_for(static_cast<int>(subs.size()) * per_sub, cfg.workers, [&](int t) {
            const int i = t / per_sub, m = t % per_sub;
            const std::uint64_t vis_seed = derive_seed(
                cfg.seed, fnv1a64("featvis"), static_cast<std::uint64_t>(k),
                static_cast<std::uint64_t>(r), fnv1a64(method),
                static_cast<std::uint64_t>(subs[i].first), static_cast<std::uint64_t>(m));
            results[i][m] =
                visualize_subcluster(model, masks[i][m], cfg.vis_steps, vis_seed, opts);
          });

          std::vector<MeasurementRecord> records;
          for (std::size_t i = 0; i < subs.size(); ++i) {
            for (Metric metric : wanted) {
              const auto value_of = [&](const FeatureVisualization& fv) {
                return metric == Metric::vis_score ? fv.score : fv.softmax_entropy;
              };
              MeasurementRecord rec;
              rec.method = method;
              rec.network = r;
              rec.layer = subs[i].second.layer;
              rec.cluster_id = subs[i].second.cluster_id;
              rec.size = static_cast<int>(subs[i].second.neurons.size());
              rec.metric = metric;
              rec.value_true = value_of(results[i][0]);
              for (int m = 1; m < per_sub; ++m)
                rec.values_random.push_back(value_of(results[i][m]));
              records.push_back(std::move(rec));
            }
          }
          write_measurements(analysis_net_dir(cfg, k, r) / ("featvis_" + method + ".csv"),
                             records, artifact_header(cfg, "featvis"));

          // Optimized images of the true subclusters, plus an index CSV.
          if (model.input.channels == 1) {
            const fs::path img_dir =
                analysis_net_dir(cfg, k, r) / ("featvis_" + method);
            fs::create_directories(img_dir);
            std::string index = "# " + artifact_header(cfg, "featvis") + "\n";
            index += "layer,cluster,size,score,entropy,initial_score,image\n";
            for (std::size_t i = 0; i < subs.size(); ++i) {
              const FeatureVisualization& fv = results[i][0];
              const std::string img_name = "sub" + std::to_string(subs[i].first) + ".pgm";
              std::ostringstream comment;
              comment << "modprobe featvis method=" << method
                      << " layer=" << subs[i].second.layer
                      << " cluster=" << subs[i].second.cluster_id
                      << " score=" << fv.score << " entropy=" << fv.softmax_entropy
                      << " config=" << config_hash(cfg);
              save_pgm(img_dir / img_name, fv.image, model.input.height,
                       model.input.width, comment.str());
              index += std::to_string(subs[i].second.layer) + ',' +
                       std::to_string(subs[i].second.cluster_id) + ',' +
                       std::to_string(subs[i].second.neurons.size()) + ',' +
                       shortest_double(fv.score) + ',' +
                       shortest_double(fv.softmax_entropy) + ',' +
                       shortest_double(fv.initial_score) + ',' + img_name + '\n';
            }
            write_text_file(
                analysis_net_dir(cfg, k, r) / ("featvis_" + method + "_index.csv"), index);
          }
          std::cout << "[featvis] k=" << k << " net " << r << " " << method << ": "
                    << subs.size() << " subclusters\n"
                    << std::flush;
        }
      }
    }
  });
}

void run_corrvis(const RunConfig& cfg) {
  stage(cfg, "corrvis", [&] {
    if (std::find(cfg.metrics.begin(), cfg.metrics.end(), Metric::side_selectivity) ==
        cfg.metrics.end()) {
      std::cout << "[corrvis] side_selectivity not requested, skipping\n" << std::flush;
      return;
    }
    const PipelineData data = load_pipeline_data(cfg);

    for (const int k : k_list(cfg)) {
      for (int r = 0; r < cfg.replicates; ++r) {
        const NetworkModel model = load_model_checked(cfg, r);
        const std::vector<NeuronLayer> nls = neuron_layers(model);
        std::map<int, Matrix> maps_cache;  // layer -> per-neuron pixel maps
        const auto maps_for_layer = [&](int layer) -> const Matrix& {
          auto it = maps_cache.find(layer);
          if (it != maps_cache.end()) return it->second;
          return maps_cache.emplace(layer, layer_pixel_maps(model, data.test, layer))
              .first->second;
        };

        for (const std::string& method : cfg.methods) {
          const Partitioning part = load_partition_checked(cfg, k, r, method);
          const std::vector<Subcluster> all_subs = derive_subclusters(part);
          const std::map<int, int> widths = layer_width_map(part);

          std::vector<std::pair<int, Subcluster>> subs;
          for (std::size_t i = 0; i < all_subs.size(); ++i)
            if (nls[all_subs[i].layer].weight_layer >= 0)
              subs.emplace_back(static_cast<int>(i), all_subs[i]);
          for (const auto& [idx, sub] : subs) maps_for_layer(sub.layer);

          std::vector<std::vector<Subcluster>> masks(subs.size());
          for (std::size_t i = 0; i < subs.size(); ++i)
            masks[i] = masks_for(cfg, k, r, method, subs[i].second, subs[i].first,
                                 widths.at(subs[i].second.layer));

          const int per_sub = 1 + kRandomSubclusters;
          std::vector<std::vector<double>> selectivity(
              subs.size(), std::vector<double>(per_sub));
          std::vector<std::vector<double>> true_images(subs.size());
          parallel_for(static_cast<int>(subs.size()) * per_sub, cfg.workers, [&](int t) {
            const int i = t / per_sub, m = t % per_sub;
            const std::vector<double> img = cluster_visualization(
                maps_cache.at(masks[i][m].layer), masks[i][m]);
            selectivity[i][m] = side_selectivity(img, model.input.height,
                                                 model.input.width);
            if (m == 0) true_images[i] = img;
          });

          std::vector<MeasurementRecord> records;
          const fs::path img_dir = analysis_net_dir(cfg, k, r) / ("corrvis_" + method);
          fs::create_directories(img_dir);
          std::string index = "# " + artifact_header(cfg, "corrvis") + "\n";
          index += "layer,cluster,size,side_selectivity,image\n";
          for (std::size_t i = 0; i < subs.size(); ++i) {
            MeasurementRecord rec;
            rec.method = method;
            rec.network = r;
            rec.layer = subs[i].second.layer;
            rec.cluster_id = subs[i].second.cluster_id;
            rec.size = static_cast<int>(subs[i].second.neurons.size());
            rec.metric = Metric::side_selectivity;
            rec.value_true = selectivity[i][0];
            for (int m = 1; m < per_sub; ++m)
              rec.values_random.push_back(selectivity[i][m]);
            records.push_back(std::move(rec));

            const std::string img_name = "sub" + std::to_string(subs[i].first) + ".pgm";
            std::ostringstream comment;
            comment << "modprobe corrvis method=" << method
                    << " layer=" << subs[i].second.layer
                    << " cluster=" << subs[i].second.cluster_id
                    << " side_selectivity=" << selectivity[i][0]
                    << " config=" << config_hash(cfg);
            save_pgm(img_dir / img_name, true_images[i], model.input.height,
                     model.input.width, comment.str());
            index += std::to_string(subs[i].second.layer) + ',' +
                     std::to_string(subs[i].second.cluster_id) + ',' +
                     std::to_string(subs[i].second.neurons.size()) + ',' +
                     shortest_double(selectivity[i][0]) + ',' + img_name + '\n';
          }
          write_measurements(analysis_net_dir(cfg, k, r) / ("corrvis_" + method + ".csv"),
                             records, artifact_header(cfg, "corrvis"));
          write_text_file(
              analysis_net_dir(cfg, k, r) / ("corrvis_" + method + "_index.csv"), index);
          std::cout << "[corrvis] k=" << k << " net " << r << " " << method << ": "
                    << subs.size() << " subclusters\n"
                    << std::flush;
        }
      }
    }
  });
}

void run_stats(const RunConfig& cfg) {
  stage(cfg, "stats", [&] {
    for (const int k : k_list(cfg)) {
      std::vector<MeasurementRecord> records;
      bool any_file = false;
      for (int r = 0; r < cfg.replicates; ++r) {
        for (const std::string& method : cfg.methods) {
          for (const char* prefix : {"lesion_", "featvis_", "corrvis_"}) {
            const fs::path path =
                analysis_net_dir(cfg, k, r) / (prefix + method + ".csv");
            if (!fs::exists(path)) continue;
            any_file = true;
            std::vector<MeasurementRecord> part = read_measurements(path, r);
            records.insert(records.end(), std::make_move_iterator(part.begin()),
                           std::make_move_iterator(part.end()));
          }
        }
      }
      if (records.empty())
        throw InvalidArgument(
            any_file ? "measurement files under " + analysis_root(cfg, k).string() +
                           " contain no records (no subclusters survived at k=" +
                           std::to_string(k) + "; try another k)"
                     : "no measurement files found under " +
                           analysis_root(cfg, k).string() +
                           " (run the measurement stages first)");
      const StatsReport report = build_stats(records, cfg.alpha);
      fs::create_directories(stats_dir(cfg, k));
      save_report_json(report, stats_dir(cfg, k) / "report.json", config_hash(cfg),
                       cfg.seed);
      save_report_tables(report, stats_dir(cfg, k), artifact_header(cfg, "stats"));
      save_percentile_histograms(report, stats_dir(cfg, k),
                                 artifact_header(cfg, "stats"));
      std::cout << "[stats] k=" << k << ": " << report.cells.size() << " cells from "
                << records.size() << " records\n"
                << std::flush;
    }
  });
}

namespace {

std::string log10_label(double p) {
  if (p <= 0.0) return "-inf";
  return std::to_string(static_cast<long long>(std::llround(std::log10(p))));
}

}  // namespace

void run_report(const RunConfig& cfg) {
  stage(cfg, "report", [&] {
    bool any = false;
    std::ostringstream table;
    table << std::left << std::setw(4) << "k" << std::setw(22) << "method"
          << std::setw(18) << "metric" << std::setw(13) << "p" << std::setw(8)
          << "log10p" << std::setw(6) << "sig" << "effect\n";
    std::string csv = "# " + artifact_header(cfg, "report") + "\n";
    csv += "k,method,metric,corrected_p,log10_p,bh_significant,effect,se\n";

    for (const int k : k_list(cfg)) {
      const fs::path json_path = stats_dir(cfg, k) / "report.json";
      if (!fs::exists(json_path)) continue;
      any = true;
      const StatsReport report = load_report_json(json_path);
      // Regenerate the histograms from the stored report so `report` works
      // from the JSON alone.
      save_percentile_histograms(report, stats_dir(cfg, k),
                                 artifact_header(cfg, "stats"));
      for (const CellStats& c : report.cells) {
        std::ostringstream p_str, eff;
        p_str << std::scientific << std::setprecision(2) << c.corrected_p;
        eff << std::fixed << std::setprecision(3) << c.effect << " +- "
            << std::setprecision(3) << c.se;
        table << std::left << std::setw(4) << k << std::setw(22) << c.method
              << std::setw(18) << metric_name(c.metric) << std::setw(13) << p_str.str()
              << std::setw(8) << log10_label(c.corrected_p) << std::setw(6)
              << (c.bh_significant ? "yes" : "no") << eff.str() << "\n";
        csv += std::to_string(k) + ',' + c.method + ',' + metric_name(c.metric) + ',' +
               shortest_double(c.corrected_p) + ',' + log10_label(c.corrected_p) + ',' +
               (c.bh_significant ? "yes" : "no") + ',' + shortest_double(c.effect) +
               ',' + shortest_double(c.se) + '\n';
      }
    }

    if (!any) {
      std::cout << "no reports found under " << out_root(cfg).string() << "\n"
                << std::flush;
      return;
    }
    std::cout << table.str() << std::flush;
    write_text_file(out_root(cfg) / "report.txt", table.str());
    write_text_file(out_root(cfg) / "report.csv", csv);
  });
}

void run_all(const RunConfig& cfg) {
  run_train(cfg);
  run_graphify(cfg);
  run_cluster(cfg);
  if (!wanted_metrics(cfg, {Metric::acc_drop, Metric::class_range}).empty()) run_lesion(cfg);
  if (!wanted_metrics(cfg, {Metric::vis_score, Metric::softmax_entropy}).empty())
    run_featvis(cfg);
  if (!wanted_metrics(cfg, {Metric::side_selectivity}).empty()) run_corrvis(cfg);
  run_stats(cfg);
  run_report(cfg);
}

}  // namespace modprobe
