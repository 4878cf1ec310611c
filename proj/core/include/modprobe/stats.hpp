#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace modprobe {

enum class Metric { acc_drop, class_range, vis_score, softmax_entropy, side_selectivity };
enum class Direction { high_is_modular, low_is_modular };

Direction metric_direction(Metric m);
std::string metric_name(Metric m);
Metric parse_metric(const std::string& name);

// Multiple-testing family: lesion-based, visualization-based, and the halves
// side-selectivity metrics are corrected separately.
enum class MetricFamily { lesion, featvis, corrvis };
MetricFamily metric_family(Metric m);
std::string family_name(MetricFamily f);

// One (subcluster, metric) measurement: the true subcluster's value next to
// the values of its 19 size-matched random subclusters.
struct MeasurementRecord {
  std::string method;  // e.g. "weights-global"
  int network = 0;     // replicate index, stamped by the reader
  int layer = 0;
  int cluster_id = 0;
  int size = 0;
  Metric metric = Metric::acc_drop;
  double value_true = 0.0;
  std::vector<double> values_random;
};

// Percentile of the true value among its randoms, centered: low means
// modular for every metric (high-is-modular metrics are negated first).
// Midrank ties; (r + 0.5)/(count + 1), never exactly 0 or 1.
double centered_percentile(const MeasurementRecord& rec);

// Fisher's method: chi2_sf(-2 sum ln p_i, 2n). Every p_i must lie in (0,1).
double fisher_combine(std::span<const double> percentiles);

// Mean of the replicate p values mapped through the Bates(n) CDF.
double bates_aggregate(std::span<const double> replicate_p, int n = 5);

struct BhResult {
  std::vector<bool> significant;
  std::optional<double> critical;  // absent when nothing passes
};
BhResult benjamini_hochberg(std::span<const double> p_values, double alpha = 0.05);

struct EffectResult {
  double measure = 1.0;
  double se = 0.0;
};
// Mean of 2x/(x+mu) per record, clamped into [0,2]; SE = sample sd / sqrt(n).
EffectResult effect_measure(std::span<const MeasurementRecord> records);

// ---- measurement CSV interchange ------------------------------------------

void write_measurements(const std::filesystem::path& path,
                        std::span<const MeasurementRecord> records,
                        const std::string& header_comment);
// `network` stamps every parsed record (the file format carries no replicate
// column; one file per network).
std::vector<MeasurementRecord> read_measurements(const std::filesystem::path& path,
                                                 int network);

// ---- aggregated report -----------------------------------------------------

struct CellStats {
  std::string method;
  Metric metric = Metric::acc_drop;
  std::vector<int> networks;             // replicate ids with records
  std::vector<double> fisher_p;          // aligned with `networks`
  std::vector<double> network_effect;    // per-network effect measure
  std::vector<double> network_se;
  double corrected_p = 1.0;              // Bates over replicates (Fisher if 1)
  bool bh_significant = false;
  double effect = 1.0;                   // pooled across replicates
  double se = 0.0;
  std::array<int, 20> percentile_hist{};  // pooled centered percentiles
};

struct StatsReport {
  int replicates = 0;
  double alpha = 0.05;
  std::vector<CellStats> cells;  // method-major, metric-minor
  std::map<MetricFamily, std::optional<double>> bh_critical;
};

StatsReport build_stats(std::span<const MeasurementRecord> records, double alpha = 0.05);

void save_report_json(const StatsReport& report, const std::filesystem::path& path,
                      const std::string& config_hash, std::uint64_t seed);
StatsReport load_report_json(const std::filesystem::path& path);

// One CSV per family, rows per method, column group per metric (p value,
// significance, effect, SE) -- the shape of the paper-style summary tables.
void save_report_tables(const StatsReport& report, const std::filesystem::path& dir,
                        const std::string& header_comment);

// One SVG histogram per cell: 20 bars, one per attainable percentile.
// `comment` is embedded as an XML comment in each file.
void save_percentile_histograms(const StatsReport& report, const std::filesystem::path& dir,
                                const std::string& comment = "");

}  // namespace modprobe
