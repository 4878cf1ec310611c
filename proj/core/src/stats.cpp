#include "modprobe/stats.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "modprobe/errors.hpp"
#include "modprobe/linalg.hpp"

namespace modprobe {

using ordered_json = nlohmann::ordered_json;

Direction metric_direction(Metric m) {
  switch (m) {
    case Metric::acc_drop:
    case Metric::class_range:
    case Metric::vis_score:
    case Metric::side_selectivity:
      return Direction::high_is_modular;
    case Metric::softmax_entropy:
      return Direction::low_is_modular;
  }
  throw InvalidArgument("unknown metric");
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::acc_drop: return "acc_drop";
    case Metric::class_range: return "class_range";
    case Metric::vis_score: return "vis_score";
    case Metric::softmax_entropy: return "softmax_entropy";
    case Metric::side_selectivity: return "side_selectivity";
  }
  throw InvalidArgument("unknown metric");
}

Metric parse_metric(const std::string& name) {
  if (name == "acc_drop") return Metric::acc_drop;
  if (name == "class_range") return Metric::class_range;
  if (name == "vis_score") return Metric::vis_score;
  if (name == "softmax_entropy") return Metric::softmax_entropy;
  if (name == "side_selectivity") return Metric::side_selectivity;
  throw InvalidArgument("unknown metric: " + name);
}

MetricFamily metric_family(Metric m) {
  switch (m) {
    case Metric::acc_drop:
    case Metric::class_range:
      return MetricFamily::lesion;
    case Metric::vis_score:
    case Metric::softmax_entropy:
      return MetricFamily::featvis;
    case Metric::side_selectivity:
      return MetricFamily::corrvis;
  }
  throw InvalidArgument("unknown metric");
}

std::string family_name(MetricFamily f) {
  switch (f) {
    case MetricFamily::lesion: return "lesion";
    case MetricFamily::featvis: return "featvis";
    case MetricFamily::corrvis: return "corrvis";
  }
  throw InvalidArgument("unknown family");
}

double centered_percentile(const MeasurementRecord& rec) {
  detail::require(!rec.values_random.empty(), "centered_percentile: no random values");
  const double flip = metric_direction(rec.metric) == Direction::high_is_modular ? -1.0 : 1.0;
  const double x = flip * rec.value_true;
  double r = 0.0;
  for (double v : rec.values_random) {
    const double y = flip * v;
    if (y < x) r += 1.0;
    else if (y == x) r += 0.5;
  }
  return (r + 0.5) / (static_cast<double>(rec.values_random.size()) + 1.0);
}

double fisher_combine(std::span<const double> percentiles) {
  detail::require(!percentiles.empty(), "fisher_combine: no percentiles");
  double stat = 0.0;
  for (double p : percentiles) {
    detail::require(p > 0.0 && p < 1.0, "fisher_combine: percentile outside (0,1)");
    stat -= 2.0 * std::log(p);
  }
  return chi2_sf(stat, 2 * static_cast<int>(percentiles.size()));
}

double bates_aggregate(std::span<const double> replicate_p, int n) {
  detail::require(static_cast<int>(replicate_p.size()) == n,
                  "bates_aggregate: expected exactly " + std::to_string(n) + " values");
  double mean = 0.0;
  for (double p : replicate_p) {
    detail::require(p >= 0.0 && p <= 1.0, "bates_aggregate: p outside [0,1]");
    mean += p;
  }
  mean /= static_cast<double>(n);
  return bates_cdf(mean, n);
}

BhResult benjamini_hochberg(std::span<const double> p_values, double alpha) {
  detail::require(!p_values.empty(), "benjamini_hochberg: no p values");
  detail::require(alpha > 0.0 && alpha < 1.0, "benjamini_hochberg: alpha outside (0,1)");
  const std::size_t m = p_values.size();
  std::vector<double> sorted(p_values.begin(), p_values.end());
  std::sort(sorted.begin(), sorted.end());

  BhResult res;
  res.significant.assign(m, false);
  for (std::size_t j = m; j >= 1; --j) {
    if (sorted[j - 1] <= alpha * static_cast<double>(j) / static_cast<double>(m)) {
      res.critical = sorted[j - 1];
      break;
    }
  }
  if (res.critical)
    for (std::size_t i = 0; i < m; ++i) res.significant[i] = p_values[i] <= *res.critical;
  return res;
}

EffectResult effect_measure(std::span<const MeasurementRecord> records) {
  detail::require(!records.empty(), "effect_measure: no records");
  std::vector<double> r_values;
  r_values.reserve(records.size());
  for (const MeasurementRecord& rec : records) {
    detail::require(!rec.values_random.empty(), "effect_measure: no random values");
    double mu = 0.0;
    for (double v : rec.values_random) mu += v;
    mu /= static_cast<double>(rec.values_random.size());
    const double x = rec.value_true;
    double r;
    if (x + mu == 0.0)
      r = 1.0;  // both sides zero: no effect
    else
      r = 2.0 * x / (x + mu);
    r_values.push_back(std::clamp(r, 0.0, 2.0));
  }
  EffectResult out;
  const double n = static_cast<double>(r_values.size());
  out.measure = std::accumulate(r_values.begin(), r_values.end(), 0.0) / n;
  if (r_values.size() > 1) {
    double ss = 0.0;
    for (double r : r_values) ss += (r - out.measure) * (r - out.measure);
    out.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return out;
}

// ---- measurement CSV interchange -------------------------------------------

namespace {

std::string format_double(double v) {
  char buf[64];
  const auto res =
      std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& tok, std::uint64_t offset) {
  double v = 0.0;
  const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || p != tok.data() + tok.size() || !std::isfinite(v))
    throw FormatError("bad number '" + tok + "'", offset);
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

void write_measurements(const std::filesystem::path& path,
                        std::span<const MeasurementRecord> records,
                        const std::string& header_comment) {
  std::string out;
  if (!header_comment.empty()) out += "# " + header_comment + "\n";
  out += "method,layer,cluster,size,metric,true,randoms\n";
  for (const MeasurementRecord& r : records) {
    out += r.method + ',' + std::to_string(r.layer) + ',' + std::to_string(r.cluster_id) +
           ',' + std::to_string(r.size) + ',' + metric_name(r.metric) + ',' +
           format_double(r.value_true);
    for (double v : r.values_random) out += ',' + format_double(v);
    out += '\n';
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError("short write: " + path.string());
}

std::vector<MeasurementRecord> read_measurements(const std::filesystem::path& path,
                                                 int network) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open measurements file: " + path.string());
  std::vector<MeasurementRecord> out;
  std::string line;
  std::uint64_t offset = 0;
  bool header_seen = false;
  while (std::getline(f, line)) {
    const std::uint64_t line_offset = offset;
    offset += line.size() + 1;
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line.rfind("method,", 0) != 0)
        throw FormatError("bad measurements header: " + line, line_offset);
      header_seen = true;
      continue;
    }
    const std::vector<std::string> cols = split_csv(line);
    if (cols.size() < 7)
      throw FormatError("measurement row needs at least 7 columns: " + line, line_offset);
    MeasurementRecord r;
    r.method = cols[0];
    r.network = network;
    r.layer = static_cast<int>(parse_double(cols[1], line_offset));
    r.cluster_id = static_cast<int>(parse_double(cols[2], line_offset));
    r.size = static_cast<int>(parse_double(cols[3], line_offset));
    r.metric = parse_metric(cols[4]);
    r.value_true = parse_double(cols[5], line_offset);
    for (std::size_t i = 6; i < cols.size(); ++i)
      r.values_random.push_back(parse_double(cols[i], line_offset));
    out.push_back(std::move(r));
  }
  if (!header_seen) throw FormatError("measurements file has no header: " + path.string());
  return out;
}

// ---- aggregated report -----------------------------------------------------

StatsReport build_stats(std::span<const MeasurementRecord> records, double alpha) {
  detail::require(!records.empty(), "build_stats: no records");

  // Group records per (method, metric) cell, preserving first-seen method
  // order; metrics ordered by enum value within a method.
  std::vector<std::string> method_order;
  std::map<std::string, std::map<Metric, std::vector<MeasurementRecord>>> groups;
  int max_network = 0;
  for (const MeasurementRecord& r : records) {
    if (groups.find(r.method) == groups.end()) method_order.push_back(r.method);
    groups[r.method][r.metric].push_back(r);
    max_network = std::max(max_network, r.network);
  }

  StatsReport report;
  report.alpha = alpha;
  report.replicates = max_network + 1;

  for (const std::string& method : method_order) {
    for (auto& [metric, cell_records] : groups[method]) {
      CellStats cell;
      cell.method = method;
      cell.metric = metric;

      std::map<int, std::vector<MeasurementRecord>> by_net;
      for (const MeasurementRecord& r : cell_records) by_net[r.network].push_back(r);

      std::vector<double> net_fisher;
      for (auto& [net, net_records] : by_net) {
        std::vector<double> cps;
        cps.reserve(net_records.size());
        for (const MeasurementRecord& r : net_records) {
          const double cp = centered_percentile(r);
          // cp*20 - 0.5 recovers the rank r; round() absorbs fp noise
          const int bin =
              std::clamp(static_cast<int>(std::lround(cp * 20.0 - 0.5)), 0, 19);
          cell.percentile_hist[bin] += 1;
          cps.push_back(cp);
        }
        const double fp = fisher_combine(cps);
        const EffectResult ef = effect_measure(net_records);
        cell.networks.push_back(net);
        cell.fisher_p.push_back(fp);
        cell.network_effect.push_back(ef.measure);
        cell.network_se.push_back(ef.se);
        net_fisher.push_back(fp);
      }

      cell.corrected_p = net_fisher.size() == 1
                             ? net_fisher.front()
                             : bates_aggregate(net_fisher,
                                               static_cast<int>(net_fisher.size()));
      const EffectResult pooled = effect_measure(cell_records);
      cell.effect = pooled.measure;
      cell.se = pooled.se;
      report.cells.push_back(std::move(cell));
    }
  }

  // Benjamini-Hochberg per metric family across the family's cells.
  for (MetricFamily fam :
       {MetricFamily::lesion, MetricFamily::featvis, MetricFamily::corrvis}) {
    std::vector<std::size_t> idx;
    std::vector<double> ps;
    for (std::size_t i = 0; i < report.cells.size(); ++i) {
      if (metric_family(report.cells[i].metric) != fam) continue;
      idx.push_back(i);
      ps.push_back(report.cells[i].corrected_p);
    }
    if (ps.empty()) continue;
    const BhResult bh = benjamini_hochberg(ps, alpha);
    report.bh_critical[fam] = bh.critical;
    for (std::size_t t = 0; t < idx.size(); ++t)
      report.cells[idx[t]].bh_significant = bh.significant[t];
  }
  return report;
}

void save_report_json(const StatsReport& report, const std::filesystem::path& path,
                      const std::string& config_hash, std::uint64_t seed) {
  ordered_json j;
  j["kind"] = "modprobe-stats";
  j["config"] = config_hash;
  j["seed"] = seed;
  j["alpha"] = report.alpha;
  j["replicates"] = report.replicates;
  ordered_json fams = ordered_json::object();
  for (const auto& [fam, crit] : report.bh_critical) {
    if (crit)
      fams[family_name(fam)] = {{"bh_critical", *crit}};
    else
      fams[family_name(fam)] = {{"bh_critical", nullptr}};
  }
  j["families"] = fams;
  j["cells"] = ordered_json::array();
  for (const CellStats& c : report.cells) {
    ordered_json cj;
    cj["method"] = c.method;
    cj["metric"] = metric_name(c.metric);
    cj["family"] = family_name(metric_family(c.metric));
    cj["direction"] =
        metric_direction(c.metric) == Direction::high_is_modular ? "high" : "low";
    cj["per_network"] = ordered_json::array();
    for (std::size_t i = 0; i < c.networks.size(); ++i)
      cj["per_network"].push_back({{"network", c.networks[i]},
                                   {"fisher_p", c.fisher_p[i]},
                                   {"effect", c.network_effect[i]},
                                   {"se", c.network_se[i]}});
    cj["corrected_p"] = c.corrected_p;
    cj["bh_significant"] = c.bh_significant;
    cj["effect"] = c.effect;
    cj["se"] = c.se;
    cj["percentile_hist"] = c.percentile_hist;
    j["cells"].push_back(std::move(cj));
  }
  std::ofstream f(path, std::ios::trunc | std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw FormatError("short write: " + path.string());
}

StatsReport load_report_json(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open report file: " + path.string());
  ordered_json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw FormatError("bad report json: " + std::string(e.what()));
  }
  try {
    if (j.at("kind").get<std::string>() != "modprobe-stats")
      throw FormatError("not a stats report: " + path.string());
    StatsReport report;
    report.alpha = j.at("alpha").get<double>();
    report.replicates = j.at("replicates").get<int>();
    for (const auto& [name, fj] : j.at("families").items()) {
      MetricFamily fam = name == "lesion"    ? MetricFamily::lesion
                         : name == "featvis" ? MetricFamily::featvis
                                             : MetricFamily::corrvis;
      if (fj.at("bh_critical").is_null())
        report.bh_critical[fam] = std::nullopt;
      else
        report.bh_critical[fam] = fj.at("bh_critical").get<double>();
    }
    for (const auto& cj : j.at("cells")) {
      CellStats c;
      c.method = cj.at("method").get<std::string>();
      c.metric = parse_metric(cj.at("metric").get<std::string>());
      for (const auto& nj : cj.at("per_network")) {
        c.networks.push_back(nj.at("network").get<int>());
        c.fisher_p.push_back(nj.at("fisher_p").get<double>());
        c.network_effect.push_back(nj.at("effect").get<double>());
        c.network_se.push_back(nj.at("se").get<double>());
      }
      c.corrected_p = cj.at("corrected_p").get<double>();
      c.bh_significant = cj.at("bh_significant").get<bool>();
      c.effect = cj.at("effect").get<double>();
      c.se = cj.at("se").get<double>();
      const auto& hist = cj.at("percentile_hist");
      for (std::size_t i = 0; i < 20 && i < hist.size(); ++i)
        c.percentile_hist[i] = hist[i].get<int>();
      report.cells.push_back(std::move(c));
    }
    return report;
  } catch (const ordered_json::exception& e) {
    throw FormatError("bad report json: " + std::string(e.what()));
  }
}

void save_report_tables(const StatsReport& report, const std::filesystem::path& dir,
                        const std::string& header_comment) {
  for (MetricFamily fam :
       {MetricFamily::lesion, MetricFamily::featvis, MetricFamily::corrvis}) {
    // Collect this family's cells, methods in report order.
    std::vector<const CellStats*> cells;
    std::vector<std::string> methods;
    std::vector<Metric> metrics;
    for (const CellStats& c : report.cells) {
      if (metric_family(c.metric) != fam) continue;
      cells.push_back(&c);
      if (std::find(methods.begin(), methods.end(), c.method) == methods.end())
        methods.push_back(c.method);
      if (std::find(metrics.begin(), metrics.end(), c.metric) == metrics.end())
        metrics.push_back(c.metric);
    }
    if (cells.empty()) continue;
    std::sort(metrics.begin(), metrics.end());

    std::string out;
    if (!header_comment.empty()) out += "# " + header_comment + "\n";
    out += "method";
    for (Metric m : metrics) {
      const std::string n = metric_name(m);
      out += ',' + n + "_p," + n + "_significant," + n + "_effect," + n + "_se";
    }
    out += '\n';
    for (const std::string& method : methods) {
      out += method;
      for (Metric m : metrics) {
        const CellStats* found = nullptr;
        for (const CellStats* c : cells)
          if (c->method == method && c->metric == m) found = c;
        if (!found) {
          out += ",,,,";
          continue;
        }
        out += ',' + format_double(found->corrected_p) + ',' +
               (found->bh_significant ? "yes" : "no") + ',' +
               format_double(found->effect) + ',' + format_double(found->se);
      }
      out += '\n';
    }
    std::ofstream f(dir / ("table_" + family_name(fam) + ".csv"),
                    std::ios::trunc | std::ios::binary);
    if (!f) throw FormatError("cannot open for writing in: " + dir.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write in: " + dir.string());
  }
}

void save_percentile_histograms(const StatsReport& report, const std::filesystem::path& dir,
                                const std::string& comment) {
  for (const CellStats& c : report.cells) {
    const int w = 440, h = 240, left = 40, bottom = 30, top = 30;
    int max_count = 1;
    for (int v : c.percentile_hist) max_count = std::max(max_count, v);

    std::ostringstream svg;
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\""
        << h << "\" viewBox=\"0 0 " << w << ' ' << h << "\">\n";
    if (!comment.empty()) svg << "  <!-- " << comment << " -->\n";
    svg << "  <title>" << c.method << " / " << metric_name(c.metric)
        << " centered percentiles</title>\n";
    svg << "  <text x=\"" << w / 2 << "\" y=\"18\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"12\">" << c.method << " &#183; "
        << metric_name(c.metric) << "</text>\n";
    const double plot_w = w - left - 10, plot_h = h - top - bottom;
    const double bar_w = plot_w / 20.0;
    for (int b = 0; b < 20; ++b) {
      const double bh = plot_h * c.percentile_hist[b] / max_count;
      svg << "  <rect x=\"" << left + b * bar_w + 1 << "\" y=\"" << top + plot_h - bh
          << "\" width=\"" << bar_w - 2 << "\" height=\"" << bh
          << "\" fill=\"#4878a8\"/>\n";
    }
    svg << "  <line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\""
        << left + plot_w << "\" y2=\"" << top + plot_h
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
    for (int b = 0; b < 20; b += 4) {
      const double cp = (b + 0.5) / 20.0;
      svg << "  <text x=\"" << left + (b + 0.5) * bar_w << "\" y=\"" << h - 12
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">"
          << cp << "</text>\n";
    }
    svg << "  <text x=\"12\" y=\"" << top + plot_h / 2
        << "\" font-family=\"sans-serif\" font-size=\"9\" "
        << "transform=\"rotate(-90 12 " << top + plot_h / 2 << ")\" "
        << "text-anchor=\"middle\">count (max " << max_count << ")</text>\n";
    svg << "</svg>\n";

    const std::string name = "hist_" + c.method + "_" + metric_name(c.metric) + ".svg";
    std::ofstream f(dir / name, std::ios::trunc | std::ios::binary);
    if (!f) throw FormatError("cannot open for writing in: " + dir.string());
    const std::string body = svg.str();
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw FormatError("short write in: " + dir.string());
  }
}

}  // namespace modprobe
