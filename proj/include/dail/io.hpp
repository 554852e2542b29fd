#pragma once

// Persistence: line-delimited corpus and trace files, the flat key=value
// config format, run manifests, report CSVs, and the SVG line plots rendered
// from them. Plots are presentation-only; nothing reads them back.

#include <algorithm>
#include <cstdint>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "dail/common.hpp"
#include "dail/evaluation.hpp"

namespace dail {

using ordered_json = nlohmann::ordered_json;

// --- corpus --------------------------------------------------------------------

// One problem paired with its expert solution; the on-disk dataset unit.
struct CorpusRecord {
  ProblemInstance problem;
  std::string solution;

  bool operator==(const CorpusRecord& o) const {
    return problem.id == o.problem.id && problem.text == o.problem.text &&
           problem.answer == o.problem.answer &&
           problem.domain == o.problem.domain &&
           problem.difficulty == o.problem.difficulty && solution == o.solution;
  }
};

inline std::string corpus_to_jsonl(const std::vector<CorpusRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    ordered_json j;
    j["id"] = r.problem.id;
    j["problem"] = r.problem.text;
    j["solution"] = r.solution;
    if (r.problem.answer) j["answer"] = *r.problem.answer;
    j["domain"] = domain_name(r.problem.domain);
    if (r.problem.difficulty != 0) j["difficulty"] = r.problem.difficulty;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline std::vector<CorpusRecord> corpus_from_jsonl(const std::string& text) {
  std::vector<CorpusRecord> out;
  const auto lines = split_lines(text);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    ordered_json j;
    try {
      j = ordered_json::parse(lines[i]);
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus line " + std::to_string(i + 1) +
                               ": " + e.what());
    }
    try {
      CorpusRecord r;
      r.problem.id = j.at("id").get<std::string>();
      r.problem.text = j.at("problem").get<std::string>();
      r.solution = j.at("solution").get<std::string>();
      if (j.contains("answer"))
        r.problem.answer = j["answer"].get<std::string>();
      r.problem.domain = parse_domain(j.at("domain").get<std::string>());
      if (j.contains("difficulty"))
        r.problem.difficulty = j["difficulty"].get<int>();
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("corpus line " + std::to_string(i + 1) +
                               ": " + e.what());
    }
  }
  return out;
}

inline void write_corpus(const std::string& path,
                         const std::vector<CorpusRecord>& records) {
  write_text_file(path, corpus_to_jsonl(records));
}

inline std::vector<CorpusRecord> read_corpus(const std::string& path) {
  return corpus_from_jsonl(read_text_file(path));
}

inline std::vector<ProblemInstance> corpus_problems(
    const std::vector<CorpusRecord>& records) {
  std::vector<ProblemInstance> out;
  for (const auto& r : records) out.push_back(r.problem);
  return out;
}

inline std::vector<ExpertSolution> corpus_solutions(
    const std::vector<CorpusRecord>& records) {
  std::vector<ExpertSolution> out;
  for (const auto& r : records) out.push_back({r.problem.id, r.solution});
  return out;
}

// --- rollout traces ------------------------------------------------------------

struct TraceFile {
  std::string config_fingerprint;
  std::vector<TraceRecord> records;
};

inline std::string traces_to_jsonl(const std::vector<TraceRecord>& records,
                                   const std::string& config_fingerprint) {
  std::string out;
  for (const auto& r : records) {
    ordered_json j;
    j["problem_id"] = r.problem_id;
    j["sample_index"] = r.sample_index;
    j["text"] = r.text;
    j["tokens"] = r.tokens;
    j["provenance"] = r.provenance;
    j["accept_rate"] = r.accept_rate;
    j["kept"] = r.kept;
    if (!r.reject_reason.empty()) j["reject_reason"] = r.reject_reason;
    j["config_fingerprint"] = config_fingerprint;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline TraceFile traces_from_jsonl(const std::string& text) {
  TraceFile out;
  const auto lines = split_lines(text);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    try {
      const ordered_json j = ordered_json::parse(lines[i]);
      TraceRecord r;
      r.problem_id = j.at("problem_id").get<std::string>();
      r.sample_index = j.at("sample_index").get<int>();
      r.text = j.at("text").get<std::string>();
      r.tokens = j.at("tokens").get<std::vector<TokenId>>();
      r.provenance = j.at("provenance").get<std::string>();
      r.accept_rate = j.at("accept_rate").get<double>();
      r.kept = j.at("kept").get<bool>();
      if (j.contains("reject_reason"))
        r.reject_reason = j["reject_reason"].get<std::string>();
      const auto fp = j.at("config_fingerprint").get<std::string>();
      if (out.records.empty())
        out.config_fingerprint = fp;
      else if (fp != out.config_fingerprint)
        throw std::runtime_error("config fingerprint differs from line 1");
      out.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw std::runtime_error("trace line " + std::to_string(i + 1) + ": " +
                               e.what());
    }
  }
  return out;
}

inline void write_traces(const std::string& path,
                         const std::vector<TraceRecord>& records,
                         const std::string& config_fingerprint) {
  write_text_file(path, traces_to_jsonl(records, config_fingerprint));
}

inline TraceFile read_traces(const std::string& path) {
  return traces_from_jsonl(read_text_file(path));
}

// --- key=value config ----------------------------------------------------------

// Flat text config: one `key = value` per line, '#' starts a comment, and a
// schema_version key is mandatory. Values keep their raw text; the typed
// getters parse on demand and name the offending key on failure.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text) {
    KeyValueConfig cfg;
    const auto lines = split_lines(text);
    for (size_t i = 0; i < lines.size(); ++i) {
      std::string line = lines[i];
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("config line " + std::to_string(i + 1) +
                                    ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      const std::string value = trim(line.substr(eq + 1));
      if (key.empty())
        throw std::invalid_argument("config line " + std::to_string(i + 1) +
                                    ": empty key");
      for (char c : key)
        if (!(std::islower(static_cast<unsigned char>(c)) ||
              std::isdigit(static_cast<unsigned char>(c)) || c == '_' || c == '.'))
          throw std::invalid_argument("config line " + std::to_string(i + 1) +
                                      ": bad key '" + key + "'");
      if (cfg.values_.count(key))
        throw std::invalid_argument("config line " + std::to_string(i + 1) +
                                    ": duplicate key '" + key + "'");
      cfg.values_[key] = value;
    }
    if (!cfg.values_.count("schema_version"))
      throw std::invalid_argument("config is missing required key 'schema_version'");
    return cfg;
  }

  static KeyValueConfig load(const std::string& path) {
    return parse(read_text_file(path));
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string get_string(const std::string& key) const { return raw(key); }
  std::string get_string(const std::string& key, const std::string& fallback) const {
    return has(key) ? raw(key) : fallback;
  }

  long long get_int(const std::string& key) const { return parse_int(key, raw(key)); }
  long long get_int(const std::string& key, long long fallback) const {
    return has(key) ? parse_int(key, raw(key)) : fallback;
  }

  double get_double(const std::string& key) const { return parse_dbl(key, raw(key)); }
  double get_double(const std::string& key, double fallback) const {
    return has(key) ? parse_dbl(key, raw(key)) : fallback;
  }

  bool get_bool(const std::string& key) const { return parse_bool(key, raw(key)); }
  bool get_bool(const std::string& key, bool fallback) const {
    return has(key) ? parse_bool(key, raw(key)) : fallback;
  }

  int schema_version() const { return static_cast<int>(get_int("schema_version")); }

  // Rejects keys outside the allowed set; catches typos before they silently
  // fall back to defaults.
  void require_known(const std::vector<std::string>& allowed) const {
    for (const auto& [key, value] : values_) {
      if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
        throw std::invalid_argument("config key '" + key + "' is not recognized");
    }
  }

  // Stable across key reordering and comments: hashes the sorted normalized
  // key=value lines.
  std::string fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [key, value] : values_) {
      h = fnv1a64(key, h);
      h = fnv1a64("=", h);
      h = fnv1a64(value, h);
      h = fnv1a64("\n", h);
    }
    return hex64(h);
  }

  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  const std::string& raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw std::invalid_argument("config key '" + key + "' is missing");
    return it->second;
  }

  static long long parse_int(const std::string& key, const std::string& v) {
    size_t used = 0;
    long long out = 0;
    try {
      out = std::stoll(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty())
      throw std::invalid_argument("config key '" + key +
                                  "': expected integer, got '" + v + "'");
    return out;
  }

  static double parse_dbl(const std::string& key, const std::string& v) {
    size_t used = 0;
    double out = 0;
    try {
      out = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || v.empty())
      throw std::invalid_argument("config key '" + key +
                                  "': expected number, got '" + v + "'");
    return out;
  }

  static bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config key '" + key +
                                "': expected true|false, got '" + v + "'");
  }

  std::map<std::string, std::string> values_;  // sorted, fingerprint-stable
};

// --- run manifest ----------------------------------------------------------------

struct FileHash {
  std::string path;
  std::string hash;
};

struct RunManifest {
  std::string command;
  std::string config_fingerprint;
  std::vector<FileHash> input_hashes;
  std::vector<FileHash> output_hashes;
  double wall_time_seconds = 0;
};

inline std::string file_fingerprint(const std::string& path) {
  return hex64(fnv1a64(read_text_file(path)));
}

inline std::string manifest_to_json(const RunManifest& m) {
  ordered_json j;
  j["command"] = m.command;
  j["config_fingerprint"] = m.config_fingerprint;
  auto files = [](const std::vector<FileHash>& hashes) {
    ordered_json out = ordered_json::object();
    for (const auto& fh : hashes) out[fh.path] = fh.hash;
    return out;
  };
  j["input_hashes"] = files(m.input_hashes);
  j["output_hashes"] = files(m.output_hashes);
  j["wall_time_seconds"] = m.wall_time_seconds;
  return j.dump(2) + "\n";
}

inline void write_manifest(const std::string& path, const RunManifest& m) {
  write_text_file(path, manifest_to_json(m));
}

// --- report CSVs -----------------------------------------------------------------

inline std::string eval_results_csv(const std::vector<ProblemResult>& results) {
  std::string out = "problem_id,n,c\n";
  for (const auto& r : results)
    out += r.problem_id + "," + std::to_string(r.n) + "," + std::to_string(r.c) + "\n";
  return out;
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "k,pass_at_k\n";
  for (const auto& pt : curve)
    out += std::to_string(pt.k) + "," + format_double(pt.pass) + "\n";
  return out;
}

inline std::string tau_sweep_csv(const std::vector<TauSweepRow>& rows) {
  std::string out = "tau,accept_rate,correct_rate\n";
  for (const auto& r : rows)
    out += format_double(r.tau) + "," + format_double(r.accept_rate) + "," +
           format_double(r.correct_rate) + "\n";
  return out;
}

inline std::string gamma_table_csv(const std::vector<GammaPoint>& points) {
  std::string out = "gamma,k,pass_at_k\n";
  for (const auto& pt : points)
    for (const auto& c : pt.curve)
      out += format_double(pt.gamma) + "," + std::to_string(c.k) + "," +
             format_double(c.pass) + "\n";
  return out;
}

// --- SVG line plots --------------------------------------------------------------

struct SeriesPoint {
  double x = 0, y = 0;
};

struct PlotSeries {
  std::string label;
  std::vector<SeriesPoint> points;
};

struct PlotSpec {
  std::string title, x_label, y_label;
  std::vector<PlotSeries> series;
  bool log2_x = false;  // pass@k curves plot k on a log2 axis
  int width = 640, height = 400;
};

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '&') out += "&amp;";
    else if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else out += c;
  }
  return out;
}

inline std::string svg_num(double v) { return format_fixed(v, 2); }

}  // namespace detail

// Hand-rolled renderer so plot bytes depend only on the input spec. Fixed
// palette, fixed tick count, all coordinates rounded to two decimals.
inline std::string render_line_svg(const PlotSpec& spec) {
  if (spec.series.empty())
    throw std::invalid_argument("render_line_svg: no series");
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c",
                                  "#9467bd", "#ff7f0e", "#8c564b"};
  const double ml = 64, mr = 16, mt = 36, mb = 44;  // margins
  const double pw = spec.width - ml - mr, ph = spec.height - mt - mb;

  auto tx = [&](double x) { return spec.log2_x ? std::log2(x) : x; };
  double xmin = 0, xmax = 0, ymin = 0, ymax = 0;
  bool first = true;
  for (const auto& s : spec.series) {
    for (const auto& p : s.points) {
      if (spec.log2_x && !(p.x > 0))
        throw std::invalid_argument("render_line_svg: log axis needs x > 0");
      const double x = tx(p.x);
      if (first || x < xmin) xmin = x;
      if (first || x > xmax) xmax = x;
      if (first || p.y < ymin) ymin = p.y;
      if (first || p.y > ymax) ymax = p.y;
      first = false;
    }
  }
  if (first) throw std::invalid_argument("render_line_svg: no points");
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;

  auto px = [&](double x) { return ml + (tx(x) - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + (ymax - y) / (ymax - ymin) * ph; };

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(spec.width) + "\" height=\"" +
         std::to_string(spec.height) + "\" font-family=\"monospace\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + detail::svg_num(ml) + "\" y=\"20\" font-size=\"14\">" +
         detail::svg_escape(spec.title) + "</text>\n";

  // axes frame and ticks
  out += "<rect x=\"" + detail::svg_num(ml) + "\" y=\"" + detail::svg_num(mt) +
         "\" width=\"" + detail::svg_num(pw) + "\" height=\"" + detail::svg_num(ph) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  const int ticks = 4;
  for (int i = 0; i <= ticks; ++i) {
    const double fx = xmin + (xmax - xmin) * i / ticks;
    const double fy = ymin + (ymax - ymin) * i / ticks;
    const double gx = ml + pw * i / ticks;
    const double gy = mt + ph - ph * i / ticks;
    const double label_x = spec.log2_x ? std::exp2(fx) : fx;
    out += "<line x1=\"" + detail::svg_num(gx) + "\" y1=\"" +
           detail::svg_num(mt + ph) + "\" x2=\"" + detail::svg_num(gx) +
           "\" y2=\"" + detail::svg_num(mt + ph + 4) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + detail::svg_num(gx) + "\" y=\"" +
           detail::svg_num(mt + ph + 16) + "\" text-anchor=\"middle\">" +
           format_double(label_x, 4) + "</text>\n";
    out += "<line x1=\"" + detail::svg_num(ml - 4) + "\" y1=\"" +
           detail::svg_num(gy) + "\" x2=\"" + detail::svg_num(ml) + "\" y2=\"" +
           detail::svg_num(gy) + "\" stroke=\"black\"/>\n";
    out += "<text x=\"" + detail::svg_num(ml - 8) + "\" y=\"" +
           detail::svg_num(gy + 4) + "\" text-anchor=\"end\">" +
           format_double(fy, 4) + "</text>\n";
  }
  out += "<text x=\"" + detail::svg_num(ml + pw / 2) + "\" y=\"" +
         detail::svg_num(spec.height - 8) + "\" text-anchor=\"middle\">" +
         detail::svg_escape(spec.x_label) + "</text>\n";
  out += "<text x=\"14\" y=\"" + detail::svg_num(mt + ph / 2) +
         "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
         detail::svg_num(mt + ph / 2) + ")\">" + detail::svg_escape(spec.y_label) +
         "</text>\n";

  for (size_t s = 0; s < spec.series.size(); ++s) {
    const char* color = palette[s % (sizeof(palette) / sizeof(palette[0]))];
    std::string pts;
    for (const auto& p : spec.series[s].points) {
      if (!pts.empty()) pts += ' ';
      pts += detail::svg_num(px(p.x)) + "," + detail::svg_num(py(p.y));
    }
    out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
    const double ly = mt + 16 + 16 * static_cast<double>(s);
    out += "<rect x=\"" + detail::svg_num(ml + pw - 150) + "\" y=\"" +
           detail::svg_num(ly - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
           color + "\"/>\n";
    out += "<text x=\"" + detail::svg_num(ml + pw - 136) + "\" y=\"" +
           detail::svg_num(ly) + "\">" + detail::svg_escape(spec.series[s].label) +
           "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline PlotSpec pass_curve_plot(const std::vector<GammaPoint>& runs,
                                const std::string& title) {
  PlotSpec spec;
  spec.title = title;
  spec.x_label = "k";
  spec.y_label = "pass@k";
  spec.log2_x = true;
  for (const auto& run : runs) {
    PlotSeries s;
    s.label = run.gamma == 0 ? "base" : "gamma=" + format_double(run.gamma, 4);
    for (const auto& pt : run.curve)
      s.points.push_back({static_cast<double>(pt.k), pt.pass});
    spec.series.push_back(std::move(s));
  }
  return spec;
}

// Accuracy against the answer-token budget; each series is one model.
inline PlotSpec budget_efficiency_plot(const std::vector<PlotSeries>& series,
                                       const std::string& title) {
  PlotSpec spec;
  spec.title = title;
  spec.x_label = "answer token budget";
  spec.y_label = "accuracy";
  spec.series = series;
  return spec;
}

inline PlotSpec loss_curve_plot(const std::vector<StepRecord>& log,
                                const std::string& title) {
  PlotSpec spec;
  spec.title = title;
  spec.x_label = "step";
  spec.y_label = "loss";
  PlotSeries total{"total", {}}, pos{"kl_pos", {}}, neg{"kl_neg", {}};
  for (const auto& r : log) {
    total.points.push_back({static_cast<double>(r.step), r.total});
    pos.points.push_back({static_cast<double>(r.step), r.kl_pos});
    neg.points.push_back({static_cast<double>(r.step), r.kl_neg});
  }
  spec.series = {std::move(total), std::move(pos), std::move(neg)};
  return spec;
}

}  // namespace dail
