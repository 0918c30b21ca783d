#pragma once
// Training-log reading, moving averages and an SVG loss plot.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mfnet/trainer.hpp"

namespace mfnet {

inline std::vector<LogRecord> read_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open training log '" + path.string() + "'");
  std::vector<LogRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(log_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& ex) {
      throw DataError(std::string("training log: ") + ex.what());
    }
  }
  return out;
}

// Trailing moving average; entry i averages values[max(0, i-window+1) .. i].
inline std::vector<double> moving_average(const std::vector<double>& values, std::size_t window) {
  if (window == 0) throw ConfigError("moving_average: window must be positive");
  std::vector<double> out(values.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

inline double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  if (begin >= end || end > v.size()) throw ConfigError("mean_of: bad range");
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

// Polylines of l_seg, l_pml and total loss against iteration, each with a
// lighter trace of the raw values under its moving average.
inline std::string loss_plot_svg(const std::vector<LogRecord>& log, std::size_t window = 10) {
  const double width = 800, height = 400, margin = 50;
  std::vector<double> seg, pml, total;
  for (const auto& r : log) {
    seg.push_back(r.l_seg);
    pml.push_back(r.l_pml);
    total.push_back(r.loss);
  }
  double ymax = 1e-12;
  for (const auto* s : {&seg, &pml, &total})
    for (double v : *s)
      if (std::isfinite(v)) ymax = std::max(ymax, v);
  const double n = std::max<double>(1.0, static_cast<double>(log.size()) - 1.0);
  auto px = [&](std::size_t i) { return margin + (width - 2 * margin) * static_cast<double>(i) / n; };
  auto py = [&](double v) { return height - margin - (height - 2 * margin) * std::clamp(v / ymax, 0.0, 1.0); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<line x1=\"" << margin << "\" y1=\"" << height - margin << "\" x2=\"" << width - margin << "\" y2=\""
     << height - margin << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\"" << height - margin
     << "\" stroke=\"black\"/>\n";
  auto polyline = [&](const std::vector<double>& v, const char* colour, double opacity) {
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-opacity=\"" << opacity << "\" points=\"";
    for (std::size_t i = 0; i < v.size(); ++i)
      if (std::isfinite(v[i])) os << px(i) << ',' << py(v[i]) << ' ';
    os << "\"/>\n";
  };
  const struct {
    const std::vector<double>* v;
    const char* colour;
    const char* label;
  } series[] = {{&total, "black", "loss"}, {&seg, "steelblue", "l_seg"}, {&pml, "darkorange", "l_pml"}};
  double ly = margin;
  for (const auto& s : series) {
    polyline(*s.v, s.colour, 0.25);
    polyline(moving_average(*s.v, window), s.colour, 1.0);
    os << "<text x=\"" << width - margin - 60 << "\" y=\"" << ly << "\" fill=\"" << s.colour
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << s.label << "</text>\n";
    ly += 16;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3g", ymax);
  os << "<text x=\"4\" y=\"" << margin << "\" font-family=\"sans-serif\" font-size=\"11\">" << buf << "</text>\n"
     << "<text x=\"" << width - margin << "\" y=\"" << height - margin + 16
     << "\" font-family=\"sans-serif\" font-size=\"11\">" << log.size() << " iters</text>\n"
     << "</svg>\n";
  return os.str();
}

}  // namespace mfnet
