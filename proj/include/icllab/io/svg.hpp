#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "icllab/io/csv.hpp"

namespace icl::svg {

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fixed(double x, int digits = 2) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// Blue (negative) - white - red (positive).
inline std::string diverging_color(double v, double scale) {
  const double t = scale > 0 ? std::clamp(v / scale, -1.0, 1.0) : 0.0;
  const int fade = static_cast<int>(std::lround(255 * (1 - std::abs(t))));
  char buf[16];
  if (t >= 0) {
    std::snprintf(buf, sizeof buf, "#ff%02x%02x", fade, fade);
  } else {
    std::snprintf(buf, sizeof buf, "#%02x%02xff", fade, fade);
  }
  return buf;
}

/// Cell grid with row and column labels; empty cells are drawn grey.
inline std::string heatmap(const std::string& title, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels,
                           const std::vector<std::vector<std::optional<double>>>& cells) {
  const int cw = 44, ch = 22, left = 60, top = 70;
  double scale = 0;
  for (const auto& r : cells)
    for (const auto& c : r)
      if (c) scale = std::max(scale, std::abs(*c));
  const int width = left + cw * static_cast<int>(col_labels.size()) + 20;
  const int height = top + ch * static_cast<int>(row_labels.size()) + 20;
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
                  std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s += "<text x=\"" + std::to_string(left) + "\" y=\"16\" font-size=\"13\">" + escape(title) + "</text>\n";
  for (std::size_t j = 0; j < col_labels.size(); ++j) {
    const int x = left + cw * static_cast<int>(j) + cw / 2;
    s += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(top - 6) +
         "\" text-anchor=\"start\" transform=\"rotate(-45 " + std::to_string(x) + " " + std::to_string(top - 6) +
         ")\">" + escape(col_labels[j]) + "</text>\n";
  }
  for (std::size_t i = 0; i < row_labels.size(); ++i) {
    const int y = top + ch * static_cast<int>(i);
    s += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + ch / 2 + 4) +
         "\" text-anchor=\"end\">" + escape(row_labels[i]) + "</text>\n";
    for (std::size_t j = 0; j < col_labels.size(); ++j) {
      const auto& v = j < cells[i].size() ? cells[i][j] : std::nullopt;
      s += "<rect x=\"" + std::to_string(left + cw * static_cast<int>(j)) + "\" y=\"" + std::to_string(y) +
           "\" width=\"" + std::to_string(cw) + "\" height=\"" + std::to_string(ch) + "\" fill=\"" +
           (v ? diverging_color(*v, scale) : std::string("#dddddd")) + "\" stroke=\"#ffffff\"/>\n";
      if (v) {
        s += "<text x=\"" + std::to_string(left + cw * static_cast<int>(j) + cw / 2) + "\" y=\"" +
             std::to_string(y + ch / 2 + 4) + "\" text-anchor=\"middle\" font-size=\"8\">" + fixed(*v, 3) +
             "</text>\n";
      }
    }
  }
  s += "</svg>\n";
  return s;
}

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Line chart of several series sharing axes.
inline std::string line_chart(const std::string& title, const std::string& x_label, const std::string& y_label,
                              const std::vector<Series>& series) {
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
                                  "#7f7f7f", "#bcbd22", "#17becf"};
  const double w = 520, h = 320, left = 60, right = 150, top = 40, bottom = 50;
  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  y0 = std::min(y0, 0.0);
  if (y1 <= y0) y1 = y0 + 1;
  const auto px = [&](double x) { return left + (x - x0) / (x1 - x0) * (w - left - right); };
  const auto py = [&](double y) { return h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom); };
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed(w, 0) + "\" height=\"" +
                    fixed(h, 0) + "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  out += "<text x=\"" + fixed(left, 0) + "\" y=\"20\" font-size=\"13\">" + escape(title) + "</text>\n";
  out += "<line x1=\"" + fixed(left) + "\" y1=\"" + fixed(py(y0)) + "\" x2=\"" + fixed(w - right) + "\" y2=\"" +
         fixed(py(y0)) + "\" stroke=\"#000\"/>\n";
  out += "<line x1=\"" + fixed(left) + "\" y1=\"" + fixed(py(y0)) + "\" x2=\"" + fixed(left) + "\" y2=\"" +
         fixed(py(y1)) + "\" stroke=\"#000\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y0 + (y1 - y0) * i / 4.0, xv = x0 + (x1 - x0) * i / 4.0;
    out += "<text x=\"" + fixed(left - 4) + "\" y=\"" + fixed(py(yv) + 3) + "\" text-anchor=\"end\">" +
           fixed(yv, 2) + "</text>\n";
    out += "<text x=\"" + fixed(px(xv)) + "\" y=\"" + fixed(h - bottom + 14) + "\" text-anchor=\"middle\">" +
           fixed(xv, 2) + "</text>\n";
  }
  out += "<text x=\"" + fixed((left + w - right) / 2) + "\" y=\"" + fixed(h - 12) + "\" text-anchor=\"middle\">" +
         escape(x_label) + "</text>\n";
  out += "<text x=\"14\" y=\"" + fixed((top + h - bottom) / 2) + "\" transform=\"rotate(-90 14 " +
         fixed((top + h - bottom) / 2) + ")\" text-anchor=\"middle\">" + escape(y_label) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& s = series[k];
    const char* color = palette[k % 10];
    std::string pts;
    for (std::size_t i = 0; i < s.x.size(); ++i) pts += fixed(px(s.x[i])) + "," + fixed(py(s.y[i])) + " ";
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts +
           "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      out += "<circle cx=\"" + fixed(px(s.x[i])) + "\" cy=\"" + fixed(py(s.y[i])) + "\" r=\"2.5\" fill=\"" + color +
             "\"/>\n";
    const double ly = top + 14.0 * static_cast<double>(k);
    out += "<rect x=\"" + fixed(w - right + 10) + "\" y=\"" + fixed(ly - 7) + "\" width=\"10\" height=\"3\" fill=\"" +
           color + "\"/>\n";
    out += "<text x=\"" + fixed(w - right + 24) + "\" y=\"" + fixed(ly) + "\">" + escape(s.name) + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace icl::svg
