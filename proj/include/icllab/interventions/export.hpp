#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "icllab/interventions/effects.hpp"
#include "icllab/io/csv.hpp"
#include "icllab/io/svg.hpp"
#include "icllab/model/config.hpp"

namespace icl {

/// Layers by heads, attention columns then SSM columns. Cells for a stream
/// the layer does not have are left empty.
struct HeadGrid {
  std::vector<std::string> columns;
  std::vector<std::vector<std::optional<double>>> cells;  // [layer][column]
};

inline HeadGrid head_grid(const ModelConfig& cfg, const std::map<HeadAddress, double>& values) {
  HeadGrid g;
  std::vector<std::pair<Stream, std::size_t>> cols;
  for (Stream s : {Stream::attention, Stream::ssm}) {
    std::size_t width = 0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
      if (cfg.has_stream(l, s)) width = std::max(width, cfg.heads(l, s));
    for (std::size_t h = 0; h < width; ++h) {
      cols.emplace_back(s, h);
      g.columns.push_back(std::string(to_string(s)) + ".H" + std::to_string(h));
    }
  }
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    auto& row = g.cells.emplace_back();
    for (const auto& [s, h] : cols) {
      const auto it = values.find({l, s, h});
      row.push_back(it == values.end() ? std::nullopt : std::optional<double>(it->second));
    }
  }
  return g;
}

inline CsvTable head_grid_csv(const HeadGrid& g) {
  std::vector<std::string> header{"layer"};
  header.insert(header.end(), g.columns.begin(), g.columns.end());
  CsvTable t(header);
  for (std::size_t l = 0; l < g.cells.size(); ++l) {
    auto& r = t.row();
    r << l;
    for (const auto& c : g.cells[l]) {
      if (c) {
        r << *c;
      } else {
        r << "";
      }
    }
  }
  return t;
}

inline std::string head_grid_svg(const HeadGrid& g, const std::string& title) {
  std::vector<std::string> rows;
  for (std::size_t l = 0; l < g.cells.size(); ++l) rows.push_back("L" + std::to_string(l));
  return svg::heatmap(title, rows, g.columns, g.cells);
}

}  // namespace icl
