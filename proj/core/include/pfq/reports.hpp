#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "pfq/graph.hpp"

namespace pfq {

// Per-output-channel weight range of each conv, depthwise conv and affine.
struct RangeRow {
  std::string layer;
  double min = 0.0;
  double max = 0.0;
  double range() const { return max - min; }
};

std::vector<RangeRow> dynamic_range_report(const ModelGraph& graph);
// Largest range across the layers of one kind; 0 when there are none.
double max_weight_range(const ModelGraph& graph, LayerKind kind);

void write_range_csv(std::ostream& os, const std::vector<RangeRow>& rows);
void write_macs_csv(std::ostream& os, const std::vector<LayerMacs>& rows);

}  // namespace pfq
