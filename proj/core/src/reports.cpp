#include "pfq/reports.hpp"

#include <algorithm>
#include <iomanip>
#include <ostream>

namespace pfq {

std::vector<RangeRow> dynamic_range_report(const ModelGraph& graph) {
  std::vector<RangeRow> rows;
  for (const auto& l : graph.layers) {
    const Tensor* w = l.weight();
    if (w == nullptr || w->empty()) continue;
    rows.push_back({l.name, w->min(), w->max()});
  }
  return rows;
}

double max_weight_range(const ModelGraph& graph, LayerKind kind) {
  double best = 0.0;
  for (const auto& l : graph.layers) {
    if (l.kind() != kind) continue;
    const Tensor* w = l.weight();
    if (w != nullptr && !w->empty()) best = std::max(best, w->max() - w->min());
  }
  return best;
}

void write_range_csv(std::ostream& os, const std::vector<RangeRow>& rows) {
  os << "layer,min,max,range\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.layer << ',' << r.min << ',' << r.max << ',' << r.range() << '\n';
}

void write_macs_csv(std::ostream& os, const std::vector<LayerMacs>& rows) {
  os << "layer,macs\n";
  for (const auto& r : rows) os << r.layer << ',' << r.macs << '\n';
}

}  // namespace pfq
