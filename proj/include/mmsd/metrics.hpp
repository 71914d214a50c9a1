#pragma once

#include <cstddef>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mmsd/errors.hpp"

namespace mmsd {

// 0/0 ratios collapse to 0 so degenerate splits still produce reports.
inline double safe_ratio(double num, double den) { return den == 0.0 ? 0.0 : num / den; }

inline double f1_score(double precision, double recall) {
  return safe_ratio(2.0 * precision * recall, precision + recall);
}

struct MetricsReport {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;

  std::string format() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "accuracy " << accuracy << '\n'
       << "precision " << precision << '\n'
       << "recall " << recall << '\n'
       << "f1 " << f1 << '\n'
       << "tp " << tp << " fp " << fp << " fn " << fn << " tn " << tn << '\n';
    return os.str();
  }
};

// Binary metrics with the sarcastic class (1) as positive. The macro flag
// averages each metric over both classes treated as positive in turn.
inline MetricsReport compute_metrics(const std::vector<int>& predicted, const std::vector<int>& gold,
                                     bool macro = false) {
  if (predicted.size() != gold.size() || predicted.empty())
    throw ContractError("compute_metrics requires equal-length non-empty label vectors");
  MetricsReport r;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if ((predicted[i] != 0 && predicted[i] != 1) || (gold[i] != 0 && gold[i] != 1))
      throw DataError("labels must be 0 or 1");
    if (gold[i] == 1)
      predicted[i] == 1 ? ++r.tp : ++r.fn;
    else
      predicted[i] == 1 ? ++r.fp : ++r.tn;
  }
  const double total = static_cast<double>(predicted.size());
  r.accuracy = static_cast<double>(r.tp + r.tn) / total;
  if (!macro) {
    r.precision = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fp));
    r.recall = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fn));
    r.f1 = f1_score(r.precision, r.recall);
  } else {
    double p1 = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fp));
    double r1 = safe_ratio(static_cast<double>(r.tp), static_cast<double>(r.tp + r.fn));
    double p0 = safe_ratio(static_cast<double>(r.tn), static_cast<double>(r.tn + r.fn));
    double r0 = safe_ratio(static_cast<double>(r.tn), static_cast<double>(r.tn + r.fp));
    r.precision = 0.5 * (p0 + p1);
    r.recall = 0.5 * (r0 + r1);
    r.f1 = 0.5 * (f1_score(p0, r0) + f1_score(p1, r1));
  }
  return r;
}

}  // namespace mmsd
