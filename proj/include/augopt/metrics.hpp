#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "augopt/tensor.hpp"

namespace augopt {

struct Confusion {
    int64_t tp = 0, fp = 0, fn = 0;
};

// Exact pixel counts for one class.
Confusion confusion(const LabelMap& pred, const LabelMap& truth, int cls);

// Zero denominators take the empty-vs-empty convention and score 1.0.
double dsc(int64_t tp, int64_t fp, int64_t fn);
double sen(int64_t tp, int64_t fn);
double prc(int64_t tp, int64_t fp);

// Mask pixels whose 4-neighborhood leaves the mask (image border counts as
// outside); equivalently the erosion difference.
std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& mask,
                                                 int cls);

// Max of the two directed 95th-percentile (nearest-rank) boundary distances.
// Undefined when either mask has no pixels of the class.
struct Hd95Result {
    double value = 0.0;
    bool defined = false;
};
Hd95Result hd95(const LabelMap& pred, const LabelMap& truth, int cls);

struct CaseClassMetrics {
    Confusion conf;
    double dsc = 0.0, sen = 0.0, prc = 0.0;
    Hd95Result hd;
};
CaseClassMetrics evaluate_case_class(const LabelMap& pred,
                                     const LabelMap& truth, int cls);

// Per-class case averages over a split; counts are pooled. hd95 averages
// only the defined cases and reports how many were excluded.
struct ClassSummary {
    int cls = 0;
    int cases = 0;
    int64_t tp = 0, fp = 0, fn = 0;
    double dsc = 0.0, sen = 0.0, prc = 0.0;
    double hd95 = 0.0;
    int hd_undefined = 0;
};

struct MetricsReport {
    std::vector<ClassSummary> per_class;  // foreground classes 1..c-1
    double mean_dsc = 0.0, mean_sen = 0.0, mean_prc = 0.0, mean_hd95 = 0.0;
    int hd_undefined = 0;
};

MetricsReport evaluate_dataset(const std::vector<LabelMap>& pred,
                               const std::vector<LabelMap>& truth,
                               int classes);

std::string metrics_csv_header();
// One row per foreground class: run, arm, class, metrics, undefined count.
std::string metrics_csv_rows(const std::string& run, const std::string& arm,
                             const MetricsReport& rep);

}  // namespace augopt
