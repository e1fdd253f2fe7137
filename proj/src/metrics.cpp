#include "augopt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "augopt/errors.hpp"

namespace augopt {

namespace {

void require_same_shape(const LabelMap& a, const LabelMap& b) {
    if (a.shape != b.shape)
        throw DataError("label map shape mismatch: " + shape_str(a.shape) +
                        " vs " + shape_str(b.shape));
    if (a.shape.size() != 2)
        throw DataError("metrics expect rank-2 label maps, got " +
                        shape_str(a.shape));
}

}  // namespace

Confusion confusion(const LabelMap& pred, const LabelMap& truth, int cls) {
    require_same_shape(pred, truth);
    Confusion c;
    for (size_t i = 0; i < pred.data.size(); ++i) {
        const bool p = pred.data[i] == cls;
        const bool t = truth.data[i] == cls;
        c.tp += (p && t);
        c.fp += (p && !t);
        c.fn += (!p && t);
    }
    return c;
}

double dsc(int64_t tp, int64_t fp, int64_t fn) {
    const int64_t den = 2 * tp + fp + fn;
    return den == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / den;
}

double sen(int64_t tp, int64_t fn) {
    const int64_t den = tp + fn;
    return den == 0 ? 1.0 : static_cast<double>(tp) / den;
}

double prc(int64_t tp, int64_t fp) {
    const int64_t den = tp + fp;
    return den == 0 ? 1.0 : static_cast<double>(tp) / den;
}

std::vector<std::pair<int, int>> boundary_pixels(const LabelMap& mask,
                                                 int cls) {
    const int H = mask.dim(0), W = mask.dim(1);
    std::vector<std::pair<int, int>> out;
    auto in = [&](int y, int x) {
        return y >= 0 && y < H && x >= 0 && x < W && mask.at2(y, x) == cls;
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (mask.at2(y, x) != cls) continue;
            if (!in(y - 1, x) || !in(y + 1, x) || !in(y, x - 1) ||
                !in(y, x + 1))
                out.emplace_back(y, x);
        }
    return out;
}

namespace {

constexpr double kInf = 1e18;

// Felzenszwalb-Huttenlocher 1D squared distance transform. Positions with
// f >= kInf carry no site and are skipped; if no position carries one the
// whole row stays at kInf.
void edt_1d(const std::vector<double>& f, std::vector<double>& d, int n,
            std::vector<int>& v, std::vector<double>& z) {
    auto intersect = [&](int q, int p) {
        return (f[q] + static_cast<double>(q) * q -
                (f[p] + static_cast<double>(p) * p)) /
               (2.0 * (q - p));
    };
    int k = -1;
    for (int q = 0; q < n; ++q) {
        if (f[q] >= kInf) continue;
        if (k < 0) {
            k = 0;
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            continue;
        }
        double s = intersect(q, v[k]);
        while (s <= z[k]) {
            --k;
            s = intersect(q, v[k]);
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (k < 0) {
        std::fill(d.begin(), d.begin() + n, kInf);
        return;
    }
    int j = 0;
    for (int q = 0; q < n; ++q) {
        while (z[j + 1] < q) ++j;
        const int p = v[j];
        d[q] = f[p] + static_cast<double>(q - p) * (q - p);
    }
}

// Exact squared Euclidean distance to the nearest site on an H x W grid.
std::vector<double> edt_grid(const std::vector<std::pair<int, int>>& sites,
                             int H, int W) {
    std::vector<double> grid(static_cast<size_t>(H) * W, kInf);
    for (const auto& [y, x] : sites)
        grid[static_cast<size_t>(y) * W + x] = 0.0;

    const int n = std::max(H, W);
    std::vector<double> f(n), d(n), z(n + 1);
    std::vector<int> v(n);

    for (int x = 0; x < W; ++x) {
        for (int y = 0; y < H; ++y) f[y] = grid[static_cast<size_t>(y) * W + x];
        edt_1d(f, d, H, v, z);
        for (int y = 0; y < H; ++y) grid[static_cast<size_t>(y) * W + x] = d[y];
    }
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) f[x] = grid[static_cast<size_t>(y) * W + x];
        edt_1d(f, d, W, v, z);
        for (int x = 0; x < W; ++x) grid[static_cast<size_t>(y) * W + x] = d[x];
    }
    return grid;
}

// Nearest-rank 95th percentile of ascending values.
double percentile95(std::vector<double>& vals) {
    std::sort(vals.begin(), vals.end());
    const size_t rank = static_cast<size_t>(
        std::ceil(0.95 * static_cast<double>(vals.size())));
    return vals[rank - 1];
}

double directed_hd95(const std::vector<std::pair<int, int>>& from,
                     const std::vector<double>& dist2_to, int W) {
    std::vector<double> d;
    d.reserve(from.size());
    for (const auto& [y, x] : from)
        d.push_back(std::sqrt(dist2_to[static_cast<size_t>(y) * W + x]));
    return percentile95(d);
}

}  // namespace

Hd95Result hd95(const LabelMap& pred, const LabelMap& truth, int cls) {
    require_same_shape(pred, truth);
    const auto bp = boundary_pixels(pred, cls);
    const auto bt = boundary_pixels(truth, cls);
    if (bp.empty() || bt.empty()) return {0.0, false};

    const int H = pred.dim(0), W = pred.dim(1);
    const auto d2p = edt_grid(bp, H, W);
    const auto d2t = edt_grid(bt, H, W);
    const double fwd = directed_hd95(bp, d2t, W);
    const double bwd = directed_hd95(bt, d2p, W);
    return {std::max(fwd, bwd), true};
}

CaseClassMetrics evaluate_case_class(const LabelMap& pred,
                                     const LabelMap& truth, int cls) {
    CaseClassMetrics m;
    m.conf = confusion(pred, truth, cls);
    m.dsc = dsc(m.conf.tp, m.conf.fp, m.conf.fn);
    m.sen = sen(m.conf.tp, m.conf.fn);
    m.prc = prc(m.conf.tp, m.conf.fp);
    m.hd = hd95(pred, truth, cls);
    return m;
}

MetricsReport evaluate_dataset(const std::vector<LabelMap>& pred,
                               const std::vector<LabelMap>& truth,
                               int classes) {
    if (pred.size() != truth.size())
        throw DataError("prediction/truth case count mismatch");
    if (pred.empty()) throw DataError("no cases to evaluate");

    MetricsReport rep;
    for (int cls = 1; cls < classes; ++cls) {
        ClassSummary s;
        s.cls = cls;
        s.cases = static_cast<int>(pred.size());
        double hd_sum = 0.0;
        int hd_n = 0;
        for (size_t i = 0; i < pred.size(); ++i) {
            const auto m = evaluate_case_class(pred[i], truth[i], cls);
            s.tp += m.conf.tp;
            s.fp += m.conf.fp;
            s.fn += m.conf.fn;
            s.dsc += m.dsc;
            s.sen += m.sen;
            s.prc += m.prc;
            if (m.hd.defined) {
                hd_sum += m.hd.value;
                ++hd_n;
            } else {
                ++s.hd_undefined;
            }
        }
        s.dsc /= s.cases;
        s.sen /= s.cases;
        s.prc /= s.cases;
        s.hd95 = hd_n ? hd_sum / hd_n : std::numeric_limits<double>::quiet_NaN();
        rep.per_class.push_back(s);
    }

    int hd_classes = 0;
    for (const auto& s : rep.per_class) {
        rep.mean_dsc += s.dsc;
        rep.mean_sen += s.sen;
        rep.mean_prc += s.prc;
        if (!std::isnan(s.hd95)) {
            rep.mean_hd95 += s.hd95;
            ++hd_classes;
        }
        rep.hd_undefined += s.hd_undefined;
    }
    const double nc = static_cast<double>(rep.per_class.size());
    rep.mean_dsc /= nc;
    rep.mean_sen /= nc;
    rep.mean_prc /= nc;
    rep.mean_hd95 = hd_classes
                        ? rep.mean_hd95 / hd_classes
                        : std::numeric_limits<double>::quiet_NaN();
    return rep;
}

std::string metrics_csv_header() {
    return "run,arm,class,cases,dsc,sen,prc,hd95,hd95_undefined,tp,fp,fn\n";
}

std::string metrics_csv_rows(const std::string& run, const std::string& arm,
                             const MetricsReport& rep) {
    std::string out;
    char buf[256];
    for (const auto& s : rep.per_class) {
        std::snprintf(buf, sizeof(buf),
                      "%s,%s,%d,%d,%.6f,%.6f,%.6f,%.6f,%d,%lld,%lld,%lld\n",
                      run.c_str(), arm.c_str(), s.cls, s.cases, s.dsc, s.sen,
                      s.prc, s.hd95, s.hd_undefined,
                      static_cast<long long>(s.tp),
                      static_cast<long long>(s.fp),
                      static_cast<long long>(s.fn));
        out += buf;
    }
    return out;
}

}  // namespace augopt
