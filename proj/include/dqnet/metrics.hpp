#pragma once

#include <string>
#include <vector>

namespace dqnet {

// single-channel map: prediction values in [0,1] or a binary mask
struct Gray {
    int h = 0;
    int w = 0;
    std::vector<double> v;

    int64_t size() const { return static_cast<int64_t>(h) * w; }
    double at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
};

struct MetricReport {
    double s_measure = 0;
    double e_measure = 0;
    double weighted_f = 0;
    double mae = 0;
    int count = 0;
};

struct ImageScore {
    std::string id;
    double s = 0, e = 0, f = 0, mae = 0;
};

struct DatasetEval {
    MetricReport aggregate;
    std::vector<ImageScore> rows;
    std::vector<std::string> errors;  // itemized misses / unreadable files
};

double mae(const Gray& p, const Gray& g);
double s_measure(const Gray& p, const Gray& g);
double e_measure(const Gray& p, const Gray& g);
double weighted_f(const Gray& p, const Gray& g, double beta2 = 1.0);

// per-image metrics over matching file stems; missing or unreadable files are
// listed and evaluation continues on the rest
DatasetEval evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir);

void write_metric_csv(const DatasetEval& eval, const std::string& path);
void write_metric_json(const DatasetEval& eval, const std::string& path);

}  // namespace dqnet
