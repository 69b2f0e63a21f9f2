#include "dqnet/metrics.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dqnet/ops.hpp"
#include "dqnet/png_io.hpp"

namespace dqnet {

namespace {

constexpr double kEps = 2.2204460492503131e-16;

void check_pair(const Gray& p, const Gray& g) {
    if (p.h != g.h || p.w != g.w || p.h <= 0)
        throw DimensionError("metric inputs must share a positive shape");
    for (double v : p.v)
        if (v < 0.0 || v > 1.0) throw DomainError("prediction values must lie in [0,1]");
    for (double v : g.v)
        if (v != 0.0 && v != 1.0) throw DomainError("ground truth must be binary");
}

double mean_of(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// 2x / (x^2 + 1 + sigma + eps) over the region selected by the mask value
double object_score(const Gray& p, const Gray& g, double mask_value, bool invert_pred) {
    double sum = 0;
    int64_t n = 0;
    for (int64_t i = 0; i < p.size(); ++i)
        if (g.v[static_cast<size_t>(i)] == mask_value) {
            sum += invert_pred ? 1.0 - p.v[static_cast<size_t>(i)] : p.v[static_cast<size_t>(i)];
            ++n;
        }
    if (n == 0) return 0.0;
    const double x = sum / static_cast<double>(n);
    double var = 0;
    for (int64_t i = 0; i < p.size(); ++i)
        if (g.v[static_cast<size_t>(i)] == mask_value) {
            const double d =
                (invert_pred ? 1.0 - p.v[static_cast<size_t>(i)] : p.v[static_cast<size_t>(i)]) - x;
            var += d * d;
        }
    const double sigma = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    // denominator >= 1, no stabilizer needed; a perfect region scores 1 exactly
    return 2.0 * x / (x * x + 1.0 + sigma);
}

// region-level structural similarity used by the region term
double region_ssim(const Gray& p, const Gray& g, int y0, int y1, int x0, int x1) {
    const int64_t n = static_cast<int64_t>(y1 - y0) * (x1 - x0);
    if (n <= 0) return 0.0;
    double mx = 0, my = 0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            mx += p.at(y, x);
            my += g.at(y, x);
        }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sx = 0, sy = 0, sxy = 0;
    for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
            const double dx = p.at(y, x) - mx;
            const double dy = g.at(y, x) - my;
            sx += dx * dx;
            sy += dy * dy;
            sxy += dx * dy;
        }
    const double denom_n = static_cast<double>(n) - 1.0 + kEps;
    sx /= denom_n;
    sy /= denom_n;
    sxy /= denom_n;
    const double alpha = 4.0 * mx * my * sxy;
    const double beta = (mx * mx + my * my) * (sx + sy);
    // alpha != 0 implies beta > 0 (Cauchy-Schwarz), so the ratio is safe and a
    // perfect block scores 1 exactly
    if (alpha != 0.0) return alpha / beta;
    return beta == 0.0 ? 1.0 : 0.0;
}

double region_score(const Gray& p, const Gray& g) {
    // centroid of the foreground, 1-based rounding
    double ry = 0, rx = 0;
    int64_t area = 0;
    for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
            if (g.at(y, x) == 1.0) {
                ry += y + 1;
                rx += x + 1;
                ++area;
            }
    const int cy = static_cast<int>(std::lround(ry / static_cast<double>(area)));
    const int cx = static_cast<int>(std::lround(rx / static_cast<double>(area)));
    const double total = static_cast<double>(g.h) * g.w;
    const double w1 = static_cast<double>(cx) * cy / total;
    const double w2 = static_cast<double>(g.w - cx) * cy / total;
    const double w3 = static_cast<double>(cx) * (g.h - cy) / total;
    const double w4 = 1.0 - w1 - w2 - w3;
    return w1 * region_ssim(p, g, 0, cy, 0, cx) + w2 * region_ssim(p, g, 0, cy, cx, g.w) +
           w3 * region_ssim(p, g, cy, g.h, 0, cx) + w4 * region_ssim(p, g, cy, g.h, cx, g.w);
}

// normalized gaussian, 7x7, sigma 5
std::vector<double> gaussian_taps() {
    std::vector<double> t(7);
    double s = 0;
    for (int i = 0; i < 7; ++i) {
        const double d = i - 3;
        t[static_cast<size_t>(i)] = std::exp(-d * d / 50.0);
        s += t[static_cast<size_t>(i)];
    }
    for (auto& v : t) v /= s;
    return t;
}

}  // namespace

double mae(const Gray& p, const Gray& g) {
    check_pair(p, g);
    // Neumaier-compensated sum: the mean is then invariant under duplicating
    // every pixel, e.g. a nearest-neighbor 2x upscale of both maps
    double s = 0, comp = 0;
    for (int64_t i = 0; i < p.size(); ++i) {
        const double term = std::fabs(p.v[static_cast<size_t>(i)] - g.v[static_cast<size_t>(i)]);
        const double t = s + term;
        comp += std::fabs(s) >= std::fabs(term) ? (s - t) + term : (term - t) + s;
        s = t;
    }
    return (s + comp) / static_cast<double>(p.size());
}

double s_measure(const Gray& p, const Gray& g) {
    check_pair(p, g);
    const double mu = mean_of(g.v);
    if (mu == 0.0) return clamp01(1.0 - mean_of(p.v));
    if (mu == 1.0) return clamp01(mean_of(p.v));
    const double so = mu * object_score(p, g, 1.0, false) +
                      (1.0 - mu) * object_score(p, g, 0.0, true);
    const double sr = region_score(p, g);
    return clamp01(0.5 * so + 0.5 * sr);
}

double e_measure(const Gray& p, const Gray& g) {
    check_pair(p, g);
    // adaptive binarization at twice the mean prediction
    const double thr = std::max(std::min(2.0 * mean_of(p.v), 1.0), 1e-12);
    std::vector<double> fm(p.v.size());
    for (size_t i = 0; i < fm.size(); ++i) fm[i] = p.v[i] >= thr ? 1.0 : 0.0;

    const double gsum = mean_of(g.v) * static_cast<double>(g.size());
    std::vector<double> enhanced(fm.size());
    if (gsum == 0.0) {
        for (size_t i = 0; i < fm.size(); ++i) enhanced[i] = 1.0 - fm[i];
    } else if (gsum == static_cast<double>(g.size())) {
        enhanced = fm;
    } else {
        const double mfm = mean_of(fm);
        const double mgt = mean_of(g.v);
        for (size_t i = 0; i < fm.size(); ++i) {
            const double af = fm[i] - mfm;
            const double ag = g.v[i] - mgt;
            const double align = 2.0 * ag * af / (ag * ag + af * af + kEps);
            enhanced[i] = (align + 1.0) * (align + 1.0) / 4.0;
        }
    }
    double s = 0;
    for (double v : enhanced) s += v;
    return clamp01(s / (static_cast<double>(g.size()) - 1.0 + kEps));
}

double weighted_f(const Gray& p, const Gray& g, double beta2) {
    check_pair(p, g);
    const int64_t n = p.size();
    std::vector<int> fg;
    for (int64_t i = 0; i < n; ++i)
        if (g.v[static_cast<size_t>(i)] == 1.0) fg.push_back(static_cast<int>(i));
    if (fg.empty()) return clamp01(1.0 - mean_of(p.v));  // no-object fallback

    std::vector<double> err(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i)
        err[static_cast<size_t>(i)] = std::fabs(p.v[static_cast<size_t>(i)] - g.v[static_cast<size_t>(i)]);

    // nearest foreground pixel per background pixel; ties resolved to the
    // first foreground index in row-major order
    std::vector<double> dist(static_cast<size_t>(n), 0.0);
    std::vector<double> et = err;
    for (int64_t i = 0; i < n; ++i) {
        if (g.v[static_cast<size_t>(i)] == 1.0) continue;
        const int y = static_cast<int>(i) / p.w, x = static_cast<int>(i) % p.w;
        int64_t best = -1;
        int besti = -1;
        for (int f : fg) {
            const int fy = f / p.w, fx = f % p.w;
            const int64_t d2 = static_cast<int64_t>(fy - y) * (fy - y) +
                               static_cast<int64_t>(fx - x) * (fx - x);
            if (best < 0 || d2 < best) {
                best = d2;
                besti = f;
            }
        }
        dist[static_cast<size_t>(i)] = std::sqrt(static_cast<double>(best));
        et[static_cast<size_t>(i)] = err[static_cast<size_t>(besti)];
    }

    // separable 7x7 gaussian smoothing of the substituted errors, zero padding
    const auto taps = gaussian_taps();
    std::vector<double> tmp(static_cast<size_t>(n), 0.0), ea(static_cast<size_t>(n), 0.0);
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            double acc = 0;
            for (int k = -3; k <= 3; ++k) {
                const int xx = x + k;
                if (xx >= 0 && xx < p.w)
                    acc += taps[static_cast<size_t>(k + 3)] * et[static_cast<size_t>(y) * p.w + xx];
            }
            tmp[static_cast<size_t>(y) * p.w + x] = acc;
        }
    for (int y = 0; y < p.h; ++y)
        for (int x = 0; x < p.w; ++x) {
            double acc = 0;
            for (int k = -3; k <= 3; ++k) {
                const int yy = y + k;
                if (yy >= 0 && yy < p.h)
                    acc += taps[static_cast<size_t>(k + 3)] * tmp[static_cast<size_t>(yy) * p.w + x];
            }
            ea[static_cast<size_t>(y) * p.w + x] = acc;
        }

    // dependency-aware error: smoothed where it helps inside the object
    std::vector<double> ew(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        const bool inside = g.v[static_cast<size_t>(i)] == 1.0;
        double e = err[static_cast<size_t>(i)];
        if (inside && ea[static_cast<size_t>(i)] < e) e = ea[static_cast<size_t>(i)];
        const double b = inside ? 1.0
                                : 2.0 - std::exp(std::log(0.5) / 5.0 * dist[static_cast<size_t>(i)]);
        ew[static_cast<size_t>(i)] = e * b;
    }

    double ew_fg = 0, ew_bg = 0;
    for (int64_t i = 0; i < n; ++i)
        (g.v[static_cast<size_t>(i)] == 1.0 ? ew_fg : ew_bg) += ew[static_cast<size_t>(i)];
    const double tpw = static_cast<double>(fg.size()) - ew_fg;
    const double fpw = ew_bg;
    const double recall = 1.0 - ew_fg / static_cast<double>(fg.size());
    const double precision = tpw / (kEps + tpw + fpw);
    const double f =
        (1.0 + beta2) * recall * precision / (kEps + beta2 * precision + recall);
    return clamp01(f);
}

DatasetEval evaluate_dataset(const std::string& pred_dir, const std::string& gt_dir) {
    namespace fs = std::filesystem;
    DatasetEval out;
    if (!fs::is_directory(pred_dir)) throw IoError("prediction directory '" + pred_dir + "' not found");
    if (!fs::is_directory(gt_dir)) throw IoError("ground-truth directory '" + gt_dir + "' not found");

    std::vector<fs::path> preds;
    for (const auto& entry : fs::directory_iterator(pred_dir))
        if (entry.path().extension() == ".png") preds.push_back(entry.path());
    std::sort(preds.begin(), preds.end());

    double ss = 0, se = 0, sf = 0, sm = 0;
    for (const auto& path : preds) {
        const std::string stem = path.stem().string();
        const fs::path gt_path = fs::path(gt_dir) / (stem + ".png");
        if (!fs::exists(gt_path)) {
            out.errors.push_back("missing ground truth for '" + stem + "'");
            continue;
        }
        try {
            auto to_gray = [](const ImageU8& img) {
                Gray m;
                m.h = img.h;
                m.w = img.w;
                m.v.resize(static_cast<size_t>(img.h) * img.w);
                for (int64_t i = 0; i < m.size(); ++i) {
                    double acc = 0;
                    for (int c = 0; c < img.channels; ++c)
                        acc += img.px[static_cast<size_t>(i) * img.channels + c];
                    m.v[static_cast<size_t>(i)] = acc / (255.0 * img.channels);
                }
                return m;
            };
            Gray pred = to_gray(read_png(path.string()));
            Gray gt = to_gray(read_png(gt_path.string()));
            for (auto& v : gt.v) v = v > 127.0 / 255.0 ? 1.0 : 0.0;
            if (pred.h != gt.h || pred.w != gt.w) {
                // compare at ground-truth resolution
                auto t = Tensor<double>::from_data({1, pred.h, pred.w}, pred.v);
                auto r = resize_bicubic(t, gt.h, gt.w);
                pred.h = gt.h;
                pred.w = gt.w;
                pred.v = r.data();
                for (auto& v : pred.v) v = clamp01(v);
            }
            ImageScore score;
            score.id = stem;
            score.s = s_measure(pred, gt);
            score.e = e_measure(pred, gt);
            score.f = weighted_f(pred, gt);
            score.mae = mae(pred, gt);
            out.rows.push_back(score);
            ss += score.s;
            se += score.e;
            sf += score.f;
            sm += score.mae;
        } catch (const std::exception& ex) {
            out.errors.push_back(std::string("failed on '") + stem + "': " + ex.what());
        }
    }
    out.aggregate.count = static_cast<int>(out.rows.size());
    if (out.aggregate.count > 0) {
        out.aggregate.s_measure = ss / out.aggregate.count;
        out.aggregate.e_measure = se / out.aggregate.count;
        out.aggregate.weighted_f = sf / out.aggregate.count;
        out.aggregate.mae = sm / out.aggregate.count;
    }
    return out;
}

void write_metric_csv(const DatasetEval& eval, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << "id,s_measure,e_measure,weighted_f,mae\n";
    f.precision(10);
    for (const auto& r : eval.rows)
        f << r.id << "," << r.s << "," << r.e << "," << r.f << "," << r.mae << "\n";
}

void write_metric_json(const DatasetEval& eval, const std::string& path) {
    nlohmann::json j;
    j["count"] = eval.aggregate.count;
    j["s_measure"] = eval.aggregate.s_measure;
    j["e_measure"] = eval.aggregate.e_measure;
    j["weighted_f"] = eval.aggregate.weighted_f;
    j["mae"] = eval.aggregate.mae;
    j["errors"] = eval.errors;
    std::ofstream f(path);
    if (!f) throw IoError("cannot write '" + path + "'");
    f << j.dump(2) << "\n";
}

}  // namespace dqnet
