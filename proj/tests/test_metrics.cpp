#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dqnet/metrics.hpp"
#include "dqnet/tensor.hpp"
#include "dqnet/png_io.hpp"
#include "dqnet/rng.hpp"
#include "metric_oracles.hpp"

using namespace dqnet;

namespace {

Gray random_pred(int h, int w, Rng& rng) {
    Gray m{h, w, {}};
    m.v.resize(static_cast<size_t>(h) * w);
    for (auto& v : m.v) v = rng.uniform();
    return m;
}

Gray random_mask(int h, int w, Rng& rng, double density = 0.4) {
    Gray m{h, w, {}};
    m.v.resize(static_cast<size_t>(h) * w);
    for (auto& v : m.v) v = rng.uniform() < density ? 1.0 : 0.0;
    return m;
}

Gray blob_mask(int h, int w) {
    Gray m{h, w, {}};
    m.v.assign(static_cast<size_t>(h) * w, 0.0);
    for (int y = h / 4; y < 3 * h / 4; ++y)
        for (int x = w / 4; x < 3 * w / 4; ++x) m.v[static_cast<size_t>(y) * w + x] = 1.0;
    return m;
}

Gray invert(const Gray& g) {
    Gray m = g;
    for (auto& v : m.v) v = 1.0 - v;
    return m;
}

}  // namespace

TEST_CASE("mae: identities and complement") {
    Rng rng(1);
    auto g = random_mask(8, 8, rng);
    CHECK(mae(g, g) == 0.0);
    CHECK(mae(invert(g), g) == 1.0);
    auto p = random_pred(8, 8, rng);
    CHECK(mae(p, g) + mae(invert(p), g) == doctest::Approx(1.0).epsilon(1e-12));
    Gray small{4, 4, std::vector<double>(16, 0.0)};
    CHECK_THROWS_AS(mae(small, g), DimensionError);
}

TEST_CASE("perfect predictions score (1,1,1,0) exactly") {
    auto g = blob_mask(16, 16);
    CHECK(s_measure(g, g) == 1.0);
    CHECK(e_measure(g, g) == 1.0);
    CHECK(weighted_f(g, g) == 1.0);
    CHECK(mae(g, g) == 0.0);
}

TEST_CASE("degenerate ground truths follow the reference conventions") {
    Rng rng(2);
    auto p = random_pred(8, 8, rng);
    Gray empty{8, 8, std::vector<double>(64, 0.0)};
    double mp = 0;
    for (double v : p.v) mp += v;
    mp /= 64.0;
    CHECK(s_measure(p, empty) == doctest::Approx(1.0 - mp));
    CHECK(weighted_f(p, empty) == doctest::Approx(1.0 - mp));
    Gray full{8, 8, std::vector<double>(64, 1.0)};
    CHECK(s_measure(p, full) == doctest::Approx(mp));
}

TEST_CASE("inverted predictions score near zero on E") {
    auto g = blob_mask(16, 16);
    const double e = e_measure(invert(g), g);
    CHECK(e == doctest::Approx(oracle::e_measure(invert(g), g)).epsilon(1e-9));
    CHECK(e < 0.05);
    CHECK(weighted_f(Gray{16, 16, std::vector<double>(256, 0.0)}, g) == doctest::Approx(0.0));
}

TEST_CASE("optimized metrics match direct-definition oracles on random instances") {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        auto p = random_pred(16, 16, rng);
        auto g = random_mask(16, 16, rng, 0.2 + 0.5 * rng.uniform());
        CHECK(std::fabs(s_measure(p, g) - oracle::s_measure(p, g)) < 1e-6);
        CHECK(std::fabs(e_measure(p, g) - oracle::e_measure(p, g)) < 1e-6);
        CHECK(std::fabs(weighted_f(p, g) - oracle::weighted_f(p, g)) < 1e-6);
        CHECK(std::fabs(mae(p, g) - oracle::mae(p, g)) < 1e-12);
        for (double v : {s_measure(p, g), e_measure(p, g), weighted_f(p, g), mae(p, g)}) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("nearest-neighbor 2x upscaling leaves MAE unchanged") {
    Rng rng(4);
    auto p = random_pred(8, 8, rng);
    auto g = random_mask(8, 8, rng);
    auto up = [](const Gray& m) {
        Gray o{m.h * 2, m.w * 2, {}};
        o.v.resize(static_cast<size_t>(o.h) * o.w);
        for (int y = 0; y < o.h; ++y)
            for (int x = 0; x < o.w; ++x)
                o.v[static_cast<size_t>(y) * o.w + x] = m.at(y / 2, x / 2);
        return o;
    };
    CHECK(mae(up(p), up(g)) == mae(p, g));
}

TEST_CASE("evaluate_dataset: averaging, misses, perfect pair") {
    namespace fs = std::filesystem;
    const fs::path root = fs::temp_directory_path() / "dqnet_metrics_test";
    fs::remove_all(root);
    fs::create_directories(root / "pred");
    fs::create_directories(root / "gt");

    auto write_gray = [](const fs::path& p, const Gray& m) {
        ImageU8 img;
        img.h = m.h;
        img.w = m.w;
        img.channels = 1;
        img.px.resize(m.v.size());
        for (size_t i = 0; i < m.v.size(); ++i)
            img.px[i] = static_cast<uint8_t>(std::lround(m.v[i] * 255.0));
        write_png(p.string(), img);
    };

    auto g = blob_mask(16, 16);
    write_gray(root / "pred" / "a.png", g);  // perfect prediction
    write_gray(root / "gt" / "a.png", g);
    auto g2 = blob_mask(16, 16);
    auto p2 = invert(g2);
    write_gray(root / "pred" / "b.png", p2);
    write_gray(root / "gt" / "b.png", g2);
    write_gray(root / "pred" / "orphan.png", g);  // no matching mask

    auto eval = evaluate_dataset((root / "pred").string(), (root / "gt").string());
    CHECK(eval.aggregate.count == 2);
    REQUIRE(eval.errors.size() == 1);
    CHECK(eval.errors[0].find("orphan") != std::string::npos);

    // row a is the perfect score
    REQUIRE(eval.rows.size() == 2);
    CHECK(eval.rows[0].id == "a");
    CHECK(eval.rows[0].s == 1.0);
    CHECK(eval.rows[0].e == 1.0);
    CHECK(eval.rows[0].f == 1.0);
    CHECK(eval.rows[0].mae == 0.0);

    // aggregate is the arithmetic mean of the rows
    CHECK(eval.aggregate.mae ==
          doctest::Approx((eval.rows[0].mae + eval.rows[1].mae) / 2.0).epsilon(1e-12));
    CHECK(eval.aggregate.s_measure ==
          doctest::Approx((eval.rows[0].s + eval.rows[1].s) / 2.0).epsilon(1e-12));

    write_metric_csv(eval, (root / "report.csv").string());
    write_metric_json(eval, (root / "report.json").string());
    CHECK(fs::exists(root / "report.csv"));
    CHECK(fs::exists(root / "report.json"));
    fs::remove_all(root);
}

TEST_CASE("png roundtrip preserves 8-bit data") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "dqnet_png_test.png";
    ImageU8 img;
    img.h = 5;
    img.w = 7;
    img.channels = 3;
    img.px.resize(5 * 7 * 3);
    Rng rng(5);
    for (auto& b : img.px) b = static_cast<uint8_t>(rng.randint(0, 255));
    write_png(path.string(), img);
    auto back = read_png(path.string());
    CHECK(back.h == 5);
    CHECK(back.w == 7);
    CHECK(back.channels == 3);
    CHECK(back.px == img.px);
    fs::remove(path);
    CHECK_THROWS_AS(read_png(path.string()), IoError);
}
