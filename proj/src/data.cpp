#include "dqnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "dqnet/ops.hpp"
#include "dqnet/png_io.hpp"

namespace dqnet {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

struct TextureField {
    struct Component {
        double amp, fx, fy, phase;
    };
    std::vector<Component> parts;
    std::array<double, 3> channel_phase{};
    double amp_sum = 0;

    // value in [0.05, 0.95]
    double sample(int channel, double x, double y) const {
        double acc = 0;
        for (const auto& c : parts)
            acc += c.amp * std::sin(kTwoPi * (c.fx * x + c.fy * y) + c.phase +
                                    channel_phase[static_cast<size_t>(channel)]);
        return 0.5 + 0.45 * acc / amp_sum;
    }
};

TextureField make_texture(const SynthConfig& cfg, Rng& rng) {
    TextureField t;
    const int components = 10;
    for (int k = 0; k < components; ++k) {
        const double freq = rng.uniform(cfg.freq_lo, cfg.freq_hi) / cfg.image_size;
        const double angle = rng.uniform(0.0, kTwoPi);
        TextureField::Component c;
        c.amp = rng.uniform(0.4, 1.0);
        c.fx = freq * std::cos(angle);
        c.fy = freq * std::sin(angle);
        c.phase = rng.uniform(0.0, kTwoPi);
        t.parts.push_back(c);
        t.amp_sum += c.amp;
    }
    for (auto& p : t.channel_phase) p = rng.uniform(0.0, kTwoPi);
    return t;
}

struct Blob {
    double cx, cy, r0;
    std::array<double, 4> harm_amp{};
    std::array<double, 4> harm_phase{};

    double radius(double theta) const {
        double r = 1.0;
        for (int m = 0; m < 4; ++m)
            r += harm_amp[static_cast<size_t>(m)] *
                 std::cos((m + 2) * theta + harm_phase[static_cast<size_t>(m)]);
        return r0 * r;
    }
    double max_radius() const {
        double s = 1.0;
        for (double a : harm_amp) s += std::fabs(a);
        return r0 * s;
    }
    bool contains(double x, double y) const {
        const double dx = x - cx, dy = y - cy;
        const double d = std::sqrt(dx * dx + dy * dy);
        return d <= radius(std::atan2(dy, dx));
    }
};

Blob make_blob(const SynthConfig& cfg, Rng& rng) {
    const double s = cfg.image_size;
    for (int attempt = 0; attempt < 32; ++attempt) {
        Blob b;
        b.r0 = rng.uniform(0.18, 0.30) * s;
        for (int m = 0; m < 4; ++m) {
            b.harm_amp[static_cast<size_t>(m)] = rng.uniform(-0.10, 0.10);
            b.harm_phase[static_cast<size_t>(m)] = rng.uniform(0.0, kTwoPi);
        }
        const double margin = b.max_radius() + 1.0;
        if (2.0 * margin >= s) continue;
        b.cx = rng.uniform(margin, s - margin);
        b.cy = rng.uniform(margin, s - margin);
        return b;
    }
    throw DomainError("synth: could not place a blob inside the image");
}

Sample generate_one(const SynthConfig& cfg, uint64_t index) {
    Rng rng(mix_seed(cfg.seed, index));
    const int s = cfg.image_size;
    TextureField tex = make_texture(cfg, rng);
    const int blob_count = static_cast<int>(rng.randint(cfg.blobs_min, cfg.blobs_max));
    std::vector<Blob> blobs;
    for (int b = 0; b < blob_count; ++b) blobs.push_back(make_blob(cfg, rng));
    const double shift_x = rng.uniform(0.2, 0.4) * s;
    const double shift_y = rng.uniform(0.2, 0.4) * s;

    std::vector<float> img(static_cast<size_t>(3) * s * s);
    std::vector<float> mask(static_cast<size_t>(s) * s, 0.0f);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            bool inside = false;
            for (const auto& b : blobs)
                if (b.contains(x + 0.5, y + 0.5)) {
                    inside = true;
                    break;
                }
            if (inside) mask[static_cast<size_t>(y) * s + x] = 1.0f;
            for (int c = 0; c < 3; ++c) {
                const double bg = tex.sample(c, x + 0.5, y + 0.5);
                double v = bg;
                if (inside) {
                    const double shifted = tex.sample(c, x + 0.5 + shift_x, y + 0.5 + shift_y);
                    v = (1.0 - cfg.delta) * bg + cfg.delta * (1.0 - shifted);
                }
                img[(static_cast<size_t>(c) * s + y) * s + x] =
                    static_cast<float>(std::min(1.0, std::max(0.0, v)));
            }
        }
    Sample out;
    out.image = Tensor<float>::from_data({3, s, s}, std::move(img));
    out.mask = Tensor<float>::from_data({s, s}, std::move(mask));
    out.id = "synth_" + std::to_string(cfg.seed) + "_" + std::to_string(index);
    return out;
}

Tensor<float> to_float_image(const ImageU8& img) {
    std::vector<float> v(static_cast<size_t>(3) * img.h * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src_c = img.channels == 3 ? c : 0;
                v[(static_cast<size_t>(c) * img.h + y) * img.w + x] =
                    img.px[(static_cast<size_t>(y) * img.w + x) * img.channels + src_c] / 255.0f;
            }
    return Tensor<float>::from_data({3, img.h, img.w}, std::move(v));
}

Tensor<float> rebinarize(const Tensor<float>& m) {
    auto out = m.detach();
    for (auto& v : out.data()) v = v >= 0.5f ? 1.0f : 0.0f;
    return out;
}

Tensor<float> center_fit(const Tensor<float>& x, int target, float pad_value) {
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    auto out = Tensor<float>::full({C, target, target}, pad_value);
    const int oy = (target - H) / 2;
    const int ox = (target - W) / 2;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
            const int ty = y + oy;
            if (ty < 0 || ty >= target) continue;
            for (int x2 = 0; x2 < W; ++x2) {
                const int tx = x2 + ox;
                if (tx < 0 || tx >= target) continue;
                out.data()[(static_cast<size_t>(c) * target + ty) * target + tx] =
                    x.data()[(static_cast<size_t>(c) * H + y) * W + x2];
            }
        }
    return out;
}

}  // namespace

std::vector<Sample> gen_synthetic(const SynthConfig& cfg, int n) {
    cfg.validate();
    if (n < 1) throw ConfigError("synth: need at least one sample");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(generate_one(cfg, static_cast<uint64_t>(i)));
    return out;
}

std::vector<Sample> load_dataset(const std::string& dir, int target_size,
                                 std::vector<std::string>* warnings) {
    namespace fs = std::filesystem;
    const fs::path images = fs::path(dir) / "images";
    const fs::path masks = fs::path(dir) / "masks";
    std::vector<Sample> out;
    if (!fs::is_directory(images) || !fs::is_directory(masks)) {
        if (warnings) warnings->push_back("dataset '" + dir + "' has no images/ and masks/ pair");
        return out;
    }
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".png") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty() && warnings) warnings->push_back("dataset '" + dir + "' is empty");

    NoGradGuard ng;
    for (const auto& path : files) {
        const std::string stem = path.stem().string();
        const fs::path mask_path = masks / (stem + ".png");
        if (!fs::exists(mask_path)) {
            if (warnings) warnings->push_back("no mask for '" + stem + "'");
            continue;
        }
        try {
            Sample s;
            s.id = stem;
            s.image = to_float_image(read_png(path.string()));
            auto mask_img = read_png(mask_path.string());
            std::vector<float> mv(static_cast<size_t>(mask_img.h) * mask_img.w);
            for (size_t i = 0; i < mv.size(); ++i) {
                double acc = 0;
                for (int c = 0; c < mask_img.channels; ++c)
                    acc += mask_img.px[i * static_cast<size_t>(mask_img.channels) +
                                       static_cast<size_t>(c)];
                mv[i] = acc / mask_img.channels > 127.0 ? 1.0f : 0.0f;
            }
            s.mask = Tensor<float>::from_data({mask_img.h, mask_img.w}, std::move(mv));
            if (target_size > 0 &&
                (s.image.dim(1) != target_size || s.image.dim(2) != target_size)) {
                s.image = resize_bicubic(s.image, target_size, target_size);
                for (auto& v : s.image.data()) v = std::min(1.0f, std::max(0.0f, v));
                auto m3 = reshape(s.mask, {1, s.mask.dim(0), s.mask.dim(1)});
                s.mask = rebinarize(reshape(resize_bicubic(m3, target_size, target_size),
                                            {target_size, target_size}));
            }
            out.push_back(std::move(s));
        } catch (const std::exception& ex) {
            if (warnings) warnings->push_back(std::string("failed on '") + stem + "': " + ex.what());
        }
    }
    return out;
}

void save_dataset(const std::vector<Sample>& samples, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(dir) / "images");
    fs::create_directories(fs::path(dir) / "masks");
    for (const auto& s : samples) {
        const int h = s.image.dim(1), w = s.image.dim(2);
        ImageU8 img;
        img.h = h;
        img.w = w;
        img.channels = 3;
        img.px.resize(static_cast<size_t>(3) * h * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c)
                    img.px[(static_cast<size_t>(y) * w + x) * 3 + c] = static_cast<uint8_t>(
                        std::lround(s.image.data()[(static_cast<size_t>(c) * h + y) * w + x] * 255.0f));
        write_png((fs::path(dir) / "images" / (s.id + ".png")).string(), img);

        ImageU8 m;
        m.h = s.mask.dim(0);
        m.w = s.mask.dim(1);
        m.channels = 1;
        m.px.resize(static_cast<size_t>(m.h) * m.w);
        for (size_t i = 0; i < m.px.size(); ++i)
            m.px[i] = s.mask.data()[i] >= 0.5f ? 255 : 0;
        write_png((fs::path(dir) / "masks" / (s.id + ".png")).string(), m);
    }
}

AugmentParams sample_augment(Rng& rng) {
    AugmentParams p;
    p.hflip = rng.uniform() < 0.5;
    p.rot_quarter = static_cast<int>(rng.randint(0, 3));
    p.scale = rng.uniform(0.75, 1.25);
    return p;
}

Sample augment_with(const Sample& s, const AugmentParams& p) {
    NoGradGuard ng;
    const int H = s.image.dim(1), W = s.image.dim(2);
    if (H != W) throw DimensionError("augment expects square samples");

    auto apply_geo = [&](const Tensor<float>& t) {
        const int C = t.dim(0);
        Tensor<float> cur = t.detach();
        if (p.hflip) {
            auto flipped = Tensor<float>::zeros({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        flipped.data()[(static_cast<size_t>(c) * H + y) * W + x] =
                            cur.data()[(static_cast<size_t>(c) * H + y) * W + (W - 1 - x)];
            cur = flipped;
        }
        for (int r = 0; r < p.rot_quarter; ++r) {
            // 90 degrees counter-clockwise: (y,x) <- (x, W-1-y)
            auto rot = Tensor<float>::zeros({C, H, W});
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x)
                        rot.data()[(static_cast<size_t>(c) * H + y) * W + x] =
                            cur.data()[(static_cast<size_t>(c) * H + x) * W + (W - 1 - y)];
            cur = rot;
        }
        if (p.scale != 1.0) {
            const int scaled = std::max(1, static_cast<int>(std::lround(H * p.scale)));
            cur = center_fit(resize_bilinear(cur, scaled, scaled), H, 0.0f);
        }
        return cur;
    };

    Sample out;
    out.id = s.id;
    out.image = apply_geo(s.image);
    auto m3 = reshape(s.mask, {1, H, W});
    out.mask = rebinarize(reshape(apply_geo(m3), {H, W}));
    return out;
}

Sample augment(const Sample& s, Rng& rng) { return augment_with(s, sample_augment(rng)); }

}  // namespace dqnet
