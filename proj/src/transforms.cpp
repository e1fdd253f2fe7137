#include "augopt/transforms.hpp"

#include <cmath>
#include <cstdio>

#include "augopt/errors.hpp"

namespace augopt {

// ---------------------------------------------------------------------------
// Geometry

namespace {

double snap(double v) {
    for (double t : {0.0, 1.0, -1.0})
        if (std::fabs(v - t) < 1e-9) return t;
    return v;
}

struct Plane {
    const float* p;
    int H, W;
};

float sample_bilinear(const Plane& pl, double sy, double sx, Border border) {
    if (border == Border::Clamp) {
        sx = std::clamp(sx, 0.0, (double)(pl.W - 1));
        sy = std::clamp(sy, 0.0, (double)(pl.H - 1));
    } else if (sx <= -1.0 || sx >= (double)pl.W || sy <= -1.0 ||
               sy >= (double)pl.H) {
        return 0.0f;
    }
    const int x0 = (int)std::floor(sx);
    const int y0 = (int)std::floor(sy);
    const double fx = sx - x0;
    const double fy = sy - y0;
    auto tap = [&](int y, int x) -> double {
        if (border == Border::Clamp) {
            y = std::clamp(y, 0, pl.H - 1);
            x = std::clamp(x, 0, pl.W - 1);
        } else if (y < 0 || y >= pl.H || x < 0 || x >= pl.W) {
            return 0.0;
        }
        return pl.p[(int64_t)y * pl.W + x];
    };
    const double v =
        (1.0 - fy) * ((1.0 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1)) +
        fy * ((1.0 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1));
    return (float)v;
}

void plane_dims(const Tensor& t, int& c, int& H, int& W) {
    if (t.rank() == 2) {
        c = 1;
        H = t.dim(0);
        W = t.dim(1);
    } else if (t.rank() == 3) {
        c = t.dim(0);
        H = t.dim(1);
        W = t.dim(2);
    } else {
        throw ConfigError("transform: tensor must be [H,W] or [c,H,W], got " +
                          shape_str(t.shape));
    }
}

}  // namespace

Affine2 inverse_affine(double zoom, double angle_deg, bool mirror_h,
                       bool mirror_v) {
    if (zoom <= 0.0) throw ConfigError("inverse_affine: zoom must be > 0");
    const double rad = angle_deg * M_PI / 180.0;
    const double c = snap(std::cos(rad));
    const double s = snap(std::sin(rad));
    const double iz = snap(1.0 / zoom);
    const double sh = mirror_h ? -1.0 : 1.0;
    const double sv = mirror_v ? -1.0 : 1.0;
    // Forward op is mirror(rotate(scale(p))); invert right-to-left.
    Affine2 a;
    a.m00 = iz * c * sh;
    a.m01 = iz * s * sv;
    a.m10 = iz * -s * sh;
    a.m11 = iz * c * sv;
    return a;
}

Tensor warp_bilinear(const Tensor& src, const Affine2& a, Border border) {
    if (a.is_identity()) return src;
    int c, H, W;
    plane_dims(src, c, H, W);
    const double cx = (W - 1) / 2.0;
    const double cy = (H - 1) / 2.0;
    Tensor out(src.shape);
    for (int ch = 0; ch < c; ++ch) {
        Plane pl{src.ptr() + (int64_t)ch * H * W, H, W};
        float* op = out.ptr() + (int64_t)ch * H * W;
        for (int y = 0; y < H; ++y) {
            const double dy = y - cy;
            for (int x = 0; x < W; ++x) {
                const double dx = x - cx;
                const double sx = cx + a.m00 * dx + a.m01 * dy;
                const double sy = cy + a.m10 * dx + a.m11 * dy;
                op[(int64_t)y * W + x] = sample_bilinear(pl, sy, sx, border);
            }
        }
    }
    return out;
}

LabelMap warp_nearest(const LabelMap& src, const Affine2& a) {
    if (a.is_identity()) return src;
    if (src.shape.size() != 2)
        throw ConfigError("warp_nearest: labels must be [H,W]");
    const int H = src.dim(0), W = src.dim(1);
    const double cx = (W - 1) / 2.0;
    const double cy = (H - 1) / 2.0;
    LabelMap out(src.shape);
    for (int y = 0; y < H; ++y) {
        const double dy = y - cy;
        for (int x = 0; x < W; ++x) {
            const double dx = x - cx;
            const int sx = (int)std::lround(cx + a.m00 * dx + a.m01 * dy);
            const int sy = (int)std::lround(cy + a.m10 * dx + a.m11 * dy);
            out.data[(int64_t)y * W + x] =
                (sx < 0 || sx >= W || sy < 0 || sy >= H)
                    ? 0
                    : src.data[(int64_t)sy * W + sx];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Intensity / noise kernels

Tensor gaussian_blur(const Tensor& img, double sigma) {
    if (sigma <= 0.0) return img;
    int c, H, W;
    plane_dims(img, c, H, W);
    const int r = std::max(1, (int)std::ceil(3.0 * sigma));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int i = -r; i <= r; ++i) {
        k[i + r] = std::exp(-(double)(i * i) / (2.0 * sigma * sigma));
        sum += k[i + r];
    }
    for (auto& v : k) v /= sum;

    Tensor tmp(img.shape), out(img.shape);
    for (int ch = 0; ch < c; ++ch) {
        const float* in = img.ptr() + (int64_t)ch * H * W;
        float* tp = tmp.ptr() + (int64_t)ch * H * W;
        float* op = out.ptr() + (int64_t)ch * H * W;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] * in[(int64_t)y * W +
                                         std::clamp(x + i, 0, W - 1)];
                tp[(int64_t)y * W + x] = (float)acc;
            }
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                double acc = 0.0;
                for (int i = -r; i <= r; ++i)
                    acc += k[i + r] *
                           tp[(int64_t)std::clamp(y + i, 0, H - 1) * W + x];
                op[(int64_t)y * W + x] = (float)acc;
            }
    }
    return out;
}

Tensor sharpen(const Tensor& img, double sigma) {
    Tensor blurred = gaussian_blur(img, sigma);
    Tensor out = img;
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] += img.data[i] - blurred.data[i];
    return out;
}

Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng) {
    Tensor out = img;
    for (auto& v : out.data) v += (float)(sigma * rng.gaussian());
    return out;
}

namespace {

// Separable area-average along one axis (rows of a [H,W] view).
std::vector<float> area_downscale_rows(const std::vector<float>& in, int rows,
                                       int cols, int new_rows) {
    std::vector<float> out((size_t)new_rows * cols, 0.0f);
    const double scale = (double)rows / new_rows;  // > 1
    for (int i = 0; i < new_rows; ++i) {
        const double lo = i * scale;
        const double hi = (i + 1) * scale;
        for (int j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int r = (int)std::floor(lo); r < (int)std::ceil(hi); ++r) {
                const double cover =
                    std::min(hi, (double)(r + 1)) - std::max(lo, (double)r);
                acc += cover * in[(size_t)std::min(r, rows - 1) * cols + j];
            }
            out[(size_t)i * cols + j] = (float)(acc / scale);
        }
    }
    return out;
}

std::vector<float> transpose(const std::vector<float>& in, int rows,
                             int cols) {
    std::vector<float> out(in.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            out[(size_t)c * rows + r] = in[(size_t)r * cols + c];
    return out;
}

// Bilinear resize of a single plane (pixel-center alignment).
std::vector<float> bilinear_resize(const std::vector<float>& in, int rows,
                                   int cols, int new_rows, int new_cols) {
    std::vector<float> out((size_t)new_rows * new_cols);
    Plane pl{in.data(), rows, cols};
    for (int y = 0; y < new_rows; ++y) {
        const double sy = ((y + 0.5) * rows / new_rows) - 0.5;
        for (int x = 0; x < new_cols; ++x) {
            const double sx = ((x + 0.5) * cols / new_cols) - 0.5;
            out[(size_t)y * new_cols + x] =
                sample_bilinear(pl, sy, sx, Border::Clamp);
        }
    }
    return out;
}

}  // namespace

Tensor simulate_low_res(const Tensor& img, double factor) {
    if (factor <= 0.0 || factor > 1.0)
        throw ConfigError("simulate_low_res: factor must be in (0,1]");
    int c, H, W;
    plane_dims(img, c, H, W);
    const int sh = std::max(1, (int)std::lround(H * factor));
    const int sw = std::max(1, (int)std::lround(W * factor));
    if (sh >= H && sw >= W) return img;
    Tensor out(img.shape);
    for (int ch = 0; ch < c; ++ch) {
        std::vector<float> pl(img.ptr() + (int64_t)ch * H * W,
                              img.ptr() + (int64_t)(ch + 1) * H * W);
        pl = area_downscale_rows(pl, H, W, sh);        // [sh, W]
        pl = transpose(pl, sh, W);                     // [W, sh]
        pl = area_downscale_rows(pl, W, sh, sw);       // [sw, sh]
        pl = transpose(pl, sw, sh);                    // [sh, sw]
        pl = bilinear_resize(pl, sh, sw, H, W);
        std::copy(pl.begin(), pl.end(), out.ptr() + (int64_t)ch * H * W);
    }
    return out;
}

Tensor gamma_correct(const Tensor& img, double exponent, bool inverted) {
    if (exponent == 1.0) return img;
    float mn = img.data.empty() ? 0.0f : img.data[0];
    float mx = mn;
    for (float v : img.data) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    const double range = (double)mx - mn;
    if (range < 1e-12) return img;
    Tensor out = img;
    for (auto& v : out.data) {
        double u = ((double)v - mn) / range;
        u = inverted ? 1.0 - std::pow(1.0 - u, exponent)
                     : std::pow(u, exponent);
        v = (float)(u * range + mn);
    }
    return out;
}

// ---------------------------------------------------------------------------
// TRA registry

namespace {

MagnitudeBin off_bin() { return MagnitudeBin{TraKind::Off, 0.0, 0.0, false}; }

MagnitudeBin bin(TraKind k, double lo, double hi, bool sym) {
    return MagnitudeBin{k, lo, hi, sym};
}

}  // namespace

std::vector<TraSlot> default_tra_registry() {
    std::vector<TraSlot> slots;
    auto add = [&](const char* cat, const char* name,
                   std::vector<MagnitudeBin> bins) {
        TraSlot s;
        s.slot_id = (int)slots.size();
        s.category = cat;
        s.name = name;
        s.bins = std::move(bins);
        slots.push_back(std::move(s));
    };
    add("spatial", "scaling",
        {off_bin(), bin(TraKind::Scale, 0.0, 0.1, true),
         bin(TraKind::Scale, 0.1, 0.2, true), bin(TraKind::Scale, 0.2, 0.3, true),
         bin(TraKind::Scale, 0.3, 0.4, true),
         bin(TraKind::Scale, 0.4, 0.5, true)});
    add("spatial", "rotation",
        {off_bin(), bin(TraKind::Rotate, 0.0, 10.0, true),
         bin(TraKind::Rotate, 10.0, 20.0, true),
         bin(TraKind::Rotate, 20.0, 30.0, true),
         bin(TraKind::Rotate, 90.0, 90.0, true)});
    add("spatial", "mirror-h", {off_bin(), bin(TraKind::MirrorH, 0, 0, false)});
    add("spatial", "mirror-v", {off_bin(), bin(TraKind::MirrorV, 0, 0, false)});
    add("intensity", "gamma",
        {off_bin(), bin(TraKind::Gamma, 0.0, 0.2, true),
         bin(TraKind::Gamma, 0.2, 0.4, true),
         bin(TraKind::Gamma, 0.4, 0.6, true)});
    add("intensity", "inverted-gamma",
        {off_bin(), bin(TraKind::InvGamma, 0.0, 0.2, true),
         bin(TraKind::InvGamma, 0.2, 0.4, true),
         bin(TraKind::InvGamma, 0.4, 0.6, true)});
    add("intensity", "intensity-shift",
        {off_bin(), bin(TraKind::IntShift, 0.0, 0.1, true),
         bin(TraKind::IntShift, 0.1, 0.2, true),
         bin(TraKind::IntShift, 0.2, 0.3, true)});
    add("intensity", "intensity-scale",
        {off_bin(), bin(TraKind::IntScale, 0.0, 0.1, true),
         bin(TraKind::IntScale, 0.1, 0.2, true),
         bin(TraKind::IntScale, 0.2, 0.3, true)});
    add("intensity", "contrast",
        {off_bin(), bin(TraKind::Contrast, 0.0, 0.1, true),
         bin(TraKind::Contrast, 0.1, 0.2, true),
         bin(TraKind::Contrast, 0.2, 0.3, true)});
    add("noise", "noise",
        {off_bin(), bin(TraKind::Blur, 0.4, 0.6, false),
         bin(TraKind::Blur, 0.6, 0.8, false), bin(TraKind::Blur, 0.8, 1.0, false),
         bin(TraKind::Sharpen, 0.8, 1.0, false),
         bin(TraKind::Sharpen, 0.6, 0.8, false),
         bin(TraKind::Sharpen, 0.4, 0.6, false),
         bin(TraKind::GaussNoise, 0.0, 0.05, false),
         bin(TraKind::GaussNoise, 0.05, 0.10, false),
         bin(TraKind::GaussNoise, 0.10, 0.15, false),
         bin(TraKind::LowRes, 0.8, 1.0, false),
         bin(TraKind::LowRes, 0.6, 0.8, false),
         bin(TraKind::LowRes, 0.4, 0.6, false)});
    return slots;
}

TraInstance sample_tra_instance(const std::vector<TraSlot>& slots,
                                const std::vector<int>& chosen_bins,
                                Rng& rng) {
    if (chosen_bins.size() != slots.size())
        throw ConfigError("sample_tra_instance: chosen_bins length " +
                          std::to_string(chosen_bins.size()) + " != " +
                          std::to_string(slots.size()) + " slots");
    TraInstance inst;
    inst.draws.resize(slots.size());
    for (size_t i = 0; i < slots.size(); ++i) {
        const int b = chosen_bins[i];
        if (b < 0 || b >= (int)slots[i].bins.size())
            throw ConfigError("sample_tra_instance: bin " + std::to_string(b) +
                              " out of range for slot " + slots[i].name);
        // Always one uniform and one coin per slot, so the stream advances
        // identically whatever bins are chosen.
        const double u = rng.uniform();
        const bool heads = rng.coin();
        const MagnitudeBin& mb = slots[i].bins[b];
        auto& d = inst.draws[i];
        d.bin = b;
        d.magnitude = mb.lo + u * (mb.hi - mb.lo);
        d.sign = (mb.symmetric && !heads) ? -1 : 1;
    }
    inst.noise_seed = rng.next_u64();
    return inst;
}

void apply_tra(const std::vector<TraSlot>& slots, const TraInstance& inst,
               const Tensor& image, const LabelMap& labels, Tensor& out_image,
               LabelMap& out_labels) {
    if (inst.draws.size() != slots.size())
        throw ConfigError("apply_tra: instance does not match registry");

    double zoom = 1.0, angle = 0.0;
    bool mir_h = false, mir_v = false;
    bool any_spatial = false;
    Tensor img = image;
    for (size_t i = 0; i < slots.size(); ++i) {
        const auto& d = inst.draws[i];
        if (d.bin == 0) continue;
        const MagnitudeBin& mb = slots[i].bins[d.bin];
        switch (mb.kind) {
            case TraKind::Scale:
                zoom = std::pow(1.0 + d.magnitude, d.sign);
                any_spatial = true;
                break;
            case TraKind::Rotate:
                angle = d.sign * d.magnitude;
                any_spatial = true;
                break;
            case TraKind::MirrorH:
                mir_h = true;
                any_spatial = true;
                break;
            case TraKind::MirrorV:
                mir_v = true;
                any_spatial = true;
                break;
            default:
                break;
        }
    }
    if (any_spatial) {
        const Affine2 a = inverse_affine(zoom, angle, mir_h, mir_v);
        img = warp_bilinear(img, a, Border::Zero);
        out_labels = warp_nearest(labels, a);
    } else {
        out_labels = labels;
    }

    for (size_t i = 0; i < slots.size(); ++i) {
        const auto& d = inst.draws[i];
        if (d.bin == 0) continue;
        const MagnitudeBin& mb = slots[i].bins[d.bin];
        switch (mb.kind) {
            case TraKind::Gamma:
                img = gamma_correct(img, std::pow(1.0 + d.magnitude, d.sign),
                                    false);
                break;
            case TraKind::InvGamma:
                img = gamma_correct(img, std::pow(1.0 + d.magnitude, d.sign),
                                    true);
                break;
            case TraKind::IntShift:
                for (auto& v : img.data) v += (float)(d.sign * d.magnitude);
                break;
            case TraKind::IntScale: {
                const float f = (float)std::pow(1.0 + d.magnitude, d.sign);
                for (auto& v : img.data) v *= f;
                break;
            }
            case TraKind::Contrast: {
                double mean = 0.0;
                for (float v : img.data) mean += v;
                mean /= (double)img.data.size();
                const double f = std::pow(1.0 + d.magnitude, d.sign);
                for (auto& v : img.data)
                    v = (float)(((double)v - mean) * f + mean);
                break;
            }
            case TraKind::Blur:
                img = gaussian_blur(img, d.magnitude);
                break;
            case TraKind::Sharpen:
                img = sharpen(img, d.magnitude);
                break;
            case TraKind::GaussNoise: {
                Rng nrng = Rng::stream(inst.noise_seed, 0x6e01);
                img = add_gaussian_noise(img, d.magnitude, nrng);
                break;
            }
            case TraKind::LowRes:
                img = simulate_low_res(img, d.magnitude);
                break;
            case TraKind::PowSquare:
                for (auto& v : img.data) v = v * v;
                break;
            case TraKind::PowQuartic:
                for (auto& v : img.data) v = (v * v) * (v * v);
                break;
            case TraKind::MulTiny:
                for (auto& v : img.data) v *= 0.01f;
                break;
            case TraKind::NegMulTiny:
                for (auto& v : img.data) v *= -0.01f;
                break;
            case TraKind::AddHuge:
                for (auto& v : img.data) v += 300.0f;
                break;
            default:
                break;
        }
    }
    out_image = std::move(img);
}

std::vector<TraSlot> with_corruption_slot(std::vector<TraSlot> slots) {
    TraSlot s;
    s.slot_id = (int)slots.size();
    s.category = "intensity";
    s.name = "corruption";
    s.bins.push_back({TraKind::Off, 0.0, 0.0, false});
    s.bins.push_back({TraKind::PowSquare, 0.0, 0.0, false});
    s.bins.push_back({TraKind::PowQuartic, 0.0, 0.0, false});
    s.bins.push_back({TraKind::MulTiny, 0.0, 0.0, false});
    s.bins.push_back({TraKind::NegMulTiny, 0.0, 0.0, false});
    s.bins.push_back({TraKind::AddHuge, 0.0, 0.0, false});
    slots.push_back(std::move(s));
    return slots;
}

// ---------------------------------------------------------------------------
// TEA registry

namespace {

std::string trim_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

std::vector<TeaOp> default_tea_registry() {
    std::vector<TeaOp> ops;
    auto add = [&](const char* cat, std::string name, TeaKind kind,
                   double mag, bool spatial_inv) {
        TeaOp op;
        op.op_id = (int)ops.size();
        op.category = cat;
        op.name = std::move(name);
        op.kind = kind;
        op.magnitude = mag;
        op.spatial_inverse = spatial_inv;
        ops.push_back(std::move(op));
    };
    add("identity", "identity", TeaKind::Identity, 0.0, false);
    for (double m : {0.05, 0.15, 0.25})
        add("spatial", "scale-down-" + trim_num(m), TeaKind::ScaleDown, m,
            true);
    for (double m : {0.05, 0.15, 0.25})
        add("spatial", "scale-up-" + trim_num(m), TeaKind::ScaleUp, m, true);
    for (double m : {5.0, 15.0, 25.0, 90.0, 180.0})
        add("spatial", "rotate-acw-" + trim_num(m), TeaKind::RotateAcw, m,
            true);
    for (double m : {5.0, 15.0, 25.0, 90.0})
        add("spatial", "rotate-cw-" + trim_num(m), TeaKind::RotateCw, m, true);
    add("spatial", "mirror-h", TeaKind::MirrorH, 0.0, true);
    add("spatial", "mirror-v", TeaKind::MirrorV, 0.0, true);
    add("spatial", "mirror-both", TeaKind::MirrorBoth, 0.0, true);
    for (double m : {0.1, 0.3, 0.5})
        add("intensity", "gamma-expand-" + trim_num(m), TeaKind::GammaExpand,
            m, false);
    for (double m : {0.1, 0.3, 0.5})
        add("intensity", "gamma-compress-" + trim_num(m),
            TeaKind::GammaCompress, m, false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "intensity-add-" + trim_num(m), TeaKind::IntAdd, m,
            false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "intensity-sub-" + trim_num(m), TeaKind::IntSub, m,
            false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "intensity-scale-up-" + trim_num(m),
            TeaKind::IntScaleUp, m, false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "intensity-scale-down-" + trim_num(m),
            TeaKind::IntScaleDown, m, false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "contrast-up-" + trim_num(m), TeaKind::ContrastUp, m,
            false);
    for (double m : {0.05, 0.15, 0.25})
        add("intensity", "contrast-down-" + trim_num(m), TeaKind::ContrastDown,
            m, false);
    for (double m : {0.5, 0.7, 0.9})
        add("noise", "blur-" + trim_num(m), TeaKind::Blur, m, false);
    for (double m : {0.9, 0.7, 0.5})
        add("noise", "sharpen-" + trim_num(m), TeaKind::Sharpen, m, false);
    for (double m : {0.025, 0.075, 0.125})
        add("noise", "noise-" + trim_num(m), TeaKind::GaussNoise, m, false);
    for (double m : {0.9, 0.7, 0.5})
        add("noise", "low-res-" + trim_num(m), TeaKind::LowRes, m, false);
    return ops;
}

namespace {

// Forward geometry parameters of a spatial TEA op.
void tea_geometry(const TeaOp& op, double& zoom, double& angle, bool& mh,
                  bool& mv) {
    zoom = 1.0;
    angle = 0.0;
    mh = mv = false;
    switch (op.kind) {
        case TeaKind::ScaleDown: zoom = 1.0 / (1.0 + op.magnitude); break;
        case TeaKind::ScaleUp: zoom = 1.0 + op.magnitude; break;
        case TeaKind::RotateAcw: angle = op.magnitude; break;
        case TeaKind::RotateCw: angle = -op.magnitude; break;
        case TeaKind::MirrorH: mh = true; break;
        case TeaKind::MirrorV: mv = true; break;
        case TeaKind::MirrorBoth: mh = mv = true; break;
        default: break;
    }
}

}  // namespace

Tensor apply_tea(const TeaOp& op, const Tensor& image) {
    switch (op.kind) {
        case TeaKind::Identity:
            return image;
        case TeaKind::ScaleDown:
        case TeaKind::ScaleUp:
        case TeaKind::RotateAcw:
        case TeaKind::RotateCw:
        case TeaKind::MirrorH:
        case TeaKind::MirrorV:
        case TeaKind::MirrorBoth: {
            double z, ang;
            bool mh, mv;
            tea_geometry(op, z, ang, mh, mv);
            return warp_bilinear(image, inverse_affine(z, ang, mh, mv),
                                 Border::Zero);
        }
        case TeaKind::GammaExpand:
            return gamma_correct(image, 1.0 + op.magnitude, false);
        case TeaKind::GammaCompress:
            return gamma_correct(image, 1.0 / (1.0 + op.magnitude), false);
        case TeaKind::IntAdd: {
            Tensor out = image;
            for (auto& v : out.data) v += (float)op.magnitude;
            return out;
        }
        case TeaKind::IntSub: {
            Tensor out = image;
            for (auto& v : out.data) v -= (float)op.magnitude;
            return out;
        }
        case TeaKind::IntScaleUp: {
            Tensor out = image;
            for (auto& v : out.data) v *= (float)(1.0 + op.magnitude);
            return out;
        }
        case TeaKind::IntScaleDown: {
            Tensor out = image;
            for (auto& v : out.data) v /= (float)(1.0 + op.magnitude);
            return out;
        }
        case TeaKind::ContrastUp:
        case TeaKind::ContrastDown: {
            double mean = 0.0;
            for (float v : image.data) mean += v;
            mean /= (double)image.data.size();
            const double f = op.kind == TeaKind::ContrastUp
                                 ? 1.0 + op.magnitude
                                 : 1.0 / (1.0 + op.magnitude);
            Tensor out = image;
            for (auto& v : out.data)
                v = (float)(((double)v - mean) * f + mean);
            return out;
        }
        case TeaKind::Blur:
            return gaussian_blur(image, op.magnitude);
        case TeaKind::Sharpen:
            return sharpen(image, op.magnitude);
        case TeaKind::GaussNoise: {
            // Fixed per-op stream keeps the op deterministic.
            Rng rng = Rng::stream(0x7ea00000ULL + (uint64_t)op.op_id, 1);
            return add_gaussian_noise(image, op.magnitude, rng);
        }
        case TeaKind::LowRes:
            return simulate_low_res(image, op.magnitude);
        case TeaKind::PowSquare: {
            Tensor out = image;
            for (auto& v : out.data) v = v * v;
            return out;
        }
        case TeaKind::PowQuartic: {
            Tensor out = image;
            for (auto& v : out.data) v = (v * v) * (v * v);
            return out;
        }
        case TeaKind::MulTiny: {
            Tensor out = image;
            for (auto& v : out.data) v *= 0.01f;
            return out;
        }
        case TeaKind::NegMulTiny: {
            Tensor out = image;
            for (auto& v : out.data) v *= -0.01f;
            return out;
        }
        case TeaKind::AddHuge: {
            Tensor out = image;
            for (auto& v : out.data) v += 300.0f;
            return out;
        }
    }
    throw ConfigError("apply_tea: unknown op kind");
}

std::vector<TeaOp> with_corruption_ops(std::vector<TeaOp> ops) {
    const std::pair<TeaKind, const char*> extra[] = {
        {TeaKind::PowSquare, "pow2"},
        {TeaKind::PowQuartic, "pow4"},
        {TeaKind::MulTiny, "mul-0.01"},
        {TeaKind::NegMulTiny, "neg-mul-0.01"},
        {TeaKind::AddHuge, "add-300"},
    };
    for (const auto& [kind, name] : extra) {
        TeaOp op;
        op.op_id = (int)ops.size();
        op.category = "intensity";
        op.name = name;
        op.kind = kind;
        op.magnitude = 0.0;
        op.spatial_inverse = false;
        ops.push_back(std::move(op));
    }
    return ops;
}

Tensor apply_tea_to_map(const TeaOp& op, const Tensor& map) {
    if (!op.spatial_inverse) return map;
    double z, ang;
    bool mh, mv;
    tea_geometry(op, z, ang, mh, mv);
    return warp_bilinear(map, inverse_affine(z, ang, mh, mv), Border::Clamp);
}

LabelMap apply_tea_to_labels(const TeaOp& op, const LabelMap& labels) {
    if (!op.spatial_inverse) return labels;
    double z, ang;
    bool mh, mv;
    tea_geometry(op, z, ang, mh, mv);
    return warp_nearest(labels, inverse_affine(z, ang, mh, mv));
}

Tensor invert_tea(const TeaOp& op, const Tensor& prediction) {
    if (prediction.rank() != 3)
        throw ConfigError("invert_tea: prediction must be [c,H,W]");
    if (!op.spatial_inverse) return prediction;
    double z, ang;
    bool mh, mv;
    tea_geometry(op, z, ang, mh, mv);
    // The inverse op has reciprocal zoom, negated angle, the same mirrors.
    Tensor out = warp_bilinear(
        prediction, inverse_affine(1.0 / z, -ang, mh, mv), Border::Clamp);
    const int c = out.dim(0);
    const int64_t plane = (int64_t)out.dim(1) * out.dim(2);
    for (int64_t q = 0; q < plane; ++q) {
        double s = 0.0;
        for (int k = 0; k < c; ++k) s += out.data[(int64_t)k * plane + q];
        if (s > 0.0) {
            for (int k = 0; k < c; ++k)
                out.data[(int64_t)k * plane + q] =
                    (float)(out.data[(int64_t)k * plane + q] / s);
        } else {
            for (int k = 0; k < c; ++k)
                out.data[(int64_t)k * plane + q] = 1.0f / (float)c;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

const char* tra_kind_name(TraKind k) {
    switch (k) {
        case TraKind::Off: return "off";
        case TraKind::Scale: return "scale";
        case TraKind::Rotate: return "rotate";
        case TraKind::MirrorH: return "mirror-h";
        case TraKind::MirrorV: return "mirror-v";
        case TraKind::Gamma: return "gamma";
        case TraKind::InvGamma: return "inverted-gamma";
        case TraKind::IntShift: return "intensity-shift";
        case TraKind::IntScale: return "intensity-scale";
        case TraKind::Contrast: return "contrast";
        case TraKind::Blur: return "blur";
        case TraKind::Sharpen: return "sharpen";
        case TraKind::GaussNoise: return "gaussian-noise";
        case TraKind::LowRes: return "low-res";
        case TraKind::PowSquare: return "pow2";
        case TraKind::PowQuartic: return "pow4";
        case TraKind::MulTiny: return "mul-0.01";
        case TraKind::NegMulTiny: return "neg-mul-0.01";
        case TraKind::AddHuge: return "add-300";
    }
    return "?";
}

const char* tea_kind_name(TeaKind k) {
    switch (k) {
        case TeaKind::Identity: return "identity";
        case TeaKind::ScaleDown: return "scale-down";
        case TeaKind::ScaleUp: return "scale-up";
        case TeaKind::RotateAcw: return "rotate-acw";
        case TeaKind::RotateCw: return "rotate-cw";
        case TeaKind::MirrorH: return "mirror-h";
        case TeaKind::MirrorV: return "mirror-v";
        case TeaKind::MirrorBoth: return "mirror-both";
        case TeaKind::GammaExpand: return "gamma-expand";
        case TeaKind::GammaCompress: return "gamma-compress";
        case TeaKind::IntAdd: return "intensity-add";
        case TeaKind::IntSub: return "intensity-sub";
        case TeaKind::IntScaleUp: return "intensity-scale-up";
        case TeaKind::IntScaleDown: return "intensity-scale-down";
        case TeaKind::ContrastUp: return "contrast-up";
        case TeaKind::ContrastDown: return "contrast-down";
        case TeaKind::Blur: return "blur";
        case TeaKind::Sharpen: return "sharpen";
        case TeaKind::GaussNoise: return "gaussian-noise";
        case TeaKind::LowRes: return "low-res";
        case TeaKind::PowSquare: return "pow2";
        case TeaKind::PowQuartic: return "pow4";
        case TeaKind::MulTiny: return "mul-0.01";
        case TeaKind::NegMulTiny: return "neg-mul-0.01";
        case TeaKind::AddHuge: return "add-300";
    }
    return "?";
}

nlohmann::json tra_registry_json(const std::vector<TraSlot>& slots) {
    auto arr = nlohmann::json::array();
    for (const auto& s : slots) {
        auto bins = nlohmann::json::array();
        for (const auto& b : s.bins)
            bins.push_back({{"kind", tra_kind_name(b.kind)},
                            {"lo", b.lo},
                            {"hi", b.hi},
                            {"symmetric", b.symmetric}});
        arr.push_back({{"slot_id", s.slot_id},
                       {"name", s.name},
                       {"category", s.category},
                       {"bins", bins}});
    }
    return arr;
}

nlohmann::json tea_registry_json(const std::vector<TeaOp>& ops) {
    auto arr = nlohmann::json::array();
    for (const auto& op : ops)
        arr.push_back({{"op_id", op.op_id},
                       {"name", op.name},
                       {"category", op.category},
                       {"kind", tea_kind_name(op.kind)},
                       {"magnitude", op.magnitude},
                       {"inverse", op.spatial_inverse
                                       ? "spatial-inverse"
                                       : "identity-on-prediction"}});
    return arr;
}

}  // namespace augopt
