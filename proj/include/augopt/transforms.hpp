#pragma once

#include <string>
#include <vector>

#include "augopt/rng.hpp"
#include "augopt/tensor.hpp"
#include "json.hpp"

namespace augopt {

// ---------------------------------------------------------------------------
// Shared geometry kernels

enum class Border { Zero, Clamp };

// Inverse-map affine about the image center: for each destination pixel the
// source position is  src = M * (dst - center) + center.
struct Affine2 {
    double m00 = 1.0, m01 = 0.0, m10 = 0.0, m11 = 0.0;

    bool is_identity() const {
        return m00 == 1.0 && m01 == 0.0 && m10 == 0.0 && m11 == 1.0;
    }
};

// Inverse map for: scale by zoom, rotate by angle_deg, then optional mirrors.
// Entries within 1e-9 of {0, ±1} are snapped so axis-aligned ops land on
// exact pixel centers and round-trip bit-exactly.
Affine2 inverse_affine(double zoom, double angle_deg, bool mirror_h,
                       bool mirror_v);

// Bilinear warp of [H,W] or [c,H,W]; each channel warped independently.
Tensor warp_bilinear(const Tensor& src, const Affine2& a, Border border);
// Nearest-neighbor warp of labels; out-of-bounds fills with 0.
LabelMap warp_nearest(const LabelMap& src, const Affine2& a);

Tensor gaussian_blur(const Tensor& img, double sigma);
Tensor sharpen(const Tensor& img, double sigma);  // img + (img - blur)
Tensor add_gaussian_noise(const Tensor& img, double sigma, Rng& rng);
// Area-average downscale to round(dim*factor), bilinear upscale back.
Tensor simulate_low_res(const Tensor& img, double factor);
// Min-max rescale to [0,1], x^exponent (inverted: 1-(1-x)^exponent), back.
Tensor gamma_correct(const Tensor& img, double exponent, bool inverted);

// ---------------------------------------------------------------------------
// Training-time augmentation registry

enum class TraKind {
    Off,
    Scale,
    Rotate,
    MirrorH,
    MirrorV,
    Gamma,
    InvGamma,
    IntShift,
    IntScale,
    Contrast,
    Blur,
    Sharpen,
    GaussNoise,
    LowRes,
    // Pointwise corruptions for the suppression experiments.
    PowSquare,    // x^2
    PowQuartic,   // x^4
    MulTiny,      // 0.01 x
    NegMulTiny,   // -0.01 x
    AddHuge,      // x + 300
};

// One magnitude choice within a slot. lo == hi encodes a fixed magnitude.
// symmetric means the direction sign is drawn fair at sample time.
struct MagnitudeBin {
    TraKind kind = TraKind::Off;
    double lo = 0.0;
    double hi = 0.0;
    bool symmetric = false;
};

struct TraSlot {
    int slot_id = 0;
    std::string category;  // "spatial" | "intensity" | "noise"
    std::string name;
    std::vector<MagnitudeBin> bins;  // bins[0] is always "off"
};

// L=10 slots: scaling, rotation, mirror-h, mirror-v, gamma, inverted gamma,
// intensity shift, intensity scale, contrast, and one noise slot whose bins
// cycle blur / sharpen / gaussian-noise / low-res magnitudes.
std::vector<TraSlot> default_tra_registry();

// Appends an extra slot holding the five destructive pointwise ops
// (x^2, x^4, 0.01x, -0.01x, x+300) so suppression runs can inject them.
std::vector<TraSlot> with_corruption_slot(std::vector<TraSlot> slots);

// One sampled realization of the whole cascade.
struct TraInstance {
    struct SlotDraw {
        int bin = 0;
        double magnitude = 0.0;
        int sign = 1;  // -1 only when the bin is symmetric
    };
    std::vector<SlotDraw> draws;
    uint64_t noise_seed = 0;  // drawn at sample time so application is pure
};

// Magnitude uniform in the chosen bin, fair sign when symmetric. Consumes
// the same number of rng draws regardless of chosen bins.
TraInstance sample_tra_instance(const std::vector<TraSlot>& slots,
                                const std::vector<int>& chosen_bins, Rng& rng);

// Spatial slots act on image and labels (one composed warp, nearest labels);
// intensity and noise slots act on the image only, in slot order.
void apply_tra(const std::vector<TraSlot>& slots, const TraInstance& inst,
               const Tensor& image, const LabelMap& labels, Tensor& out_image,
               LabelMap& out_labels);

// ---------------------------------------------------------------------------
// Test-time augmentation registry

enum class TeaKind {
    Identity,
    ScaleDown,
    ScaleUp,
    RotateAcw,
    RotateCw,
    MirrorH,
    MirrorV,
    MirrorBoth,
    GammaExpand,
    GammaCompress,
    IntAdd,
    IntSub,
    IntScaleUp,
    IntScaleDown,
    ContrastUp,
    ContrastDown,
    Blur,
    Sharpen,
    GaussNoise,
    LowRes,
    // Pointwise corruptions for the suppression experiments.
    PowSquare,
    PowQuartic,
    MulTiny,
    NegMulTiny,
    AddHuge,
};

struct TeaOp {
    int op_id = 0;
    std::string category;  // "identity" | "spatial" | "intensity" | "noise"
    std::string name;
    TeaKind kind = TeaKind::Identity;
    double magnitude = 0.0;
    bool spatial_inverse = false;  // else the prediction-space inverse is identity
};

// Deterministic op pool: identity; scaling down/up {0.05,0.15,0.25};
// rotation acw {5,15,25,90,180} and cw {5,15,25,90}; mirror h/v/both;
// gamma expansion/compression {0.1,0.3,0.5}; intensity add/sub, intensity
// scale up/down, contrast up/down {0.05,0.15,0.25}; blur {0.5,0.7,0.9},
// sharpen {0.9,0.7,0.5}, gaussian noise {0.025,0.075,0.125},
// low resolution {0.9,0.7,0.5}.
std::vector<TeaOp> default_tea_registry();

// Appends the five destructive pointwise ops to the pool.
std::vector<TeaOp> with_corruption_ops(std::vector<TeaOp> ops);

// Deterministic: identical input -> identical output (noise ops use a
// fixed per-op seed).
Tensor apply_tea(const TeaOp& op, const Tensor& image);

// Geometry of the op applied to a [c,H,W] map (clamp border); non-spatial
// ops leave the map unchanged. Round-trip oracle counterpart of invert_tea.
Tensor apply_tea_to_map(const TeaOp& op, const Tensor& map);

// Geometry of the op applied to labels (nearest neighbor, fill 0);
// non-spatial ops leave them unchanged.
LabelMap apply_tea_to_labels(const TeaOp& op, const LabelMap& labels);

// Undo the op's geometry on a per-class probability map: reciprocal scale,
// negated rotation, same mirror, bilinear with clamp border, then per-pixel
// renormalization to sum 1. Intensity/noise ops return the map unchanged.
Tensor invert_tea(const TeaOp& op, const Tensor& prediction);

// ---------------------------------------------------------------------------
// Serialization (contract for policy export joins)

nlohmann::json tra_registry_json(const std::vector<TraSlot>& slots);
nlohmann::json tea_registry_json(const std::vector<TeaOp>& ops);

const char* tra_kind_name(TraKind k);
const char* tea_kind_name(TeaKind k);

}  // namespace augopt
