#pragma once

#include <string>
#include <vector>

#include "augopt/rng.hpp"
#include "augopt/tensor.hpp"
#include "json.hpp"

namespace augopt {

// Distribution shift applied to held-out splits only. Intensity bias and
// contrast scale act on the final image; the rotation bias tilts the
// orientation distribution of the generated blobs.
struct ShiftSpec {
    double intensity_bias = 0.0;
    double contrast_scale = 1.0;
    double rotation_bias_deg = 0.0;

    bool is_zero() const {
        return intensity_bias == 0.0 && contrast_scale == 1.0 &&
               rotation_bias_deg == 0.0;
    }
};

struct TaskSpec {
    int height = 96;
    int width = 96;
    int classes = 2;
    double fg_prevalence = 0.02;  // in (0, 0.5]
    double texture_sigma = 0.04;  // per-pixel background noise
    int n_train = 40;
    int n_val = 10;
    int n_test = 20;
    ShiftSpec shift;  // applied to val and test images
};

struct Dataset {
    std::vector<Tensor> images;    // each [1,H,W]
    std::vector<LabelMap> labels;  // each [H,W], values < classes
    int classes = 2;
    std::string split;  // "train" | "val" | "test"
};

struct Task {
    Dataset train, val, test;
};

void validate_spec(const TaskSpec& spec);

// Soft-edged elliptical foreground blobs on a textured background. The blob
// union is sized so each image hits the prevalence target; the held-out
// splits additionally get the spec's shift. Bit-deterministic in (spec, seed).
Task gen_task(const TaskSpec& spec, uint64_t seed);

// Foreground pixel fraction across the whole split.
double fg_fraction(const Dataset& ds);

// Class-balanced patch batch. The first round(n*fg_target) patches are
// centered on foreground pixels, the rest on background pixels; every class
// tag is read back from the central pixel of the cropped label patch.
struct PatchBatch {
    Tensor images;   // [n,1,p,p]
    LabelMap labels; // [n,p,p]
    std::vector<int> cls;  // 0 background, 1 foreground (central pixel)
    std::vector<int> src;  // source image index
    std::vector<int> cy, cx;  // patch center in the source image
};

PatchBatch sample_patch_batch(const Dataset& ds, int n, int patch,
                              double fg_target, Rng& rng);

// Manifest JSON + two checksummed little-endian blobs under `dir`.
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

std::string sha256_hex(const void* data, size_t len);

// Blob layout shared by every on-disk artifact: 8 magic bytes then the raw
// little-endian payload. The returned/consumed manifest entry records file
// name, byte count and sha256 of the whole blob.
nlohmann::json write_blob_file(const std::string& path, const char magic[8],
                               const void* payload, size_t bytes);
// Validates magic, size and checksum; returns the full file contents.
std::vector<char> read_blob_file(const std::string& path,
                                 const char magic[8],
                                 const nlohmann::json& entry);

extern const char kMagicImages[8];
extern const char kMagicLabels[8];
extern const char kMagicProbs[8];

}  // namespace augopt
