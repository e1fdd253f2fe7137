#include "augopt/data.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "augopt/errors.hpp"

namespace augopt {

namespace fs = std::filesystem;
using nlohmann::json;

void validate_spec(const TaskSpec& spec) {
    if (spec.height < 8 || spec.width < 8)
        throw ConfigError("task image size must be at least 8x8");
    if (spec.classes < 2)
        throw ConfigError("task needs at least 2 classes");
    if (!(spec.fg_prevalence > 0.0 && spec.fg_prevalence <= 0.5))
        throw ConfigError("fg_prevalence must lie in (0, 0.5]");
    if (spec.texture_sigma < 0.0)
        throw ConfigError("texture_sigma must be nonnegative");
    if (spec.n_train <= 0 || spec.n_val <= 0 || spec.n_test <= 0)
        throw ConfigError("split sizes must be positive");
    if (spec.shift.contrast_scale <= 0.0)
        throw ConfigError("contrast_scale must be positive");
}

namespace {

struct Ellipse {
    double cy, cx;      // center
    double a, b;        // semi-axes, a >= b
    double cs, sn;      // orientation
    double amp;         // intensity lift over background
};

// Normalized elliptical distance; <= 1 inside the labeled blob.
double ell_dist(const Ellipse& e, double y, double x) {
    const double dy = y - e.cy, dx = x - e.cx;
    const double u = (e.cs * dx + e.sn * dy) / e.a;
    const double v = (-e.sn * dx + e.cs * dy) / e.b;
    return std::sqrt(u * u + v * v);
}

// One image: textured background, k soft-edged elliptical blobs whose union
// area matches the prevalence target, then optional split shift.
void gen_image(const TaskSpec& spec, bool shifted, Rng& rng, Tensor& img,
               LabelMap& lab) {
    const int H = spec.height, W = spec.width;
    img = Tensor({1, H, W});
    lab = LabelMap({H, W});

    const double base = rng.uniform(0.25, 0.45);

    // Low-frequency texture from a bilinearly upsampled coarse grid.
    const int G = 7;
    std::vector<double> grid(G * G);
    for (auto& v : grid) v = rng.gaussian() * 0.05;

    const int k = 1 + rng.uniform_int(3);
    std::vector<double> areas(k);
    double wsum = 0.0;
    for (auto& w : areas) {
        w = rng.uniform(0.5, 1.0);
        wsum += w;
    }
    const double total_area = spec.fg_prevalence * H * W;
    for (auto& w : areas) w = w / wsum * total_area;

    const double rot_bias = shifted ? spec.shift.rotation_bias_deg : 0.0;
    std::vector<Ellipse> blobs;
    for (int j = 0; j < k; ++j) {
        Ellipse e;
        const double ratio = rng.uniform(0.4, 1.0);  // b = a * ratio
        e.a = std::sqrt(areas[j] / (M_PI * ratio));
        e.b = e.a * ratio;
        // Orientations cluster around horizontal so a rotation bias is a
        // real covariate shift (a uniform angle law would absorb it).
        const double phi = (rng.uniform(-30.0, 30.0) + rot_bias) * M_PI / 180.0;
        e.cs = std::cos(phi);
        e.sn = std::sin(phi);
        const double margin = e.a + 2.0;
        e.cy = rng.uniform(margin, H - 1 - margin);
        e.cx = rng.uniform(margin, W - 1 - margin);
        e.amp = rng.uniform(0.25, 0.45);
        blobs.push_back(e);
    }

    const double edge = 0.3;  // soft edge width in normalized blob units
    for (int y = 0; y < H; ++y) {
        const double gy = static_cast<double>(y) * (G - 1) / (H - 1);
        const int y0 = std::min(static_cast<int>(gy), G - 2);
        const double fy = gy - y0;
        for (int x = 0; x < W; ++x) {
            const double gx = static_cast<double>(x) * (G - 1) / (W - 1);
            const int x0 = std::min(static_cast<int>(gx), G - 2);
            const double fx = gx - x0;
            const double tex =
                grid[y0 * G + x0] * (1 - fy) * (1 - fx) +
                grid[y0 * G + x0 + 1] * (1 - fy) * fx +
                grid[(y0 + 1) * G + x0] * fy * (1 - fx) +
                grid[(y0 + 1) * G + x0 + 1] * fy * fx;

            double v = base + tex;
            for (const auto& e : blobs) {
                const double d = ell_dist(e, y, x);
                if (d <= 1.0) lab.at2(y, x) = 1;
                // Intensity edge straddles the label boundary.
                const double s =
                    std::clamp((1.0 + edge / 2 - d) / edge, 0.0, 1.0);
                v += e.amp * s;
            }
            img.at({0, y, x}) = static_cast<float>(v);
        }
    }

    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            img.at({0, y, x}) +=
                static_cast<float>(rng.gaussian() * spec.texture_sigma);

    if (shifted && !spec.shift.is_zero()) {
        const double pivot = 0.4;
        for (auto& v : img.data)
            v = static_cast<float>(pivot +
                                   (v - pivot) * spec.shift.contrast_scale +
                                   spec.shift.intensity_bias);
    }
}

Dataset gen_split(const TaskSpec& spec, uint64_t seed, int split_id,
                  const char* name, int count, bool shifted) {
    Dataset ds;
    ds.classes = spec.classes;
    ds.split = name;
    ds.images.resize(count);
    ds.labels.resize(count);
    for (int i = 0; i < count; ++i) {
        Rng rng = Rng::stream(
            seed, (static_cast<uint64_t>(split_id) << 32) |
                      static_cast<uint64_t>(i));
        gen_image(spec, shifted, rng, ds.images[i], ds.labels[i]);
    }
    return ds;
}

}  // namespace

Task gen_task(const TaskSpec& spec, uint64_t seed) {
    validate_spec(spec);
    Task t;
    t.train = gen_split(spec, seed, 0, "train", spec.n_train, false);
    t.val = gen_split(spec, seed, 1, "val", spec.n_val, true);
    t.test = gen_split(spec, seed, 2, "test", spec.n_test, true);
    return t;
}

double fg_fraction(const Dataset& ds) {
    int64_t fg = 0, total = 0;
    for (const auto& lab : ds.labels) {
        for (uint8_t v : lab.data) fg += (v != 0);
        total += lab.numel();
    }
    return total ? static_cast<double>(fg) / total : 0.0;
}

PatchBatch sample_patch_batch(const Dataset& ds, int n, int patch,
                              double fg_target, Rng& rng) {
    if (ds.images.empty()) throw DataError("cannot sample from empty dataset");
    const int H = ds.images[0].dim(1), W = ds.images[0].dim(2);
    if (patch <= 0 || patch > H || patch > W)
        throw DataError("patch size exceeds image size");
    if (n <= 0) throw DataError("batch size must be positive");
    if (!(fg_target >= 0.0 && fg_target <= 1.0))
        throw DataError("fg_target must lie in [0,1]");

    // Valid centers leave the full patch inside the image; the central pixel
    // sits at offset patch/2 within the crop.
    const int half = patch / 2;
    const int y_lo = half, y_hi = H - (patch - half);  // inclusive range
    const int x_lo = half, x_hi = W - (patch - half);

    struct Center {
        int img, y, x;
    };
    std::vector<Center> fg_centers;
    for (size_t i = 0; i < ds.labels.size(); ++i)
        for (int y = y_lo; y <= y_hi; ++y)
            for (int x = x_lo; x <= x_hi; ++x)
                if (ds.labels[i].at2(y, x) != 0)
                    fg_centers.push_back({static_cast<int>(i), y, x});
    if (fg_centers.empty())
        throw DataError("dataset has no foreground pixels usable as patch centers");

    const int n_fg = static_cast<int>(std::llround(n * fg_target));

    PatchBatch out;
    out.images = Tensor({n, 1, patch, patch});
    out.labels = LabelMap({n, patch, patch});
    out.cls.resize(n);
    out.src.resize(n);
    out.cy.resize(n);
    out.cx.resize(n);

    for (int s = 0; s < n; ++s) {
        int img, ycen, xcen;
        if (s < n_fg) {
            const auto& c = fg_centers[static_cast<size_t>(
                rng.uniform_int(static_cast<int>(fg_centers.size())))];
            img = c.img;
            ycen = c.y;
            xcen = c.x;
        } else {
            // Background centers are the 1-fg_prevalence majority, so
            // rejection sampling terminates almost immediately.
            for (;;) {
                img = rng.uniform_int(static_cast<int>(ds.images.size()));
                ycen = y_lo + rng.uniform_int(y_hi - y_lo + 1);
                xcen = x_lo + rng.uniform_int(x_hi - x_lo + 1);
                if (ds.labels[img].at2(ycen, xcen) == 0) break;
            }
        }
        const int top = ycen - half, left = xcen - half;
        const Tensor& si = ds.images[img];
        const LabelMap& sl = ds.labels[img];
        for (int y = 0; y < patch; ++y)
            for (int x = 0; x < patch; ++x) {
                out.images.at({s, 0, y, x}) = si.at({0, top + y, left + x});
                out.labels.data[(static_cast<size_t>(s) * patch + y) * patch +
                                x] = sl.at2(top + y, left + x);
            }
        out.cls[s] = sl.at2(ycen, xcen) != 0 ? 1 : 0;
        out.src[s] = img;
        out.cy[s] = ycen;
        out.cx[s] = xcen;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json + magic-prefixed checksummed blobs.

const char kMagicImages[8] = {'A', 'U', 'G', 'I', 'M', 'G', '0', '1'};
const char kMagicLabels[8] = {'A', 'U', 'G', 'L', 'B', 'L', '0', '1'};
const char kMagicProbs[8] = {'A', 'U', 'G', 'P', 'R', 'B', '0', '1'};

json write_blob_file(const std::string& path, const char magic[8],
                     const void* payload, size_t bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for writing: " + path);
    f.write(magic, 8);
    f.write(static_cast<const char*>(payload),
            static_cast<std::streamsize>(bytes));
    f.close();

    std::vector<char> all(8 + bytes);
    std::memcpy(all.data(), magic, 8);
    std::memcpy(all.data() + 8, payload, bytes);
    json entry;
    entry["file"] = fs::path(path).filename().string();
    entry["bytes"] = 8 + bytes;
    entry["sha256"] = sha256_hex(all.data(), all.size());
    return entry;
}

std::vector<char> read_blob_file(const std::string& path,
                                 const char magic[8], const json& entry) {
    const std::string name = fs::path(path).filename().string();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("missing blob file: " + path);
    std::vector<char> all((std::istreambuf_iterator<char>(f)),
                          std::istreambuf_iterator<char>());

    const uint64_t want = entry.at("bytes").get<uint64_t>();
    if (all.size() < 8)
        throw DataError(name + ": truncated before magic header (" +
                        std::to_string(all.size()) + " bytes)");
    for (int i = 0; i < 8; ++i)
        if (all[static_cast<size_t>(i)] != magic[i])
            throw DataError(name + ": bad magic at byte offset " +
                            std::to_string(i));
    if (all.size() != want)
        throw DataError(name + ": truncated payload: expected " +
                        std::to_string(want) + " bytes, found " +
                        std::to_string(all.size()));
    if (sha256_hex(all.data(), all.size()) !=
        entry.at("sha256").get<std::string>())
        throw DataError(name + ": checksum mismatch");
    return all;
}

std::string sha256_hex(const void* data, size_t len) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int mdlen = 0;
    if (!EVP_Digest(data, len, md, &mdlen, EVP_sha256(), nullptr))
        throw DataError("sha256 digest failure");
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(mdlen * 2);
    for (unsigned int i = 0; i < mdlen; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 0xf];
    }
    return out;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    if (ds.images.size() != ds.labels.size())
        throw DataError("dataset images/labels count mismatch");
    if (ds.images.empty()) throw DataError("refusing to save empty dataset");
    const int H = ds.images[0].dim(1), W = ds.images[0].dim(2);
    const int n = static_cast<int>(ds.images.size());

    std::vector<float> img_payload;
    std::vector<uint8_t> lab_payload;
    img_payload.reserve(static_cast<size_t>(n) * H * W);
    lab_payload.reserve(static_cast<size_t>(n) * H * W);
    for (int i = 0; i < n; ++i) {
        if (ds.images[i].shape != std::vector<int>{1, H, W} ||
            ds.labels[i].shape != std::vector<int>{H, W})
            throw DataError("inconsistent shapes at sample " +
                            std::to_string(i));
        img_payload.insert(img_payload.end(), ds.images[i].data.begin(),
                           ds.images[i].data.end());
        lab_payload.insert(lab_payload.end(), ds.labels[i].data.begin(),
                           ds.labels[i].data.end());
    }

    fs::create_directories(dir);
    json man;
    man["format"] = "augopt-dataset";
    man["version"] = 1;
    man["split"] = ds.split;
    man["classes"] = ds.classes;
    man["count"] = n;
    man["height"] = H;
    man["width"] = W;
    json imgs = write_blob_file((fs::path(dir) / "images.bin").string(),
                                kMagicImages, img_payload.data(),
                                img_payload.size() * sizeof(float));
    json labs = write_blob_file((fs::path(dir) / "labels.bin").string(),
                                kMagicLabels, lab_payload.data(),
                                lab_payload.size());
    imgs["dtype"] = "f32le";
    labs["dtype"] = "u8";
    man["blobs"]["images"] = imgs;
    man["blobs"]["labels"] = labs;

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw DataError("cannot write manifest in " + dir);
    mf << man.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream mf(mpath);
    if (!mf) throw DataError("manifest missing or unreadable: " +
                             mpath.string());
    json man;
    try {
        mf >> man;
    } catch (const json::exception& e) {
        throw DataError("manifest parse error: " + std::string(e.what()));
    }
    try {
        if (man.at("format").get<std::string>() != "augopt-dataset" ||
            man.at("version").get<int>() != 1)
            throw DataError("unsupported dataset format or version in " +
                            mpath.string());

        const int n = man.at("count").get<int>();
        const int H = man.at("height").get<int>();
        const int W = man.at("width").get<int>();
        const int classes = man.at("classes").get<int>();
        if (n <= 0 || H <= 0 || W <= 0 || classes < 2)
            throw DataError("manifest declares degenerate dataset shape");

        const json& imgs = man.at("blobs").at("images");
        const json& labs = man.at("blobs").at("labels");
        if (imgs.at("dtype").get<std::string>() != "f32le")
            throw DataError("images.bin: unsupported dtype " +
                            imgs.at("dtype").get<std::string>());
        if (labs.at("dtype").get<std::string>() != "u8")
            throw DataError("labels.bin: unsupported dtype " +
                            labs.at("dtype").get<std::string>());

        const size_t plane = static_cast<size_t>(H) * W;
        auto iraw = read_blob_file(
            (fs::path(dir) / imgs.at("file").get<std::string>()).string(),
            kMagicImages, imgs);
        auto lraw = read_blob_file(
            (fs::path(dir) / labs.at("file").get<std::string>()).string(),
            kMagicLabels, labs);
        if (iraw.size() != 8 + static_cast<size_t>(n) * plane * sizeof(float))
            throw DataError("images.bin: payload size disagrees with manifest shape");
        if (lraw.size() != 8 + static_cast<size_t>(n) * plane)
            throw DataError("labels.bin: payload size disagrees with manifest shape");

        Dataset ds;
        ds.classes = classes;
        ds.split = man.at("split").get<std::string>();
        ds.images.resize(n);
        ds.labels.resize(n);
        std::vector<std::string> bad;
        for (int i = 0; i < n; ++i) {
            ds.images[i] = Tensor({1, H, W});
            std::memcpy(ds.images[i].data.data(),
                        iraw.data() + 8 + static_cast<size_t>(i) * plane *
                                              sizeof(float),
                        plane * sizeof(float));
            ds.labels[i] = LabelMap({H, W});
            const uint8_t* lp = reinterpret_cast<const uint8_t*>(
                lraw.data() + 8 + static_cast<size_t>(i) * plane);
            std::memcpy(ds.labels[i].data.data(), lp, plane);
            for (size_t j = 0; j < plane && bad.size() < 8; ++j)
                if (lp[j] >= classes)
                    bad.push_back("sample " + std::to_string(i) + " offset " +
                                  std::to_string(j) + " value " +
                                  std::to_string(lp[j]));
        }
        if (!bad.empty()) {
            std::string msg = "label values out of range [0," +
                              std::to_string(classes) + "):";
            for (const auto& b : bad) msg += " [" + b + "]";
            throw DataError(msg);
        }
        return ds;
    } catch (const json::exception& e) {
        throw DataError("manifest field error: " + std::string(e.what()));
    }
}

}  // namespace augopt
