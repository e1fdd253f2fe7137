#include "augopt/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "augopt/errors.hpp"
#include "augopt/threading.hpp"
#include "json.hpp"

namespace augopt {

namespace {

constexpr float kLeakySlope = 0.01f;

// out[y][x] += sum_taps k[dy*3+dx] * in[y+dy-1][x+dx-1], zero padding.
// One (input plane, output plane) pair; rows are contiguous so the inner
// loops vectorize.
void conv3x3_accum(const float* in, float* out, int H, int W,
                   const float* k) {
    for (int dy = 0; dy < 3; ++dy) {
        for (int dx = 0; dx < 3; ++dx) {
            const float kv = k[dy * 3 + dx];
            if (kv == 0.0f) continue;
            const int y0 = std::max(0, 1 - dy);
            const int y1 = std::min(H, H + 1 - dy);
            const int x0 = std::max(0, 1 - dx);
            const int x1 = std::min(W, W + 1 - dx);
            for (int y = y0; y < y1; ++y) {
                const float* ir = in + (y + dy - 1) * W + (x0 + dx - 1);
                float* orow = out + y * W + x0;
                const int len = x1 - x0;
                for (int x = 0; x < len; ++x) orow[x] += kv * ir[x];
            }
        }
    }
}

// dk[dy*3+dx] += sum_{y,x} dout[y][x] * in[y+dy-1][x+dx-1].
void conv3x3_kernel_grad(const float* in, const float* dout, int H, int W,
                         float* dk) {
    for (int dy = 0; dy < 3; ++dy) {
        for (int dx = 0; dx < 3; ++dx) {
            const int y0 = std::max(0, 1 - dy);
            const int y1 = std::min(H, H + 1 - dy);
            const int x0 = std::max(0, 1 - dx);
            const int x1 = std::min(W, W + 1 - dx);
            double acc = 0.0;
            for (int y = y0; y < y1; ++y) {
                const float* ir = in + (y + dy - 1) * W + (x0 + dx - 1);
                const float* dr = dout + y * W + x0;
                const int len = x1 - x0;
                for (int x = 0; x < len; ++x) acc += (double)dr[x] * ir[x];
            }
            dk[dy * 3 + dx] += (float)acc;
        }
    }
}

}  // namespace

int64_t SegNet::param_count() const {
    int64_t n = 0;
    for (const auto& l : layers) n += l.w.numel() + l.b.numel();
    return n;
}

SegNet make_segnet(int classes, Rng& rng) {
    SegNet net;
    net.in_ch = 1;
    net.classes = classes;
    const int hidden = 16;
    std::vector<std::pair<int, int>> dims = {
        {1, hidden}, {hidden, hidden}, {hidden, hidden}, {hidden, classes}};
    for (size_t i = 0; i < dims.size(); ++i) {
        ConvLayer l;
        l.in_ch = dims[i].first;
        l.out_ch = dims[i].second;
        l.leaky = (i + 1 < dims.size());
        l.w = Tensor({l.out_ch, l.in_ch, 3, 3});
        l.b = Tensor({l.out_ch});
        const float limit = std::sqrt(6.0f / (float)(l.in_ch * 9));
        for (auto& v : l.w.data) v = (float)rng.uniform(-limit, limit);
        net.layers.push_back(std::move(l));
    }
    return net;
}

GradSet zeros_like(const SegNet& net) {
    GradSet g;
    for (const auto& l : net.layers) {
        g.dw.emplace_back(l.w.shape);
        g.db.emplace_back(l.b.shape);
    }
    return g;
}

void GradSet::add_scaled(const GradSet& o, float s) {
    for (size_t i = 0; i < dw.size(); ++i) {
        for (size_t j = 0; j < dw[i].data.size(); ++j)
            dw[i].data[j] += s * o.dw[i].data[j];
        for (size_t j = 0; j < db[i].data.size(); ++j)
            db[i].data[j] += s * o.db[i].data[j];
    }
}

void GradSet::scale(float s) {
    for (auto& t : dw)
        for (auto& v : t.data) v *= s;
    for (auto& t : db)
        for (auto& v : t.data) v *= s;
}

Tensor forward(const SegNet& net, const Tensor& batch, ForwardCache* cache,
               int threads) {
    if (batch.rank() != 4 || batch.dim(1) != net.in_ch)
        throw ConfigError("forward: batch must be [n," +
                          std::to_string(net.in_ch) + ",H,W], got " +
                          shape_str(batch.shape));
    const int n = batch.dim(0), H = batch.dim(2), W = batch.dim(3);
    const int64_t plane = (int64_t)H * W;

    if (cache) {
        cache->input = batch;
        cache->pre.clear();
        cache->post.clear();
    }

    Tensor cur = batch;
    for (const auto& l : net.layers) {
        Tensor out({n, l.out_ch, H, W});
        parallel_for(n * l.out_ch, threads, [&](int idx) {
            const int s = idx / l.out_ch;
            const int co = idx % l.out_ch;
            float* op = out.ptr() + ((int64_t)s * l.out_ch + co) * plane;
            const float bias = l.b.data[co];
            for (int64_t e = 0; e < plane; ++e) op[e] = bias;
            for (int ci = 0; ci < l.in_ch; ++ci) {
                const float* ip =
                    cur.ptr() + ((int64_t)s * l.in_ch + ci) * plane;
                const float* k = l.w.ptr() + ((int64_t)co * l.in_ch + ci) * 9;
                conv3x3_accum(ip, op, H, W, k);
            }
        });
        if (cache) cache->pre.push_back(out);
        if (l.leaky) {
            for (auto& v : out.data)
                if (v < 0.0f) v *= kLeakySlope;
        }
        if (cache) cache->post.push_back(out);
        cur = std::move(out);
    }
    return cur;
}

GradSet backward(const SegNet& net, const ForwardCache& cache,
                 const Tensor& dlogits, int threads) {
    const int L = (int)net.layers.size();
    if ((int)cache.pre.size() != L)
        throw ConfigError("backward: cache does not match net");
    const int n = cache.input.dim(0);
    const int H = cache.input.dim(2), W = cache.input.dim(3);
    const int64_t plane = (int64_t)H * W;

    GradSet total = zeros_like(net);
    // Per-sample partials reduced in index order keep results independent of
    // the worker count.
    std::vector<GradSet> partial;
    partial.reserve(n);
    for (int s = 0; s < n; ++s) partial.push_back(zeros_like(net));

    parallel_for(n, threads, [&](int s) {
        GradSet& g = partial[s];
        // dpost of the last layer is dlogits for this sample.
        Tensor dcur({net.layers[L - 1].out_ch, H, W});
        std::memcpy(dcur.ptr(),
                    dlogits.ptr() + (int64_t)s * dcur.numel(),
                    sizeof(float) * dcur.numel());
        for (int li = L - 1; li >= 0; --li) {
            const ConvLayer& l = net.layers[li];
            if (l.leaky) {
                const float* pre =
                    cache.pre[li].ptr() + (int64_t)s * l.out_ch * plane;
                for (int64_t e = 0; e < (int64_t)l.out_ch * plane; ++e)
                    if (pre[e] < 0.0f) dcur.data[e] *= kLeakySlope;
            }
            const float* lin =
                (li == 0 ? cache.input.ptr() + (int64_t)s * l.in_ch * plane
                         : cache.post[li - 1].ptr() +
                               (int64_t)s * l.in_ch * plane);
            for (int co = 0; co < l.out_ch; ++co) {
                const float* dp = dcur.ptr() + (int64_t)co * plane;
                double bsum = 0.0;
                for (int64_t e = 0; e < plane; ++e) bsum += dp[e];
                g.db[li].data[co] += (float)bsum;
                for (int ci = 0; ci < l.in_ch; ++ci)
                    conv3x3_kernel_grad(
                        lin + (int64_t)ci * plane, dp, H, W,
                        g.dw[li].ptr() + ((int64_t)co * l.in_ch + ci) * 9);
            }
            if (li == 0) break;
            // din = correlation of dcur with the flipped kernel.
            Tensor din({l.in_ch, H, W});
            for (int ci = 0; ci < l.in_ch; ++ci) {
                float* op = din.ptr() + (int64_t)ci * plane;
                for (int co = 0; co < l.out_ch; ++co) {
                    const float* k =
                        net.layers[li].w.ptr() +
                        ((int64_t)co * l.in_ch + ci) * 9;
                    float kf[9];
                    for (int e = 0; e < 9; ++e) kf[e] = k[8 - e];
                    conv3x3_accum(dcur.ptr() + (int64_t)co * plane, op, H, W,
                                  kf);
                }
            }
            dcur = std::move(din);
        }
    });

    for (int s = 0; s < n; ++s) total.add_scaled(partial[s], 1.0f);
    return total;
}

MomentumState zeros_momentum(const SegNet& net) {
    MomentumState m;
    for (const auto& l : net.layers) {
        m.vw.emplace_back(l.w.shape);
        m.vb.emplace_back(l.b.shape);
    }
    return m;
}

void sgd_step(SegNet& net, MomentumState& mom, const GradSet& grads,
              float lr, float momentum) {
    if (lr <= 0.0f) throw ConfigError("sgd_step: lr must be > 0");
    for (size_t i = 0; i < net.layers.size(); ++i) {
        auto& l = net.layers[i];
        for (size_t j = 0; j < l.w.data.size(); ++j) {
            mom.vw[i].data[j] =
                momentum * mom.vw[i].data[j] + grads.dw[i].data[j];
            l.w.data[j] -= lr * mom.vw[i].data[j];
        }
        for (size_t j = 0; j < l.b.data.size(); ++j) {
            mom.vb[i].data[j] =
                momentum * mom.vb[i].data[j] + grads.db[i].data[j];
            l.b.data[j] -= lr * mom.vb[i].data[j];
        }
    }
}

SegNet perturb(const SegNet& net, const GradSet& direction, float step) {
    SegNet out = net;
    for (size_t i = 0; i < out.layers.size(); ++i) {
        auto& l = out.layers[i];
        for (size_t j = 0; j < l.w.data.size(); ++j)
            l.w.data[j] += step * direction.dw[i].data[j];
        for (size_t j = 0; j < l.b.data.size(); ++j)
            l.b.data[j] += step * direction.db[i].data[j];
    }
    return out;
}

double grad_l2_norm(const GradSet& grads) {
    double acc = 0.0;
    for (const auto& t : grads.dw)
        for (float v : t.data) acc += (double)v * v;
    for (const auto& t : grads.db)
        for (float v : t.data) acc += (double)v * v;
    return std::sqrt(acc);
}

void save_net(const SegNet& net, const std::string& path) {
    nlohmann::json hdr;
    hdr["format"] = "augopt-net";
    hdr["version"] = 1;
    hdr["in_ch"] = net.in_ch;
    hdr["classes"] = net.classes;
    auto layers = nlohmann::json::array();
    for (const auto& l : net.layers)
        layers.push_back({{"in", l.in_ch}, {"out", l.out_ch},
                          {"leaky", l.leaky}});
    hdr["layers"] = layers;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open for write: " + path);
    f << hdr.dump() << "\n";
    // Parameter blocks are raw f32; this targets little-endian hosts.
    for (const auto& l : net.layers) {
        f.write(reinterpret_cast<const char*>(l.w.ptr()),
                (std::streamsize)(sizeof(float) * l.w.numel()));
        f.write(reinterpret_cast<const char*>(l.b.ptr()),
                (std::streamsize)(sizeof(float) * l.b.numel()));
    }
    if (!f) throw DataError("write failed: " + path);
}

SegNet load_net(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open: " + path);
    std::string line;
    if (!std::getline(f, line)) throw DataError("truncated checkpoint: " + path);
    nlohmann::json hdr;
    try {
        hdr = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
        throw DataError("bad checkpoint header in " + path + ": " + e.what());
    }
    if (hdr.value("format", "") != "augopt-net")
        throw DataError("not a net checkpoint: " + path);

    SegNet net;
    net.in_ch = hdr.at("in_ch").get<int>();
    net.classes = hdr.at("classes").get<int>();
    for (const auto& jl : hdr.at("layers")) {
        ConvLayer l;
        l.in_ch = jl.at("in").get<int>();
        l.out_ch = jl.at("out").get<int>();
        l.leaky = jl.at("leaky").get<bool>();
        l.w = Tensor({l.out_ch, l.in_ch, 3, 3});
        l.b = Tensor({l.out_ch});
        net.layers.push_back(std::move(l));
    }
    for (auto& l : net.layers) {
        f.read(reinterpret_cast<char*>(l.w.ptr()),
               (std::streamsize)(sizeof(float) * l.w.numel()));
        f.read(reinterpret_cast<char*>(l.b.ptr()),
               (std::streamsize)(sizeof(float) * l.b.numel()));
        if (!f) throw DataError("truncated parameter block in " + path);
    }
    return net;
}

void save_momentum(const MomentumState& mom, const SegNet& net,
                   const std::string& path) {
    SegNet shadow = net;
    for (size_t i = 0; i < shadow.layers.size(); ++i) {
        shadow.layers[i].w = mom.vw[i];
        shadow.layers[i].b = mom.vb[i];
    }
    save_net(shadow, path);
}

MomentumState load_momentum(const SegNet& net, const std::string& path) {
    SegNet shadow = load_net(path);
    if (shadow.layers.size() != net.layers.size())
        throw DataError("momentum checkpoint does not match net: " + path);
    MomentumState m;
    for (auto& l : shadow.layers) {
        m.vw.push_back(std::move(l.w));
        m.vb.push_back(std::move(l.b));
    }
    return m;
}

}  // namespace augopt
