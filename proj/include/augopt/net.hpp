#pragma once

#include <string>
#include <vector>

#include "augopt/rng.hpp"
#include "augopt/tensor.hpp"

namespace augopt {

// One 3x3 same-padding conv layer. leaky == true applies leaky-ReLU
// (slope 0.01) after the convolution.
struct ConvLayer {
    int in_ch = 0;
    int out_ch = 0;
    bool leaky = true;
    Tensor w;  // [out_ch, in_ch, 3, 3]
    Tensor b;  // [out_ch]
};

// Small fully-convolutional segmenter: per-pixel class logits, spatial
// shape preserved throughout.
struct SegNet {
    int in_ch = 1;
    int classes = 2;
    std::vector<ConvLayer> layers;

    int64_t param_count() const;
};

// Channels 1 -> 16 -> 16 -> 16 -> classes, He-uniform fan-in init,
// zero biases, final layer linear.
SegNet make_segnet(int classes, Rng& rng);

// Shape-congruent gradient (or direction) per parameter tensor.
struct GradSet {
    std::vector<Tensor> dw;
    std::vector<Tensor> db;

    void add_scaled(const GradSet& o, float s);
    void scale(float s);
};

GradSet zeros_like(const SegNet& net);

// Activations retained by forward() for the backward pass.
struct ForwardCache {
    Tensor input;
    std::vector<Tensor> pre;   // pre-activation of each layer
    std::vector<Tensor> post;  // post-activation (input to the next layer)
};

// batch [n, in_ch, H, W] -> logits [n, classes, H, W].
Tensor forward(const SegNet& net, const Tensor& batch,
               ForwardCache* cache = nullptr, int threads = 1);

// dlogits must come from a loss over forward(net, ...) with the same cache.
GradSet backward(const SegNet& net, const ForwardCache& cache,
                 const Tensor& dlogits, int threads = 1);

// Momentum buffers, shape-congruent with the net.
struct MomentumState {
    std::vector<Tensor> vw;
    std::vector<Tensor> vb;
};

MomentumState zeros_momentum(const SegNet& net);

// v <- momentum*v + g; theta <- theta - lr*v.
void sgd_step(SegNet& net, MomentumState& mom, const GradSet& grads,
              float lr, float momentum);

// Returns a copy with theta + step*direction; original untouched.
SegNet perturb(const SegNet& net, const GradSet& direction, float step);

double grad_l2_norm(const GradSet& grads);

// Checkpoint: one JSON header line (layer spec, shapes), then little-endian
// f32 parameter blocks in declaration order (w then b per layer).
void save_net(const SegNet& net, const std::string& path);
SegNet load_net(const std::string& path);
void save_momentum(const MomentumState& mom, const SegNet& net,
                   const std::string& path);
MomentumState load_momentum(const SegNet& net, const std::string& path);

}  // namespace augopt
