#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "augopt/data.hpp"
#include "augopt/losses.hpp"
#include "augopt/net.hpp"
#include "augopt/policy.hpp"
#include "augopt/tensor.hpp"
#include "augopt/transforms.hpp"
#include "json.hpp"

namespace augopt {

enum class TrainMode { None, Heuristic, Learned, ClassSpecific, Joint };
TrainMode parse_mode(const std::string& s);
const char* mode_name(TrainMode m);

enum class LossKind { CE, SoftDice, Sum };
LossKind parse_loss(const std::string& s);
const char* loss_name(LossKind k);

LossResult eval_loss(LossKind kind, const Tensor& logits,
                     const LabelMap& labels,
                     const std::vector<double>& weights);
double eval_prob_loss(LossKind kind, const Tensor& prob,
                      const LabelMap& labels);

struct RunConfig {
    TrainMode mode = TrainMode::Joint;
    double alpha = 0.05;    // segmenter learning rate
    double beta = 1.0;      // training-policy learning rate
    double gamma = 1.0;     // test-policy learning rate
    double momentum = 0.9;
    int n = 10;             // training batch size
    int m = 10;             // validation batch size
    int tea_draws = 8;      // Z: test-policy draws per update
    int top_z = 4;          // ops aggregated at inference
    int cadence = 10;       // policy-update period in iterations
    int epochs = 120;
    LossKind loss_train = LossKind::CE;
    LossKind loss_val = LossKind::SoftDice;
    LossKind loss_tea = LossKind::SoftDice;
    uint64_t seed = 1;
    int patch = 48;
    double fg_fraction = 0.5;
    int prefetch_pool = 4;  // cached transformed variants per sample key
    double grad_clip = 10.0;
    int threads = 1;
};

// pool_size is the TEA op count (bounds top_z).
void validate_config(const RunConfig& cfg, size_t pool_size);

// One iteration's worth of transformed training patches plus everything the
// policy update needs: per-sample class tags, the per-slot Gumbel draws, and
// the stop-gradient sample weights (identically 1).
struct AssembledBatch {
    Tensor images;    // [n,1,p,p]
    LabelMap labels;  // [n,p,p]
    std::vector<double> weights;
    std::vector<int> cls;
    std::vector<std::vector<SampleDraw>> draws;  // [n][slot], empty in mode none
};

// Cross-iteration cache of transformed patches keyed by source patch and
// chosen-bin tuple; a fresh Gumbel draw picks the variant, so gradients
// always use fresh scores while pixels may be reused. FIFO per key.
struct PrefetchPool {
    int capacity = 4;
    struct Variant {
        std::vector<int> bins;
        Tensor image;
        LabelMap labels;
    };
    std::unordered_map<std::string, std::deque<Variant>> entries;

    void clear() { entries.clear(); }
};

struct MetaState {
    SegNet net;
    MomentumState mom;
    ClassPolicy tra;
    TeaPolicy tea;
    int64_t iteration = 0;
    int val_cursor = 0;  // round-robin test-policy sample index
    Rng rng_data, rng_gumbel, rng_magnitude, rng_tea;
};

MetaState init_meta_state(const RunConfig& cfg,
                          const std::vector<TraSlot>& slots,
                          const std::vector<TeaOp>& ops, int classes);
void save_meta_state(const MetaState& state, const std::vector<TraSlot>& slots,
                     const std::vector<TeaOp>& ops, const std::string& dir);
MetaState load_meta_state(const std::string& dir,
                          const std::vector<TraSlot>& slots,
                          const std::vector<TeaOp>& ops);

AssembledBatch assemble_train_batch(const Dataset& ds, const RunConfig& cfg,
                                    const ClassPolicy& tra,
                                    const std::vector<TraSlot>& slots,
                                    MetaState& state, PrefetchPool& pool);

// theta_star = theta - alpha * (momentum-adjusted, norm-clipped) gradient of
// the weighted training loss; the caller's net stays untouched so the
// finite-difference probes can run against the pre-step parameters.
struct VirtualStepResult {
    SegNet theta_star;
    MomentumState mom_star;
    double loss = 0.0;
    std::vector<double> per_sample;
    GradSet grads;
};

VirtualStepResult virtual_step(const SegNet& net, const MomentumState& mom,
                               const AssembledBatch& batch, double alpha,
                               double momentum, LossKind loss_train,
                               double grad_clip, int threads);

// Probe step size for the finite-difference hypergradient.
double fd_epsilon(double val_grad_norm);

// dw_i = -alpha * (l_i(theta+) - l_i(theta-)) / (2 eps n); shared by the
// production path and the closed-form oracle tests.
std::vector<double> hypergrad_from_probe_losses(
    const std::vector<double>& loss_plus, const std::vector<double>& loss_minus,
    double alpha, double eps, int n);

struct HypergradResult {
    std::vector<double> dw;      // per training sample
    double epsilon = 0.0;
    double val_loss = 0.0;
    double val_grad_norm = 0.0;
    bool skipped = false;  // degenerate (zero) validation gradient
};

// Lower seam: validation gradient already computed. theta+ and theta- are
// built as copies of net; nothing is mutated.
HypergradResult hypergrad_tra_with_grads(const SegNet& net,
                                         const GradSet& val_grads,
                                         const AssembledBatch& train_batch,
                                         double alpha, LossKind loss_train,
                                         int threads);

HypergradResult hypergrad_tra(const SegNet& net, const SegNet& theta_star,
                              const AssembledBatch& train_batch,
                              const Tensor& val_images,
                              const LabelMap& val_labels, double alpha,
                              LossKind loss_train, LossKind loss_val,
                              int threads);

// Class-mean centering, per-(class,slot) frequency normalization, then the
// chain-rule descent on the training-policy logits.
void tra_policy_step(ClassPolicy& tra, const std::vector<double>& dw,
                     const AssembledBatch& batch, double beta);

// Frequency-normalized descent from forced draws and their losses; exposed
// so closed-form cases can drive it directly.
void tea_update_from_draws(TeaPolicy& tea,
                           const std::vector<SampleDraw>& draws,
                           const std::vector<double>& losses, double gamma);

struct TeaStepResult {
    std::vector<int> chosen;
    std::vector<double> losses;
};

// Z Gumbel draws on one validation sample; each drawn op transforms the
// sample, the prediction is reverted and scored, and the logits descend.
TeaStepResult tea_step(TeaPolicy& tea, const SegNet& net,
                       const Tensor& val_image, const LabelMap& val_labels,
                       const std::vector<TeaOp>& ops, int Z, double gamma,
                       Rng& rng, LossKind loss_tea, int threads);

struct IterationOutcome {
    double train_loss = 0.0;
    bool cadence = false;
    bool tra_applied = false;
    bool tra_skipped = false;  // zero validation gradient guard
    bool tea_applied = false;
    double val_loss = 0.0;
    double epsilon = 0.0;
};

IterationOutcome joint_iteration(MetaState& state, const RunConfig& cfg,
                                 const Dataset& train_ds,
                                 const Dataset& val_ds,
                                 const std::vector<TraSlot>& slots,
                                 const std::vector<TeaOp>& ops,
                                 PrefetchPool& pool);

struct TrainResult {
    MetaState state;
    std::vector<nlohmann::json> history;  // one record per cadence iteration
};

// Runs epochs * max(1, |train|/n) iterations. checkpoint_dir, when set,
// receives a resumable state snapshot at each cadence boundary. resume,
// when set, continues from a loaded state instead of a fresh one.
TrainResult train(const RunConfig& cfg, const Dataset& train_ds,
                  const Dataset& val_ds, const std::vector<TraSlot>& slots,
                  const std::vector<TeaOp>& ops,
                  const MetaState* resume = nullptr,
                  const std::string& checkpoint_dir = "",
                  const std::function<void(const nlohmann::json&)>& on_record =
                      {});

struct RefineResult {
    TeaPolicy tea;
    std::vector<nlohmann::json> history;
};

// Standalone test-policy refinement against a frozen net, starting from
// uniform logits, round-robin over the validation images.
RefineResult refine_tea(const SegNet& net, const Dataset& val_ds,
                        const std::vector<TeaOp>& ops, int steps, int Z,
                        double gamma, uint64_t seed, LossKind loss_tea,
                        int threads);

}  // namespace augopt
