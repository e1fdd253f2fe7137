#include "augopt/meta.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <utility>

#include "augopt/errors.hpp"
#include "augopt/threading.hpp"

namespace augopt {

using nlohmann::json;

TrainMode parse_mode(const std::string& s) {
    if (s == "none") return TrainMode::None;
    if (s == "heuristic") return TrainMode::Heuristic;
    if (s == "learned") return TrainMode::Learned;
    if (s == "class-specific") return TrainMode::ClassSpecific;
    if (s == "joint") return TrainMode::Joint;
    throw ConfigError("unknown mode '" + s +
                      "' (expected none, heuristic, learned, class-specific "
                      "or joint)");
}

const char* mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::None: return "none";
        case TrainMode::Heuristic: return "heuristic";
        case TrainMode::Learned: return "learned";
        case TrainMode::ClassSpecific: return "class-specific";
        case TrainMode::Joint: return "joint";
    }
    return "?";
}

LossKind parse_loss(const std::string& s) {
    if (s == "ce") return LossKind::CE;
    if (s == "soft-dice") return LossKind::SoftDice;
    if (s == "sum") return LossKind::Sum;
    throw ConfigError("unknown loss '" + s +
                      "' (expected ce, soft-dice or sum)");
}

const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::CE: return "ce";
        case LossKind::SoftDice: return "soft-dice";
        case LossKind::Sum: return "sum";
    }
    return "?";
}

LossResult eval_loss(LossKind kind, const Tensor& logits,
                     const LabelMap& labels,
                     const std::vector<double>& weights) {
    switch (kind) {
        case LossKind::CE: return loss_ce(logits, labels, weights);
        case LossKind::SoftDice: return loss_soft_dice(logits, labels, weights);
        case LossKind::Sum: return loss_ce_dice(logits, labels, weights);
    }
    throw ConfigError("unknown loss kind");
}

double eval_prob_loss(LossKind kind, const Tensor& prob,
                      const LabelMap& labels) {
    switch (kind) {
        case LossKind::CE: return ce_loss_prob(prob, labels);
        case LossKind::SoftDice: return soft_dice_loss_prob(prob, labels);
        case LossKind::Sum:
            return ce_loss_prob(prob, labels) +
                   soft_dice_loss_prob(prob, labels);
    }
    throw ConfigError("unknown loss kind");
}

void validate_config(const RunConfig& cfg, size_t pool_size) {
    if (!(cfg.alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(cfg.beta > 0.0)) throw ConfigError("beta must be positive");
    if (!(cfg.gamma > 0.0)) throw ConfigError("gamma must be positive");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw ConfigError("momentum must lie in [0, 1)");
    if (cfg.n <= 0) throw ConfigError("train batch size n must be positive");
    if (cfg.m <= 0) throw ConfigError("val batch size m must be positive");
    if (cfg.tea_draws < 2)
        throw ConfigError("tea-draws must be at least 2");
    if (cfg.top_z < 1 || cfg.top_z > static_cast<int>(pool_size))
        throw ConfigError("top-z must lie in [1, " +
                          std::to_string(pool_size) + "]");
    if (cfg.cadence < 1) throw ConfigError("cadence must be at least 1");
    if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
    if (cfg.patch <= 0) throw ConfigError("patch must be positive");
    if (cfg.fg_fraction < 0.0 || cfg.fg_fraction > 1.0)
        throw ConfigError("fg-fraction must lie in [0, 1]");
    if (cfg.prefetch_pool < 0)
        throw ConfigError("prefetch-pool must be non-negative");
    if (!(cfg.grad_clip > 0.0))
        throw ConfigError("grad-clip must be positive");
    if (cfg.threads < 1) throw ConfigError("threads must be at least 1");
}

MetaState init_meta_state(const RunConfig& cfg,
                          const std::vector<TraSlot>& slots,
                          const std::vector<TeaOp>& ops, int classes) {
    MetaState st;
    Rng net_rng = Rng::stream(cfg.seed, 0);
    st.net = make_segnet(classes, net_rng);
    st.mom = zeros_momentum(st.net);
    if (cfg.mode == TrainMode::Heuristic) {
        st.tra = make_heuristic_tra_policy(slots);
        st.tea = make_heuristic_tea_policy(ops);
    } else {
        st.tra = make_uniform_tra_policy(slots);
        st.tra.tied = (cfg.mode == TrainMode::Learned);
        st.tea = make_uniform_tea_policy(ops.size());
    }
    st.rng_data = Rng::stream(cfg.seed, 1);
    st.rng_gumbel = Rng::stream(cfg.seed, 2);
    st.rng_magnitude = Rng::stream(cfg.seed, 3);
    st.rng_tea = Rng::stream(cfg.seed, 4);
    return st;
}

void save_meta_state(const MetaState& state, const std::vector<TraSlot>& slots,
                     const std::vector<TeaOp>& ops, const std::string& dir) {
    std::filesystem::create_directories(dir);
    save_net(state.net, dir + "/net.bin");
    save_momentum(state.mom, state.net, dir + "/momentum.bin");
    save_json(tra_policy_json(state.tra, slots, state.iteration),
              dir + "/tra.json");
    save_json(tea_policy_json(state.tea, ops, state.iteration),
              dir + "/tea.json");
    json j;
    j["format"] = "augopt-state";
    j["version"] = 1;
    j["iteration"] = state.iteration;
    j["val_cursor"] = state.val_cursor;
    j["rng"] = {{"data", state.rng_data.serialize()},
                {"gumbel", state.rng_gumbel.serialize()},
                {"magnitude", state.rng_magnitude.serialize()},
                {"tea", state.rng_tea.serialize()}};
    save_json(j, dir + "/state.json");
}

MetaState load_meta_state(const std::string& dir,
                          const std::vector<TraSlot>& slots,
                          const std::vector<TeaOp>& ops) {
    json j;
    try {
        j = load_json(dir + "/state.json");
    } catch (const json::exception&) {
        throw DataError("state manifest missing or unreadable: " + dir +
                        "/state.json");
    }
    try {
        if (j.at("format") != "augopt-state")
            throw DataError("not a training-state directory: " + dir);
        if (j.at("version") != 1)
            throw DataError("unsupported state version in " + dir);
        MetaState st;
        st.net = load_net(dir + "/net.bin");
        st.mom = load_momentum(st.net, dir + "/momentum.bin");
        st.tra = tra_policy_from_json(load_json(dir + "/tra.json"), slots);
        st.tea = tea_policy_from_json(load_json(dir + "/tea.json"), ops);
        st.iteration = j.at("iteration").get<int64_t>();
        st.val_cursor = j.at("val_cursor").get<int>();
        const auto& r = j.at("rng");
        st.rng_data.deserialize(r.at("data").get<std::string>());
        st.rng_gumbel.deserialize(r.at("gumbel").get<std::string>());
        st.rng_magnitude.deserialize(r.at("magnitude").get<std::string>());
        st.rng_tea.deserialize(r.at("tea").get<std::string>());
        return st;
    } catch (const json::exception& e) {
        throw DataError(std::string("malformed training state: ") + e.what());
    }
}

namespace {

std::string pool_key(int src, int cy, int cx, const std::vector<int>& bins) {
    std::string k = std::to_string(src) + ":" + std::to_string(cy) + ":" +
                    std::to_string(cx) + "|";
    for (size_t i = 0; i < bins.size(); ++i) {
        if (i) k += ",";
        k += std::to_string(bins[i]);
    }
    return k;
}

void copy_sample_in(Tensor& dst, LabelMap& dlab, int i, const Tensor& img,
                    const LabelMap& lab) {
    const size_t px = img.data.size();
    std::memcpy(dst.ptr() + static_cast<size_t>(i) * px, img.ptr(),
                px * sizeof(float));
    std::memcpy(dlab.data.data() + static_cast<size_t>(i) * lab.data.size(),
                lab.data.data(), lab.data.size());
}

Tensor slice_image(const Tensor& batch, int i) {
    const int c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    Tensor out({c, h, w});
    const size_t px = out.data.size();
    std::memcpy(out.ptr(), batch.ptr() + static_cast<size_t>(i) * px,
                px * sizeof(float));
    return out;
}

LabelMap slice_labels(const LabelMap& batch, int i) {
    const int h = batch.dim(1), w = batch.dim(2);
    LabelMap out({h, w});
    std::memcpy(out.data.data(),
                batch.data.data() + static_cast<size_t>(i) * out.data.size(),
                out.data.size());
    return out;
}

}  // namespace

AssembledBatch assemble_train_batch(const Dataset& ds, const RunConfig& cfg,
                                    const ClassPolicy& tra,
                                    const std::vector<TraSlot>& slots,
                                    MetaState& state, PrefetchPool& pool) {
    PatchBatch pb = sample_patch_batch(ds, cfg.n, cfg.patch, cfg.fg_fraction,
                                       state.rng_data);
    AssembledBatch out;
    out.weights.assign(static_cast<size_t>(cfg.n), 1.0);
    out.cls = pb.cls;
    if (cfg.mode == TrainMode::None) {
        out.images = std::move(pb.images);
        out.labels = std::move(pb.labels);
        return out;
    }
    const int p = cfg.patch;
    out.images = Tensor({cfg.n, 1, p, p});
    out.labels = LabelMap({cfg.n, p, p});
    out.draws.resize(static_cast<size_t>(cfg.n));
    std::vector<int> bins(slots.size());
    for (int i = 0; i < cfg.n; ++i) {
        auto& sample_draws = out.draws[static_cast<size_t>(i)];
        sample_draws.reserve(slots.size());
        for (size_t s = 0; s < slots.size(); ++s) {
            SampleDraw d = gumbel_softmax_draw(
                tra.slot_logits(pb.cls[static_cast<size_t>(i)],
                                static_cast<int>(s)),
                state.rng_gumbel);
            bins[s] = d.chosen;
            sample_draws.push_back(std::move(d));
        }
        // The magnitude stream advances identically whether or not the pool
        // serves the request, so trajectories do not depend on hit patterns.
        TraInstance inst = sample_tra_instance(slots, bins,
                                               state.rng_magnitude);
        const std::string key =
            pool_key(pb.src[static_cast<size_t>(i)],
                     pb.cy[static_cast<size_t>(i)],
                     pb.cx[static_cast<size_t>(i)], bins);
        auto& dq = pool.entries[key];
        if (pool.capacity > 0 &&
            static_cast<int>(dq.size()) >= pool.capacity) {
            PrefetchPool::Variant v = std::move(dq.front());
            dq.pop_front();
            copy_sample_in(out.images, out.labels, i, v.image, v.labels);
            dq.push_back(std::move(v));
        } else {
            Tensor img = slice_image(pb.images, i);
            LabelMap lab = slice_labels(pb.labels, i);
            Tensor timg;
            LabelMap tlab;
            apply_tra(slots, inst, img, lab, timg, tlab);
            copy_sample_in(out.images, out.labels, i, timg, tlab);
            if (pool.capacity > 0)
                dq.push_back({bins, std::move(timg), std::move(tlab)});
        }
    }
    return out;
}

VirtualStepResult virtual_step(const SegNet& net, const MomentumState& mom,
                               const AssembledBatch& batch, double alpha,
                               double momentum, LossKind loss_train,
                               double grad_clip, int threads) {
    VirtualStepResult res;
    ForwardCache cache;
    Tensor logits = forward(net, batch.images, &cache, threads);
    LossResult lr = eval_loss(loss_train, logits, batch.labels, batch.weights);
    if (!std::isfinite(lr.value))
        throw NumericError("non-finite training loss: " +
                           std::to_string(lr.value));
    res.loss = lr.value;
    res.per_sample = std::move(lr.per_sample);
    res.grads = backward(net, cache, lr.dlogits, threads);
    const double gn = grad_l2_norm(res.grads);
    if (!std::isfinite(gn))
        throw NumericError("non-finite training gradient norm");
    if (grad_clip > 0.0 && gn > grad_clip)
        res.grads.scale(static_cast<float>(grad_clip / gn));
    res.theta_star = net;
    res.mom_star = mom;
    if (alpha > 0.0)
        sgd_step(res.theta_star, res.mom_star, res.grads,
                 static_cast<float>(alpha), static_cast<float>(momentum));
    return res;
}

double fd_epsilon(double val_grad_norm) { return 0.01 / val_grad_norm; }

std::vector<double> hypergrad_from_probe_losses(
    const std::vector<double>& loss_plus, const std::vector<double>& loss_minus,
    double alpha, double eps, int n) {
    if (loss_plus.size() != loss_minus.size())
        throw ConfigError("probe loss vectors disagree in length");
    std::vector<double> dw(loss_plus.size());
    const double scale = -alpha / (2.0 * eps * n);
    for (size_t i = 0; i < dw.size(); ++i)
        dw[i] = scale * (loss_plus[i] - loss_minus[i]);
    return dw;
}

namespace {

std::vector<double> probe_losses(const SegNet& net,
                                 const AssembledBatch& batch,
                                 LossKind loss_train, int threads) {
    Tensor logits = forward(net, batch.images, nullptr, threads);
    LossResult lr = eval_loss(loss_train, logits, batch.labels, batch.weights);
    return lr.per_sample;
}

}  // namespace

HypergradResult hypergrad_tra_with_grads(const SegNet& net,
                                         const GradSet& val_grads,
                                         const AssembledBatch& train_batch,
                                         double alpha, LossKind loss_train,
                                         int threads) {
    HypergradResult res;
    res.val_grad_norm = grad_l2_norm(val_grads);
    if (!std::isfinite(res.val_grad_norm))
        throw NumericError("non-finite validation gradient norm");
    if (res.val_grad_norm == 0.0) {
        res.skipped = true;
        return res;
    }
    res.epsilon = fd_epsilon(res.val_grad_norm);
    const float e = static_cast<float>(res.epsilon);
    SegNet theta_plus = perturb(net, val_grads, e);
    SegNet theta_minus = perturb(net, val_grads, -e);
    std::vector<double> lp = probe_losses(theta_plus, train_batch, loss_train,
                                          threads);
    std::vector<double> lm = probe_losses(theta_minus, train_batch, loss_train,
                                          threads);
    res.dw = hypergrad_from_probe_losses(
        lp, lm, alpha, res.epsilon,
        static_cast<int>(train_batch.weights.size()));
    return res;
}

HypergradResult hypergrad_tra(const SegNet& net, const SegNet& theta_star,
                              const AssembledBatch& train_batch,
                              const Tensor& val_images,
                              const LabelMap& val_labels, double alpha,
                              LossKind loss_train, LossKind loss_val,
                              int threads) {
    ForwardCache cache;
    Tensor logits = forward(theta_star, val_images, &cache, threads);
    std::vector<double> ones(static_cast<size_t>(val_images.dim(0)), 1.0);
    LossResult lv = eval_loss(loss_val, logits, val_labels, ones);
    if (!std::isfinite(lv.value))
        throw NumericError("non-finite validation loss: " +
                           std::to_string(lv.value));
    GradSet val_grads = backward(theta_star, cache, lv.dlogits, threads);
    HypergradResult res = hypergrad_tra_with_grads(net, val_grads, train_batch,
                                                   alpha, loss_train, threads);
    res.val_loss = lv.value;
    return res;
}

void tra_policy_step(ClassPolicy& tra, const std::vector<double>& dw,
                     const AssembledBatch& batch, double beta) {
    const size_t n = dw.size();
    if (n != batch.cls.size() || n != batch.draws.size())
        throw ConfigError("hypergradient count disagrees with batch size");
    if (n == 0) return;
    std::vector<double> h = normalize_grads_by_class(dw, batch.cls);
    const size_t n_slots = batch.draws[0].size();
    std::vector<PolicyContribution> contribs;
    contribs.reserve(n * n_slots);
    // Sampling frequency counts live per (effective class, slot, chosen bin):
    // samples landing in the same logit cell share one normalization.
    for (size_t s = 0; s < n_slots; ++s) {
        std::map<std::pair<int, int>, int> count;
        for (size_t i = 0; i < n; ++i)
            ++count[{tra.effective_class(batch.cls[i]),
                     batch.draws[i][s].chosen}];
        for (size_t i = 0; i < n; ++i) {
            const SampleDraw& d = batch.draws[i][s];
            const double hhat =
                h[i] / count[{tra.effective_class(batch.cls[i]), d.chosen}];
            contribs.push_back({batch.cls[i], static_cast<int>(s), hhat,
                                softmax_jacobian_row(d)});
        }
    }
    apply_policy_update(tra, contribs, beta);
}

void tea_update_from_draws(TeaPolicy& tea,
                           const std::vector<SampleDraw>& draws,
                           const std::vector<double>& losses, double gamma) {
    if (draws.size() != losses.size())
        throw ConfigError("draw and loss counts disagree");
    const size_t z = draws.size();
    if (z == 0) return;
    std::vector<double> grad(z);
    std::vector<int> chosen(z);
    for (size_t k = 0; k < z; ++k) {
        grad[k] = losses[k] / static_cast<double>(z);
        chosen[k] = draws[k].chosen;
    }
    std::vector<double> hhat = normalize_by_sampling_freq(grad, chosen);
    std::vector<PolicyContribution> contribs;
    contribs.reserve(z);
    for (size_t k = 0; k < z; ++k)
        contribs.push_back({0, 0, hhat[k], softmax_jacobian_row(draws[k])});
    apply_policy_update(tea, contribs, gamma);
}

TeaStepResult tea_step(TeaPolicy& tea, const SegNet& net,
                       const Tensor& val_image, const LabelMap& val_labels,
                       const std::vector<TeaOp>& ops, int Z, double gamma,
                       Rng& rng, LossKind loss_tea, int threads) {
    if (Z < 2) throw ConfigError("tea-draws must be at least 2");
    if (val_image.rank() != 3)
        throw ConfigError("tea_step expects one [c,H,W] image, got " +
                          shape_str(val_image.shape));
    TeaStepResult res;
    std::vector<SampleDraw> draws;
    draws.reserve(static_cast<size_t>(Z));
    res.losses.resize(static_cast<size_t>(Z));
    res.chosen.resize(static_cast<size_t>(Z));
    std::map<int, double> memo;  // repeated ops score identically
    for (int k = 0; k < Z; ++k) {
        SampleDraw d = gumbel_softmax_draw(tea.logits, rng);
        res.chosen[static_cast<size_t>(k)] = d.chosen;
        auto it = memo.find(d.chosen);
        if (it == memo.end()) {
            const TeaOp& op = ops[static_cast<size_t>(d.chosen)];
            Tensor x = apply_tea(op, val_image);
            Tensor batch({1, x.dim(0), x.dim(1), x.dim(2)});
            batch.data = x.data;
            Tensor logits = forward(net, batch, nullptr, threads);
            logits.shape = {logits.dim(1), logits.dim(2), logits.dim(3)};
            Tensor prob = softmax_classes(logits);
            Tensor reverted = invert_tea(op, prob);
            const double l = eval_prob_loss(loss_tea, reverted, val_labels);
            if (!std::isfinite(l))
                throw NumericError("non-finite test-policy loss");
            it = memo.emplace(d.chosen, l).first;
        }
        res.losses[static_cast<size_t>(k)] = it->second;
        draws.push_back(std::move(d));
    }
    tea_update_from_draws(tea, draws, res.losses, gamma);
    return res;
}

namespace {

bool learns_tra(TrainMode m) {
    return m == TrainMode::Learned || m == TrainMode::ClassSpecific ||
           m == TrainMode::Joint;
}

}  // namespace

IterationOutcome joint_iteration(MetaState& state, const RunConfig& cfg,
                                 const Dataset& train_ds,
                                 const Dataset& val_ds,
                                 const std::vector<TraSlot>& slots,
                                 const std::vector<TeaOp>& ops,
                                 PrefetchPool& pool) {
    IterationOutcome out;
    const bool cadence_iter = (state.iteration % cfg.cadence) == 0;
    if (cadence_iter) pool.clear();
    AssembledBatch batch =
        assemble_train_batch(train_ds, cfg, state.tra, slots, state, pool);
    PatchBatch vb = sample_patch_batch(val_ds, cfg.m, cfg.patch,
                                       cfg.fg_fraction, state.rng_data);
    VirtualStepResult vs =
        virtual_step(state.net, state.mom, batch, cfg.alpha, cfg.momentum,
                     cfg.loss_train, cfg.grad_clip, cfg.threads);
    out.train_loss = vs.loss;
    if (cadence_iter) {
        out.cadence = true;
        if (learns_tra(cfg.mode)) {
            if (cfg.mode == TrainMode::Joint) {
                // Policy-transformed validation: one draw per sample, image
                // and target carried through the same geometry.
                for (int j = 0; j < cfg.m; ++j) {
                    SampleDraw d =
                        gumbel_softmax_draw(state.tea.logits, state.rng_tea);
                    const TeaOp& op = ops[static_cast<size_t>(d.chosen)];
                    Tensor img = slice_image(vb.images, j);
                    LabelMap lab = slice_labels(vb.labels, j);
                    Tensor timg = apply_tea(op, img);
                    LabelMap tlab = apply_tea_to_labels(op, lab);
                    copy_sample_in(vb.images, vb.labels, j, timg, tlab);
                }
            }
            HypergradResult hg =
                hypergrad_tra(state.net, vs.theta_star, batch, vb.images,
                              vb.labels, cfg.alpha, cfg.loss_train,
                              cfg.loss_val, cfg.threads);
            out.val_loss = hg.val_loss;
            out.epsilon = hg.epsilon;
            if (hg.skipped) {
                out.tra_skipped = true;
            } else {
                tra_policy_step(state.tra, hg.dw, batch, cfg.beta);
                out.tra_applied = true;
            }
            if (cfg.mode == TrainMode::Joint) {
                const int nv = static_cast<int>(val_ds.images.size());
                const int idx = state.val_cursor % nv;
                state.val_cursor = (state.val_cursor + 1) % nv;
                tea_step(state.tea, state.net, val_ds.images[idx],
                         val_ds.labels[idx], ops, cfg.tea_draws, cfg.gamma,
                         state.rng_tea, cfg.loss_tea, cfg.threads);
                out.tea_applied = true;
            }
        } else {
            // Fixed-policy arms still report the validation loss at theta*.
            Tensor logits = forward(vs.theta_star, vb.images, nullptr,
                                    cfg.threads);
            std::vector<double> ones(static_cast<size_t>(cfg.m), 1.0);
            out.val_loss =
                eval_loss(cfg.loss_val, logits, vb.labels, ones).value;
        }
    }
    state.net = std::move(vs.theta_star);
    state.mom = std::move(vs.mom_star);
    state.iteration += 1;
    return out;
}

namespace {

std::string tra_sha(const ClassPolicy& p) {
    json j = {{"logits", p.logits}, {"tied", p.tied}};
    const std::string s = j.dump();
    return sha256_hex(s.data(), s.size());
}

std::string tea_sha(const TeaPolicy& p) {
    json j = {{"logits", p.logits}};
    const std::string s = j.dump();
    return sha256_hex(s.data(), s.size());
}

}  // namespace

TrainResult train(const RunConfig& cfg, const Dataset& train_ds,
                  const Dataset& val_ds, const std::vector<TraSlot>& slots,
                  const std::vector<TeaOp>& ops, const MetaState* resume,
                  const std::string& checkpoint_dir,
                  const std::function<void(const nlohmann::json&)>& on_record) {
    validate_config(cfg, ops.size());
    if (train_ds.images.empty()) throw ConfigError("training set is empty");
    if (val_ds.images.empty()) throw ConfigError("validation set is empty");
    TrainResult res;
    res.state = resume ? *resume : init_meta_state(cfg, slots, ops,
                                                   train_ds.classes);
    const int64_t iters_per_epoch =
        std::max<int64_t>(1, static_cast<int64_t>(train_ds.images.size()) /
                                 cfg.n);
    const int64_t total = iters_per_epoch * cfg.epochs;
    PrefetchPool pool;
    pool.capacity = cfg.prefetch_pool;
    while (res.state.iteration < total) {
        const int64_t it = res.state.iteration;
        IterationOutcome oc = joint_iteration(res.state, cfg, train_ds,
                                              val_ds, slots, ops, pool);
        if (oc.cadence) {
            json rec;
            rec["iteration"] = it;
            rec["train_loss"] = oc.train_loss;
            rec["val_loss"] = oc.val_loss;
            rec["epsilon"] = oc.epsilon;
            rec["tra"] = oc.tra_applied ? "applied"
                         : oc.tra_skipped ? "skipped"
                                          : "none";
            rec["tea"] = oc.tea_applied ? "applied" : "none";
            rec["tra_policy_sha256"] = tra_sha(res.state.tra);
            rec["tea_policy_sha256"] = tea_sha(res.state.tea);
            res.history.push_back(rec);
            if (on_record) on_record(rec);
        }
        if (!checkpoint_dir.empty() && res.state.iteration % cfg.cadence == 0)
            save_meta_state(res.state, slots, ops, checkpoint_dir);
    }
    return res;
}

RefineResult refine_tea(const SegNet& net, const Dataset& val_ds,
                        const std::vector<TeaOp>& ops, int steps, int Z,
                        double gamma, uint64_t seed, LossKind loss_tea,
                        int threads) {
    if (val_ds.images.empty()) throw ConfigError("validation set is empty");
    if (steps < 1) throw ConfigError("steps must be at least 1");
    if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
    RefineResult res;
    res.tea = make_uniform_tea_policy(ops.size());
    Rng rng = Rng::stream(seed, 4);
    const int nv = static_cast<int>(val_ds.images.size());
    for (int step = 0; step < steps; ++step) {
        const int idx = step % nv;
        TeaStepResult ts =
            tea_step(res.tea, net, val_ds.images[idx], val_ds.labels[idx],
                     ops, Z, gamma, rng, loss_tea, threads);
        double mean = 0.0;
        for (double l : ts.losses) mean += l;
        mean /= static_cast<double>(ts.losses.size());
        json rec;
        rec["step"] = step;
        rec["sample"] = idx;
        rec["mean_loss"] = mean;
        rec["policy_sha256"] = tea_sha(res.tea);
        res.history.push_back(rec);
    }
    return res;
}

}  // namespace augopt
