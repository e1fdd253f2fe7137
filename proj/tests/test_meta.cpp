#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>

#include "augopt/data.hpp"
#include "augopt/meta.hpp"
#include "doctest.h"

using namespace augopt;

namespace {

TaskSpec small_spec() {
    TaskSpec s;
    s.height = 28;
    s.width = 28;
    s.fg_prevalence = 0.05;
    s.n_train = 8;
    s.n_val = 4;
    s.n_test = 2;
    return s;
}

RunConfig small_config(TrainMode mode) {
    RunConfig c;
    c.mode = mode;
    c.alpha = 0.05;
    c.beta = 0.5;
    c.gamma = 0.5;
    c.n = 4;
    c.m = 3;
    c.tea_draws = 4;
    c.top_z = 1;
    c.cadence = 5;
    c.epochs = 6;  // 8 train images / n=4 -> 2 iters per epoch
    c.patch = 16;
    c.seed = 11;
    return c;
}

// One intensity-shift slot; logits can force either bin deterministically.
std::vector<TraSlot> shift_slot(double lo, double hi) {
    TraSlot s;
    s.slot_id = 0;
    s.category = "intensity";
    s.name = "shift";
    s.bins.push_back({TraKind::Off, 0.0, 0.0, false});
    s.bins.push_back({TraKind::IntShift, lo, hi, false});
    return {s};
}

std::vector<TeaOp> identity_pool() {
    TeaOp id;
    id.op_id = 0;
    id.category = "identity";
    id.name = "identity";
    id.kind = TeaKind::Identity;
    return {id};
}

std::vector<TeaOp> identity_mirror_pool() {
    auto ops = identity_pool();
    TeaOp m;
    m.op_id = 1;
    m.category = "spatial";
    m.name = "mirror-h";
    m.kind = TeaKind::MirrorH;
    m.spatial_inverse = true;
    ops.push_back(m);
    return ops;
}

// Single-image dataset whose only full-patch center pixel is foreground.
Dataset one_center_dataset(int side) {
    Dataset ds;
    ds.classes = 2;
    ds.split = "train";
    Tensor img({1, side, side});
    for (size_t i = 0; i < img.data.size(); ++i)
        img.data[i] = 0.001f * static_cast<float>(i % 977);
    LabelMap lab({side, side});
    lab.at2(side / 2, side / 2) = 1;
    ds.images.push_back(img);
    ds.labels.push_back(lab);
    return ds;
}

bool same_bits(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.ptr(), b.ptr(), a.data.size() * sizeof(float)) == 0;
}

bool same_net(const SegNet& a, const SegNet& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (size_t i = 0; i < a.layers.size(); ++i)
        if (!same_bits(a.layers[i].w, b.layers[i].w) ||
            !same_bits(a.layers[i].b, b.layers[i].b))
            return false;
    return true;
}

std::string temp_dir(const char* tag) {
    auto p = std::filesystem::temp_directory_path() /
             (std::string("augopt_meta_") + tag);
    std::filesystem::remove_all(p);
    return p.string();
}

}  // namespace

TEST_CASE("mode and loss parsing round-trips; invalid names rejected") {
    for (auto m : {TrainMode::None, TrainMode::Heuristic, TrainMode::Learned,
                   TrainMode::ClassSpecific, TrainMode::Joint})
        CHECK(parse_mode(mode_name(m)) == m);
    for (auto k : {LossKind::CE, LossKind::SoftDice, LossKind::Sum})
        CHECK(parse_loss(loss_name(k)) == k);
    CHECK_THROWS_AS(parse_mode("bilevel"), ConfigError);
    CHECK_THROWS_AS(parse_loss("dice"), ConfigError);
}

TEST_CASE("config validation rejects out-of-range fields") {
    RunConfig ok = small_config(TrainMode::Joint);
    CHECK_NOTHROW(validate_config(ok, 8));
    auto broken = [&](auto mut) {
        RunConfig c = ok;
        mut(c);
        CHECK_THROWS_AS(validate_config(c, 8), ConfigError);
    };
    broken([](RunConfig& c) { c.alpha = 0.0; });
    broken([](RunConfig& c) { c.beta = -1.0; });
    broken([](RunConfig& c) { c.gamma = 0.0; });
    broken([](RunConfig& c) { c.momentum = 1.0; });
    broken([](RunConfig& c) { c.n = 0; });
    broken([](RunConfig& c) { c.m = 0; });
    broken([](RunConfig& c) { c.tea_draws = 1; });
    broken([](RunConfig& c) { c.top_z = 0; });
    broken([](RunConfig& c) { c.top_z = 9; });
    broken([](RunConfig& c) { c.cadence = 0; });
    broken([](RunConfig& c) { c.epochs = 0; });
    broken([](RunConfig& c) { c.fg_fraction = 1.5; });
    broken([](RunConfig& c) { c.grad_clip = 0.0; });
    broken([](RunConfig& c) { c.threads = 0; });
}

TEST_CASE("virtual step with zero learning rate returns the parameters untouched") {
    Rng rng(5);
    SegNet net = make_segnet(2, rng);
    MomentumState mom = zeros_momentum(net);
    Dataset ds = one_center_dataset(16);
    RunConfig cfg = small_config(TrainMode::None);
    cfg.n = 2;
    cfg.patch = 16;
    cfg.fg_fraction = 1.0;
    MetaState st = init_meta_state(cfg, shift_slot(0.1, 0.3), identity_pool(), 2);
    PrefetchPool pool;
    AssembledBatch batch =
        assemble_train_batch(ds, cfg, st.tra, shift_slot(0.1, 0.3), st, pool);
    auto vs = virtual_step(net, mom, batch, 0.0, 0.9, LossKind::CE, 10.0, 1);
    CHECK(same_net(vs.theta_star, net));
    CHECK(vs.per_sample.size() == 2);
    CHECK(std::isfinite(vs.loss));
}

TEST_CASE("virtual step equals the momentum SGD recurrence and clips the gradient") {
    Rng rng(7);
    SegNet net = make_segnet(2, rng);
    MomentumState mom = zeros_momentum(net);
    for (auto& v : mom.vw) v.fill(0.01f);
    Dataset ds = one_center_dataset(16);
    RunConfig cfg = small_config(TrainMode::None);
    cfg.n = 3;
    cfg.patch = 16;
    cfg.fg_fraction = 1.0;
    MetaState st = init_meta_state(cfg, shift_slot(0.1, 0.3), identity_pool(), 2);
    PrefetchPool pool;
    AssembledBatch batch =
        assemble_train_batch(ds, cfg, st.tra, shift_slot(0.1, 0.3), st, pool);

    const double alpha = 0.05, mu = 0.5;
    auto vs = virtual_step(net, mom, batch, alpha, mu, LossKind::CE, 10.0, 1);

    // Independent recurrence from the returned (clipped) gradient.
    SegNet ref = net;
    MomentumState mv = mom;
    sgd_step(ref, mv, vs.grads, static_cast<float>(alpha),
             static_cast<float>(mu));
    CHECK(same_net(vs.theta_star, ref));
    for (size_t l = 0; l < mv.vw.size(); ++l)
        CHECK(same_bits(vs.mom_star.vw[l], mv.vw[l]));

    // A tiny clip threshold caps the reported gradient norm exactly.
    auto clipped = virtual_step(net, mom, batch, alpha, mu, LossKind::CE,
                                1e-3, 1);
    CHECK(grad_l2_norm(clipped.grads) == doctest::Approx(1e-3).epsilon(1e-4));
}

TEST_CASE("mode none assembles raw crops with no draws") {
    Dataset ds = gen_task(small_spec(), 3).train;
    RunConfig cfg = small_config(TrainMode::None);
    auto slots = default_tra_registry();
    auto ops = identity_pool();
    MetaState st = init_meta_state(cfg, slots, ops, 2);
    Rng clone = st.rng_data;
    PrefetchPool pool;
    AssembledBatch batch = assemble_train_batch(ds, cfg, st.tra, slots, st, pool);
    PatchBatch raw = sample_patch_batch(ds, cfg.n, cfg.patch, cfg.fg_fraction,
                                        clone);
    CHECK(same_bits(batch.images, raw.images));
    CHECK(batch.labels.data == raw.labels.data);
    CHECK(batch.draws.empty());
    for (double w : batch.weights) CHECK(w == 1.0);
    CHECK(batch.cls == raw.cls);
}

TEST_CASE("assembly applies the drawn bins: off bin copies, shift bin adds") {
    Dataset ds = one_center_dataset(16);
    RunConfig cfg = small_config(TrainMode::ClassSpecific);
    cfg.n = 6;
    cfg.patch = 16;
    cfg.fg_fraction = 1.0;
    cfg.prefetch_pool = 0;  // no reuse: every sample transformed fresh
    auto slots = shift_slot(0.25, 0.25);
    MetaState st = init_meta_state(cfg, slots, identity_pool(), 2);
    Rng clone = st.rng_data;
    PrefetchPool pool;
    pool.capacity = cfg.prefetch_pool;
    AssembledBatch batch = assemble_train_batch(ds, cfg, st.tra, slots, st, pool);
    PatchBatch raw = sample_patch_batch(ds, cfg.n, cfg.patch, cfg.fg_fraction,
                                        clone);
    CHECK(batch.draws.size() == 6);
    const int p = cfg.patch;
    for (int i = 0; i < 6; ++i) {
        REQUIRE(batch.draws[i].size() == 1);
        const int chosen = batch.draws[i][0].chosen;
        const float off = chosen == 0 ? 0.0f : 0.25f;
        for (int y = 0; y < p; ++y)
            for (int x = 0; x < p; ++x)
                CHECK(batch.images.at({i, 0, y, x}) ==
                      doctest::Approx(raw.images.at({i, 0, y, x}) + off)
                          .epsilon(1e-6));
        CHECK(batch.weights[i] == 1.0);
    }
}

TEST_CASE("prefetch pool serves cached variants in rotation; magnitude stream advances regardless") {
    Dataset ds = one_center_dataset(16);
    RunConfig cfg = small_config(TrainMode::ClassSpecific);
    cfg.n = 6;
    cfg.patch = 16;
    cfg.fg_fraction = 1.0;
    cfg.prefetch_pool = 2;
    auto slots = shift_slot(0.1, 0.9);  // varying magnitude, same key
    MetaState st = init_meta_state(cfg, slots, identity_pool(), 2);
    // Force the shift bin for foreground samples.
    st.tra.logits[kPolicyFg][0] = {-100.0, 0.0};
    Rng mag_clone = st.rng_magnitude;
    PrefetchPool pool;
    pool.capacity = cfg.prefetch_pool;
    AssembledBatch batch = assemble_train_batch(ds, cfg, st.tra, slots, st, pool);

    auto row = [&](int i) {
        const size_t px = 16 * 16;
        return std::vector<float>(batch.images.data.begin() + i * px,
                                  batch.images.data.begin() + (i + 1) * px);
    };
    // Samples 0 and 1 fill the pool; 2..5 alternate between the two variants.
    CHECK(row(0) != row(1));
    CHECK(row(2) == row(0));
    CHECK(row(3) == row(1));
    CHECK(row(4) == row(0));
    CHECK(row(5) == row(1));

    // Hits did not skip magnitude draws: the stream position matches six
    // explicit instance draws.
    for (int i = 0; i < 6; ++i) sample_tra_instance(slots, {1}, mag_clone);
    CHECK(mag_clone.next_u64() == st.rng_magnitude.next_u64());
}

TEST_CASE("probe-loss combination formula and its linearity in the losses") {
    auto dw = hypergrad_from_probe_losses({1.0, 2.0}, {0.5, 2.5}, 0.1, 0.01, 2);
    REQUIRE(dw.size() == 2);
    CHECK(dw[0] == doctest::Approx(-1.25));
    CHECK(dw[1] == doctest::Approx(1.25));
    const double k = 3.7;
    auto scaled =
        hypergrad_from_probe_losses({k * 1.0, k * 2.0}, {k * 0.5, k * 2.5},
                                    0.1, 0.01, 2);
    CHECK(scaled[0] == doctest::Approx(k * dw[0]));
    CHECK(scaled[1] == doctest::Approx(k * dw[1]));
}

TEST_CASE("zero validation gradient skips the policy update") {
    Rng rng(9);
    SegNet net = make_segnet(2, rng);
    Dataset ds = one_center_dataset(16);
    RunConfig cfg = small_config(TrainMode::ClassSpecific);
    cfg.n = 2;
    cfg.patch = 16;
    cfg.fg_fraction = 1.0;
    auto slots = shift_slot(0.1, 0.3);
    MetaState st = init_meta_state(cfg, slots, identity_pool(), 2);
    PrefetchPool pool;
    AssembledBatch batch = assemble_train_batch(ds, cfg, st.tra, slots, st, pool);
    GradSet zero = zeros_like(net);
    auto res = hypergrad_tra_with_grads(net, zero, batch, 0.05, LossKind::CE, 1);
    CHECK(res.skipped);
    CHECK(res.dw.empty());
    CHECK(res.val_grad_norm == 0.0);
}

TEST_CASE("hypergradient probes never mutate the live parameters") {
    Rng rng(13);
    SegNet net = make_segnet(2, rng);
    SegNet before = net;
    Dataset ds = gen_task(small_spec(), 5).train;
    Dataset val = gen_task(small_spec(), 5).val;
    RunConfig cfg = small_config(TrainMode::ClassSpecific);
    auto slots = shift_slot(0.1, 0.3);
    MetaState st = init_meta_state(cfg, slots, identity_pool(), 2);
    PrefetchPool pool;
    AssembledBatch batch = assemble_train_batch(ds, cfg, st.tra, slots, st, pool);
    PatchBatch vb = sample_patch_batch(val, cfg.m, cfg.patch, cfg.fg_fraction,
                                       st.rng_data);
    MomentumState mom = zeros_momentum(net);
    auto vs = virtual_step(net, mom, batch, cfg.alpha, cfg.momentum,
                           LossKind::CE, 10.0, 1);
    auto hg = hypergrad_tra(net, vs.theta_star, batch, vb.images, vb.labels,
                            cfg.alpha, LossKind::CE, LossKind::SoftDice, 1);
    CHECK(same_net(net, before));
    CHECK_FALSE(hg.skipped);
    CHECK(hg.dw.size() == static_cast<size_t>(cfg.n));
    CHECK(hg.epsilon == doctest::Approx(0.01 / hg.val_grad_norm));
    CHECK(std::isfinite(hg.val_loss));

    // The estimate approximates a directional derivative: halving the probe
    // step must leave it nearly unchanged.
    GradSet val_grads;
    {
        ForwardCache cache;
        Tensor logits = forward(vs.theta_star, vb.images, &cache, 1);
        std::vector<double> ones(static_cast<size_t>(cfg.m), 1.0);
        LossResult lv = loss_soft_dice(logits, vb.labels, ones);
        val_grads = backward(vs.theta_star, cache, lv.dlogits, 1);
    }
    const double eps2 = hg.epsilon / 2.0;
    SegNet tp = perturb(net, val_grads, static_cast<float>(eps2));
    SegNet tm = perturb(net, val_grads, static_cast<float>(-eps2));
    std::vector<double> lp =
        eval_loss(LossKind::CE, forward(tp, batch.images, nullptr, 1),
                  batch.labels, batch.weights)
            .per_sample;
    std::vector<double> lm =
        eval_loss(LossKind::CE, forward(tm, batch.images, nullptr, 1),
                  batch.labels, batch.weights)
            .per_sample;
    auto dw2 = hypergrad_from_probe_losses(lp, lm, cfg.alpha, eps2, cfg.n);
    double num = 0.0, den = 0.0;
    for (int i = 0; i < cfg.n; ++i) {
        num += std::abs(hg.dw[i] - dw2[i]);
        den += std::abs(hg.dw[i]) + std::abs(dw2[i]);
    }
    CHECK(num <= 0.05 * den + 1e-12);
}

TEST_CASE("policy step: equal hypergradients within a class change nothing") {
    auto slots = shift_slot(0.1, 0.3);
    ClassPolicy tra = make_uniform_tra_policy(slots);
    AssembledBatch batch;
    batch.cls = {1, 1, 0, 0};
    batch.weights.assign(4, 1.0);
    Rng rng(3);
    for (int i = 0; i < 4; ++i)
        batch.draws.push_back({gumbel_softmax_draw(tra.logits[0][0], rng)});
    ClassPolicy before = tra;
    tra_policy_step(tra, {0.7, 0.7, -0.2, -0.2}, batch, 0.5);
    CHECK(tra.logits == before.logits);
}

TEST_CASE("policy step: a lone sample of its class cannot move that class") {
    auto slots = shift_slot(0.1, 0.3);
    ClassPolicy tra = make_uniform_tra_policy(slots);
    AssembledBatch batch;
    batch.cls = {1, 0, 0};
    batch.weights.assign(3, 1.0);
    Rng rng(4);
    for (int i = 0; i < 3; ++i)
        batch.draws.push_back({gumbel_softmax_draw(tra.logits[0][0], rng)});
    tra_policy_step(tra, {5.0, 1.0, -1.0}, batch, 0.5);
    CHECK(tra.logits[kPolicyFg][0] == std::vector<double>{0.0, 0.0});
    CHECK(tra.logits[kPolicyBg][0] != std::vector<double>{0.0, 0.0});
}

TEST_CASE("policy step: below-mean sensitivity raises the chosen bin") {
    auto slots = shift_slot(0.1, 0.3);
    ClassPolicy tra = make_uniform_tra_policy(slots);
    AssembledBatch batch;
    batch.cls = {1, 1};
    batch.weights.assign(2, 1.0);
    // Sample A drew the shift bin, sample B the off bin, equal scores.
    batch.draws.push_back({score_gumbel_draw(tra.logits[1][0], {0.0, 0.0})});
    batch.draws.back()[0].chosen = 1;
    batch.draws.back()[0].s = {0.3, 0.7};
    batch.draws.push_back({score_gumbel_draw(tra.logits[1][0], {0.0, 0.0})});
    tra_policy_step(tra, {-1.0, 1.0}, batch, 1.0);
    // A's validation sensitivity sits below the class mean: its chosen bin
    // gains probability.
    CHECK(tra.logits[1][0][1] > 0.0);
    CHECK(tra.logits[1][0][0] < 0.0);
    // The lone-table untied BG class is untouched.
    CHECK(tra.logits[0][0] == std::vector<double>{0.0, 0.0});
}

TEST_CASE("policy step: shared-bin samples split the update by frequency") {
    auto slots = shift_slot(0.1, 0.3);
    // Case 1: both background samples drew bin 0 with flat scores.
    ClassPolicy shared = make_uniform_tra_policy(slots);
    AssembledBatch batch;
    batch.cls = {0, 0};
    batch.weights.assign(2, 1.0);
    SampleDraw flat0 = score_gumbel_draw(shared.logits[0][0], {0.0, 0.0});
    batch.draws.push_back({flat0});
    batch.draws.push_back({flat0});
    tra_policy_step(shared, {0.0, 2.0}, batch, 1.0);
    // h = {-1,+1}, both divided by the shared count 2; equal rows cancel.
    CHECK(shared.logits[0][0][0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(shared.logits[0][0][1] == doctest::Approx(0.0).epsilon(1e-12));

    // Case 2: distinct bins keep full weight: hand-computed update.
    ClassPolicy split = make_uniform_tra_policy(slots);
    AssembledBatch batch2;
    batch2.cls = {0, 0};
    batch2.weights.assign(2, 1.0);
    SampleDraw a = flat0;  // chose bin 0, s = {0.5, 0.5}
    SampleDraw b = flat0;
    b.chosen = 1;
    batch2.draws.push_back({a});
    batch2.draws.push_back({b});
    tra_policy_step(split, {0.0, 2.0}, batch2, 1.0);
    CHECK(split.logits[0][0][0] == doctest::Approx(0.5));
    CHECK(split.logits[0][0][1] == doctest::Approx(-0.5));
}

TEST_CASE("test-policy update: saturated single-op pool never moves") {
    TeaPolicy tea = make_uniform_tea_policy(1);
    std::vector<SampleDraw> draws(3, score_gumbel_draw({0.0}, {0.0}));
    tea_update_from_draws(tea, draws, {0.4, 0.4, 0.4}, 0.5);
    CHECK(tea.logits == std::vector<double>{0.0});
}

TEST_CASE("test-policy update: the cheaper op gains logit gap") {
    TeaPolicy tea = make_uniform_tea_policy(2);
    std::vector<SampleDraw> draws;
    draws.push_back(score_gumbel_draw(tea.logits, {1.0, 0.0}));  // chose 0
    draws.push_back(score_gumbel_draw(tea.logits, {0.0, 1.0}));  // chose 1
    REQUIRE(draws[0].chosen == 0);
    REQUIRE(draws[1].chosen == 1);
    tea_update_from_draws(tea, draws, {0.2, 0.8}, 1.0);
    CHECK(tea.logits[0] > tea.logits[1]);
    // Hand computation: s01 = s0*s1 of softmax([1,0]); grads {0.1, 0.4}.
    const double s01 = 0.7310585786300049 * (1.0 - 0.7310585786300049);
    CHECK(tea.logits[0] == doctest::Approx(-0.1 * s01 + 0.4 * s01));
    CHECK(tea.logits[1] == doctest::Approx(0.1 * s01 - 0.4 * s01));
}

TEST_CASE("test-policy update: per-step drift bounded by gamma times max loss") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        TeaPolicy tea = make_uniform_tea_policy(6);
        for (auto& l : tea.logits) l = rng.uniform(-1.0, 1.0);
        TeaPolicy before = tea;
        std::vector<SampleDraw> draws;
        std::vector<double> losses;
        double max_loss = 0.0;
        for (int k = 0; k < 8; ++k) {
            draws.push_back(gumbel_softmax_draw(tea.logits, rng));
            losses.push_back(rng.uniform(0.0, 1.5));
            max_loss = std::max(max_loss, losses.back());
        }
        const double gamma = 0.7;
        tea_update_from_draws(tea, draws, losses, gamma);
        for (size_t j = 0; j < tea.logits.size(); ++j)
            CHECK(std::abs(tea.logits[j] - before.logits[j]) <=
                  gamma * max_loss + 1e-12);
    }
}

TEST_CASE("test-policy update: identity-only draws preserve the others' order") {
    TeaPolicy tea;
    tea.logits = {5.0, 0.5, 0.3, 0.1};
    std::vector<SampleDraw> draws;
    for (int k = 0; k < 4; ++k)
        draws.push_back(score_gumbel_draw(tea.logits, {0.0, 0.0, 0.0, 0.0}));
    for (auto& d : draws) REQUIRE(d.chosen == 0);
    tea_update_from_draws(tea, draws, {0.3, 0.3, 0.3, 0.3}, 0.1);
    CHECK(tea.logits[0] != 5.0);  // the chosen identity logit moved
    CHECK(tea.logits[1] > tea.logits[2]);
    CHECK(tea.logits[2] > tea.logits[3]);
}

TEST_CASE("tea step scores ops deterministically and memoizes repeats") {
    Rng rng(31);
    SegNet net = make_segnet(2, rng);
    Dataset ds = gen_task(small_spec(), 7).val;
    auto ops = identity_mirror_pool();
    TeaPolicy tea = make_uniform_tea_policy(ops.size());
    Rng r1(99), r2(99);
    TeaPolicy tea2 = tea;
    auto a = tea_step(tea, net, ds.images[0], ds.labels[0], ops, 6, 0.5, r1,
                      LossKind::SoftDice, 1);
    auto b = tea_step(tea2, net, ds.images[0], ds.labels[0], ops, 6, 0.5, r2,
                      LossKind::SoftDice, 1);
    CHECK(a.chosen == b.chosen);
    CHECK(a.losses == b.losses);
    CHECK(tea.logits == tea2.logits);
    REQUIRE(a.losses.size() == 6);
    for (size_t i = 0; i < a.losses.size(); ++i) {
        CHECK(a.losses[i] >= 0.0);
        CHECK(a.losses[i] <= 1.0);  // soft dice loss lives in [0,1]
        for (size_t j = 0; j < i; ++j)
            if (a.chosen[i] == a.chosen[j]) CHECK(a.losses[i] == a.losses[j]);
    }
    CHECK_THROWS_AS(tea_step(tea, net, ds.images[0], ds.labels[0], ops, 1,
                             0.5, r1, LossKind::SoftDice, 1),
                    ConfigError);
}

TEST_CASE("off-cadence iterations leave both policies bit-identical") {
    Task task = gen_task(small_spec(), 17);
    RunConfig cfg = small_config(TrainMode::Joint);
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_mirror_pool();
    cfg.top_z = 2;
    MetaState st = init_meta_state(cfg, slots, ops, 2);
    PrefetchPool pool;
    pool.capacity = cfg.prefetch_pool;

    auto oc0 = joint_iteration(st, cfg, task.train, task.val, slots, ops, pool);
    CHECK(oc0.cadence);
    auto tra_after0 = st.tra.logits;
    auto tea_after0 = st.tea.logits;
    SegNet net_prev = st.net;
    for (int i = 1; i < 5; ++i) {
        auto oc = joint_iteration(st, cfg, task.train, task.val, slots, ops,
                                  pool);
        CHECK_FALSE(oc.cadence);
        CHECK(st.tra.logits == tra_after0);
        CHECK(st.tea.logits == tea_after0);
        CHECK_FALSE(same_net(st.net, net_prev));  // training still commits
        net_prev = st.net;
    }
    auto oc5 = joint_iteration(st, cfg, task.train, task.val, slots, ops, pool);
    CHECK(oc5.cadence);
    CHECK(st.iteration == 6);
}

TEST_CASE("identical seeds give identical trajectories") {
    Task task = gen_task(small_spec(), 23);
    RunConfig cfg = small_config(TrainMode::Joint);
    cfg.epochs = 4;
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_mirror_pool();
    cfg.top_z = 2;
    auto a = train(cfg, task.train, task.val, slots, ops);
    auto b = train(cfg, task.train, task.val, slots, ops);
    CHECK(same_net(a.state.net, b.state.net));
    CHECK(a.state.tra.logits == b.state.tra.logits);
    CHECK(a.state.tea.logits == b.state.tea.logits);
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i)
        CHECK(a.history[i] == b.history[i]);
}

TEST_CASE("joint training with an identity-only pool matches class-specific bits") {
    Task task = gen_task(small_spec(), 29);
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_pool();
    RunConfig cj = small_config(TrainMode::Joint);
    RunConfig cs = small_config(TrainMode::ClassSpecific);
    auto a = train(cj, task.train, task.val, slots, ops);
    auto b = train(cs, task.train, task.val, slots, ops);
    CHECK(same_net(a.state.net, b.state.net));
    CHECK(a.state.tra.logits == b.state.tra.logits);
    // The single-op test policy is saturated: updates are exact no-ops.
    CHECK(a.state.tea.logits == std::vector<double>{0.0});
    REQUIRE(a.history.size() == b.history.size());
    for (size_t i = 0; i < a.history.size(); ++i) {
        CHECK(a.history[i]["train_loss"] == b.history[i]["train_loss"]);
        CHECK(a.history[i]["val_loss"] == b.history[i]["val_loss"]);
        CHECK(a.history[i]["epsilon"] == b.history[i]["epsilon"]);
        CHECK(a.history[i]["tra_policy_sha256"] ==
              b.history[i]["tra_policy_sha256"]);
    }
}

TEST_CASE("learned mode ties both classes to one logit table") {
    Task task = gen_task(small_spec(), 31);
    RunConfig cfg = small_config(TrainMode::Learned);
    cfg.epochs = 3;
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_pool();
    auto res = train(cfg, task.train, task.val, slots, ops);
    CHECK(res.state.tra.tied);
    // Table 0 learned something; table 1 is never addressed when tied.
    CHECK(res.state.tra.logits[1][0] == std::vector<double>{0.0, 0.0});
    CHECK(&res.state.tra.slot_logits(kPolicyFg, 0) ==
          &res.state.tra.slot_logits(kPolicyBg, 0));
}

TEST_CASE("fixed-policy modes never touch the policies but still record history") {
    Task task = gen_task(small_spec(), 37);
    auto slots = default_tra_registry();
    auto ops = default_tea_registry();
    for (auto mode : {TrainMode::None, TrainMode::Heuristic}) {
        RunConfig cfg = small_config(mode);
        cfg.epochs = 3;
        cfg.top_z = 4;
        MetaState init = init_meta_state(cfg, slots, ops, 2);
        auto res = train(cfg, task.train, task.val, slots, ops);
        CHECK(res.state.tra.logits == init.tra.logits);
        CHECK(res.state.tea.logits == init.tea.logits);
        REQUIRE(!res.history.empty());
        for (const auto& rec : res.history) {
            CHECK(rec["tra"] == "none");
            CHECK(rec["tea"] == "none");
            CHECK(std::isfinite(rec["val_loss"].get<double>()));
        }
    }
}

TEST_CASE("state snapshots round-trip and resuming matches a straight run") {
    Task task = gen_task(small_spec(), 41);
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_mirror_pool();
    RunConfig cfg = small_config(TrainMode::Joint);
    cfg.top_z = 2;
    cfg.cadence = 5;
    cfg.epochs = 5;  // 10 iterations: checkpoints at 5 and 10

    const std::string dir = temp_dir("resume");
    auto first = train(cfg, task.train, task.val, slots, ops, nullptr, dir);
    CHECK(first.state.iteration == 10);

    MetaState loaded = load_meta_state(dir, slots, ops);
    CHECK(loaded.iteration == 10);
    CHECK(loaded.val_cursor == first.state.val_cursor);
    CHECK(same_net(loaded.net, first.state.net));
    CHECK(loaded.tra.logits == first.state.tra.logits);
    CHECK(loaded.tea.logits == first.state.tea.logits);
    Rng lr = loaded.rng_data, fr = first.state.rng_data;
    CHECK(lr.next_u64() == fr.next_u64());
    Rng lt = loaded.rng_tea, ft = first.state.rng_tea;
    CHECK(lt.next_u64() == ft.next_u64());

    RunConfig cfg2 = cfg;
    cfg2.epochs = 10;  // 20 iterations total
    auto resumed = train(cfg2, task.train, task.val, slots, ops, &loaded);
    auto straight = train(cfg2, task.train, task.val, slots, ops);
    CHECK(same_net(resumed.state.net, straight.state.net));
    CHECK(resumed.state.tra.logits == straight.state.tra.logits);
    CHECK(resumed.state.tea.logits == straight.state.tea.logits);
    // The resumed history covers iterations 10..19; it must equal the tail
    // of the straight run's records.
    REQUIRE(straight.history.size() >= resumed.history.size());
    const size_t off = straight.history.size() - resumed.history.size();
    for (size_t i = 0; i < resumed.history.size(); ++i)
        CHECK(resumed.history[i] == straight.history[off + i]);
    std::filesystem::remove_all(dir);
}

TEST_CASE("loading a missing or foreign state directory fails cleanly") {
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_pool();
    CHECK_THROWS_AS(load_meta_state("/nonexistent/augopt_state", slots, ops),
                    DataError);
    const std::string dir = temp_dir("badstate");
    std::filesystem::create_directories(dir);
    save_json({{"format", "other"}, {"version", 1}}, dir + "/state.json");
    CHECK_THROWS_AS(load_meta_state(dir, slots, ops), DataError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite losses abort the iteration with a numeric error") {
    Task task = gen_task(small_spec(), 43);
    RunConfig cfg = small_config(TrainMode::ClassSpecific);
    auto slots = shift_slot(0.1, 0.3);
    auto ops = identity_pool();
    MetaState st = init_meta_state(cfg, slots, ops, 2);
    const float bad = std::numeric_limits<float>::quiet_NaN();
    st.net.layers[0].w.fill(bad);
    PrefetchPool pool;
    CHECK_THROWS_AS(
        joint_iteration(st, cfg, task.train, task.val, slots, ops, pool),
        NumericError);
}
