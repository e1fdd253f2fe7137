#include "augopt/policy.hpp"

#include <cmath>
#include <fstream>

#include "augopt/errors.hpp"

namespace augopt {

std::vector<double> softmax_vec(const std::vector<double>& logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (auto& v : out) v /= sum;
    return out;
}

ClassPolicy make_uniform_tra_policy(const std::vector<TraSlot>& slots) {
    ClassPolicy p;
    p.logits.assign(kPolicyClasses, {});
    for (int c = 0; c < kPolicyClasses; ++c)
        for (const auto& s : slots)
            p.logits[c].push_back(std::vector<double>(s.bins.size(), 0.0));
    return p;
}

ClassPolicy make_heuristic_tra_policy(const std::vector<TraSlot>& slots) {
    ClassPolicy p = make_uniform_tra_policy(slots);
    const double p_off = 0.7;
    for (int c = 0; c < kPolicyClasses; ++c)
        for (size_t s = 0; s < slots.size(); ++s) {
            const size_t bins = slots[s].bins.size();
            if (bins < 2) continue;
            // Non-off logits stay 0; solve the off logit for softmax = p_off.
            p.logits[c][s][0] =
                std::log(p_off * (double)(bins - 1) / (1.0 - p_off));
        }
    return p;
}

TeaPolicy make_uniform_tea_policy(size_t pool_size) {
    TeaPolicy p;
    p.logits.assign(pool_size, 0.0);
    return p;
}

TeaPolicy make_heuristic_tea_policy(const std::vector<TeaOp>& ops) {
    TeaPolicy p = make_uniform_tea_policy(ops.size());
    for (const auto& op : ops) {
        const bool flip = op.kind == TeaKind::MirrorH ||
                          op.kind == TeaKind::MirrorV ||
                          op.kind == TeaKind::MirrorBoth;
        const bool rot180 =
            op.kind == TeaKind::RotateAcw && op.magnitude == 180.0;
        if (op.kind == TeaKind::Identity || flip || rot180)
            p.logits[op.op_id] = 3.0;
    }
    return p;
}

SampleDraw score_gumbel_draw(const std::vector<double>& logits,
                             const std::vector<double>& gumbels) {
    if (logits.empty() || logits.size() != gumbels.size())
        throw ConfigError("score_gumbel_draw: logits/gumbels length mismatch");
    std::vector<double> z(logits.size());
    for (size_t i = 0; i < z.size(); ++i) z[i] = logits[i] + gumbels[i];
    SampleDraw d;
    d.gumbels = gumbels;
    d.s = softmax_vec(z);
    d.chosen = 0;
    for (size_t i = 1; i < d.s.size(); ++i)
        if (d.s[i] > d.s[d.chosen]) d.chosen = (int)i;
    return d;
}

SampleDraw gumbel_softmax_draw(const std::vector<double>& logits, Rng& rng) {
    std::vector<double> g(logits.size());
    for (auto& v : g) {
        double u = rng.uniform();
        u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
        v = -std::log(-std::log(u));
    }
    return score_gumbel_draw(logits, g);
}

DrawWeight draw_weight(const SampleDraw& d) {
    return DrawWeight{1.0, d.chosen};
}

std::vector<double> softmax_jacobian_row(const SampleDraw& d, int index) {
    if (index < 0 || index >= (int)d.s.size())
        throw ConfigError("softmax_jacobian_row: index out of range");
    std::vector<double> row(d.s.size());
    const double sc = d.s[index];
    for (size_t j = 0; j < d.s.size(); ++j)
        row[j] = sc * (((int)j == index ? 1.0 : 0.0) - d.s[j]);
    return row;
}

std::vector<double> normalize_grads_by_class(const std::vector<double>& g,
                                             const std::vector<int>& classes) {
    if (g.size() != classes.size())
        throw ConfigError("normalize_grads_by_class: length mismatch");
    double sum[2] = {0.0, 0.0};
    int64_t count[2] = {0, 0};
    for (size_t i = 0; i < g.size(); ++i) {
        const int c = classes[i] ? 1 : 0;
        sum[c] += g[i];
        count[c] += 1;
    }
    std::vector<double> h(g.size());
    for (size_t i = 0; i < g.size(); ++i) {
        const int c = classes[i] ? 1 : 0;
        h[i] = g[i] - sum[c] / (double)count[c];
    }
    return h;
}

std::vector<double> normalize_by_sampling_freq(const std::vector<double>& h,
                                               const std::vector<int>& chosen) {
    if (h.size() != chosen.size())
        throw ConfigError("normalize_by_sampling_freq: length mismatch");
    std::vector<double> out(h.size());
    for (size_t i = 0; i < h.size(); ++i) {
        int count = 0;
        for (size_t j = 0; j < chosen.size(); ++j)
            if (chosen[j] == chosen[i]) ++count;
        out[i] = h[i] / (double)count;
    }
    return out;
}

void apply_policy_update(ClassPolicy& policy,
                         const std::vector<PolicyContribution>& contributions,
                         double lr) {
    if (lr <= 0.0) throw ConfigError("apply_policy_update: lr must be > 0");
    for (const auto& c : contributions) {
        const int cls = policy.effective_class(c.cls);
        if (cls < 0 || cls >= (int)policy.logits.size() || c.slot < 0 ||
            c.slot >= (int)policy.logits[cls].size())
            throw ConfigError("apply_policy_update: address out of range");
        auto& logits = policy.logits[cls][c.slot];
        if (c.row.size() != logits.size())
            throw ConfigError("apply_policy_update: row length mismatch");
        for (size_t j = 0; j < logits.size(); ++j)
            logits[j] -= lr * c.hhat * c.row[j];
    }
}

void apply_policy_update(TeaPolicy& policy,
                         const std::vector<PolicyContribution>& contributions,
                         double lr) {
    if (lr <= 0.0) throw ConfigError("apply_policy_update: lr must be > 0");
    for (const auto& c : contributions) {
        if (c.row.size() != policy.logits.size())
            throw ConfigError("apply_policy_update: row length mismatch");
        for (size_t j = 0; j < policy.logits.size(); ++j)
            policy.logits[j] -= lr * c.hhat * c.row[j];
    }
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json tra_policy_json(const ClassPolicy& p,
                               const std::vector<TraSlot>& slots,
                               int64_t iteration) {
    nlohmann::json j;
    j["format"] = "augopt-tra-policy";
    j["version"] = 1;
    j["iteration"] = iteration;
    j["tied"] = p.tied;
    auto classes = nlohmann::json::array();
    const char* names[2] = {"BG", "FG"};
    for (int c = 0; c < kPolicyClasses; ++c) {
        auto slot_arr = nlohmann::json::array();
        for (size_t s = 0; s < slots.size(); ++s) {
            const auto& logits = p.slot_logits(c, (int)s);
            const auto probs = softmax_vec(logits);
            auto bins = nlohmann::json::array();
            for (size_t b = 0; b < logits.size(); ++b)
                bins.push_back({{"kind", tra_kind_name(slots[s].bins[b].kind)},
                                {"lo", slots[s].bins[b].lo},
                                {"hi", slots[s].bins[b].hi},
                                {"symmetric", slots[s].bins[b].symmetric},
                                {"logit", logits[b]},
                                {"prob", probs[b]}});
            slot_arr.push_back({{"slot_id", slots[s].slot_id},
                                {"name", slots[s].name},
                                {"bins", bins}});
        }
        classes.push_back({{"class", names[c]}, {"slots", slot_arr}});
    }
    j["classes"] = classes;
    return j;
}

ClassPolicy tra_policy_from_json(const nlohmann::json& j,
                                 const std::vector<TraSlot>& slots) {
    if (j.value("format", "") != "augopt-tra-policy")
        throw DataError("not a TRA policy file");
    if (j.value("version", 0) != 1)
        throw DataError("unsupported TRA policy version");
    ClassPolicy p = make_uniform_tra_policy(slots);
    p.tied = j.value("tied", false);
    const auto& classes = j.at("classes");
    if (classes.size() != kPolicyClasses)
        throw DataError("TRA policy: expected 2 classes");
    for (int c = 0; c < kPolicyClasses; ++c) {
        const auto& slot_arr = classes[c].at("slots");
        if (slot_arr.size() != slots.size())
            throw DataError("TRA policy: slot count mismatch with registry");
        for (size_t s = 0; s < slots.size(); ++s) {
            const auto& bins = slot_arr[s].at("bins");
            if (bins.size() != slots[s].bins.size())
                throw DataError("TRA policy: bin count mismatch in slot " +
                                slots[s].name);
            for (size_t b = 0; b < bins.size(); ++b)
                p.logits[c][s][b] = bins[b].at("logit").get<double>();
        }
    }
    return p;
}

nlohmann::json tea_policy_json(const TeaPolicy& p,
                               const std::vector<TeaOp>& ops,
                               int64_t iteration) {
    nlohmann::json j;
    j["format"] = "augopt-tea-policy";
    j["version"] = 1;
    j["iteration"] = iteration;
    const auto probs = softmax_vec(p.logits);
    auto arr = nlohmann::json::array();
    for (size_t i = 0; i < p.logits.size(); ++i) {
        nlohmann::json entry = {{"op_id", (int)i},
                                {"logit", p.logits[i]},
                                {"prob", probs[i]}};
        if (i < ops.size()) {
            entry["name"] = ops[i].name;
            entry["magnitude"] = ops[i].magnitude;
        }
        arr.push_back(entry);
    }
    j["ops"] = arr;
    return j;
}

TeaPolicy tea_policy_from_json(const nlohmann::json& j,
                               const std::vector<TeaOp>& ops) {
    if (j.value("format", "") != "augopt-tea-policy")
        throw DataError("not a TEA policy file");
    if (j.value("version", 0) != 1)
        throw DataError("unsupported TEA policy version");
    const auto& arr = j.at("ops");
    if (!ops.empty() && arr.size() != ops.size())
        throw DataError("TEA policy: op count mismatch with registry (" +
                        std::to_string(arr.size()) + " vs " +
                        std::to_string(ops.size()) + ")");
    TeaPolicy p;
    p.logits.resize(arr.size());
    for (size_t i = 0; i < arr.size(); ++i)
        p.logits[i] = arr[i].at("logit").get<double>();
    return p;
}

void save_json(const nlohmann::json& j, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw DataError("cannot open for write: " + path);
    f << j.dump(2) << "\n";
    if (!f) throw DataError("write failed: " + path);
}

nlohmann::json load_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open: " + path);
    try {
        return nlohmann::json::parse(f);
    } catch (const std::exception& e) {
        throw DataError("bad JSON in " + path + ": " + e.what());
    }
}

}  // namespace augopt
