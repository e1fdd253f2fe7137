#pragma once

#include <string>
#include <vector>

#include "augopt/rng.hpp"
#include "augopt/transforms.hpp"
#include "json.hpp"

namespace augopt {

// Patch classes for class-specific TRA: the central-pixel label decides.
constexpr int kPolicyBg = 0;
constexpr int kPolicyFg = 1;
constexpr int kPolicyClasses = 2;

// Per-class, per-slot logit tables over TRA magnitude bins. Logits are free
// reals; reported probabilities are softmax within each slot. tied makes FG
// and BG share table 0 (class-agnostic learning).
struct ClassPolicy {
    std::vector<std::vector<std::vector<double>>> logits;  // [class][slot][bin]
    bool tied = false;

    int effective_class(int cls) const { return tied ? 0 : cls; }
    std::vector<double>& slot_logits(int cls, int slot) {
        return logits[effective_class(cls)][slot];
    }
    const std::vector<double>& slot_logits(int cls, int slot) const {
        return logits[effective_class(cls)][slot];
    }
};

// Single logit vector over the TEA op pool.
struct TeaPolicy {
    std::vector<double> logits;
};

ClassPolicy make_uniform_tra_policy(const std::vector<TraSlot>& slots);
// Off bin carries ~0.7 probability per slot, remainder spread uniformly.
ClassPolicy make_heuristic_tra_policy(const std::vector<TraSlot>& slots);

TeaPolicy make_uniform_tea_policy(size_t pool_size);
// Identity, mirrors, and the 180-degree rotation elevated; the usual
// flip/rotate test-time ensemble when consumed through top-z selection.
TeaPolicy make_heuristic_tea_policy(const std::vector<TeaOp>& ops);

// One Gumbel-Softmax realization over a logit vector.
struct SampleDraw {
    std::vector<double> gumbels;
    std::vector<double> s;  // softmax(logits + gumbels), on the simplex
    int chosen = 0;         // argmax of s, ties to the lowest index
};

// g = -log(-log u), u uniform clamped to [1e-12, 1-1e-12].
SampleDraw gumbel_softmax_draw(const std::vector<double>& logits, Rng& rng);
// Deterministic scoring for given gumbels (test oracle path).
SampleDraw score_gumbel_draw(const std::vector<double>& logits,
                             const std::vector<double>& gumbels);

// The stop-gradient weight: value is exactly 1, gradient flows only through
// s[chosen].
struct DrawWeight {
    double value = 1.0;
    int grad_index = 0;
};
DrawWeight draw_weight(const SampleDraw& d);

// d s[index] / d logit_j = s[index] * (delta(j,index) - s[j]).
std::vector<double> softmax_jacobian_row(const SampleDraw& d, int index);
inline std::vector<double> softmax_jacobian_row(const SampleDraw& d) {
    return softmax_jacobian_row(d, d.chosen);
}

// h_i = g_i - mean of g over the samples sharing class(i).
std::vector<double> normalize_grads_by_class(const std::vector<double>& g,
                                             const std::vector<int>& classes);
// hhat_i = h_i / count of samples with the same chosen index.
std::vector<double> normalize_by_sampling_freq(const std::vector<double>& h,
                                               const std::vector<int>& chosen);

// One addressed policy-gradient term: logits[addr] -= lr * hhat * row.
struct PolicyContribution {
    int cls = 0;   // TRA class address; ignored for TEA
    int slot = 0;  // TRA slot address; ignored for TEA
    double hhat = 0.0;
    std::vector<double> row;
};

void apply_policy_update(ClassPolicy& policy,
                         const std::vector<PolicyContribution>& contributions,
                         double lr);
void apply_policy_update(TeaPolicy& policy,
                         const std::vector<PolicyContribution>& contributions,
                         double lr);

std::vector<double> softmax_vec(const std::vector<double>& logits);

// Export/import. The JSON carries names, bin descriptors, logits and softmax
// probabilities per slot (the data behind policy pie charts).
nlohmann::json tra_policy_json(const ClassPolicy& p,
                               const std::vector<TraSlot>& slots,
                               int64_t iteration);
ClassPolicy tra_policy_from_json(const nlohmann::json& j,
                                 const std::vector<TraSlot>& slots);
nlohmann::json tea_policy_json(const TeaPolicy& p,
                               const std::vector<TeaOp>& ops,
                               int64_t iteration);
TeaPolicy tea_policy_from_json(const nlohmann::json& j,
                               const std::vector<TeaOp>& ops);

void save_json(const nlohmann::json& j, const std::string& path);
nlohmann::json load_json(const std::string& path);

}  // namespace augopt
