#pragma once

#include <string>
#include <vector>

#include "augopt/net.hpp"
#include "augopt/policy.hpp"
#include "augopt/tensor.hpp"
#include "augopt/transforms.hpp"
#include "json.hpp"

namespace augopt {

// Top-z slice of the test-time policy: ops in descending probability,
// weights renormalized over the selection so they sum to one.
struct AggregationPlan {
    std::vector<int> op_ids;
    std::vector<double> weights;
};

AggregationPlan build_plan(const TeaPolicy& tea,
                           const std::vector<TeaOp>& ops, int z);

// Distinct ops, matching lengths, weights on the simplex within 1e-6.
void validate_plan(const AggregationPlan& plan, size_t pool_size);

struct InferResult {
    Tensor prob;      // [c,H,W] pixelwise convex combination
    LabelMap labels;  // per-pixel argmax, ties to the lower class
};

// Weighted ensemble: transform the image with each selected op, run the
// net, revert the prediction, and sum with 64-bit accumulators.
InferResult aggregate(const SegNet& net, const Tensor& image,
                      const AggregationPlan& plan,
                      const std::vector<TeaOp>& ops, int threads = 1);

nlohmann::json plan_json(const AggregationPlan& plan,
                         const std::vector<TeaOp>& ops);
AggregationPlan plan_from_json(const nlohmann::json& j);

// Probability maps + label maps in the checksummed blob format, with the
// plan embedded in the manifest.
void save_inference(const std::string& dir,
                    const std::vector<InferResult>& results,
                    const AggregationPlan& plan,
                    const std::vector<TeaOp>& ops);

struct InferenceData {
    std::vector<InferResult> results;
    nlohmann::json plan;
};

InferenceData load_inference(const std::string& dir);

}  // namespace augopt
