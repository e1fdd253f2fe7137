#include "augopt/infer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "augopt/data.hpp"
#include "augopt/errors.hpp"
#include "augopt/losses.hpp"

namespace augopt {

namespace fs = std::filesystem;
using nlohmann::json;

AggregationPlan build_plan(const TeaPolicy& tea,
                           const std::vector<TeaOp>& ops, int z) {
    const int K = static_cast<int>(ops.size());
    if (tea.logits.size() != ops.size())
        throw ConfigError("policy size disagrees with op pool");
    if (z < 1 || z > K)
        throw ConfigError("plan size z must lie in [1," + std::to_string(K) +
                          "], got " + std::to_string(z));

    const auto probs = softmax_vec(tea.logits);
    std::vector<int> order(ops.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[a] != probs[b]) return probs[a] > probs[b];
        return a < b;  // ties favor the lower op id
    });

    AggregationPlan plan;
    double sum = 0.0;
    for (int k = 0; k < z; ++k) {
        plan.op_ids.push_back(order[static_cast<size_t>(k)]);
        sum += probs[order[static_cast<size_t>(k)]];
    }
    for (int k = 0; k < z; ++k)
        plan.weights.push_back(probs[plan.op_ids[static_cast<size_t>(k)]] /
                               sum);
    return plan;
}

void validate_plan(const AggregationPlan& plan, size_t pool_size) {
    if (plan.op_ids.empty() || plan.op_ids.size() != plan.weights.size())
        throw ConfigError("plan must pair each op with a weight");
    std::vector<int> seen(pool_size, 0);
    double sum = 0.0;
    for (size_t k = 0; k < plan.op_ids.size(); ++k) {
        const int id = plan.op_ids[k];
        if (id < 0 || static_cast<size_t>(id) >= pool_size)
            throw ConfigError("plan references unknown op id " +
                              std::to_string(id));
        if (seen[static_cast<size_t>(id)]++)
            throw ConfigError("plan selects op id " + std::to_string(id) +
                              " more than once");
        if (plan.weights[k] < 0.0)
            throw ConfigError("plan weights must be nonnegative");
        sum += plan.weights[k];
    }
    if (std::fabs(sum - 1.0) > 1e-6)
        throw ConfigError("plan weights sum to " + std::to_string(sum) +
                          ", expected 1");
}

InferResult aggregate(const SegNet& net, const Tensor& image,
                      const AggregationPlan& plan,
                      const std::vector<TeaOp>& ops, int threads) {
    if (image.rank() != 3 || image.dim(0) != net.in_ch)
        throw ConfigError("aggregate expects an image shaped [in_ch,H,W]");
    validate_plan(plan, ops.size());
    const int H = image.dim(1), W = image.dim(2);
    const int c = net.classes;
    const int64_t plane = static_cast<int64_t>(H) * W;

    std::vector<double> acc(static_cast<size_t>(c) * plane, 0.0);
    for (size_t k = 0; k < plan.op_ids.size(); ++k) {
        const TeaOp& op = ops[static_cast<size_t>(plan.op_ids[k])];
        Tensor variant = apply_tea(op, image);

        Tensor batch({1, net.in_ch, H, W});
        std::memcpy(batch.data.data(), variant.data.data(),
                    variant.data.size() * sizeof(float));
        Tensor logits = forward(net, batch, nullptr, threads);
        logits.shape = {c, H, W};
        Tensor prob = softmax_classes(logits);

        Tensor reverted = invert_tea(op, prob);
        const double w = plan.weights[k];
        for (size_t i = 0; i < acc.size(); ++i)
            acc[i] += w * static_cast<double>(reverted.data[i]);
    }

    InferResult out;
    out.prob = Tensor({c, H, W});
    for (size_t i = 0; i < acc.size(); ++i)
        out.prob.data[i] = static_cast<float>(acc[i]);
    out.labels = LabelMap({H, W});
    for (int64_t q = 0; q < plane; ++q) {
        int best = 0;
        float best_v = out.prob.data[static_cast<size_t>(q)];
        for (int j = 1; j < c; ++j) {
            const float v =
                out.prob.data[static_cast<size_t>(j) * plane + q];
            if (v > best_v) {
                best_v = v;
                best = j;
            }
        }
        out.labels.data[static_cast<size_t>(q)] =
            static_cast<uint8_t>(best);
    }
    return out;
}

json plan_json(const AggregationPlan& plan, const std::vector<TeaOp>& ops) {
    json j;
    j["format"] = "augopt-plan";
    j["version"] = 1;
    j["z"] = plan.op_ids.size();
    json arr = json::array();
    for (size_t k = 0; k < plan.op_ids.size(); ++k) {
        json e;
        e["op_id"] = plan.op_ids[k];
        e["name"] = ops[static_cast<size_t>(plan.op_ids[k])].name;
        e["weight"] = plan.weights[k];
        arr.push_back(e);
    }
    j["ops"] = arr;
    return j;
}

AggregationPlan plan_from_json(const json& j) {
    try {
        if (j.at("format").get<std::string>() != "augopt-plan" ||
            j.at("version").get<int>() != 1)
            throw ConfigError("unsupported plan format or version");
        AggregationPlan plan;
        for (const auto& e : j.at("ops")) {
            plan.op_ids.push_back(e.at("op_id").get<int>());
            plan.weights.push_back(e.at("weight").get<double>());
        }
        return plan;
    } catch (const json::exception& e) {
        throw ConfigError("plan parse error: " + std::string(e.what()));
    }
}

void save_inference(const std::string& dir,
                    const std::vector<InferResult>& results,
                    const AggregationPlan& plan,
                    const std::vector<TeaOp>& ops) {
    if (results.empty()) throw DataError("no inference results to save");
    const int c = results[0].prob.dim(0);
    const int H = results[0].prob.dim(1);
    const int W = results[0].prob.dim(2);

    std::vector<float> prob_payload;
    std::vector<uint8_t> lab_payload;
    for (const auto& r : results) {
        if (r.prob.shape != std::vector<int>{c, H, W})
            throw DataError("inconsistent probability map shapes");
        prob_payload.insert(prob_payload.end(), r.prob.data.begin(),
                            r.prob.data.end());
        lab_payload.insert(lab_payload.end(), r.labels.data.begin(),
                           r.labels.data.end());
    }

    fs::create_directories(dir);
    json man;
    man["format"] = "augopt-inference";
    man["version"] = 1;
    man["count"] = results.size();
    man["classes"] = c;
    man["height"] = H;
    man["width"] = W;
    man["plan"] = plan_json(plan, ops);
    json probs = write_blob_file((fs::path(dir) / "probs.bin").string(),
                                 kMagicProbs, prob_payload.data(),
                                 prob_payload.size() * sizeof(float));
    json labs = write_blob_file((fs::path(dir) / "labels.bin").string(),
                                kMagicLabels, lab_payload.data(),
                                lab_payload.size());
    probs["dtype"] = "f32le";
    labs["dtype"] = "u8";
    man["blobs"]["probs"] = probs;
    man["blobs"]["labels"] = labs;

    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw DataError("cannot write manifest in " + dir);
    mf << man.dump(2) << "\n";
}

InferenceData load_inference(const std::string& dir) {
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
        if (man.at("format").get<std::string>() != "augopt-inference" ||
            man.at("version").get<int>() != 1)
            throw DataError("unsupported inference format or version in " +
                            mpath.string());
        const int n = man.at("count").get<int>();
        const int c = man.at("classes").get<int>();
        const int H = man.at("height").get<int>();
        const int W = man.at("width").get<int>();
        if (n <= 0 || c < 2 || H <= 0 || W <= 0)
            throw DataError("manifest declares degenerate inference shape");

        const json& probs = man.at("blobs").at("probs");
        const json& labs = man.at("blobs").at("labels");
        if (probs.at("dtype").get<std::string>() != "f32le")
            throw DataError("probs.bin: unsupported dtype");
        if (labs.at("dtype").get<std::string>() != "u8")
            throw DataError("labels.bin: unsupported dtype");

        const size_t plane = static_cast<size_t>(H) * W;
        auto praw = read_blob_file(
            (fs::path(dir) / probs.at("file").get<std::string>()).string(),
            kMagicProbs, probs);
        auto lraw = read_blob_file(
            (fs::path(dir) / labs.at("file").get<std::string>()).string(),
            kMagicLabels, labs);
        if (praw.size() != 8 + static_cast<size_t>(n) * c * plane *
                                   sizeof(float))
            throw DataError("probs.bin: payload size disagrees with manifest");
        if (lraw.size() != 8 + static_cast<size_t>(n) * plane)
            throw DataError("labels.bin: payload size disagrees with manifest");

        InferenceData out;
        out.plan = man.at("plan");
        out.results.resize(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) {
            auto& r = out.results[static_cast<size_t>(i)];
            r.prob = Tensor({c, H, W});
            std::memcpy(r.prob.data.data(),
                        praw.data() + 8 + static_cast<size_t>(i) * c * plane *
                                              sizeof(float),
                        c * plane * sizeof(float));
            r.labels = LabelMap({H, W});
            std::memcpy(r.labels.data.data(),
                        lraw.data() + 8 + static_cast<size_t>(i) * plane,
                        plane);
        }
        return out;
    } catch (const json::exception& e) {
        throw DataError("manifest field error: " + std::string(e.what()));
    }
}

}  // namespace augopt
