#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "augopt/data.hpp"
#include "augopt/infer.hpp"
#include "augopt/meta.hpp"
#include "augopt/metrics.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace augopt;

namespace {

// Key registry shared by the JSON config file, the command-line flags and
// the resolved-config snapshot. Flags win over file values; keys the
// command does not define are rejected.
class Conf {
public:
    explicit Conf(CLI::App* cmd) : cmd_(cmd) {}

    template <class T>
    CLI::Option* add(const std::string& key, T& var, const std::string& desc) {
        auto* opt = cmd_->add_option("--" + key, var, desc)
                        ->capture_default_str();
        entries_[key] = {[&var](const json& v) { var = v.get<T>(); },
                         [&var]() { return json(var); }};
        return opt;
    }

    CLI::Option* add_flag(const std::string& key, bool& var,
                          const std::string& desc) {
        auto* opt = cmd_->add_flag("--" + key, var, desc);
        entries_[key] = {[&var](const json& v) { var = v.get<bool>(); },
                         [&var]() { return json(var); }};
        return opt;
    }

    void load(const std::string& path) {
        if (path.empty()) return;
        json j;
        try {
            j = load_json(path);
        } catch (const std::exception& e) {
            throw ConfigError(std::string("config file: ") + e.what());
        }
        if (!j.is_object())
            throw ConfigError("config file must hold a JSON object: " + path);
        for (const auto& [key, value] : j.items()) {
            auto it = entries_.find(key);
            if (it == entries_.end())
                throw ConfigError("unknown config key '" + key + "' in " +
                                  path);
            if (cmd_->count("--" + key) > 0) continue;  // flag overrides file
            try {
                it->second.apply(value);
            } catch (const json::exception& e) {
                throw ConfigError("config key '" + key + "': " + e.what());
            }
        }
    }

    json resolved(const std::string& command) const {
        json out;
        out["command"] = command;
        for (const auto& [key, entry] : entries_) out[key] = entry.emit();
        return out;
    }

private:
    struct Entry {
        std::function<void(const json&)> apply;
        std::function<json()> emit;
    };
    CLI::App* cmd_;
    std::map<std::string, Entry> entries_;
};

std::string resolve_out(const std::string& out, const char* command) {
    if (!out.empty()) return out;
    const char* root = std::getenv("AUGOPT_OUT");
    if (root && *root) return (fs::path(root) / command).string();
    throw ConfigError("--out not given and AUGOPT_OUT is unset");
}

void write_resolved(const Conf& conf, const std::string& command,
                    const std::string& out_dir) {
    fs::create_directories(out_dir);
    json j = conf.resolved(command);
    j["out"] = out_dir;
    save_json(j, (fs::path(out_dir) / "resolved-config.json").string());
}

AggregationPlan bare_plan() {
    AggregationPlan p;
    p.op_ids = {0};
    p.weights = {1.0};
    return p;
}

std::vector<TraSlot> tra_registry(bool corrupt) {
    auto slots = default_tra_registry();
    return corrupt ? with_corruption_slot(std::move(slots)) : slots;
}

std::vector<TeaOp> tea_registry(bool corrupt) {
    auto ops = default_tea_registry();
    return corrupt ? with_corruption_ops(std::move(ops)) : ops;
}

// --------------------------------------------------------------------------
// gen-task

struct GenTaskArgs {
    TaskSpec spec;
    uint64_t seed = 1;
    std::string out, config;
    Conf* conf = nullptr;
};

void setup_gen_task(CLI::App& app, GenTaskArgs& a) {
    auto* cmd = app.add_subcommand(
        "gen-task", "Generate a synthetic segmentation task on disk");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("height", a.spec.height, "image height");
    conf.add("width", a.spec.width, "image width");
    conf.add("classes", a.spec.classes, "label alphabet size");
    conf.add("fg-prevalence", a.spec.fg_prevalence,
             "target foreground pixel fraction");
    conf.add("texture-sigma", a.spec.texture_sigma,
             "per-pixel noise amplitude");
    conf.add("n-train", a.spec.n_train, "training images");
    conf.add("n-val", a.spec.n_val, "validation images");
    conf.add("n-test", a.spec.n_test, "test images");
    conf.add("shift-intensity-bias", a.spec.shift.intensity_bias,
             "val/test intensity offset");
    conf.add("shift-contrast-scale", a.spec.shift.contrast_scale,
             "val/test contrast factor");
    conf.add("shift-rotation-bias", a.spec.shift.rotation_bias_deg,
             "val/test blob orientation offset (degrees)");
    conf.add("seed", a.seed, "generator seed");
    conf.add("out", a.out, "output directory");
}

int run_gen_task(GenTaskArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "gen-task");
    write_resolved(*a.conf, "gen-task", out);
    Task task = gen_task(a.spec, a.seed);
    save_dataset(task.train, (fs::path(out) / "train").string());
    save_dataset(task.val, (fs::path(out) / "val").string());
    save_dataset(task.test, (fs::path(out) / "test").string());
    json man;
    man["format"] = "augopt-task";
    man["version"] = 1;
    man["seed"] = a.seed;
    man["splits"] = {{"train", a.spec.n_train},
                     {"val", a.spec.n_val},
                     {"test", a.spec.n_test}};
    save_json(man, (fs::path(out) / "task.json").string());
    std::cout << "task written to " << out << " (train " << a.spec.n_train
              << ", val " << a.spec.n_val << ", test " << a.spec.n_test
              << ", fg " << fg_fraction(task.train) << ")\n";
    return 0;
}

// --------------------------------------------------------------------------
// train

struct TrainArgs {
    RunConfig cfg;
    std::string mode = "joint";
    std::string loss_train = "ce", loss_val = "soft-dice",
                loss_tea = "soft-dice";
    bool corrupt_tra = false, corrupt_tea = false;
    std::string data, out, resume, config;
    Conf* conf = nullptr;
};

void setup_train(CLI::App& app, TrainArgs& a) {
    auto* cmd = app.add_subcommand(
        "train", "Train a segmenter with augmentation-policy learning");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("data", a.data, "task directory from gen-task");
    conf.add("mode", a.mode,
             "arm: none, heuristic, learned, class-specific or joint");
    conf.add("alpha", a.cfg.alpha, "segmenter learning rate");
    conf.add("beta", a.cfg.beta, "training-policy learning rate");
    conf.add("gamma", a.cfg.gamma, "test-policy learning rate");
    conf.add("momentum", a.cfg.momentum, "SGD momentum");
    conf.add("n", a.cfg.n, "training batch size");
    conf.add("m", a.cfg.m, "validation batch size");
    conf.add("tea-draws", a.cfg.tea_draws, "test-policy draws per update");
    conf.add("top-z", a.cfg.top_z, "ops aggregated at inference");
    conf.add("cadence", a.cfg.cadence, "policy-update period (iterations)");
    conf.add("epochs", a.cfg.epochs, "training epochs");
    conf.add("loss-train", a.loss_train, "training loss: ce, soft-dice, sum");
    conf.add("loss-val", a.loss_val, "validation loss: ce, soft-dice, sum");
    conf.add("loss-tea", a.loss_tea, "test-policy loss: ce, soft-dice, sum");
    conf.add("seed", a.cfg.seed, "run seed");
    conf.add("patch", a.cfg.patch, "training patch side");
    conf.add("fg-fraction", a.cfg.fg_fraction,
             "foreground share of each batch");
    conf.add("prefetch-pool", a.cfg.prefetch_pool,
             "cached transformed variants per sample key");
    conf.add("grad-clip", a.cfg.grad_clip, "gradient norm clip");
    conf.add("threads", a.cfg.threads, "worker threads");
    conf.add_flag("corrupt-tra", a.corrupt_tra,
                  "inject destructive ops into the training pool");
    conf.add_flag("corrupt-tea", a.corrupt_tea,
                  "inject destructive ops into the test pool");
    conf.add("resume", a.resume, "checkpoint directory to continue from");
    conf.add("out", a.out, "output directory");
}

int run_train(TrainArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "train");
    if (a.data.empty()) throw ConfigError("--data is required");
    a.cfg.mode = parse_mode(a.mode);
    a.cfg.loss_train = parse_loss(a.loss_train);
    a.cfg.loss_val = parse_loss(a.loss_val);
    a.cfg.loss_tea = parse_loss(a.loss_tea);

    auto slots = tra_registry(a.corrupt_tra);
    auto ops = tea_registry(a.corrupt_tea);
    validate_config(a.cfg, ops.size());
    write_resolved(*a.conf, "train", out);

    Dataset train_ds = load_dataset((fs::path(a.data) / "train").string());
    Dataset val_ds = load_dataset((fs::path(a.data) / "val").string());

    MetaState resumed;
    const MetaState* resume_ptr = nullptr;
    if (!a.resume.empty()) {
        resumed = load_meta_state(a.resume, slots, ops);
        resume_ptr = &resumed;
    }

    const std::string ckpt = (fs::path(out) / "checkpoint").string();
    std::ofstream hist((fs::path(out) / "history.jsonl").string(),
                       resume_ptr ? std::ios::app : std::ios::trunc);
    if (!hist) throw DataError("cannot write history in " + out);
    auto on_record = [&](const json& rec) {
        hist << rec.dump() << "\n";
        hist.flush();
        std::cout << "iter " << rec["iteration"] << " train "
                  << rec["train_loss"].get<double>() << " val "
                  << rec["val_loss"].get<double>() << " tra "
                  << rec["tra"].get<std::string>() << " tea "
                  << rec["tea"].get<std::string>() << "\n";
    };

    TrainResult res =
        train(a.cfg, train_ds, val_ds, slots, ops, resume_ptr, ckpt, on_record);
    save_meta_state(res.state, slots, ops, ckpt);
    save_json(tra_policy_json(res.state.tra, slots, res.state.iteration),
              (fs::path(out) / "tra.json").string());
    save_json(tea_policy_json(res.state.tea, ops, res.state.iteration),
              (fs::path(out) / "tea.json").string());

    // Plain identity-inference metrics on the held-out split; arm-specific
    // aggregation belongs to the infer/eval commands.
    Dataset test_ds = load_dataset((fs::path(a.data) / "test").string());
    std::vector<LabelMap> preds;
    preds.reserve(test_ds.images.size());
    for (const auto& img : test_ds.images)
        preds.push_back(
            aggregate(res.state.net, img, bare_plan(), ops, a.cfg.threads)
                .labels);
    MetricsReport rep = evaluate_dataset(preds, test_ds.labels,
                                         test_ds.classes);
    std::ofstream csv((fs::path(out) / "metrics.csv").string());
    if (!csv) throw DataError("cannot write metrics in " + out);
    csv << metrics_csv_header()
        << metrics_csv_rows("seed" + std::to_string(a.cfg.seed), a.mode, rep);
    std::cout << "done: " << res.state.iteration << " iterations, test dsc "
              << rep.mean_dsc << ", artifacts in " << out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// refine-tea

struct RefineArgs {
    std::string data, checkpoint, out, config;
    std::string loss_tea = "soft-dice";
    int steps = 80;
    int tea_draws = 8;
    double gamma = 1.0;
    uint64_t seed = 1;
    bool corrupt_tea = false;
    int threads = 1;
    Conf* conf = nullptr;
};

void setup_refine(CLI::App& app, RefineArgs& a) {
    auto* cmd = app.add_subcommand(
        "refine-tea", "Learn a test-time policy against a frozen segmenter");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("data", a.data, "task directory (validation split is used)");
    conf.add("checkpoint", a.checkpoint, "trained checkpoint directory");
    conf.add("steps", a.steps, "refinement steps");
    conf.add("tea-draws", a.tea_draws, "draws per step");
    conf.add("gamma", a.gamma, "test-policy learning rate");
    conf.add("seed", a.seed, "draw seed");
    conf.add("loss-tea", a.loss_tea, "scoring loss: ce, soft-dice, sum");
    conf.add_flag("corrupt-tea", a.corrupt_tea,
                  "inject destructive ops into the test pool");
    conf.add("threads", a.threads, "worker threads");
    conf.add("out", a.out, "output directory");
}

int run_refine(RefineArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "refine-tea");
    if (a.data.empty()) throw ConfigError("--data is required");
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    write_resolved(*a.conf, "refine-tea", out);

    SegNet net = load_net((fs::path(a.checkpoint) / "net.bin").string());
    Dataset val_ds = load_dataset((fs::path(a.data) / "val").string());
    auto ops = tea_registry(a.corrupt_tea);
    RefineResult res =
        refine_tea(net, val_ds, ops, a.steps, a.tea_draws, a.gamma, a.seed,
                   parse_loss(a.loss_tea), a.threads);

    save_json(tea_policy_json(res.tea, ops, a.steps),
              (fs::path(out) / "tea.json").string());
    std::ofstream hist((fs::path(out) / "history.jsonl").string());
    for (const auto& rec : res.history) hist << rec.dump() << "\n";
    const auto probs = softmax_vec(res.tea.logits);
    const auto top = std::max_element(probs.begin(), probs.end());
    std::cout << "refined " << a.steps << " steps; top op "
              << ops[static_cast<size_t>(top - probs.begin())].name << " p="
              << *top << "; policy in " << out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// infer

struct InferArgs {
    std::string data, split = "test", checkpoint, tea, out, config;
    int top_z = 4;
    bool corrupt_tea = false;
    int threads = 1;
    Conf* conf = nullptr;
};

void setup_infer(CLI::App& app, InferArgs& a) {
    auto* cmd = app.add_subcommand(
        "infer", "Predict a split with top-z test-time aggregation");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("data", a.data, "task directory");
    conf.add("split", a.split, "split to predict: train, val or test");
    conf.add("checkpoint", a.checkpoint, "trained checkpoint directory");
    conf.add("tea", a.tea,
             "test-policy JSON, or 'heuristic'/'uniform' for the built-in "
             "policies (default: checkpoint's tea.json)");
    conf.add("top-z", a.top_z,
             "ops aggregated; 0 for plain identity inference");
    conf.add_flag("corrupt-tea", a.corrupt_tea,
                  "interpret the policy over the corrupted test pool");
    conf.add("threads", a.threads, "worker threads");
    conf.add("out", a.out, "output directory");
}

int run_infer(InferArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "infer");
    if (a.data.empty()) throw ConfigError("--data is required");
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    if (a.split != "train" && a.split != "val" && a.split != "test")
        throw ConfigError("--split must be train, val or test");
    write_resolved(*a.conf, "infer", out);

    SegNet net = load_net((fs::path(a.checkpoint) / "net.bin").string());
    Dataset ds = load_dataset((fs::path(a.data) / a.split).string());
    auto ops = tea_registry(a.corrupt_tea);

    AggregationPlan plan;
    if (a.top_z == 0) {
        plan = bare_plan();
    } else {
        TeaPolicy tea;
        if (a.tea == "heuristic") {
            tea = make_heuristic_tea_policy(ops);
        } else if (a.tea == "uniform") {
            tea = make_uniform_tea_policy(ops.size());
        } else {
            const std::string tea_path =
                a.tea.empty() ? (fs::path(a.checkpoint) / "tea.json").string()
                              : a.tea;
            tea = tea_policy_from_json(load_json(tea_path), ops);
        }
        plan = build_plan(tea, ops, a.top_z);
    }

    std::vector<InferResult> results;
    results.reserve(ds.images.size());
    for (const auto& img : ds.images)
        results.push_back(aggregate(net, img, plan, ops, a.threads));
    save_inference(out, results, plan, ops);
    std::cout << "predicted " << results.size() << " images with "
              << plan.op_ids.size() << " ops; results in " << out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string pred, data, split = "test", out, config;
    std::string run_label = "run", arm_label = "arm";
    Conf* conf = nullptr;
};

void setup_eval(CLI::App& app, EvalArgs& a) {
    auto* cmd = app.add_subcommand(
        "eval", "Score saved predictions against a split's labels");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("pred", a.pred, "inference output directory");
    conf.add("data", a.data, "task directory");
    conf.add("split", a.split, "split holding the ground truth");
    conf.add("run-label", a.run_label, "run column value in the CSV");
    conf.add("arm-label", a.arm_label, "arm column value in the CSV");
    conf.add("out", a.out, "output directory");
}

int run_eval(EvalArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "eval");
    if (a.pred.empty()) throw ConfigError("--pred is required");
    if (a.data.empty()) throw ConfigError("--data is required");
    write_resolved(*a.conf, "eval", out);

    InferenceData pred = load_inference(a.pred);
    Dataset truth = load_dataset((fs::path(a.data) / a.split).string());
    if (pred.results.size() != truth.labels.size())
        throw DataError("prediction count " +
                        std::to_string(pred.results.size()) +
                        " disagrees with split size " +
                        std::to_string(truth.labels.size()));
    std::vector<LabelMap> labels;
    labels.reserve(pred.results.size());
    for (const auto& r : pred.results) labels.push_back(r.labels);
    MetricsReport rep = evaluate_dataset(labels, truth.labels, truth.classes);
    std::ofstream csv((fs::path(out) / "metrics.csv").string());
    if (!csv) throw DataError("cannot write metrics in " + out);
    csv << metrics_csv_header()
        << metrics_csv_rows(a.run_label, a.arm_label, rep);
    std::cout << "dsc " << rep.mean_dsc << " sen " << rep.mean_sen << " prc "
              << rep.mean_prc << " hd95 " << rep.mean_hd95 << " (undefined "
              << rep.hd_undefined << "); csv in " << out << "\n";
    return 0;
}

// --------------------------------------------------------------------------
// export-policy

struct ExportArgs {
    std::string policy, format = "csv", out, config;
    Conf* conf = nullptr;
};

void setup_export(CLI::App& app, ExportArgs& a) {
    auto* cmd = app.add_subcommand(
        "export-policy", "Flatten a policy file into plot-ready tables");
    static Conf conf(cmd);
    a.conf = &conf;
    cmd->add_option("--config", a.config, "JSON config file");
    conf.add("policy", a.policy, "policy JSON written by train/refine-tea");
    conf.add("format", a.format, "output format: csv or json");
    conf.add("out", a.out, "output directory");
}

json export_tra(const json& p) {
    json rows = json::array();
    for (const auto& cls : p.at("classes"))
        for (const auto& slot : cls.at("slots")) {
            int bin = 0;
            for (const auto& b : slot.at("bins")) {
                rows.push_back({{"class", cls.at("class")},
                                {"slot", slot.at("slot_id")},
                                {"slot_name", slot.at("name")},
                                {"bin", bin++},
                                {"kind", b.at("kind")},
                                {"lo", b.at("lo")},
                                {"hi", b.at("hi")},
                                {"logit", b.at("logit")},
                                {"prob", b.at("prob")}});
            }
        }
    return rows;
}

json export_tea(const json& p) {
    json rows = json::array();
    for (const auto& op : p.at("ops"))
        rows.push_back({{"op_id", op.at("op_id")},
                        {"name", op.value("name", std::string("?"))},
                        {"magnitude", op.value("magnitude", 0.0)},
                        {"logit", op.at("logit")},
                        {"prob", op.at("prob")}});
    return rows;
}

int run_export(ExportArgs& a) {
    a.conf->load(a.config);
    const std::string out = resolve_out(a.out, "export-policy");
    if (a.policy.empty()) throw ConfigError("--policy is required");
    if (a.format != "csv" && a.format != "json")
        throw ConfigError("--format must be csv or json");
    write_resolved(*a.conf, "export-policy", out);

    json p = load_json(a.policy);
    const std::string kind = p.value("format", "");
    json rows;
    bool tra;
    if (kind == "augopt-tra-policy") {
        rows = export_tra(p);
        tra = true;
    } else if (kind == "augopt-tea-policy") {
        rows = export_tea(p);
        tra = false;
    } else {
        throw DataError("not a policy file: " + a.policy);
    }

    const fs::path base = fs::path(out) / "policy-export";
    if (a.format == "json") {
        save_json({{"format", "augopt-policy-export"},
                   {"version", 1},
                   {"source", kind},
                   {"rows", rows}},
                  (base.string() + ".json"));
    } else {
        std::ofstream f(base.string() + ".csv");
        if (!f) throw DataError("cannot write export in " + out);
        char buf[256];
        if (tra) {
            f << "class,slot,slot_name,bin,kind,lo,hi,logit,prob\n";
            for (const auto& r : rows) {
                std::snprintf(
                    buf, sizeof(buf), "%s,%d,%s,%d,%s,%g,%g,%.12g,%.12g\n",
                    r.at("class").get<std::string>().c_str(),
                    r.at("slot").get<int>(),
                    r.at("slot_name").get<std::string>().c_str(),
                    r.at("bin").get<int>(),
                    r.at("kind").get<std::string>().c_str(),
                    r.at("lo").get<double>(), r.at("hi").get<double>(),
                    r.at("logit").get<double>(), r.at("prob").get<double>());
                f << buf;
            }
        } else {
            f << "op_id,name,magnitude,logit,prob\n";
            for (const auto& r : rows) {
                std::snprintf(buf, sizeof(buf), "%d,%s,%g,%.12g,%.12g\n",
                              r.at("op_id").get<int>(),
                              r.at("name").get<std::string>().c_str(),
                              r.at("magnitude").get<double>(),
                              r.at("logit").get<double>(),
                              r.at("prob").get<double>());
                f << buf;
            }
        }
    }
    std::cout << "exported " << rows.size() << " rows to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "Class-specific augmentation policy learning for 2D segmentation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "augopt 1.0.0");

    GenTaskArgs gen;
    TrainArgs tr;
    RefineArgs rf;
    InferArgs in;
    EvalArgs ev;
    ExportArgs ex;
    setup_gen_task(app, gen);
    setup_train(app, tr);
    setup_refine(app, rf);
    setup_infer(app, in);
    setup_eval(app, ev);
    setup_export(app, ex);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (app.got_subcommand("gen-task")) return run_gen_task(gen);
        if (app.got_subcommand("train")) return run_train(tr);
        if (app.got_subcommand("refine-tea")) return run_refine(rf);
        if (app.got_subcommand("infer")) return run_infer(in);
        if (app.got_subcommand("eval")) return run_eval(ev);
        if (app.got_subcommand("export-policy")) return run_export(ex);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
