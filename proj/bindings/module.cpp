#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "augopt/data.hpp"
#include "augopt/infer.hpp"
#include "augopt/meta.hpp"
#include "augopt/metrics.hpp"

namespace py = pybind11;
using namespace augopt;
using nlohmann::json;

namespace {

py::array_t<float> tensor_to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

py::array_t<uint8_t> labels_to_array(const LabelMap& m) {
    std::vector<py::ssize_t> shape(m.shape.begin(), m.shape.end());
    py::array_t<uint8_t> out(shape);
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

json report_json(const MetricsReport& rep) {
    json j;
    j["mean_dsc"] = rep.mean_dsc;
    j["mean_sen"] = rep.mean_sen;
    j["mean_prc"] = rep.mean_prc;
    j["mean_hd95"] = rep.mean_hd95;
    j["hd_undefined"] = rep.hd_undefined;
    json per = json::array();
    for (const auto& c : rep.per_class)
        per.push_back({{"class", c.cls},
                       {"cases", c.cases},
                       {"dsc", c.dsc},
                       {"sen", c.sen},
                       {"prc", c.prc},
                       {"hd95", c.hd95},
                       {"hd95_undefined", c.hd_undefined},
                       {"tp", c.tp},
                       {"fp", c.fp},
                       {"fn", c.fn}});
    j["per_class"] = per;
    return j;
}

AggregationPlan identity_plan() {
    AggregationPlan p;
    p.op_ids = {0};
    p.weights = {1.0};
    return p;
}

// Trained state plus the registries it was trained against. All the
// post-training operations (refinement, inference, scoring) hang off it.
struct Run {
    MetaState state;
    std::vector<TraSlot> slots;
    std::vector<TeaOp> ops;
    std::vector<json> history;

    AggregationPlan plan_for(int top_z) const {
        return top_z == 0 ? identity_plan()
                          : build_plan(state.tea, ops, top_z);
    }

    std::vector<LabelMap> predict(const Dataset& ds, int top_z,
                                  int threads) const {
        const AggregationPlan plan = plan_for(top_z);
        std::vector<LabelMap> out;
        out.reserve(ds.images.size());
        for (const auto& img : ds.images)
            out.push_back(aggregate(state.net, img, plan, ops, threads).labels);
        return out;
    }
};

Run do_train(const RunConfig& cfg, const Dataset& train_ds,
             const Dataset& val_ds, bool corrupt_tra, bool corrupt_tea) {
    Run run;
    run.slots = default_tra_registry();
    if (corrupt_tra) run.slots = with_corruption_slot(std::move(run.slots));
    run.ops = default_tea_registry();
    if (corrupt_tea) run.ops = with_corruption_ops(std::move(run.ops));
    TrainResult res = train(cfg, train_ds, val_ds, run.slots, run.ops);
    run.state = std::move(res.state);
    run.history = std::move(res.history);
    return run;
}

Run do_load(const std::string& dir, bool corrupt_tra, bool corrupt_tea) {
    Run run;
    run.slots = default_tra_registry();
    if (corrupt_tra) run.slots = with_corruption_slot(std::move(run.slots));
    run.ops = default_tea_registry();
    if (corrupt_tea) run.ops = with_corruption_ops(std::move(run.ops));
    run.state = load_meta_state(dir, run.slots, run.ops);
    return run;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Joint training- and test-time augmentation policy learning "
              "for 2D segmentation";

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_IOError);
    py::register_exception<NumericError>(m, "NumericError",
                                         PyExc_ArithmeticError);

    py::class_<TaskSpec>(m, "TaskSpec")
        .def(py::init<>())
        .def_readwrite("height", &TaskSpec::height)
        .def_readwrite("width", &TaskSpec::width)
        .def_readwrite("classes", &TaskSpec::classes)
        .def_readwrite("fg_prevalence", &TaskSpec::fg_prevalence)
        .def_readwrite("texture_sigma", &TaskSpec::texture_sigma)
        .def_readwrite("n_train", &TaskSpec::n_train)
        .def_readwrite("n_val", &TaskSpec::n_val)
        .def_readwrite("n_test", &TaskSpec::n_test)
        .def_property(
            "shift_intensity_bias",
            [](const TaskSpec& s) { return s.shift.intensity_bias; },
            [](TaskSpec& s, double v) { s.shift.intensity_bias = v; })
        .def_property(
            "shift_contrast_scale",
            [](const TaskSpec& s) { return s.shift.contrast_scale; },
            [](TaskSpec& s, double v) { s.shift.contrast_scale = v; })
        .def_property(
            "shift_rotation_bias",
            [](const TaskSpec& s) { return s.shift.rotation_bias_deg; },
            [](TaskSpec& s, double v) { s.shift.rotation_bias_deg = v; });

    py::class_<Dataset>(m, "Dataset")
        .def("__len__", [](const Dataset& d) { return d.images.size(); })
        .def_readonly("classes", &Dataset::classes)
        .def_readonly("split", &Dataset::split)
        .def("image",
             [](const Dataset& d, size_t i) {
                 if (i >= d.images.size())
                     throw py::index_error("image index out of range");
                 return tensor_to_array(d.images[i]);
             })
        .def("labels",
             [](const Dataset& d, size_t i) {
                 if (i >= d.labels.size())
                     throw py::index_error("label index out of range");
                 return labels_to_array(d.labels[i]);
             })
        .def("fg_fraction", [](const Dataset& d) { return fg_fraction(d); });

    py::class_<Task>(m, "Task")
        .def_readonly("train", &Task::train)
        .def_readonly("val", &Task::val)
        .def_readonly("test", &Task::test);

    m.def("gen_task", &gen_task, py::arg("spec"), py::arg("seed"),
          py::call_guard<py::gil_scoped_release>());
    m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("dir"));
    m.def("load_dataset", &load_dataset, py::arg("dir"));

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_property(
            "mode",
            [](const RunConfig& c) { return std::string(mode_name(c.mode)); },
            [](RunConfig& c, const std::string& s) { c.mode = parse_mode(s); })
        .def_readwrite("alpha", &RunConfig::alpha)
        .def_readwrite("beta", &RunConfig::beta)
        .def_readwrite("gamma", &RunConfig::gamma)
        .def_readwrite("momentum", &RunConfig::momentum)
        .def_readwrite("n", &RunConfig::n)
        .def_readwrite("m", &RunConfig::m)
        .def_readwrite("tea_draws", &RunConfig::tea_draws)
        .def_readwrite("top_z", &RunConfig::top_z)
        .def_readwrite("cadence", &RunConfig::cadence)
        .def_readwrite("epochs", &RunConfig::epochs)
        .def_property(
            "loss_train",
            [](const RunConfig& c) {
                return std::string(loss_name(c.loss_train));
            },
            [](RunConfig& c, const std::string& s) {
                c.loss_train = parse_loss(s);
            })
        .def_property(
            "loss_val",
            [](const RunConfig& c) {
                return std::string(loss_name(c.loss_val));
            },
            [](RunConfig& c, const std::string& s) {
                c.loss_val = parse_loss(s);
            })
        .def_property(
            "loss_tea",
            [](const RunConfig& c) {
                return std::string(loss_name(c.loss_tea));
            },
            [](RunConfig& c, const std::string& s) {
                c.loss_tea = parse_loss(s);
            })
        .def_readwrite("seed", &RunConfig::seed)
        .def_readwrite("patch", &RunConfig::patch)
        .def_readwrite("fg_fraction", &RunConfig::fg_fraction)
        .def_readwrite("prefetch_pool", &RunConfig::prefetch_pool)
        .def_readwrite("grad_clip", &RunConfig::grad_clip)
        .def_readwrite("threads", &RunConfig::threads);

    py::class_<Run>(m, "Run")
        .def_property_readonly(
            "iteration", [](const Run& r) { return r.state.iteration; })
        .def("history_json",
             [](const Run& r) { return json(r.history).dump(); })
        .def("tra_policy_json",
             [](const Run& r) {
                 return tra_policy_json(r.state.tra, r.slots,
                                        r.state.iteration)
                     .dump();
             })
        .def("tea_policy_json",
             [](const Run& r) {
                 return tea_policy_json(r.state.tea, r.ops, r.state.iteration)
                     .dump();
             })
        .def(
            "refine_tea",
            [](Run& r, const Dataset& val_ds, int steps, int draws,
               double gamma, uint64_t seed, const std::string& loss,
               int threads) {
                RefineResult res =
                    refine_tea(r.state.net, val_ds, r.ops, steps, draws,
                               gamma, seed, parse_loss(loss), threads);
                r.state.tea = res.tea;
                return json(res.history).dump();
            },
            py::arg("val_ds"), py::arg("steps"), py::arg("draws") = 8,
            py::arg("gamma") = 1.0, py::arg("seed") = 1,
            py::arg("loss") = "soft-dice", py::arg("threads") = 1)
        .def(
            "predict",
            [](const Run& r, const Dataset& ds, int top_z, int threads) {
                std::vector<LabelMap> labels;
                {
                    py::gil_scoped_release release;
                    labels = r.predict(ds, top_z, threads);
                }
                py::list out;
                for (const auto& l : labels) out.append(labels_to_array(l));
                return out;
            },
            py::arg("ds"), py::arg("top_z") = 0, py::arg("threads") = 1)
        .def(
            "evaluate",
            [](const Run& r, const Dataset& ds, int top_z, int threads) {
                json j;
                {
                    py::gil_scoped_release release;
                    auto labels = r.predict(ds, top_z, threads);
                    j = report_json(
                        evaluate_dataset(labels, ds.labels, ds.classes));
                }
                return j.dump();
            },
            py::arg("ds"), py::arg("top_z") = 0, py::arg("threads") = 1)
        .def("save", [](const Run& r, const std::string& dir) {
            save_meta_state(r.state, r.slots, r.ops, dir);
        });

    m.def("train", &do_train, py::arg("config"), py::arg("train_ds"),
          py::arg("val_ds"), py::arg("corrupt_tra") = false,
          py::arg("corrupt_tea") = false,
          py::call_guard<py::gil_scoped_release>());
    m.def("load_run", &do_load, py::arg("dir"), py::arg("corrupt_tra") = false,
          py::arg("corrupt_tea") = false);

    m.def(
        "evaluate_labels",
        [](const std::vector<py::array_t<uint8_t>>& pred, const Dataset& ds) {
            if (pred.size() != ds.labels.size())
                throw DataError("prediction count mismatch");
            std::vector<LabelMap> maps;
            maps.reserve(pred.size());
            for (size_t i = 0; i < pred.size(); ++i) {
                auto buf = pred[i].request();
                if (buf.ndim != 2)
                    throw DataError("predictions must be rank-2 label maps");
                LabelMap l({static_cast<int>(buf.shape[0]),
                            static_cast<int>(buf.shape[1])});
                std::copy_n(static_cast<const uint8_t*>(buf.ptr),
                            l.data.size(), l.data.begin());
                maps.push_back(std::move(l));
            }
            return report_json(evaluate_dataset(maps, ds.labels, ds.classes))
                .dump();
        },
        py::arg("pred"), py::arg("ds"));
}
