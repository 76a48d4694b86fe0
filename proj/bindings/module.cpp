#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <optional>

#include "lmc/bin2img.hpp"
#include "lmc/cascade.hpp"
#include "lmc/data.hpp"
#include "lmc/densenet.hpp"
#include "lmc/eval.hpp"
#include "lmc/levit.hpp"
#include "lmc/train.hpp"

namespace py = pybind11;
using namespace lmc;

namespace {

std::vector<uint8_t> to_bytes(const py::bytes& data) {
    std::string s = data;
    return std::vector<uint8_t>(s.begin(), s.end());
}

py::array_t<float> tensor_to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> out(shape);
    std::copy(t.data.begin(), t.data.end(), out.mutable_data());
    return out;
}

ClassIndex padded(ClassIndex ci) {
    for (int i = static_cast<int>(ci.names.size()); i < kNumClasses; ++i)
        ci.names.push_back("family" + std::to_string(i));
    return ci;
}

TrainConfig make_config(int epochs, double lr, int batch_size, uint64_t seed) {
    TrainConfig cfg;
    cfg.max_epochs = epochs;
    cfg.lr0 = lr;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    return cfg;
}

py::list log_to_list(const std::vector<EpochMetric>& log) {
    py::list rows;
    for (const auto& e : log) {
        py::dict d;
        d["epoch"] = e.epoch;
        d["split"] = e.split;
        d["loss"] = e.loss;
        d["accuracy"] = e.accuracy;
        d["lr"] = e.lr;
        rows.append(d);
    }
    return rows;
}

py::dict verdict_to_dict(const Verdict& v, const ClassIndex& ci) {
    py::dict d;
    if (v.kind == VerdictKind::Benign) {
        d["verdict"] = "benign";
        d["family"] = py::none();
    } else {
        d["verdict"] = "malign";
        d["family"] = ci.names[static_cast<size_t>(ci.family_to_class(*v.family))];
    }
    d["confidence"] = v.confidence;
    d["p_malign"] = v.stage1_prob_malign;
    return d;
}

// Two checkpointed stage models plus the gating threshold.
class PyCascade {
  public:
    PyCascade(const std::string& stage1_path, const std::string& stage2_path, double threshold) {
        Checkpoint c1 = load_checkpoint(stage1_path);
        Checkpoint c2 = load_checkpoint(stage2_path);
        class_index_ = padded(ClassIndex{{"benign"}, 0});
        model_ = std::make_unique<CascadeModel>(
            make_cascade(std::make_shared<ModelGraph>(std::move(c1.model)),
                         std::make_shared<ModelGraph>(std::move(c2.model)), class_index_,
                         threshold));
    }

    void set_class_names(const std::vector<std::string>& names, int benign_index) {
        class_index_ = padded(ClassIndex{names, benign_index});
        model_->class_index = class_index_;
    }

    py::dict classify(const py::bytes& data) {
        ImageTensor img = grid_to_tensor(bytes_to_grid({to_bytes(data), "py", std::nullopt}));
        Verdict v = lmc::classify(*model_, img);
        return verdict_to_dict(v, class_index_);
    }

    py::dict evaluate_manifest(const std::string& manifest_path, const std::string& split) {
        DatasetManifest m = load_manifest(manifest_path);
        MetricsReport rep = lmc::evaluate(*model_, m, split);
        py::dict out;
        out["accuracy"] = rep.accuracy;
        py::list per_class;
        for (const auto& c : rep.per_class) {
            py::dict d;
            d["name"] = c.name;
            d["precision"] = c.precision;
            d["recall"] = c.recall;
            d["support"] = c.support;
            per_class.append(d);
        }
        out["per_class"] = per_class;
        py::list confusion;
        for (int r = 0; r < kNumClasses; ++r) {
            py::list row;
            for (int c = 0; c < kNumClasses; ++c) row.append(rep.confusion.at(r, c));
            confusion.append(row);
        }
        out["confusion"] = confusion;
        return out;
    }

    uint64_t stage2_invocations() const { return model_->stage2_invocations.load(); }

  private:
    std::unique_ptr<CascadeModel> model_;
    ClassIndex class_index_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Two-stage malware image triage: byte packing, training, cascade inference";

    py::register_exception<Error>(m, "LmcError");

    m.def(
        "bytes_to_image",
        [](const py::bytes& data) {
            ImageTensor img = grid_to_tensor(bytes_to_grid({to_bytes(data), "py", std::nullopt}));
            return tensor_to_array(img.data);
        },
        py::arg("data"),
        "Pack bytes into an RGB grid and bilinearly resize to a normalized (3,224,224) array.");

    m.def(
        "bytes_roundtrip",
        [](const py::bytes& data) {
            auto original = to_bytes(data);
            auto back = grid_to_bytes(bytes_to_grid({original, "py", std::nullopt}));
            return py::bytes(reinterpret_cast<const char*>(back.data()), back.size());
        },
        py::arg("data"), "Grid pack/unpack round trip; returns the recovered byte string.");

    m.def(
        "token_schedule",
        [](int input_side) { return levit_token_schedule(LeViTConfig{}, input_side); },
        py::arg("input_side") = 224, "Per-stage token counts of the default family classifier.");

    m.def(
        "synth_dataset",
        [](const std::string& out_dir, int families, int per_family, int benign, uint64_t seed) {
            SynthSpec spec;
            spec.families = families;
            spec.samples_per_family = per_family;
            spec.benign_samples = benign;
            spec.seed = seed;
            DatasetManifest manifest = synth_generate(spec, out_dir);
            std::string path = out_dir + "/manifest.jsonl";
            save_manifest(manifest, path);
            return path;
        },
        py::arg("out_dir"), py::arg("families") = 4, py::arg("per_family") = 16,
        py::arg("benign") = 16, py::arg("seed") = 7,
        "Generate the deterministic synthetic corpus; returns the manifest path.");

    m.def(
        "split_dataset",
        [](const std::string& manifest_path, double train_fraction, uint64_t seed) {
            DatasetManifest m = load_manifest(manifest_path);
            save_manifest(split_manifest(m, train_fraction, seed), manifest_path);
        },
        py::arg("manifest"), py::arg("train_fraction") = 0.7, py::arg("seed") = 0,
        "Stratified train/val tagging, rewritten in place.");

    m.def(
        "train_stage1",
        [](const std::string& manifest_path, const std::string& out_path, int epochs, double lr,
           int batch_size, uint64_t seed) {
            DatasetManifest m = relabel_stage1(load_manifest(manifest_path));
            TrainResult r =
                train_model(build_densenet(DenseNetConfig{}, seed), m,
                            make_config(epochs, lr, batch_size, seed));
            save_checkpoint(r.best, out_path);
            return log_to_list(r.log);
        },
        py::arg("manifest"), py::arg("out"), py::arg("epochs") = 10, py::arg("lr") = 1e-3,
        py::arg("batch_size") = 32, py::arg("seed") = 0,
        "Train the benign/malign triage network; returns the metric log.");

    m.def(
        "train_stage2",
        [](const std::string& manifest_path, const std::string& out_path, int epochs, double lr,
           int batch_size, uint64_t seed) {
            DatasetManifest m = relabel_stage2(load_manifest(manifest_path));
            TrainResult r = train_model(build_levit(LeViTConfig{}, seed), m,
                                        make_config(epochs, lr, batch_size, seed));
            save_checkpoint(r.best, out_path);
            return log_to_list(r.log);
        },
        py::arg("manifest"), py::arg("out"), py::arg("epochs") = 10, py::arg("lr") = 1e-3,
        py::arg("batch_size") = 32, py::arg("seed") = 0,
        "Train the 25-way family classifier on the malign records; returns the metric log.");

    py::class_<PyCascade>(m, "Cascade")
        .def(py::init<const std::string&, const std::string&, double>(), py::arg("stage1"),
             py::arg("stage2"), py::arg("threshold") = 0.5)
        .def("set_class_names", &PyCascade::set_class_names, py::arg("names"),
             py::arg("benign_index") = 0)
        .def("classify", &PyCascade::classify, py::arg("data"))
        .def("evaluate", &PyCascade::evaluate_manifest, py::arg("manifest"), py::arg("split") = "")
        .def_property_readonly("stage2_invocations", &PyCascade::stage2_invocations);
}
