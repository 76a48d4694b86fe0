// lmc: end-to-end workflow binary (convert / dataset / train / classify /
// bench / eval). Machine-readable output is JSON lines on stdout; human
// summaries go to stderr. Exit codes: 0 ok, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>
#include <thread>

#include "lmc/bin2img.hpp"
#include "lmc/cascade.hpp"
#include "lmc/data.hpp"
#include "lmc/densenet.hpp"
#include "lmc/errors.hpp"
#include "lmc/eval.hpp"
#include "lmc/levit.hpp"
#include "lmc/png_io.hpp"
#include "lmc/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

uint64_t resolve_seed(uint64_t cli_seed, bool seed_given) {
    if (seed_given) return cli_seed;
    if (const char* env = std::getenv("LMCK_SEED")) return std::strtoull(env, nullptr, 10);
    return cli_seed;
}

std::vector<uint8_t> read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw lmc::IoError("cannot open " + path.string());
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                                std::istreambuf_iterator<char>());
}

// Fill the family slots the dataset does not cover so the cascade always has
// a full 26-name index to report against.
lmc::ClassIndex pad_class_index(lmc::ClassIndex ci) {
    if (ci.names.empty()) {
        ci.names.push_back("benign");
        ci.benign_index = 0;
    }
    int next = 0;
    while (static_cast<int>(ci.names.size()) < lmc::kNumClasses) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "family%02d", next++);
        if (std::find(ci.names.begin(), ci.names.end(), buf) == ci.names.end())
            ci.names.emplace_back(buf);
    }
    return ci;
}

// Apply --set key=value overrides onto a config's JSON echo; unknown keys are
// rejected so typos fail loudly.
std::string apply_overrides(const std::string& config_json,
                            const std::vector<std::string>& overrides) {
    json cfg = json::parse(config_json);
    for (const auto& kv : overrides) {
        auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw lmc::ConfigError("override must be key=value, got: " + kv);
        std::string key = kv.substr(0, eq);
        std::string value = kv.substr(eq + 1);
        if (!cfg.contains(key)) throw lmc::ConfigError("unknown config key: " + key);
        cfg[key] = json::parse(value, nullptr, false).is_discarded() ? json(value)
                                                                     : json::parse(value);
    }
    return cfg.dump();
}

lmc::CascadeModel load_cascade(const std::string& cascade_dir, const std::string& stage1_path,
                               const std::string& stage2_path, const lmc::ClassIndex& classes,
                               double threshold) {
    fs::path p1 = stage1_path.empty() ? fs::path(cascade_dir) / "stage1.lmck" : fs::path(stage1_path);
    fs::path p2 = stage2_path.empty() ? fs::path(cascade_dir) / "stage2.lmck" : fs::path(stage2_path);
    auto m1 = std::make_shared<lmc::ModelGraph>(lmc::load_checkpoint(p1).model);
    auto m2 = std::make_shared<lmc::ModelGraph>(lmc::load_checkpoint(p2).model);
    return lmc::make_cascade(std::move(m1), std::move(m2), pad_class_index(classes), threshold);
}

lmc::ImageTensor load_input_image(const fs::path& path) {
    if (path.extension() == ".png") return lmc::grid_to_tensor(lmc::read_png_file(path));
    lmc::ByteSample sample{read_file_bytes(path), path.filename().string(), std::nullopt};
    return lmc::grid_to_tensor(lmc::bytes_to_grid(sample));
}

int cmd_convert(const std::string& input, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::vector<fs::path> files;
    if (fs::is_directory(input)) {
        for (const auto& e : fs::directory_iterator(input))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
    } else {
        files.emplace_back(input);
    }
    if (files.empty()) throw lmc::EmptyDataset("convert: no input files in " + input);
    lmc::DatasetManifest manifest;
    for (const auto& f : files) {
        lmc::ByteSample sample{read_file_bytes(f), f.filename().string(), std::nullopt};
        lmc::RgbImageGrid grid = lmc::bytes_to_grid(sample);
        fs::path png = fs::path(out_dir) / (f.stem().string() + ".png");
        lmc::write_png_file(png, grid);
        lmc::ManifestRecord rec;
        rec.id = f.stem().string();
        rec.path = png.string();
        rec.pad_bytes = grid.pad_bytes;
        rec.orig_len = static_cast<int64_t>(sample.bytes.size());
        manifest.records.push_back(rec);
        std::cout << json{{"id", rec.id},
                          {"path", rec.path},
                          {"orig_len", rec.orig_len},
                          {"pad_bytes", rec.pad_bytes}}
                         .dump()
                  << "\n";
    }
    lmc::save_manifest(manifest, fs::path(out_dir) / "manifest.jsonl");
    std::cerr << "converted " << files.size() << " file(s) -> " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& stage, const std::string& data, const std::string& out,
              const std::string& resume_path, const std::string& base_path,
              lmc::TrainConfig cfg, const std::vector<std::string>& model_overrides,
              const std::string& log_csv) {
    lmc::DatasetManifest manifest = lmc::load_manifest(data);
    lmc::TrainResult result;
    if (stage == "stage1") {
        lmc::DatasetManifest routed = lmc::relabel_stage1(manifest);
        auto dn_cfg = lmc::DenseNetConfig::from_json(
            apply_overrides(lmc::DenseNetConfig{}.to_json(), model_overrides));
        lmc::ModelGraph model = lmc::build_densenet(dn_cfg, cfg.seed);
        if (!resume_path.empty()) {
            lmc::Checkpoint resume = lmc::load_checkpoint(resume_path);
            result = lmc::train_model(resume.model, routed, cfg, &resume);
        } else {
            result = lmc::train_model(model, routed, cfg);
        }
    } else {
        lmc::DatasetManifest routed = lmc::relabel_stage2(manifest);
        if (!base_path.empty()) {
            lmc::Checkpoint base = lmc::load_checkpoint(base_path);
            result = lmc::fine_tune(base, lmc::kLeViTArch, 25, routed, cfg);
        } else if (!resume_path.empty()) {
            lmc::Checkpoint resume = lmc::load_checkpoint(resume_path);
            result = lmc::train_model(resume.model, routed, cfg, &resume);
        } else {
            auto lv_cfg = lmc::LeViTConfig::from_json(
                apply_overrides(lmc::LeViTConfig{}.to_json(), model_overrides));
            result = lmc::train_model(lmc::build_levit(lv_cfg, cfg.seed), routed, cfg);
        }
    }
    lmc::save_checkpoint(result.final, out);
    lmc::save_checkpoint(result.best, out + ".best");
    if (!log_csv.empty()) {
        std::ofstream csv(log_csv);
        csv << lmc::metrics_to_csv(result.log);
    }
    for (const auto& m : result.log)
        std::cout << json{{"epoch", m.epoch},
                          {"split", m.split},
                          {"loss", m.loss},
                          {"accuracy", m.accuracy},
                          {"lr", m.lr}}
                         .dump()
                  << "\n";
    std::cerr << "saved " << out << " (best: " << out << ".best)\n";
    if (result.aborted_numeric) {
        std::cerr << "training aborted on non-finite loss; last good checkpoint kept\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"LeViT-MC malware triage workflow"};
    app.require_subcommand(1);
    app.fallthrough();  // allow global flags (e.g. --seed) after a subcommand

    uint64_t seed = 0;
    bool seed_given = false;
    app.add_flag_callback("--version", [] { std::cout << "lmc 1.0\n"; std::exit(0); },
                          "Print version and exit");

    // ---- convert ----
    std::string cv_in, cv_out;
    auto* convert = app.add_subcommand("convert", "Render binaries to RGB PNGs + manifest");
    convert->add_option("input", cv_in, "Input file or directory")->required();
    convert->add_option("output", cv_out, "Output directory")->required();

    // ---- dataset ----
    auto* dataset = app.add_subcommand("dataset", "Corpus management");
    dataset->require_subcommand(1);
    lmc::SynthSpec synth_spec;
    std::string ds_out, ds_root, ds_manifest, ds_split_out;
    double train_fraction = 0.7;
    auto* synth = dataset->add_subcommand("synth", "Generate the deterministic synthetic corpus");
    synth->add_option("output", ds_out, "Output directory")->required();
    synth->add_option("--families", synth_spec.families, "Malware families (<=25)")
        ->capture_default_str();
    synth->add_option("--per-family", synth_spec.samples_per_family, "Samples per family")
        ->capture_default_str();
    synth->add_option("--benign", synth_spec.benign_samples, "Benign samples")
        ->capture_default_str();
    synth->add_option("--motif-len", synth_spec.byte_motif_length, "Family motif length (bytes)")
        ->capture_default_str();
    auto* scan = dataset->add_subcommand("scan", "Scan root/<class>/*.png into a manifest");
    scan->add_option("root", ds_root, "Dataset root directory")->required();
    scan->add_option("--out", ds_manifest, "Manifest output path")->required();
    auto* split = dataset->add_subcommand("split", "Stratified train/val split");
    split->add_option("--manifest", ds_manifest, "Manifest to split")->required();
    split->add_option("--out", ds_split_out, "Split manifest output path")->required();
    split->add_option("--train-fraction", train_fraction, "Train fraction per class")
        ->capture_default_str();

    // ---- train ----
    lmc::TrainConfig tcfg;
    tcfg.lr0 = 1e-5;
    std::string tr_data, tr_out, tr_resume, tr_base, tr_log;
    std::vector<std::string> model_overrides;
    std::string tr_freeze;
    double stop_train = -1.0, stop_val = -1.0;
    auto* train = app.add_subcommand("train", "Train a cascade stage");
    train->require_subcommand(1);
    auto add_train_flags = [&](CLI::App* sub) {
        sub->add_option("--data", tr_data, "Dataset manifest")->required();
        sub->add_option("--out", tr_out, "Checkpoint output path")->required();
        sub->add_option("--resume", tr_resume, "Resume from checkpoint");
        sub->add_option("--log", tr_log, "Metrics CSV output path");
        sub->add_option("--batch-size", tcfg.batch_size, "Batch size")->capture_default_str();
        sub->add_option("--lr", tcfg.lr0, "Initial learning rate")->capture_default_str();
        sub->add_option("--epochs", tcfg.max_epochs, "Max epochs")->required();
        sub->add_option("--patience", tcfg.plateau_patience, "Plateau patience")
            ->capture_default_str();
        sub->add_option("--factor", tcfg.plateau_factor, "Plateau decay factor")
            ->capture_default_str();
        sub->add_option("--min-delta", tcfg.min_delta, "Plateau improvement threshold")
            ->capture_default_str();
        sub->add_option("--freeze", tr_freeze, "Comma-separated frozen parameter prefixes");
        sub->add_option("--stop-train-acc", stop_train, "Early-stop on train accuracy");
        sub->add_option("--stop-val-acc", stop_val, "Early-stop on val accuracy");
        sub->add_option("--weight-decay", tcfg.weight_decay,
                        "Decoupled weight decay (skips biases and batchnorm affines)")
            ->capture_default_str();
        sub->add_option("--augment-min-bytes", tcfg.augment_min_bytes,
                        "Scale augmentation: per-epoch random byte-stream prefixes, "
                        "length >= this floor (0 = off)")
            ->capture_default_str();
        sub->add_option("--set", model_overrides, "Model config override key=value")
            ->take_all();
    };
    auto* stage1 = train->add_subcommand("stage1", "Benign/malign triage (DenseNet)");
    add_train_flags(stage1);
    auto* stage2 = train->add_subcommand("stage2", "25-family classifier (LeViT)");
    add_train_flags(stage2);
    stage2->add_option("--base", tr_base, "Transfer-learn from this checkpoint (head reinit)");

    // ---- classify / bench / eval ----
    std::string cascade_dir, stage1_ckpt, stage2_ckpt, input_path, data_manifest, split_name;
    double threshold = 0.5;
    int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    int batch_size = 32, warmup = 1, reps = 3;
    bool markdown = false, with_bench = false;
    auto add_cascade_flags = [&](CLI::App* sub) {
        sub->add_option("--cascade", cascade_dir, "Directory with stage1.lmck + stage2.lmck");
        sub->add_option("--stage1", stage1_ckpt, "Stage-1 checkpoint path");
        sub->add_option("--stage2", stage2_ckpt, "Stage-2 checkpoint path");
        sub->add_option("--threshold", threshold, "Benign decision threshold on p_malign")
            ->capture_default_str();
    };
    auto* classify_cmd = app.add_subcommand("classify", "Classify binaries or PNGs");
    add_cascade_flags(classify_cmd);
    classify_cmd->add_option("--input", input_path, "Input file or directory")->required();
    classify_cmd->add_option("--data", data_manifest, "Manifest supplying class names");
    classify_cmd->add_option("--workers", workers, "Worker threads")->capture_default_str();
    auto* bench_cmd = app.add_subcommand("bench", "Measure cascade throughput");
    add_cascade_flags(bench_cmd);
    bench_cmd->add_option("--data", data_manifest, "Dataset manifest")->required();
    bench_cmd->add_option("--split", split_name, "Split to bench (empty = all)");
    bench_cmd->add_option("--batch-size", batch_size, "Batch size")->capture_default_str();
    bench_cmd->add_option("--warmup", warmup, "Warmup batches")->capture_default_str();
    bench_cmd->add_option("--reps", reps, "Timed repetitions")->capture_default_str();
    bench_cmd->add_option("--workers", workers, "Worker threads")->capture_default_str();
    auto* eval_cmd = app.add_subcommand("eval", "Accuracy report over a split");
    add_cascade_flags(eval_cmd);
    eval_cmd->add_option("--data", data_manifest, "Dataset manifest")->required();
    eval_cmd->add_option("--split", split_name, "Split to evaluate (empty = all)");
    eval_cmd->add_flag("--markdown", markdown, "Emit a markdown report instead of JSON");
    eval_cmd->add_flag("--bench", with_bench, "Include a throughput section");
    eval_cmd->add_option("--batch-size", batch_size, "Bench batch size")->capture_default_str();
    eval_cmd->add_option("--workers", workers, "Worker threads")->capture_default_str();

    auto* seed_opt = app.add_option("--seed", seed, "Global RNG seed (env LMCK_SEED as fallback)");
    for (auto* sub : {convert, dataset, train, classify_cmd, bench_cmd, eval_cmd}) (void)sub;

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }
    seed_given = seed_opt->count() > 0;
    uint64_t run_seed = resolve_seed(seed, seed_given);

    try {
        if (*convert) return cmd_convert(cv_in, cv_out);
        if (*synth) {
            synth_spec.seed = run_seed == 0 && !seed_given && !std::getenv("LMCK_SEED")
                                  ? synth_spec.seed
                                  : run_seed;
            lmc::DatasetManifest m = lmc::synth_generate(synth_spec, ds_out);
            std::cerr << "generated " << m.records.size() << " samples in " << ds_out << "\n";
            return 0;
        }
        if (*scan) {
            lmc::DatasetManifest m = lmc::scan_dir(ds_root);
            for (const auto& w : m.warnings) std::cerr << "warning: " << w << "\n";
            lmc::save_manifest(m, ds_manifest);
            std::cerr << "scanned " << m.records.size() << " records -> " << ds_manifest << "\n";
            return 0;
        }
        if (*split) {
            lmc::DatasetManifest m = lmc::load_manifest(ds_manifest);
            m = lmc::split_manifest(m, train_fraction, run_seed);
            lmc::save_manifest(m, ds_split_out);
            std::cerr << "split " << m.records.size() << " records -> " << ds_split_out << "\n";
            return 0;
        }
        if (*stage1 || *stage2) {
            tcfg.seed = run_seed;
            if (stop_train >= 0.0) tcfg.stop_train_accuracy = stop_train;
            if (stop_val >= 0.0) tcfg.stop_val_accuracy = stop_val;
            if (!tr_freeze.empty()) {
                size_t pos = 0;
                while (pos != std::string::npos) {
                    size_t comma = tr_freeze.find(',', pos);
                    tcfg.freeze_prefixes.push_back(tr_freeze.substr(
                        pos, comma == std::string::npos ? std::string::npos : comma - pos));
                    pos = comma == std::string::npos ? comma : comma + 1;
                }
            }
            return cmd_train(*stage1 ? "stage1" : "stage2", tr_data, tr_out, tr_resume, tr_base,
                             tcfg, model_overrides, tr_log);
        }
        if (*classify_cmd) {
            lmc::ClassIndex classes;
            if (!data_manifest.empty()) classes = lmc::load_manifest(data_manifest).class_index;
            lmc::CascadeModel cascade =
                load_cascade(cascade_dir, stage1_ckpt, stage2_ckpt, classes, threshold);
            std::vector<fs::path> files;
            if (fs::is_directory(input_path)) {
                for (const auto& e : fs::directory_iterator(input_path))
                    if (e.is_regular_file()) files.push_back(e.path());
                std::sort(files.begin(), files.end());
            } else {
                files.emplace_back(input_path);
            }
            std::vector<lmc::ImageTensor> images;
            images.reserve(files.size());
            for (const auto& f : files) images.push_back(load_input_image(f));
            auto verdicts = lmc::classify_batch(cascade, images, workers);
            for (size_t i = 0; i < verdicts.size(); ++i)
                std::cout << lmc::verdict_to_json(files[i].filename().string(), verdicts[i],
                                                  cascade.class_index)
                          << "\n";
            return 0;
        }
        if (*bench_cmd || *eval_cmd) {
            lmc::DatasetManifest manifest = lmc::load_manifest(data_manifest);
            lmc::CascadeModel cascade = load_cascade(cascade_dir, stage1_ckpt, stage2_ckpt,
                                                     manifest.class_index, threshold);
            if (*bench_cmd) {
                lmc::BatchLoader loader(manifest, split_name);
                std::vector<lmc::ImageTensor> images;
                for (size_t i = 0; i < loader.size(); ++i)
                    images.push_back(lmc::ImageTensor{loader.load_one(i)});
                auto rep = lmc::bench_throughput(cascade, images, batch_size, warmup, reps, workers);
                std::cout << json{{"images_per_second_mean", rep.images_per_second_mean},
                                  {"images_per_second_std", rep.images_per_second_std},
                                  {"batch_size", rep.batch_size},
                                  {"warmup_batches", rep.warmup_batches},
                                  {"repetitions", rep.repetitions},
                                  {"stage2_skip_rate", rep.stage2_skip_rate}}
                                 .dump()
                          << "\n";
                return 0;
            }
            lmc::MetricsReport report = lmc::evaluate(cascade, manifest, split_name);
            if (with_bench) {
                lmc::BatchLoader loader(manifest, split_name);
                std::vector<lmc::ImageTensor> images;
                for (size_t i = 0; i < loader.size(); ++i)
                    images.push_back(lmc::ImageTensor{loader.load_one(i)});
                int usable_reps = std::max(
                    1, std::min(reps, static_cast<int>(images.size()) / batch_size - warmup));
                report.throughput =
                    lmc::bench_throughput(cascade, images, batch_size, warmup, usable_reps, workers);
            }
            std::cout << (markdown ? lmc::emit_report_markdown(report, manifest.class_index)
                                   : lmc::emit_report_json(report, manifest.class_index))
                      << "\n";
            std::cerr << "accuracy: " << report.accuracy << "\n";
            return 0;
        }
    } catch (const lmc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
