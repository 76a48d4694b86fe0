#include "lmc/train.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>

#include "lmc/errors.hpp"
#include "lmc/model_exec.hpp"

namespace lmc {

void TrainConfig::validate() const {
    if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
    if (!(lr0 > 0)) throw ConfigError("train: lr0 must be positive");
    if (!(plateau_factor > 0 && plateau_factor < 1))
        throw ConfigError("train: plateau factor must be in (0,1)");
    if (plateau_patience < 1) throw ConfigError("train: patience must be >= 1");
    if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
    if (augment_min_bytes < 0) throw ConfigError("train: augment_min_bytes must be >= 0");
    if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
}

namespace {

bool is_frozen(const std::string& name, const std::vector<std::string>& prefixes) {
    for (const auto& p : prefixes)
        if (name.rfind(p, 0) == 0) return true;
    return false;
}

}  // namespace

bool decay_exempt(const std::string& name) {
    auto ends_with = [&](const char* suf) {
        size_t n = std::strlen(suf);
        return name.size() >= n && name.compare(name.size() - n, n, suf) == 0;
    };
    return ends_with(".b") || ends_with(".gamma") || ends_with(".beta") || ends_with(".bias");
}

void adam_step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads,
               AdamState& state, double lr, const std::vector<std::string>& freeze_prefixes,
               double weight_decay) {
    state.step += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (auto& [name, p] : params) {
        if (is_frozen(name, freeze_prefixes)) continue;
        auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        if (!g.same_shape(p)) throw ShapeError("adam_step: gradient shape mismatch for " + name);
        Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        if (!m.same_shape(p) || !v.same_shape(p))
            throw ShapeError("adam_step: moment shape mismatch for " + name);
        double wd = decay_exempt(name) ? 0.0 : weight_decay;
        for (int64_t i = 0; i < p.numel(); ++i) {
            double gi = g[i];
            double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
            double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<float>(mi);
            v[i] = static_cast<float>(vi);
            double mhat = static_cast<double>(m[i]) / bc1;
            double vhat = static_cast<double>(v[i]) / bc2;
            p[i] = static_cast<float>(static_cast<double>(p[i]) -
                                      lr * mhat / (std::sqrt(vhat) + state.eps) -
                                      lr * wd * static_cast<double>(p[i]));
        }
    }
}

void plateau_step(PlateauState& state, double val_metric, int patience, double factor) {
    if (val_metric > state.best_metric + state.min_delta) {
        state.best_metric = val_metric;
        state.epochs_since_improvement = 0;
        return;
    }
    state.epochs_since_improvement += 1;
    if (state.epochs_since_improvement > patience) {
        state.current_lr *= factor;
        state.epochs_since_improvement = 0;
    }
}

// ---- checkpoint serialization --------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'M', 'C', 'K'};

struct Writer {
    std::vector<uint8_t> out;
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        out.insert(out.end(), b, b + n);
    }
    void u8(uint8_t v) { raw(&v, 1); }
    void u16(uint16_t v) { raw(&v, 2); }
    void u32(uint32_t v) { raw(&v, 4); }
    void u64(uint64_t v) { raw(&v, 8); }
    void i64(int64_t v) { raw(&v, 8); }
    void f64(double v) { raw(&v, 8); }
    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u8(static_cast<uint8_t>(t.shape.size()));
        for (auto d : t.shape) i64(d);
        raw(t.data.data(), t.data.size() * sizeof(float));
    }
};

struct Reader {
    const uint8_t* p;
    size_t n;
    size_t pos = 0;
    void raw(void* out, size_t count) {
        if (pos + count > n) throw CorruptCheckpoint("checkpoint: truncated stream");
        std::memcpy(out, p + pos, count);
        pos += count;
    }
    uint8_t u8() { uint8_t v; raw(&v, 1); return v; }
    uint16_t u16() { uint16_t v; raw(&v, 2); return v; }
    uint32_t u32() { uint32_t v; raw(&v, 4); return v; }
    uint64_t u64() { uint64_t v; raw(&v, 8); return v; }
    int64_t i64() { int64_t v; raw(&v, 8); return v; }
    double f64() { double v; raw(&v, 8); return v; }
    std::string str() {
        uint32_t len = u32();
        if (pos + len > n) throw CorruptCheckpoint("checkpoint: truncated name");
        std::string s(reinterpret_cast<const char*>(p + pos), len);
        pos += len;
        return s;
    }
    Tensor tensor() {
        uint8_t rank = u8();
        if (rank == 0 || rank > 4) throw CorruptCheckpoint("checkpoint: bad tensor rank");
        Shape shape(rank);
        for (auto& d : shape) {
            d = i64();
            if (d <= 0 || d > (int64_t(1) << 32)) throw CorruptCheckpoint("checkpoint: bad extent");
        }
        Tensor t;
        t.shape = shape;
        t.data.resize(static_cast<size_t>(shape_numel(shape)));
        raw(t.data.data(), t.data.size() * sizeof(float));
        return t;
    }
    bool eof() const { return pos >= n; }
};

// CRC covers tag + length + payload so a flipped byte anywhere in a section
// is detected, including sections a reader would otherwise skip as unknown.
void write_section(Writer& w, const char tag[4], const std::vector<uint8_t>& payload) {
    size_t start = w.out.size();
    w.raw(tag, 4);
    w.u64(payload.size());
    w.raw(payload.data(), payload.size());
    uint32_t crc = static_cast<uint32_t>(
        crc32(0L, w.out.data() + start, static_cast<uInt>(w.out.size() - start)));
    w.u32(crc);
}

}  // namespace

std::vector<uint8_t> checkpoint_to_bytes(const Checkpoint& ckpt) {
    Writer w;
    w.raw(kMagic, 4);
    w.u16(ckpt.version);
    w.u16(0);  // flags

    {
        nlohmann::json hist = nlohmann::json::array();
        for (const auto& e : ckpt.history)
            hist.push_back({e.epoch, e.split, e.loss, e.accuracy, e.lr});
        nlohmann::json meta{{"arch", ckpt.model.arch},
                            {"config", ckpt.model.config_json},
                            {"epoch", ckpt.epoch},
                            {"history", hist}};
        std::string s = meta.dump();
        Writer payload;
        payload.raw(s.data(), s.size());
        write_section(w, "META", payload.out);
    }
    {
        Writer payload;
        payload.u32(static_cast<uint32_t>(ckpt.model.param_order.size()));
        for (const auto& name : ckpt.model.param_order) {
            payload.str(name);
            payload.tensor(ckpt.model.params.at(name));
        }
        write_section(w, "PARM", payload.out);
    }
    {
        Writer payload;
        payload.u32(static_cast<uint32_t>(ckpt.model.buffer_order.size()));
        for (const auto& name : ckpt.model.buffer_order) {
            payload.str(name);
            payload.tensor(ckpt.model.buffers.at(name));
        }
        write_section(w, "BUFS", payload.out);
    }
    if (ckpt.opt) {
        Writer payload;
        payload.u64(static_cast<uint64_t>(ckpt.opt->step));
        payload.f64(ckpt.opt->beta1);
        payload.f64(ckpt.opt->beta2);
        payload.f64(ckpt.opt->eps);
        payload.u32(static_cast<uint32_t>(ckpt.opt->m.size()));
        for (const auto& [name, m] : ckpt.opt->m) {
            payload.str(name);
            payload.tensor(m);
            payload.tensor(ckpt.opt->v.at(name));
        }
        write_section(w, "OPTS", payload.out);
    }
    return w.out;
}

Checkpoint checkpoint_from_bytes(const std::vector<uint8_t>& bytes) {
    Reader r{bytes.data(), bytes.size()};
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic (not an LMCK file)");
    Checkpoint ckpt;
    ckpt.version = r.u16();
    if (ckpt.version != 1) throw FormatError("checkpoint: unknown version");
    r.u16();  // flags
    bool saw_meta = false, saw_parm = false;
    while (!r.eof()) {
        size_t section_start = r.pos;
        char tag[4];
        r.raw(tag, 4);
        uint64_t len = r.u64();
        if (r.pos + len + 4 > r.n) throw CorruptCheckpoint("checkpoint: truncated section");
        const uint8_t* payload = r.p + r.pos;
        r.pos += len;
        uint32_t expect = r.u32();
        uint32_t crc = static_cast<uint32_t>(
            crc32(0L, r.p + section_start, static_cast<uInt>(4 + 8 + len)));
        if (crc != expect) throw CorruptCheckpoint("checkpoint: section CRC mismatch");
        Reader sec{payload, static_cast<size_t>(len)};
        if (std::memcmp(tag, "META", 4) == 0) {
            std::string s(reinterpret_cast<const char*>(payload), len);
            nlohmann::json meta;
            try {
                meta = nlohmann::json::parse(s);
            } catch (const nlohmann::json::parse_error&) {
                throw CorruptCheckpoint("checkpoint: bad META json");
            }
            ckpt.model.arch = meta.value("arch", "");
            ckpt.model.config_json = meta.value("config", "");
            ckpt.epoch = meta.value("epoch", 0);
            for (const auto& row : meta.value("history", nlohmann::json::array())) {
                EpochMetric e;
                e.epoch = row.at(0).get<int>();
                e.split = row.at(1).get<std::string>();
                e.loss = row.at(2).get<double>();
                e.accuracy = row.at(3).get<double>();
                e.lr = row.at(4).get<double>();
                ckpt.history.push_back(e);
            }
            saw_meta = true;
        } else if (std::memcmp(tag, "PARM", 4) == 0) {
            uint32_t count = sec.u32();
            for (uint32_t i = 0; i < count; ++i) {
                std::string name = sec.str();
                ckpt.model.add_param(name, sec.tensor());
            }
            saw_parm = true;
        } else if (std::memcmp(tag, "BUFS", 4) == 0) {
            uint32_t count = sec.u32();
            for (uint32_t i = 0; i < count; ++i) {
                std::string name = sec.str();
                ckpt.model.add_buffer(name, sec.tensor());
            }
        } else if (std::memcmp(tag, "OPTS", 4) == 0) {
            AdamState opt;
            opt.step = static_cast<int64_t>(sec.u64());
            opt.beta1 = sec.f64();
            opt.beta2 = sec.f64();
            opt.eps = sec.f64();
            uint32_t count = sec.u32();
            for (uint32_t i = 0; i < count; ++i) {
                std::string name = sec.str();
                opt.m[name] = sec.tensor();
                opt.v[name] = sec.tensor();
            }
            ckpt.opt = std::move(opt);
        }
        // unknown sections are skipped (forward compatibility within v1)
    }
    if (!saw_meta || !saw_parm) throw CorruptCheckpoint("checkpoint: missing required section");
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    auto bytes = checkpoint_to_bytes(ckpt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("save_checkpoint: write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return checkpoint_from_bytes(bytes);
}

std::string metrics_to_csv(const std::vector<EpochMetric>& log) {
    std::string out = "epoch,split,loss,accuracy,lr\n";
    char buf[160];
    for (const auto& e : log) {
        std::snprintf(buf, sizeof(buf), "%d,%s,%.9g,%.9g,%.9g\n", e.epoch, e.split.c_str(),
                      e.loss, e.accuracy, e.lr);
        out += buf;
    }
    return out;
}

// ---- stage routing ---------------------------------------------------------

DatasetManifest relabel_stage1(const DatasetManifest& manifest) {
    DatasetManifest out = manifest;
    int benign = manifest.class_index.benign_index;
    out.class_index.names = {"benign", "malign"};
    out.class_index.benign_index = 0;
    for (auto& r : out.records) r.label = (r.label == benign) ? 0 : 1;
    return out;
}

DatasetManifest relabel_stage2(const DatasetManifest& manifest) {
    DatasetManifest out;
    int benign = manifest.class_index.benign_index;
    for (size_t i = 0; i < manifest.class_index.names.size(); ++i)
        if (static_cast<int>(i) != benign)
            out.class_index.names.push_back(manifest.class_index.names[i]);
    out.class_index.benign_index = -1;  // no benign class in stage 2
    for (const auto& r : manifest.records) {
        if (r.label == benign) continue;
        ManifestRecord copy = r;
        copy.label = manifest.class_index.class_to_family(r.label);
        out.records.push_back(std::move(copy));
    }
    return out;
}

// ---- training loop ---------------------------------------------------------

namespace {

struct EvalStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

double batch_loss(const Tensor& logits, const std::vector<int>& labels) {
    int64_t n = logits.dim(0), c = logits.dim(1);
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data.data() + i * c;
        float mx = row[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
        total += std::log(sum) + mx - row[labels[static_cast<size_t>(i)]];
    }
    return total;
}

int64_t batch_correct(const Tensor& logits, const std::vector<int>& labels) {
    int64_t n = logits.dim(0), c = logits.dim(1);
    int64_t correct = 0;
    for (int64_t i = 0; i < n; ++i) {
        const float* row = logits.data.data() + i * c;
        int best = 0;
        for (int j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        if (best == labels[static_cast<size_t>(i)]) ++correct;
    }
    return correct;
}

// load() with each image rendered from a random byte-stream prefix; the rng
// is keyed by (seed, epoch) upstream so resumed runs replay the same draws.
BatchLoader::Batch load_augmented(BatchLoader& loader, const std::vector<size_t>& batch_indices,
                                  int64_t min_bytes, std::mt19937_64& rng) {
    int64_t n = static_cast<int64_t>(batch_indices.size());
    BatchLoader::Batch b;
    b.images = Tensor({n, 3, kImageSide, kImageSide});
    int64_t stride = 3 * kImageSide * kImageSide;
    for (int64_t i = 0; i < n; ++i) {
        size_t idx = batch_indices[static_cast<size_t>(i)];
        int64_t full = static_cast<int64_t>(loader.bytes_of(idx).size());
        std::uniform_int_distribution<int64_t> dist(std::min(min_bytes, full), full);
        Tensor img = loader.load_one_prefix(idx, dist(rng));
        std::copy(img.data.begin(), img.data.end(), b.images.data.begin() + i * stride);
        b.labels.push_back(loader.record(idx).label);
        b.ids.push_back(loader.record(idx).id);
    }
    return b;
}

EvalStats evaluate_split(ModelGraph& model, BatchLoader& loader, int batch_size) {
    double loss_sum = 0.0;
    int64_t correct = 0, total = 0;
    auto batches = loader.epoch_batches(batch_size, 0, 0);
    // deterministic identity order is fine for evaluation
    for (const auto& b : batches) {
        auto batch = loader.load(b);
        Tensor logits = model_logits(model, batch.images, false);
        loss_sum += batch_loss(logits, batch.labels);
        correct += batch_correct(logits, batch.labels);
        total += logits.dim(0);
    }
    EvalStats s;
    s.loss = loss_sum / static_cast<double>(total);
    s.accuracy = static_cast<double>(correct) / static_cast<double>(total);
    return s;
}

}  // namespace

TrainResult train_model(ModelGraph model, const DatasetManifest& manifest, const TrainConfig& cfg,
                        const Checkpoint* resume) {
    cfg.validate();
    int num_classes = model_num_classes(model);
    bool has_split_tags = false, has_val = false;
    for (const auto& r : manifest.records) {
        if (r.label < 0 || r.label >= num_classes)
            throw ConfigError("train_model: manifest label out of range for model head");
        if (!r.split.empty()) has_split_tags = true;
        if (r.split == "val") has_val = true;
    }
    BatchLoader train_loader(manifest, has_split_tags ? "train" : "");
    if (train_loader.size() == 0) throw EmptyDataset("train_model: empty training split");
    std::optional<BatchLoader> val_loader;
    if (has_val) val_loader.emplace(manifest, "val");

    AdamState adam;
    int start_epoch = 1;
    std::vector<EpochMetric> log;
    if (resume) {
        model = resume->model;
        if (resume->opt) adam = *resume->opt;
        start_epoch = resume->epoch + 1;
        log = resume->history;
    }

    PlateauState plateau;
    plateau.current_lr = cfg.lr0;
    plateau.min_delta = cfg.min_delta;
    const std::string monitored = has_val ? "val" : "train";
    for (const auto& e : log)
        if (e.split == monitored)
            plateau_step(plateau, e.accuracy, cfg.plateau_patience, cfg.plateau_factor);

    TrainResult res;
    auto snapshot = [&](int epoch) {
        Checkpoint c;
        c.model = model;
        c.opt = adam;
        c.epoch = epoch;
        c.history = log;
        return c;
    };
    res.final = snapshot(start_epoch - 1);
    res.best = res.final;
    double best_metric = plateau.best_metric;

    for (int epoch = start_epoch; epoch <= cfg.max_epochs; ++epoch) {
        double lr_used = plateau.current_lr;
        double loss_sum = 0.0;
        int64_t correct = 0, total = 0;
        bool aborted = false;
        std::mt19937_64 aug_rng(cfg.seed ^ (static_cast<uint64_t>(epoch) * 0x9E3779B97F4A7C15ULL));
        for (const auto& bidx : train_loader.epoch_batches(cfg.batch_size, cfg.seed, epoch)) {
            auto batch = cfg.augment_min_bytes > 0
                             ? load_augmented(train_loader, bidx, cfg.augment_min_bytes, aug_rng)
                             : train_loader.load(bidx);
            std::map<std::string, Tensor> grads;
            Tensor logits;
            try {
                float loss =
                    model_forward_backward(model, batch.images, batch.labels, grads, &logits);
                loss_sum += static_cast<double>(loss) * static_cast<double>(logits.dim(0));
            } catch (const NumericError&) {
                aborted = true;
                break;
            }
            adam_step(model.params, grads, adam, lr_used, cfg.freeze_prefixes, cfg.weight_decay);
            correct += batch_correct(logits, batch.labels);
            total += logits.dim(0);
        }
        if (aborted) {
            res.aborted_numeric = true;
            break;
        }
        double train_loss = loss_sum / static_cast<double>(total);
        double train_acc = static_cast<double>(correct) / static_cast<double>(total);
        log.push_back({epoch, "train", train_loss, train_acc, lr_used});
        double monitored_metric = train_acc;
        double val_acc = 0.0;
        if (val_loader) {
            EvalStats vs = evaluate_split(model, *val_loader, cfg.batch_size);
            log.push_back({epoch, "val", vs.loss, vs.accuracy, lr_used});
            monitored_metric = vs.accuracy;
            val_acc = vs.accuracy;
        }
        bool improved = monitored_metric > plateau.best_metric + plateau.min_delta;
        plateau_step(plateau, monitored_metric, cfg.plateau_patience, cfg.plateau_factor);
        if (improved || monitored_metric > best_metric) {
            best_metric = std::max(best_metric, monitored_metric);
            res.best = snapshot(epoch);
        }
        res.final = snapshot(epoch);
        bool any_target = cfg.stop_train_accuracy || cfg.stop_val_accuracy;
        bool train_ok = !cfg.stop_train_accuracy || train_acc >= *cfg.stop_train_accuracy;
        bool val_ok =
            !cfg.stop_val_accuracy || (val_loader && val_acc >= *cfg.stop_val_accuracy);
        if (any_target && train_ok && val_ok) break;
    }
    res.log = log;
    res.final.history = log;
    return res;
}

TrainResult fine_tune(const Checkpoint& base, const std::string& expected_arch,
                      int new_head_classes, const DatasetManifest& manifest,
                      const TrainConfig& cfg) {
    if (base.model.arch != expected_arch)
        throw ConfigError("fine_tune: architecture tag mismatch: " + base.model.arch +
                          " vs expected " + expected_arch);
    if (new_head_classes <= 0) throw ConfigError("fine_tune: head class count must be positive");
    ModelGraph model = base.model;
    int64_t in_dim = model.param("head.fc.w").dim(0);
    std::mt19937 rng(static_cast<uint32_t>(cfg.seed) ^ 0x66696E65u);
    model.param("head.fc.w") = he_normal({in_dim, new_head_classes}, rng);
    model.param("head.fc.b") = Tensor::zeros({new_head_classes});
    try {
        auto j = nlohmann::json::parse(model.config_json);
        j["num_classes"] = new_head_classes;
        model.config_json = j.dump();
    } catch (const nlohmann::json::parse_error&) {
        // config echo left as-is; forward passes ignore num_classes
    }
    return train_model(std::move(model), manifest, cfg);
}

}  // namespace lmc
