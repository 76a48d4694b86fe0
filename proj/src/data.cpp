#include "lmc/data.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>

#include "lmc/errors.hpp"
#include "lmc/png_io.hpp"

namespace fs = std::filesystem;

namespace lmc {

namespace {

int find_benign_index(const std::vector<std::string>& names) {
    for (size_t i = 0; i < names.size(); ++i) {
        std::string lower = names[i];
        std::transform(lower.begin(), lower.end(), lower.begin(),
                       [](unsigned char c) { return std::tolower(c); });
        if (lower == "benign" || lower == "normal" || lower == "other") return static_cast<int>(i);
    }
    return 0;
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t x = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xBF58476D1CE4E5B9ULL);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

}  // namespace

std::vector<size_t> DatasetManifest::indices_of_split(const std::string& split) const {
    std::vector<size_t> out;
    for (size_t i = 0; i < records.size(); ++i)
        if (split.empty() || records[i].split == split) out.push_back(i);
    return out;
}

void SynthSpec::validate() const {
    if (families <= 0 || families > 25) throw InvalidInput("synth: families must be in [1,25]");
    if (samples_per_family <= 0 || benign_samples <= 0)
        throw InvalidInput("synth: sample counts must be positive");
    if (byte_motif_length <= 0) throw InvalidInput("synth: motif length must be positive");
}

DatasetManifest scan_dir(const fs::path& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) throw IoError("scan_dir: not a readable directory: " + root.string());
    std::vector<std::string> class_names;
    for (const auto& entry : fs::directory_iterator(root, ec)) {
        if (entry.is_directory()) class_names.push_back(entry.path().filename().string());
    }
    if (ec) throw IoError("scan_dir: cannot read " + root.string());
    std::sort(class_names.begin(), class_names.end());
    DatasetManifest m;
    m.class_index.names = class_names;
    m.class_index.benign_index = find_benign_index(class_names);
    for (size_t ci = 0; ci < class_names.size(); ++ci) {
        std::vector<std::string> files;
        for (const auto& entry : fs::directory_iterator(root / class_names[ci])) {
            if (entry.is_regular_file() && entry.path().extension() == ".png")
                files.push_back(entry.path().string());
        }
        std::sort(files.begin(), files.end());
        for (const auto& f : files) {
            ManifestRecord r;
            r.id = class_names[ci] + "/" + fs::path(f).stem().string();
            r.path = f;
            r.label = static_cast<int>(ci);
            m.records.push_back(std::move(r));
        }
    }
    if (m.records.empty()) throw EmptyDataset("scan_dir: no PNG images under " + root.string());
    if (static_cast<int>(class_names.size()) != kNumClasses)
        m.warnings.push_back("scan_dir: expected 26 classes, found " +
                             std::to_string(class_names.size()));
    return m;
}

DatasetManifest split_manifest(const DatasetManifest& manifest, double train_fraction,
                               uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw InvalidInput("split: train fraction must be in (0,1)");
    DatasetManifest out = manifest;
    std::map<int, std::vector<size_t>> per_class;
    for (size_t i = 0; i < out.records.size(); ++i)
        per_class[out.records[i].label].push_back(i);
    for (auto& [label, idxs] : per_class) {
        if (idxs.size() < 2)
            throw StratifyError("split: class " + std::to_string(label) +
                                " has fewer than 2 samples");
        std::mt19937_64 rng(mix_seed(seed, static_cast<uint64_t>(label), 0));
        std::shuffle(idxs.begin(), idxs.end(), rng);
        size_t n_train = static_cast<size_t>(std::floor(train_fraction * static_cast<double>(idxs.size())));
        for (size_t i = 0; i < idxs.size(); ++i)
            out.records[idxs[i]].split = i < n_train ? "train" : "val";
    }
    return out;
}

std::vector<uint8_t> synth_family_motif(const SynthSpec& spec, int family) {
    std::mt19937_64 rng(mix_seed(spec.seed, 0x6D6F746966ULL, static_cast<uint64_t>(family)));
    std::uniform_int_distribution<int> byte_dist(0, 255);
    std::vector<uint8_t> motif(static_cast<size_t>(spec.byte_motif_length));
    for (auto& b : motif) b = static_cast<uint8_t>(byte_dist(rng));
    return motif;
}

std::vector<uint8_t> synth_sample_bytes(const SynthSpec& spec, int family, int sample_idx) {
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<uint64_t>(family + 1),
                                 static_cast<uint64_t>(sample_idx) + 1));
    std::uniform_int_distribution<int> len_dist(3 * 1024, 64 * 1024);
    size_t target = static_cast<size_t>(len_dist(rng));
    std::vector<uint8_t> bytes;
    bytes.reserve(target + 64);
    std::uniform_int_distribution<int> byte_dist(0, 255);
    if (family < 0) {
        // benign: low-entropy structured stream (headers, ramps, zero runs)
        std::uniform_int_distribution<int> run_dist(16, 96);
        uint8_t counter = 0;
        while (bytes.size() < target) {
            int run = run_dist(rng);
            int kind = static_cast<int>(rng() % 3);
            for (int i = 0; i < run && bytes.size() < target; ++i) {
                if (kind == 0)
                    bytes.push_back(0);
                else if (kind == 1)
                    bytes.push_back(counter++);
                else
                    bytes.push_back(static_cast<uint8_t>(32 + (i % 16)));
            }
        }
    } else {
        std::vector<uint8_t> motif = synth_family_motif(spec, family);
        // Noise gap sized so the repeat period is a multiple of 3: every
        // repetition then lands on the same byte->RGB phase, giving each
        // family a stable color texture at any render scale ("separable by
        // construction"). Gap content stays seeded-random per sample.
        int gap = 3 - static_cast<int>(motif.size() % 3);
        while (bytes.size() < target) {
            bytes.insert(bytes.end(), motif.begin(), motif.end());
            for (int i = 0; i < gap; ++i) bytes.push_back(static_cast<uint8_t>(byte_dist(rng)));
        }
        bytes.resize(target);
    }
    if (bytes.empty()) bytes.push_back(0);
    return bytes;
}

DatasetManifest synth_generate(const SynthSpec& spec, const fs::path& out_dir) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("synth_generate: cannot create " + out_dir.string());

    std::vector<std::string> class_names = {"benign"};
    for (int f = 0; f < spec.families; ++f) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "family%02d", f);
        class_names.emplace_back(buf);
    }
    std::sort(class_names.begin(), class_names.end());

    DatasetManifest m;
    m.class_index.names = class_names;
    m.class_index.benign_index = find_benign_index(class_names);

    auto emit = [&](const std::string& cls, int family, int idx) {
        ManifestRecord r;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "%04d", idx);
        r.id = cls + "/" + buf;
        ByteSample sample;
        sample.bytes = synth_sample_bytes(spec, family, idx);
        sample.source_id = r.id;
        RgbImageGrid grid = bytes_to_grid(sample);
        fs::create_directories(out_dir / cls, ec);
        if (ec) throw IoError("synth_generate: cannot create class directory");
        fs::path png = out_dir / cls / (std::string(buf) + ".png");
        write_png_file(png, grid);
        r.path = png.string();
        r.label = static_cast<int>(
            std::lower_bound(class_names.begin(), class_names.end(), cls) - class_names.begin());
        r.pad_bytes = grid.pad_bytes;
        r.orig_len = static_cast<int64_t>(sample.bytes.size());
        m.records.push_back(std::move(r));
    };

    for (int i = 0; i < spec.benign_samples; ++i) emit("benign", -1, i);
    for (int f = 0; f < spec.families; ++f) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "family%02d", f);
        for (int i = 0; i < spec.samples_per_family; ++i) emit(buf, f, i);
    }
    std::stable_sort(m.records.begin(), m.records.end(),
                     [](const ManifestRecord& a, const ManifestRecord& b) { return a.id < b.id; });
    save_manifest(m, out_dir / "manifest.jsonl");
    return m;
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_manifest: cannot open " + path.string());
    nlohmann::json header{{"classes", manifest.class_index.names},
                          {"benign_index", manifest.class_index.benign_index}};
    out << header.dump() << "\n";
    // Paths are written relative to the manifest location so the corpus
    // directory can move as a unit.
    fs::path base = fs::absolute(path).parent_path();
    for (const auto& r : manifest.records) {
        std::string rel = r.path;
        if (!rel.empty()) {
            std::error_code rec_ec;
            fs::path relp = fs::relative(fs::absolute(r.path), base, rec_ec);
            if (!rec_ec && !relp.empty()) rel = relp.string();
        }
        nlohmann::json j{{"id", r.id},
                         {"path", rel},
                         {"label", r.label},
                         {"pad_bytes", r.pad_bytes},
                         {"orig_len", r.orig_len}};
        if (!r.split.empty()) j["split"] = r.split;
        out << j.dump() << "\n";
    }
    if (!out) throw IoError("save_manifest: write failed for " + path.string());
}

DatasetManifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("load_manifest: cannot open " + path.string());
    DatasetManifest m;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("load_manifest: bad JSON line: " + std::string(e.what()));
        }
        if (first && j.contains("classes")) {
            m.class_index.names = j["classes"].get<std::vector<std::string>>();
            m.class_index.benign_index = j.value("benign_index", 0);
            first = false;
            continue;
        }
        first = false;
        ManifestRecord r;
        r.id = j.at("id").get<std::string>();
        r.path = j.value("path", "");
        if (!r.path.empty() && fs::path(r.path).is_relative())
            r.path = (fs::absolute(path).parent_path() / r.path).string();
        r.label = j.value("label", -1);
        r.split = j.value("split", "");
        r.pad_bytes = j.value("pad_bytes", 0);
        r.orig_len = j.value("orig_len", 0);
        m.records.push_back(std::move(r));
    }
    if (m.records.empty()) throw EmptyDataset("load_manifest: no records in " + path.string());
    return m;
}

void save_split(const DatasetManifest& manifest, const fs::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("save_split: cannot open " + path.string());
    for (const auto& r : manifest.records) {
        nlohmann::json j{{"id", r.id}, {"split", r.split}};
        out << j.dump() << "\n";
    }
}

void apply_split_file(DatasetManifest& manifest, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("apply_split_file: cannot open " + path.string());
    std::map<std::string, std::string> splits;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        splits[j.at("id").get<std::string>()] = j.value("split", "");
    }
    for (auto& r : manifest.records) {
        auto it = splits.find(r.id);
        if (it != splits.end()) r.split = it->second;
    }
}

BatchLoader::BatchLoader(const DatasetManifest& manifest, std::string split, bool cache)
    : manifest_(&manifest), cache_enabled_(cache) {
    indices_ = manifest.indices_of_split(split);
}

const ManifestRecord& BatchLoader::record(size_t i) const {
    return manifest_->records[indices_[i]];
}

std::vector<std::vector<size_t>> BatchLoader::epoch_batches(int batch_size, uint64_t shuffle_seed,
                                                            int epoch) const {
    if (batch_size <= 0) throw InvalidInput("epoch_batches: batch size must be positive");
    std::vector<size_t> order(indices_.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix_seed(shuffle_seed, 0x65706F6368ULL, static_cast<uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<size_t>> batches;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
        size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

Tensor BatchLoader::load_one(size_t i) {
    if (cache_enabled_) {
        auto it = cache_.find(i);
        if (it != cache_.end()) return it->second;
    }
    const ManifestRecord& r = record(i);
    RgbImageGrid grid;
    if (!r.path.empty()) {
        grid = read_png_file(r.path);
    } else if (!r.inline_bytes.empty()) {
        grid = bytes_to_grid(ByteSample{r.inline_bytes, r.id, std::nullopt});
    } else {
        throw InvalidInput("BatchLoader: record has neither path nor inline bytes: " + r.id);
    }
    Tensor t = grid_to_tensor(grid).data;
    if (cache_enabled_) cache_.emplace(i, t);
    return t;
}

const std::vector<uint8_t>& BatchLoader::bytes_of(size_t i) {
    auto it = byte_cache_.find(i);
    if (it != byte_cache_.end()) return it->second;
    const ManifestRecord& r = record(i);
    std::vector<uint8_t> bytes;
    if (!r.inline_bytes.empty()) {
        bytes = r.inline_bytes;
    } else if (!r.path.empty()) {
        bytes = grid_to_bytes(read_png_file(r.path));
        if (r.orig_len > 0 && static_cast<int64_t>(bytes.size()) > r.orig_len)
            bytes.resize(static_cast<size_t>(r.orig_len));
    } else {
        throw InvalidInput("BatchLoader: record has neither path nor inline bytes: " + r.id);
    }
    return byte_cache_.emplace(i, std::move(bytes)).first->second;
}

Tensor BatchLoader::load_one_prefix(size_t i, int64_t prefix_len) {
    const std::vector<uint8_t>& bytes = bytes_of(i);
    int64_t full = static_cast<int64_t>(bytes.size());
    if (prefix_len <= 0 || prefix_len >= full) return load_one(i);
    std::vector<uint8_t> prefix(bytes.begin(), bytes.begin() + prefix_len);
    return grid_to_tensor(bytes_to_grid(ByteSample{std::move(prefix), record(i).id, std::nullopt}))
        .data;
}

BatchLoader::Batch BatchLoader::load(const std::vector<size_t>& batch_indices) {
    if (batch_indices.empty()) throw InvalidInput("BatchLoader: empty batch");
    int64_t n = static_cast<int64_t>(batch_indices.size());
    Batch b;
    b.images = Tensor({n, 3, kImageSide, kImageSide});
    int64_t stride = 3 * kImageSide * kImageSide;
    for (int64_t i = 0; i < n; ++i) {
        size_t idx = batch_indices[static_cast<size_t>(i)];
        Tensor img = load_one(idx);
        std::copy(img.data.begin(), img.data.end(), b.images.data.begin() + i * stride);
        b.labels.push_back(record(idx).label);
        b.ids.push_back(record(idx).id);
    }
    return b;
}

}  // namespace lmc
