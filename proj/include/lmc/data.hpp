#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lmc/bin2img.hpp"
#include "lmc/tensor.hpp"

namespace lmc {

inline constexpr int kNumClasses = 26;  // 1 benign + 25 malware families

struct ClassIndex {
    std::vector<std::string> names;  // lexicographic order defines labels
    int benign_index = 0;

    int num_families() const { return static_cast<int>(names.size()) - 1; }
    // family index (0-based among non-benign classes) -> global class index
    int family_to_class(int family) const {
        return family < benign_index ? family : family + 1;
    }
    int class_to_family(int cls) const { return cls < benign_index ? cls : cls - 1; }
};

struct ManifestRecord {
    std::string id;
    std::string path;        // PNG on disk; empty when bytes are inline
    std::vector<uint8_t> inline_bytes;
    int label = -1;
    std::string split;       // "train", "val" or "" (unassigned)
    int64_t pad_bytes = 0;
    int64_t orig_len = 0;
};

struct DatasetManifest {
    std::vector<ManifestRecord> records;
    ClassIndex class_index;
    std::vector<std::string> warnings;

    std::vector<size_t> indices_of_split(const std::string& split) const;
};

struct SynthSpec {
    int families = 4;            // <= 25
    int samples_per_family = 16;
    int benign_samples = 16;
    uint64_t seed = 7;
    int byte_motif_length = 32;

    void validate() const;
};

// Scans root/<class_name>/*.png, labels from subdirectory names sorted
// lexicographically. Emits a warning (not an error) when class count != 26.
DatasetManifest scan_dir(const std::filesystem::path& root);

// Stratified 70/30 split: floor(frac * n) train per class, deterministic
// shuffle from seed. Existing split tags are overwritten.
DatasetManifest split_manifest(const DatasetManifest& manifest, double train_fraction,
                               uint64_t seed);

// Deterministic synthetic corpus: per-family byte motifs with noise, benign
// samples as low-entropy structured streams, rendered to PNG via bin2img.
DatasetManifest synth_generate(const SynthSpec& spec, const std::filesystem::path& out_dir);

// Deterministic byte stream for one synthetic sample (exposed for tests).
std::vector<uint8_t> synth_family_motif(const SynthSpec& spec, int family);
std::vector<uint8_t> synth_sample_bytes(const SynthSpec& spec, int family_or_benign /* -1 */,
                                        int sample_idx);

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_split(const DatasetManifest& manifest, const std::filesystem::path& path);
void apply_split_file(DatasetManifest& manifest, const std::filesystem::path& path);

// Loads manifest records as (3,224,224) tensors with an in-memory cache.
class BatchLoader {
   public:
    struct Batch {
        Tensor images;            // (N,3,224,224)
        std::vector<int> labels;  // raw manifest labels
        std::vector<std::string> ids;
    };

    BatchLoader(const DatasetManifest& manifest, std::string split, bool cache = true);

    size_t size() const { return indices_.size(); }
    const ManifestRecord& record(size_t i) const;

    // Per-epoch deterministic shuffle keyed by (shuffle_seed, epoch); the
    // final short batch is emitted.
    std::vector<std::vector<size_t>> epoch_batches(int batch_size, uint64_t shuffle_seed,
                                                   int epoch) const;
    Batch load(const std::vector<size_t>& batch_indices);
    Tensor load_one(size_t i);

    // Raw byte stream behind a record: inline bytes, or the exact stream
    // recovered from the PNG grid (truncated to orig_len when recorded).
    const std::vector<uint8_t>& bytes_of(size_t i);
    // Renders only the first prefix_len bytes of the stream; prefix_len <= 0
    // or >= the stream length falls back to the full (cached) render.
    Tensor load_one_prefix(size_t i, int64_t prefix_len);

   private:
    const DatasetManifest* manifest_;
    std::vector<size_t> indices_;  // into manifest_->records
    bool cache_enabled_;
    std::map<size_t, Tensor> cache_;
    std::map<size_t, std::vector<uint8_t>> byte_cache_;
};

}  // namespace lmc
