#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lmc/bin2img.hpp"
#include "lmc/data.hpp"
#include "lmc/model.hpp"

namespace lmc {

enum class VerdictKind { Benign, Malign };

struct Verdict {
    VerdictKind kind = VerdictKind::Benign;
    std::optional<int> family;  // in [0,25), present iff Malign
    double confidence = 0.0;    // in (0,1]
    double stage1_prob_malign = 0.0;
};

// Two-stage pipeline: stage 1 scores benign vs malign; stage 2 runs only for
// malign verdicts. Stage functions operate on batches so the benchmark path
// amortizes the forward pass.
struct CascadeModel {
    // batch (N,3,224,224) -> per-sample [p_benign, p_malign] logits
    std::function<Tensor(const Tensor&)> stage1;
    // batch (N,3,224,224) -> per-sample 25-family logits
    std::function<Tensor(const Tensor&)> stage2;
    double benign_threshold = 0.5;
    ClassIndex class_index;  // 26 entries: 1 benign + 25 families
    mutable std::atomic<uint64_t> stage2_invocations{0};

    CascadeModel() = default;
    CascadeModel(CascadeModel&& o) noexcept
        : stage1(std::move(o.stage1)),
          stage2(std::move(o.stage2)),
          benign_threshold(o.benign_threshold),
          class_index(std::move(o.class_index)),
          stage2_invocations(o.stage2_invocations.load()) {}
    CascadeModel& operator=(CascadeModel&& o) noexcept {
        stage1 = std::move(o.stage1);
        stage2 = std::move(o.stage2);
        benign_threshold = o.benign_threshold;
        class_index = std::move(o.class_index);
        stage2_invocations.store(o.stage2_invocations.load());
        return *this;
    }

    void validate() const;
};

// Builds a cascade from trained stage checkpoints (densenet + levit graphs).
// The graphs are shared; eval-mode inference does not mutate them.
CascadeModel make_cascade(std::shared_ptr<ModelGraph> binary_model,
                          std::shared_ptr<ModelGraph> family_model, ClassIndex class_index,
                          double benign_threshold = 0.5);

Verdict classify(const CascadeModel& cascade, const ImageTensor& image);

// Order-preserving batch classification; results are identical to sequential
// classify on each element regardless of worker count.
std::vector<Verdict> classify_batch(const CascadeModel& cascade,
                                    const std::vector<ImageTensor>& images, int workers = 1);

// JSON-lines verdict record used by the CLI classify path.
std::string verdict_to_json(const std::string& id, const Verdict& v,
                            const ClassIndex& class_index);

}  // namespace lmc
