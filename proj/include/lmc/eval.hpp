#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lmc/cascade.hpp"
#include "lmc/data.hpp"

namespace lmc {

// 26x26 count grid; rows = true class, cols = predicted class. Stage-1
// false negatives (benign-verdicted malware) land in the benign column.
struct ConfusionMatrix {
    std::vector<int64_t> counts;  // kNumClasses * kNumClasses
    ConfusionMatrix() : counts(static_cast<size_t>(kNumClasses) * kNumClasses, 0) {}
    int64_t& at(int true_cls, int pred_cls) {
        return counts[static_cast<size_t>(true_cls) * kNumClasses + pred_cls];
    }
    int64_t at(int true_cls, int pred_cls) const {
        return counts[static_cast<size_t>(true_cls) * kNumClasses + pred_cls];
    }
    int64_t total() const;
    int64_t trace() const;
};

struct ClassMetrics {
    std::string name;
    double precision = 0.0;  // 0/0 counts as 0
    double recall = 0.0;
    int64_t support = 0;
};

struct ThroughputReport {
    double images_per_second_mean = 0.0;
    double images_per_second_std = 0.0;
    int batch_size = 0;
    int warmup_batches = 0;
    int repetitions = 0;
    double stage2_skip_rate = 0.0;
};

struct MetricsReport {
    double accuracy = 0.0;
    std::vector<ClassMetrics> per_class;
    ConfusionMatrix confusion;
    std::optional<ThroughputReport> throughput;
    // published numbers carried as annotations, never asserted
    double paper_accuracy = 96.6;
    double paper_ips = 2370.0;
};

MetricsReport evaluate(const CascadeModel& cascade, const DatasetManifest& manifest,
                       const std::string& split);

// Wall-clock throughput over the model-forward region only (images are
// pre-decoded tensors). One timed batch per repetition after warmup.
ThroughputReport bench_throughput(const CascadeModel& cascade,
                                  const std::vector<ImageTensor>& images, int batch_size,
                                  int warmup, int reps, int workers = 1);

// Batched cascade inference used by the benchmark: stage 1 over the whole
// batch, stage 2 only over the malign sub-batch.
std::vector<Verdict> classify_batch_fused(const CascadeModel& cascade, const Tensor& images,
                                          int workers = 1);

std::string emit_report_json(const MetricsReport& metrics, const ClassIndex& class_index);
std::string emit_report_markdown(const MetricsReport& metrics, const ClassIndex& class_index);

}  // namespace lmc
