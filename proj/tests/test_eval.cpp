#include <doctest.h>

#include "lmc/errors.hpp"
#include "lmc/eval.hpp"

using namespace lmc;

namespace {

// Corpus of constant byte streams: class c is filled with value 10 + 100*c,
// so the decoded image is (nearly) constant at that value / 255.
DatasetManifest constant_manifest(int per_class) {
    DatasetManifest m;
    m.class_index.names = {"benign", "f1", "f2"};
    m.class_index.benign_index = 0;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per_class; ++i) {
            ManifestRecord r;
            r.id = std::to_string(c) + "/" + std::to_string(i);
            r.inline_bytes.assign(300, static_cast<uint8_t>(10 + 100 * c));
            r.label = c;
            m.records.push_back(std::move(r));
        }
    return m;
}

// Reads the constant pixel level back out and classifies it perfectly.
CascadeModel oracle_cascade() {
    CascadeModel c;
    c.class_index.benign_index = 0;
    c.class_index.names.push_back("benign");
    for (int f = 0; f < 25; ++f) c.class_index.names.push_back("f" + std::to_string(f + 1));
    c.stage1 = [](const Tensor& batch) {
        int64_t n = batch.dim(0), stride = batch.numel() / n;
        Tensor out({n, 2});
        for (int64_t i = 0; i < n; ++i)
            out[i * 2 + 1] = batch[i * stride] > 60.0f / 255.0f ? 10.0f : -10.0f;
        return out;
    };
    c.stage2 = [](const Tensor& batch) {
        int64_t n = batch.dim(0), stride = batch.numel() / n;
        Tensor out({n, 25});
        for (int64_t i = 0; i < n; ++i)
            out[i * 25 + (batch[i * stride] > 160.0f / 255.0f ? 1 : 0)] = 10.0f;
        return out;
    };
    return c;
}

CascadeModel always_benign_cascade() {
    CascadeModel c = oracle_cascade();
    c.stage1 = [](const Tensor& batch) {
        Tensor out({batch.dim(0), 2});
        for (int64_t i = 0; i < batch.dim(0); ++i) out[i * 2 + 1] = -10.0f;
        return out;
    };
    return c;
}

}  // namespace

TEST_CASE("a perfect cascade scores accuracy 1 with a diagonal confusion matrix") {
    DatasetManifest m = constant_manifest(3);
    CascadeModel c = oracle_cascade();
    MetricsReport rep = evaluate(c, m, "");
    CHECK(rep.accuracy == 1.0);
    CHECK(rep.confusion.total() == 9);
    CHECK(rep.confusion.trace() == 9);
    for (int cls = 0; cls < 3; ++cls) CHECK(rep.confusion.at(cls, cls) == 3);
    REQUIRE(rep.per_class.size() == 3);
    for (const auto& pm : rep.per_class) {
        CHECK(pm.precision == 1.0);
        CHECK(pm.recall == 1.0);
        CHECK(pm.support == 3);
    }
    // the two malign classes each ran stage 2 once per sample
    CHECK(c.stage2_invocations.load() == 6);
}

TEST_CASE("an always-benign cascade scores the benign fraction; 0/0 counts as 0") {
    DatasetManifest m = constant_manifest(4);
    CascadeModel c = always_benign_cascade();
    MetricsReport rep = evaluate(c, m, "");
    CHECK(rep.accuracy == doctest::Approx(4.0 / 12.0));
    CHECK(c.stage2_invocations.load() == 0);
    // everything lands in the benign column
    for (int cls = 0; cls < 3; ++cls) CHECK(rep.confusion.at(cls, 0) == 4);
    CHECK(rep.per_class[0].precision == doctest::Approx(4.0 / 12.0));
    CHECK(rep.per_class[0].recall == 1.0);
    for (int cls = 1; cls < 3; ++cls) {
        CHECK(rep.per_class[static_cast<size_t>(cls)].precision == 0.0);  // 0/0
        CHECK(rep.per_class[static_cast<size_t>(cls)].recall == 0.0);
    }
}

TEST_CASE("confusion rows sum to the per-class sample counts") {
    DatasetManifest m = constant_manifest(5);
    // mislabel-prone cascade: stage 2 always family 0
    CascadeModel c = oracle_cascade();
    c.stage2 = [](const Tensor& batch) {
        Tensor out({batch.dim(0), 25});
        for (int64_t i = 0; i < batch.dim(0); ++i) out[i * 25] = 5.0f;
        return out;
    };
    MetricsReport rep = evaluate(c, m, "");
    for (int cls = 0; cls < 3; ++cls) {
        int64_t row = 0;
        for (int j = 0; j < kNumClasses; ++j) row += rep.confusion.at(cls, j);
        CHECK(row == 5);
    }
    // class 2 predicted as family 0 -> column 1
    CHECK(rep.confusion.at(2, 1) == 5);
    CHECK(rep.accuracy == doctest::Approx(10.0 / 15.0));
}

TEST_CASE("evaluate respects split selection and rejects empty splits") {
    DatasetManifest m = constant_manifest(4);
    for (size_t i = 0; i < m.records.size(); ++i) m.records[i].split = i % 2 ? "val" : "train";
    MetricsReport rep = evaluate(oracle_cascade(), m, "val");
    CHECK(rep.confusion.total() == 6);
    CHECK_THROWS_AS(evaluate(oracle_cascade(), m, "test"), EmptyDataset);
}

TEST_CASE("report json exposes metrics, confusion, and the published references") {
    DatasetManifest m = constant_manifest(2);
    CascadeModel c = oracle_cascade();
    MetricsReport rep = evaluate(c, m, "");
    rep.throughput = ThroughputReport{120.0, 3.0, 4, 1, 3, 0.5};
    std::string js = emit_report_json(rep, m.class_index);
    for (const char* key : {"\"accuracy\"", "\"per_class\"", "\"confusion\"", "\"throughput\"",
                            "\"stage2_skip_rate\"", "\"references\"", "\"paper_accuracy\"",
                            "\"paper_ips\""})
        CHECK(js.find(key) != std::string::npos);
    CHECK(js.find("\"accuracy\": 1.0") != std::string::npos);

    std::string md = emit_report_markdown(rep, m.class_index);
    CHECK(md.find("96.6") != std::string::npos);   // published accuracy, annotation only
    CHECK(md.find("2370") != std::string::npos);   // published throughput
    CHECK(md.find("| benign |") != std::string::npos);
}

TEST_CASE("bench produces one timing per repetition and tracks the skip rate") {
    CascadeModel c = oracle_cascade();
    std::vector<ImageTensor> images;
    for (int i = 0; i < 16; ++i) {
        ImageTensor img;
        img.data = Tensor::full({3, 2, 2}, i % 2 ? 0.9f : 0.01f);
        images.push_back(std::move(img));
    }
    ThroughputReport rep = bench_throughput(c, images, 4, 1, 3);
    CHECK(rep.batch_size == 4);
    CHECK(rep.repetitions == 3);
    CHECK(rep.images_per_second_mean > 0.0);
    CHECK(rep.images_per_second_std >= 0.0);
    // half the timed images are benign and skip stage 2
    CHECK(rep.stage2_skip_rate == doctest::Approx(0.5));

    CHECK_THROWS_AS(bench_throughput(c, images, 4, 2, 3), InvalidInput);  // needs 20
    CHECK_THROWS_AS(bench_throughput(c, images, 0, 1, 3), InvalidInput);
}
