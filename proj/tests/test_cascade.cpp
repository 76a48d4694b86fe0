#include <doctest.h>

#include <cmath>
#include <random>

#include "lmc/cascade.hpp"
#include "lmc/errors.hpp"
#include "lmc/eval.hpp"

using namespace lmc;

namespace {

// Stub cascade driven entirely by the first element of each image: stage-1
// emits logits [0, 8*(x - 0.5)] so p_malign crosses 0.5 exactly at x = 0.5;
// stage-2 puts its peak at family floor(x * 25).
CascadeModel stub_cascade(double threshold = 0.5) {
    CascadeModel c;
    c.benign_threshold = threshold;
    c.class_index.benign_index = 0;
    c.class_index.names.push_back("benign");
    for (int f = 0; f < 25; ++f) c.class_index.names.push_back("fam" + std::to_string(f));
    c.stage1 = [](const Tensor& batch) {
        int64_t n = batch.dim(0), stride = batch.numel() / n;
        Tensor out({n, 2});
        for (int64_t i = 0; i < n; ++i) out[i * 2 + 1] = 8.0f * (batch[i * stride] - 0.5f);
        return out;
    };
    c.stage2 = [](const Tensor& batch) {
        int64_t n = batch.dim(0), stride = batch.numel() / n;
        Tensor out({n, 25});
        for (int64_t i = 0; i < n; ++i) {
            int fam = std::min(24, static_cast<int>(batch[i * stride] * 25.0f));
            out[i * 25 + fam] = 10.0f;
        }
        return out;
    };
    return c;
}

ImageTensor pixel_image(float x) {
    ImageTensor img;
    img.data = Tensor::full({3, 2, 2}, x);
    return img;
}

std::vector<ImageTensor> random_images(size_t n, uint64_t seed) {
    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::uniform_real_distribution<float> dist(0.0f, 1.0f);
    std::vector<ImageTensor> v;
    for (size_t i = 0; i < n; ++i) v.push_back(pixel_image(dist(rng)));
    return v;
}

bool verdicts_equal(const std::vector<Verdict>& a, const std::vector<Verdict>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].kind != b[i].kind) return false;
        if (a[i].family != b[i].family) return false;
        if (a[i].confidence != b[i].confidence) return false;
        if (a[i].stage1_prob_malign != b[i].stage1_prob_malign) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("forced stage-1 logits short-circuit or invoke stage 2") {
    CascadeModel c = stub_cascade();

    SUBCASE("confident benign never touches stage 2") {
        Verdict v = classify(c, pixel_image(0.0f));  // logits [0, -4]
        CHECK(v.kind == VerdictKind::Benign);
        CHECK_FALSE(v.family.has_value());
        CHECK(v.stage1_prob_malign == doctest::Approx(1.0 / (1.0 + std::exp(4.0))));
        CHECK(v.confidence == doctest::Approx(1.0 - v.stage1_prob_malign));
        CHECK(c.stage2_invocations.load() == 0);
    }

    SUBCASE("confident malign runs stage 2 exactly once") {
        Verdict v = classify(c, pixel_image(1.0f));  // logits [0, +4]
        CHECK(v.kind == VerdictKind::Malign);
        REQUIRE(v.family.has_value());
        CHECK(*v.family == 24);
        CHECK(c.stage2_invocations.load() == 1);
    }
}

TEST_CASE("uniform stage-2 logits tie-break to the lowest family index") {
    CascadeModel c = stub_cascade();
    c.stage2 = [](const Tensor& batch) { return Tensor::zeros({batch.dim(0), 25}); };
    Verdict v = classify(c, pixel_image(0.9f));
    REQUIRE(v.family.has_value());
    CHECK(*v.family == 0);
    CHECK(v.confidence == doctest::Approx(1.0 / 25.0));
}

TEST_CASE("argmax is invariant to a common logit shift") {
    CascadeModel a = stub_cascade();
    CascadeModel b = stub_cascade();
    b.stage2 = [inner = std::move(b.stage2)](const Tensor& batch) {
        Tensor out = inner(batch);
        for (auto& v : out.data) v += 100.0f;
        return out;
    };
    for (float x : {0.55f, 0.7f, 0.99f}) {
        Verdict va = classify(a, pixel_image(x));
        Verdict vb = classify(b, pixel_image(x));
        CHECK(va.family == vb.family);
        CHECK(va.confidence == doctest::Approx(vb.confidence));
    }
}

TEST_CASE("stage-2 invocation count equals the over-threshold population") {
    CascadeModel c = stub_cascade();
    auto images = random_images(1000, 99);
    uint64_t expected = 0;
    for (const auto& img : images) {
        // independent sigmoid oracle for p_malign of logits [0, a]
        double a = 8.0 * (img.data[0] - 0.5f);
        if (1.0 / (1.0 + std::exp(-a)) >= c.benign_threshold) ++expected;
    }
    auto verdicts = classify_batch(c, images, 1);
    CHECK(c.stage2_invocations.load() == expected);
    uint64_t malign = 0;
    for (const auto& v : verdicts) malign += v.kind == VerdictKind::Malign;
    CHECK(malign == expected);
}

TEST_CASE("worker count does not change batch verdicts") {
    CascadeModel c1 = stub_cascade();
    CascadeModel c4 = stub_cascade();
    auto images = random_images(257, 5);
    auto a = classify_batch(c1, images, 1);
    auto b = classify_batch(c4, images, 4);
    CHECK(verdicts_equal(a, b));
    CHECK(c1.stage2_invocations.load() == c4.stage2_invocations.load());
    CHECK(classify_batch(c1, {}, 4).empty());
    CHECK_THROWS_AS(classify_batch(c1, images, 0), InvalidInput);
}

TEST_CASE("raising the threshold only removes malign verdicts") {
    auto images = random_images(400, 17);
    CascadeModel lo = stub_cascade(0.3);
    CascadeModel hi = stub_cascade(0.8);
    auto vlo = classify_batch(lo, images, 1);
    auto vhi = classify_batch(hi, images, 1);
    for (size_t i = 0; i < images.size(); ++i) {
        if (vhi[i].kind == VerdictKind::Malign) CHECK(vlo[i].kind == VerdictKind::Malign);
        CHECK(vlo[i].stage1_prob_malign == vhi[i].stage1_prob_malign);
    }
    CHECK(hi.stage2_invocations.load() < lo.stage2_invocations.load());
}

TEST_CASE("fused batched inference matches per-image classification") {
    CascadeModel seq = stub_cascade();
    CascadeModel fused = stub_cascade();
    auto images = random_images(73, 23);
    Tensor packed({static_cast<int64_t>(images.size()), 3, 2, 2});
    for (size_t i = 0; i < images.size(); ++i)
        std::copy(images[i].data.data.begin(), images[i].data.data.end(),
                  packed.data.begin() + static_cast<int64_t>(i) * 12);

    auto a = classify_batch(seq, images, 1);
    for (int workers : {1, 4}) {
        auto b = classify_batch_fused(fused, packed, workers);
        CHECK(verdicts_equal(a, b));
    }
    CHECK(fused.stage2_invocations.load() == 2 * seq.stage2_invocations.load());
}

TEST_CASE("verdict json carries the family name and probabilities") {
    CascadeModel c = stub_cascade();
    std::string benign = verdict_to_json("s1", classify(c, pixel_image(0.1f)), c.class_index);
    CHECK(benign.find("\"verdict\":\"benign\"") != std::string::npos);
    CHECK(benign.find("\"family\":null") != std::string::npos);
    CHECK(benign.find("\"p_malign\"") != std::string::npos);

    std::string malign = verdict_to_json("s2", classify(c, pixel_image(0.99f)), c.class_index);
    CHECK(malign.find("\"verdict\":\"malign\"") != std::string::npos);
    CHECK(malign.find("\"family\":\"fam24\"") != std::string::npos);
    CHECK(malign.find("\"id\":\"s2\"") != std::string::npos);
}

TEST_CASE("make_cascade validates head widths") {
    auto bad = std::make_shared<ModelGraph>();
    CHECK_THROWS_AS(make_cascade(nullptr, bad, ClassIndex{}), ConfigError);
}
