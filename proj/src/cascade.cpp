#include "lmc/cascade.hpp"

#include <cmath>
#include <mutex>
#include <nlohmann/json.hpp>
#include <thread>

#include "lmc/errors.hpp"
#include "lmc/model_exec.hpp"

namespace lmc {

void CascadeModel::validate() const {
    if (!stage1 || !stage2) throw ConfigError("cascade: both stage models must be set");
    if (!(benign_threshold > 0.0 && benign_threshold < 1.0))
        throw ConfigError("cascade: benign_threshold must be in (0,1)");
    if (class_index.names.size() != static_cast<size_t>(kNumClasses))
        throw ConfigError("cascade: class_names must have exactly 26 entries");
}

CascadeModel make_cascade(std::shared_ptr<ModelGraph> binary_model,
                          std::shared_ptr<ModelGraph> family_model, ClassIndex class_index,
                          double benign_threshold) {
    if (!binary_model || !family_model) throw ConfigError("make_cascade: null model");
    if (model_num_classes(*binary_model) != 2)
        throw ConfigError("make_cascade: binary model must have a 2-way head");
    if (model_num_classes(*family_model) != 25)
        throw ConfigError("make_cascade: family model must have a 25-way head");
    CascadeModel c;
    c.stage1 = [binary_model](const Tensor& batch) {
        return model_logits(*binary_model, batch, false);
    };
    c.stage2 = [family_model](const Tensor& batch) {
        return model_logits(*family_model, batch, false);
    };
    c.benign_threshold = benign_threshold;
    c.class_index = std::move(class_index);
    c.validate();
    return c;
}

namespace {

// softmax over one logit row, double accumulation
std::vector<double> softmax_row(const float* row, int64_t c) {
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    std::vector<double> p(static_cast<size_t>(c));
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) {
        p[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
        sum += p[static_cast<size_t>(j)];
    }
    for (auto& v : p) v /= sum;
    return p;
}

}  // namespace

Verdict classify(const CascadeModel& cascade, const ImageTensor& image) {
    const Tensor& img = image.data;
    if (img.rank() != 3) throw ShapeError("classify: image must be (3,H,W)");
    Tensor batch({1, img.dim(0), img.dim(1), img.dim(2)}, img.data);
    Tensor s1 = cascade.stage1(batch);
    if (s1.rank() != 2 || s1.dim(1) != 2) throw ConfigError("classify: stage-1 output must be (N,2)");
    if (!s1.all_finite()) throw NumericError("classify: non-finite stage-1 logits");
    auto p1 = softmax_row(s1.data.data(), 2);
    Verdict v;
    v.stage1_prob_malign = p1[1];
    if (v.stage1_prob_malign < cascade.benign_threshold) {
        v.kind = VerdictKind::Benign;
        v.confidence = 1.0 - v.stage1_prob_malign;
        return v;
    }
    cascade.stage2_invocations.fetch_add(1, std::memory_order_relaxed);
    Tensor s2 = cascade.stage2(batch);
    if (s2.rank() != 2 || s2.dim(1) != 25)
        throw ConfigError("classify: stage-2 output must be (N,25)");
    if (!s2.all_finite()) throw NumericError("classify: non-finite stage-2 logits");
    auto p2 = softmax_row(s2.data.data(), 25);
    int best = 0;
    for (int j = 1; j < 25; ++j)
        if (p2[static_cast<size_t>(j)] > p2[static_cast<size_t>(best)]) best = j;  // ties: lowest index
    v.kind = VerdictKind::Malign;
    v.family = best;
    v.confidence = p2[static_cast<size_t>(best)];
    return v;
}

std::vector<Verdict> classify_batch(const CascadeModel& cascade,
                                    const std::vector<ImageTensor>& images, int workers) {
    if (workers < 1) throw InvalidInput("classify_batch: workers must be >= 1");
    std::vector<Verdict> out(images.size());
    if (images.empty()) return out;
    if (workers == 1) {
        for (size_t i = 0; i < images.size(); ++i) out[i] = classify(cascade, images[i]);
        return out;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&]() {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= images.size()) return;
            try {
                out[i] = classify(cascade, images[i]);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    for (int w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
    return out;
}

std::string verdict_to_json(const std::string& id, const Verdict& v,
                            const ClassIndex& class_index) {
    nlohmann::json j;
    j["id"] = id;
    if (v.kind == VerdictKind::Benign) {
        j["verdict"] = "benign";
        j["family"] = nullptr;
    } else {
        j["verdict"] = "malign";
        int cls = class_index.family_to_class(*v.family);
        j["family"] = class_index.names.empty() ? std::to_string(*v.family)
                                                : class_index.names[static_cast<size_t>(cls)];
    }
    j["confidence"] = v.confidence;
    j["p_malign"] = v.stage1_prob_malign;
    return j.dump();
}

}  // namespace lmc
