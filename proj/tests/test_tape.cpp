#include <doctest.h>

#include <cmath>
#include <random>

#include "lmc/gradcheck.hpp"
#include "lmc/tape.hpp"

using namespace lmc;

namespace {

Tensor random_tensor(Shape s, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::uniform_real_distribution<float> dist(lo, hi);
    Tensor t(std::move(s));
    for (auto& v : t.data) v = dist(rng);
    return t;
}

// Reduces an arbitrary op output to a scalar through a fixed random linear
// functional, so every output coordinate influences the loss.
template <typename T>
typename TapeT<T>::Var scalarize(TapeT<T>& tape, typename TapeT<T>::Var v, uint64_t wseed) {
    int64_t n = tape.val(v).numel();
    Tensor w = random_tensor({n, 1}, wseed);
    Tensor b = Tensor::zeros({1});
    auto flat = tape.reshape(v, {1, n});
    auto out = tape.linear(flat, tape.leaf(w.template cast<T>(), false),
                           tape.leaf(b.template cast<T>(), false));
    return tape.reshape(out, {1});
}

// Generic finite-difference check: runs `build` on a float tape for analytic
// gradients and on double tapes for the numeric shadow.
template <typename Builder>
GradCheckReport fd_check(const std::vector<std::pair<std::string, Tensor>>& params,
                         Builder build, double h = 1e-3, uint64_t wseed = 5) {
    TapeT<float> ft;
    std::vector<TapeT<float>::Var> vars;
    for (const auto& [name, t] : params) vars.push_back(ft.leaf(t, true));
    auto loss = scalarize(ft, build(ft, vars), wseed);
    ft.backward(loss);
    std::vector<Tensor> analytic;
    for (auto v : vars) analytic.push_back(ft.grad(v));
    auto f = [&](const std::vector<TensorD>& shadow) {
        TapeT<double> dt;
        std::vector<TapeT<double>::Var> dvars;
        for (const auto& s : shadow) dvars.push_back(dt.leaf(s, false));
        return dt.val(scalarize(dt, build(dt, dvars), wseed));
    };
    return grad_check(params, f, analytic, h);
}

// Direct 6-nested-loop convolution oracle (double accumulation).
TensorD conv_oracle(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), ww = x.dim(3);
    int64_t o = w.dim(0), kk = w.dim(2);
    int64_t oh = (h + 2 * pad - kk) / stride + 1;
    int64_t ow = (ww + 2 * pad - kk) / stride + 1;
    TensorD out({n, o, oh, ow});
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t oi = 0; oi < o; ++oi)
            for (int64_t r = 0; r < oh; ++r)
                for (int64_t cc = 0; cc < ow; ++cc) {
                    double acc = b[oi];
                    for (int64_t ci = 0; ci < c; ++ci)
                        for (int64_t kr = 0; kr < kk; ++kr)
                            for (int64_t kc = 0; kc < kk; ++kc) {
                                int64_t sr = r * stride + kr - pad;
                                int64_t sc = cc * stride + kc - pad;
                                if (sr < 0 || sr >= h || sc < 0 || sc >= ww) continue;
                                acc += static_cast<double>(x[((ni * c + ci) * h + sr) * ww + sc]) *
                                       static_cast<double>(w[((oi * c + ci) * kk + kr) * kk + kc]);
                            }
                    out[((ni * o + oi) * oh + r) * ow + cc] = acc;
                }
    return out;
}

// Scalar three-loop attention oracle.
TensorD attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* bias) {
    int64_t n = q.dim(0), h = q.dim(1), lq = q.dim(2), dk = q.dim(3);
    int64_t lk = k.dim(2), dv = v.dim(3);
    TensorD out({n, h, lq, dv});
    double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int64_t ni = 0; ni < n; ++ni)
        for (int64_t hi = 0; hi < h; ++hi)
            for (int64_t i = 0; i < lq; ++i) {
                std::vector<double> logits(static_cast<size_t>(lk));
                for (int64_t j = 0; j < lk; ++j) {
                    double dot = 0;
                    for (int64_t d = 0; d < dk; ++d)
                        dot += static_cast<double>(q[((ni * h + hi) * lq + i) * dk + d]) *
                               static_cast<double>(k[((ni * h + hi) * lk + j) * dk + d]);
                    logits[static_cast<size_t>(j)] = dot * scale;
                    if (bias) logits[static_cast<size_t>(j)] += (*bias)[(hi * lq + i) * lk + j];
                }
                double mx = *std::max_element(logits.begin(), logits.end());
                double sum = 0;
                for (auto& z : logits) {
                    z = std::exp(z - mx);
                    sum += z;
                }
                for (int64_t d = 0; d < dv; ++d) {
                    double acc = 0;
                    for (int64_t j = 0; j < lk; ++j)
                        acc += logits[static_cast<size_t>(j)] / sum *
                               static_cast<double>(v[((ni * h + hi) * lk + j) * dv + d]);
                    out[((ni * h + hi) * lq + i) * dv + d] = acc;
                }
            }
    return out;
}

}  // namespace

TEST_CASE("gemm matches a naive triple loop in all transpose modes") {
    std::mt19937 rng(1);
    std::uniform_real_distribution<float> dist(-1, 1);
    int64_t m = 3, n = 4, k = 5;
    std::vector<float> a(static_cast<size_t>(m * k)), b(static_cast<size_t>(k * n));
    for (auto& x : a) x = dist(rng);
    for (auto& x : b) x = dist(rng);
    auto naive = [&](bool ta, bool tb) {
        std::vector<float> c(static_cast<size_t>(m * n), 0.0f);
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0;
                for (int64_t kk = 0; kk < k; ++kk) {
                    float av = ta ? a[static_cast<size_t>(kk * m + i)] : a[static_cast<size_t>(i * k + kk)];
                    float bv = tb ? b[static_cast<size_t>(j * k + kk)] : b[static_cast<size_t>(kk * n + j)];
                    acc += static_cast<double>(av) * bv;
                }
                c[static_cast<size_t>(i * n + j)] = static_cast<float>(acc);
            }
        return c;
    };
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            std::vector<float> c(static_cast<size_t>(m * n));
            detail::gemm<float>(ta, tb, m, n, k, a.data(), b.data(), c.data());
            auto want = naive(ta, tb);
            for (size_t i = 0; i < c.size(); ++i)
                CHECK(c[i] == doctest::Approx(want[i]).epsilon(1e-5));
        }
}

TEST_CASE("conv2d scalar and all-ones cases") {
    TapeT<float> t;
    SUBCASE("1x1 kernel is a scalar multiply-add") {
        auto x = t.leaf(Tensor({1, 1, 1, 1}, {2.0f}));
        auto w = t.leaf(Tensor({1, 1, 1, 1}, {3.0f}));
        auto b = t.leaf(Tensor({1}, {1.0f}));
        CHECK(t.val(t.conv2d(x, w, b, 1, 0))[0] == 7.0f);
    }
    SUBCASE("3x3 ones sum to 9") {
        auto x = t.leaf(Tensor::full({1, 1, 3, 3}, 1.0f));
        auto w = t.leaf(Tensor::full({1, 1, 3, 3}, 1.0f));
        auto b = t.leaf(Tensor::zeros({1}));
        CHECK(t.val(t.conv2d(x, w, b, 1, 0))[0] == 9.0f);
    }
}

TEST_CASE("conv2d matches the loop oracle and finite differences") {
    Tensor x = random_tensor({1, 2, 5, 5}, 10);
    Tensor w = random_tensor({3, 2, 3, 3}, 11);
    Tensor b = random_tensor({3}, 12);
    TapeT<float> t;
    auto out = t.conv2d(t.leaf(x), t.leaf(w), t.leaf(b), 2, 1);
    TensorD want = conv_oracle(x, w, b, 2, 1);
    REQUIRE(t.val(out).numel() == want.numel());
    for (int64_t i = 0; i < want.numel(); ++i)
        CHECK(t.val(out)[i] == doctest::Approx(want[i]).epsilon(1e-5));

    auto rep = fd_check({{"x", x}, {"w", w}, {"b", b}}, [](auto& tape, const auto& v) {
        return tape.conv2d(v[0], v[1], v[2], 2, 1);
    });
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("conv2d rejects mismatched channels") {
    TapeT<float> t;
    auto x = t.leaf(Tensor::zeros({1, 2, 4, 4}));
    auto w = t.leaf(Tensor::zeros({1, 3, 3, 3}));
    auto b = t.leaf(Tensor::zeros({1}));
    CHECK_THROWS_AS(t.conv2d(x, w, b, 1, 0), ShapeError);
}

TEST_CASE("linear identity, hand case, oracle and gradient") {
    TapeT<float> t;
    SUBCASE("identity weight, zero bias") {
        Tensor x = random_tensor({2, 3}, 20);
        Tensor w = Tensor::zeros({3, 3});
        for (int i = 0; i < 3; ++i) w[i * 3 + i] = 1.0f;
        auto out = t.linear(t.leaf(x), t.leaf(w), t.leaf(Tensor::zeros({3})));
        for (int64_t i = 0; i < x.numel(); ++i) CHECK(t.val(out)[i] == x[i]);
    }
    SUBCASE("hand arithmetic") {
        auto out = t.linear(t.leaf(Tensor({1, 2}, {1, 2})),
                            t.leaf(Tensor({2, 2}, {1, 0, 0, 1})), t.leaf(Tensor({2}, {1, 1})));
        CHECK(t.val(out)[0] == 2.0f);
        CHECK(t.val(out)[1] == 3.0f);
    }
    SUBCASE("random 3x4 * 4x5 matches loop oracle + gradcheck") {
        Tensor x = random_tensor({3, 4}, 21), w = random_tensor({4, 5}, 22),
               b = random_tensor({5}, 23);
        auto out = t.linear(t.leaf(x), t.leaf(w), t.leaf(b));
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double acc = b[j];
                for (int64_t k = 0; k < 4; ++k)
                    acc += static_cast<double>(x[i * 4 + k]) * w[k * 5 + j];
                CHECK(t.val(out)[i * 5 + j] == doctest::Approx(acc).epsilon(1e-5));
            }
        auto rep = fd_check({{"x", x}, {"w", w}, {"b", b}}, [](auto& tape, const auto& v) {
            return tape.linear(v[0], v[1], v[2]);
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("linear applies over the last axis of token tensors") {
    Tensor x = random_tensor({2, 3, 4}, 24);
    Tensor w = random_tensor({4, 6}, 25), b = random_tensor({6}, 26);
    auto rep = fd_check({{"x", x}, {"w", w}, {"b", b}}, [](auto& tape, const auto& v) {
        return tape.linear(v[0], v[1], v[2]);
    });
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("batchnorm2d statistics and gradients") {
    Tensor x = random_tensor({4, 3, 2, 2}, 30);
    SUBCASE("train mode normalizes per channel") {
        TapeT<float> t;
        auto out = t.batchnorm2d(t.leaf(x), t.leaf(Tensor::full({3}, 1.0f)),
                                 t.leaf(Tensor::zeros({3})), nullptr, nullptr, true);
        const auto& y = t.val(out);
        for (int64_t c = 0; c < 3; ++c) {
            double mean = 0, var = 0;
            int64_t cnt = 0;
            for (int64_t n = 0; n < 4; ++n)
                for (int64_t i = 0; i < 4; ++i) {
                    mean += y[(n * 3 + c) * 4 + i];
                    ++cnt;
                }
            mean /= cnt;
            for (int64_t n = 0; n < 4; ++n)
                for (int64_t i = 0; i < 4; ++i) {
                    double d = y[(n * 3 + c) * 4 + i] - mean;
                    var += d * d;
                }
            var /= cnt;
            CHECK(std::abs(mean) < 1e-5);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
        }
    }
    SUBCASE("gamma=0 collapses to beta") {
        TapeT<float> t;
        auto out = t.batchnorm2d(t.leaf(x), t.leaf(Tensor::zeros({3})),
                                 t.leaf(Tensor::full({3}, 0.25f)), nullptr, nullptr, true);
        for (int64_t i = 0; i < t.val(out).numel(); ++i) CHECK(t.val(out)[i] == 0.25f);
    }
    SUBCASE("running stats follow momentum 0.1") {
        Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1.0f);
        TapeT<float> t;
        t.batchnorm2d(t.leaf(x), t.leaf(Tensor::full({3}, 1.0f)), t.leaf(Tensor::zeros({3})),
                      &rm, &rv, true);
        for (int64_t c = 0; c < 3; ++c) {
            double mean = 0;
            for (int64_t n = 0; n < 4; ++n)
                for (int64_t i = 0; i < 4; ++i) mean += x[(n * 3 + c) * 4 + i];
            mean /= 16.0;
            double var = 0;
            for (int64_t n = 0; n < 4; ++n)
                for (int64_t i = 0; i < 4; ++i) {
                    double d = x[(n * 3 + c) * 4 + i] - mean;
                    var += d * d;
                }
            var /= 16.0;
            CHECK(rm[c] == doctest::Approx(0.1 * mean).epsilon(1e-4));
            CHECK(rv[c] == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-4));
        }
    }
    SUBCASE("eval mode uses running stats deterministically") {
        Tensor rm = random_tensor({3}, 31), rv = random_tensor({3}, 32, 0.5f, 2.0f);
        TapeT<float> t;
        auto out = t.batchnorm2d(t.leaf(x), t.leaf(Tensor::full({3}, 1.0f)),
                                 t.leaf(Tensor::zeros({3})), &rm, &rv, false);
        for (int64_t c = 0; c < 3; ++c) {
            double denom = std::sqrt(static_cast<double>(rv[c]) + 1e-5);
            CHECK(t.val(out)[c * 4] ==
                  doctest::Approx((x[c * 4] - rm[c]) / denom).epsilon(1e-4));
        }
    }
    SUBCASE("train-mode gradient check") {
        auto rep = fd_check({{"x", x},
                             {"gamma", random_tensor({3}, 33, 0.5f, 1.5f)},
                             {"beta", random_tensor({3}, 34)}},
                            [](auto& tape, const auto& v) {
                                return tape.batchnorm2d(v[0], v[1], v[2], nullptr, nullptr, true);
                            });
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("activations: values and gradients away from kinks") {
    TapeT<float> t;
    auto r = t.leaf(Tensor({3}, {-1, 0, 2}));
    auto rv = t.val(t.relu(r));
    CHECK(rv[0] == 0.0f);
    CHECK(rv[1] == 0.0f);
    CHECK(rv[2] == 2.0f);
    auto h = t.leaf(Tensor({2}, {3, -3}));
    auto hv = t.val(t.hardswish(h));
    CHECK(hv[0] == 3.0f);
    CHECK(hv[1] == 0.0f);

    // sample away from kinks at 0 (relu) and -3/3 (hardswish)
    Tensor x({8}, {-2.5f, -1.2f, -0.4f, 0.3f, 0.9f, 1.7f, 2.4f, 3.6f});
    auto rep1 = fd_check({{"x", x}}, [](auto& tape, const auto& v) { return tape.relu(v[0]); });
    CHECK(rep1.max_rel_err < 1e-4);
    auto rep2 =
        fd_check({{"x", x}}, [](auto& tape, const auto& v) { return tape.hardswish(v[0]); });
    CHECK(rep2.max_rel_err < 1e-4);
}

TEST_CASE("softmax: symmetry, stability, oracle, gradient") {
    TapeT<float> t;
    auto a = t.val(t.softmax(t.leaf(Tensor({1, 2}, {0, 0})), 1));
    CHECK(a[0] == doctest::Approx(0.5));
    CHECK(a[1] == doctest::Approx(0.5));
    auto b = t.val(t.softmax(t.leaf(Tensor({1, 2}, {1000, 0})), 1));
    CHECK(b[0] == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(b[1] == doctest::Approx(0.0).epsilon(1e-6));

    Tensor x = random_tensor({3, 5}, 40, -4.0f, 4.0f);
    auto s = t.val(t.softmax(t.leaf(x), 1));
    for (int64_t r = 0; r < 3; ++r) {
        double sum = 0, mx = x[r * 5];
        for (int64_t j = 0; j < 5; ++j) mx = std::max<double>(mx, x[r * 5 + j]);
        double z = 0;
        for (int64_t j = 0; j < 5; ++j) z += std::exp(static_cast<double>(x[r * 5 + j]) - mx);
        for (int64_t j = 0; j < 5; ++j) {
            double want = std::exp(static_cast<double>(x[r * 5 + j]) - mx) / z;
            CHECK(s[r * 5 + j] == doctest::Approx(want).epsilon(1e-6));
            sum += s[r * 5 + j];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
    auto rep = fd_check({{"x", x}}, [](auto& tape, const auto& v) { return tape.softmax(v[0], 1); });
    CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("attention identities and oracle") {
    SUBCASE("single key: output equals v") {
        Tensor q = random_tensor({1, 2, 1, 3}, 50), k = random_tensor({1, 2, 1, 3}, 51),
               v = random_tensor({1, 2, 1, 4}, 52);
        TapeT<float> t;
        auto out = t.attention(t.leaf(q), t.leaf(k), t.leaf(v));
        for (int64_t i = 0; i < v.numel(); ++i) CHECK(t.val(out)[i] == doctest::Approx(v[i]));
    }
    SUBCASE("zero queries give the mean of v rows") {
        Tensor q = Tensor::zeros({1, 1, 2, 3});
        Tensor k = random_tensor({1, 1, 4, 3}, 53);
        Tensor v = random_tensor({1, 1, 4, 2}, 54);
        TapeT<float> t;
        auto out = t.attention(t.leaf(q), t.leaf(k), t.leaf(v));
        for (int64_t d = 0; d < 2; ++d) {
            double mean = 0;
            for (int64_t j = 0; j < 4; ++j) mean += v[j * 2 + d];
            mean /= 4.0;
            CHECK(t.val(out)[d] == doctest::Approx(mean).epsilon(1e-5));
        }
    }
    SUBCASE("matches the scalar three-loop oracle, with bias") {
        Tensor q = random_tensor({1, 2, 4, 3}, 55), k = random_tensor({1, 2, 4, 3}, 56),
               v = random_tensor({1, 2, 4, 3}, 57), bias = random_tensor({2, 4, 4}, 58);
        TapeT<float> t;
        auto out = t.attention(t.leaf(q), t.leaf(k), t.leaf(v), t.leaf(bias));
        TensorD want = attention_oracle(q, k, v, &bias);
        for (int64_t i = 0; i < want.numel(); ++i)
            CHECK(t.val(out)[i] == doctest::Approx(want[i]).epsilon(1e-5));

        auto rep = fd_check({{"q", q}, {"k", k}, {"v", v}, {"bias", bias}},
                            [](auto& tape, const auto& vs) {
                                return tape.attention(vs[0], vs[1], vs[2], vs[3]);
                            });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("attention weights are row-stochastic") {
        Tensor q = random_tensor({2, 2, 3, 4}, 59, -5.0f, 5.0f);
        Tensor k = random_tensor({2, 2, 5, 4}, 60, -5.0f, 5.0f);
        Tensor v = random_tensor({2, 2, 5, 4}, 61);
        Tensor out, weights;
        detail::attention_forward<float>(q, k, v, nullptr, out, weights);
        for (int64_t row = 0; row < 2 * 2 * 3; ++row) {
            double sum = 0;
            for (int64_t j = 0; j < 5; ++j) {
                CHECK(weights[row * 5 + j] >= 0.0f);
                sum += weights[row * 5 + j];
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
    SUBCASE("shape mismatch is rejected") {
        TapeT<float> t;
        auto q = t.leaf(Tensor::zeros({1, 2, 3, 4}));
        auto k = t.leaf(Tensor::zeros({1, 2, 3, 5}));
        auto v = t.leaf(Tensor::zeros({1, 2, 3, 4}));
        CHECK_THROWS_AS(t.attention(q, k, v), ShapeError);
    }
}

TEST_CASE("pooling values and gradients") {
    TapeT<float> t;
    auto p = t.val(t.avgpool2d(t.leaf(Tensor({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2));
    CHECK(p[0] == 2.5f);
    auto c = t.val(t.avgpool2d(t.leaf(Tensor::full({1, 2, 4, 4}, 0.7f)), 2, 2));
    for (int64_t i = 0; i < c.numel(); ++i) CHECK(c[i] == doctest::Approx(0.7f));
    auto g = t.val(t.global_avgpool(t.leaf(Tensor({1, 1, 2, 2}, {1, 2, 3, 4}))));
    CHECK(g[0] == 2.5f);

    Tensor x = random_tensor({2, 3, 4, 4}, 70);
    auto rep1 = fd_check({{"x", x}},
                         [](auto& tape, const auto& v) { return tape.avgpool2d(v[0], 2, 2); });
    CHECK(rep1.max_rel_err < 1e-4);
    auto rep2 = fd_check({{"x", x}},
                         [](auto& tape, const auto& v) { return tape.global_avgpool(v[0]); });
    CHECK(rep2.max_rel_err < 1e-4);
    auto rep3 =
        fd_check({{"x", random_tensor({2, 5, 3}, 71)}},
                 [](auto& tape, const auto& v) { return tape.mean_tokens(v[0]); });
    CHECK(rep3.max_rel_err < 1e-4);
}

TEST_CASE("structural ops: reshape, permute, concat, gather, index_tokens") {
    SUBCASE("permute4 matches direct index arithmetic") {
        Tensor x = random_tensor({2, 3, 4, 5}, 80);
        TapeT<float> t;
        auto out = t.val(t.permute4(t.leaf(x), {0, 2, 1, 3}));
        REQUIRE(out.shape == Shape{2, 4, 3, 5});
        for (int64_t a = 0; a < 2; ++a)
            for (int64_t b = 0; b < 4; ++b)
                for (int64_t c = 0; c < 3; ++c)
                    for (int64_t d = 0; d < 5; ++d)
                        CHECK(out[((a * 4 + b) * 3 + c) * 5 + d] ==
                              x[((a * 3 + c) * 4 + b) * 5 + d]);
        auto rep = fd_check({{"x", x}}, [](auto& tape, const auto& v) {
            return tape.permute4(v[0], {0, 2, 1, 3});
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("concat_channels stacks NCHW channel-wise") {
        Tensor a = random_tensor({2, 2, 3, 3}, 81), b = random_tensor({2, 1, 3, 3}, 82);
        TapeT<float> t;
        auto out = t.val(t.concat_channels({t.leaf(a), t.leaf(b)}));
        REQUIRE(out.shape == Shape{2, 3, 3, 3});
        CHECK(out[0] == a[0]);
        CHECK(out[2 * 9] == b[0]);
        auto rep = fd_check({{"a", a}, {"b", b}}, [](auto& tape, const auto& v) {
            return tape.concat_channels({v[0], v[1]});
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("gather scatters gradient back to the table") {
        Tensor table = random_tensor({2, 4}, 83);
        auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 1, 1, 3, 4, 7});
        TapeT<float> t;
        auto out = t.val(t.gather(t.leaf(table), idx, {2, 3}));
        CHECK(out[1] == table[1]);
        CHECK(out[2] == table[1]);
        auto rep = fd_check({{"table", table}}, [idx](auto& tape, const auto& v) {
            return tape.gather(v[0], idx, {2, 3});
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("index_tokens selects rows") {
        Tensor x = random_tensor({2, 4, 3}, 84);
        auto idx = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 2});
        TapeT<float> t;
        auto out = t.val(t.index_tokens(t.leaf(x), idx));
        REQUIRE(out.shape == Shape{2, 2, 3});
        for (int64_t d = 0; d < 3; ++d) {
            CHECK(out[d] == x[d]);
            CHECK(out[3 + d] == x[2 * 3 + d]);
        }
        auto rep = fd_check({{"x", x}}, [idx](auto& tape, const auto& v) {
            return tape.index_tokens(v[0], idx);
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
}

TEST_CASE("cross_entropy values, gradient formula, and contract errors") {
    SUBCASE("uniform logits over 26 classes give ln 26") {
        TapeT<float> t;
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0});
        auto loss = t.cross_entropy(t.leaf(Tensor::zeros({1, 26})), labels);
        CHECK(t.val(loss)[0] == doctest::Approx(std::log(26.0)).epsilon(1e-5));
    }
    SUBCASE("dominant true logit drives loss to zero") {
        TapeT<float> t;
        Tensor logits = Tensor::zeros({1, 5});
        logits[2] = 30.0f;
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{2});
        CHECK(t.val(t.cross_entropy(t.leaf(logits), labels))[0] < 1e-6);
    }
    SUBCASE("gradient equals (softmax - onehot)/N") {
        Tensor logits = random_tensor({4, 26}, 90, -2.0f, 2.0f);
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{3, 0, 25, 11});
        TapeT<float> t;
        auto lv = t.leaf(logits, true);
        t.backward(t.cross_entropy(lv, labels));
        Tensor g = t.grad(lv);
        for (int64_t r = 0; r < 4; ++r) {
            double mx = logits[r * 26];
            for (int64_t j = 0; j < 26; ++j) mx = std::max<double>(mx, logits[r * 26 + j]);
            double z = 0;
            for (int64_t j = 0; j < 26; ++j)
                z += std::exp(static_cast<double>(logits[r * 26 + j]) - mx);
            for (int64_t j = 0; j < 26; ++j) {
                double p = std::exp(static_cast<double>(logits[r * 26 + j]) - mx) / z;
                double want = (p - (j == (*labels)[static_cast<size_t>(r)] ? 1.0 : 0.0)) / 4.0;
                CHECK(g[r * 26 + j] == doctest::Approx(want).epsilon(1e-5));
            }
        }
        auto rep = fd_check({{"logits", logits}}, [labels](auto& tape, const auto& v) {
            return tape.cross_entropy(v[0], labels);
        });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("label out of range") {
        TapeT<float> t;
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{5});
        CHECK_THROWS_AS(t.cross_entropy(t.leaf(Tensor::zeros({1, 5})), labels), InvalidInput);
    }
    SUBCASE("non-finite logits") {
        TapeT<float> t;
        Tensor bad = Tensor::zeros({1, 3});
        bad[1] = std::numeric_limits<float>::infinity();
        auto labels = std::make_shared<std::vector<int>>(std::vector<int>{0});
        CHECK_THROWS_AS(t.cross_entropy(t.leaf(bad), labels), NumericError);
    }
}

TEST_CASE("grad_check harness contract") {
    SUBCASE("linear toy graph passes") {
        auto rep = fd_check({{"x", random_tensor({2, 3}, 97)},
                             {"w", random_tensor({3, 2}, 95)},
                             {"b", random_tensor({2}, 96)}},
                            [](auto& tape, const auto& v) {
                                return tape.linear(v[0], v[1], v[2]);
                            });
        CHECK(rep.max_rel_err < 1e-4);
    }
    SUBCASE("constant graph has zero gradients both ways") {
        Tensor p = random_tensor({2}, 98);
        auto f = [](const std::vector<TensorD>&) { return TensorD::scalar(3.5); };
        auto rep = grad_check({{"p", p}}, f, {Tensor::zeros({2})});
        CHECK(rep.max_rel_err == 0.0);
    }
    SUBCASE("non-scalar graph output is rejected") {
        Tensor p = random_tensor({2}, 99);
        auto f = [](const std::vector<TensorD>& s) { return s[0]; };
        CHECK_THROWS_AS(grad_check({{"p", p}}, f, {Tensor::zeros({2})}), InvalidInput);
    }
}
