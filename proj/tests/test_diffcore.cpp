#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "defectforge/adam.hpp"
#include "defectforge/archive.hpp"
#include "defectforge/rng.hpp"
#include "defectforge/tensor.hpp"
#include "doctest.h"

using namespace df;

namespace {

template <class T>
TensorPtr<T> random_tensor(std::vector<int> shape, Rng& rng, bool requires_grad = false,
                           double lo = -1.0, double hi = 1.0) {
    std::vector<T> vals(detail::shape_numel(shape));
    for (auto& v : vals) v = static_cast<T>(rng.uniform(lo, hi));
    return make_tensor<T>(std::move(shape), std::move(vals), requires_grad);
}

// Six-loop convolution oracle with explicit index reflection.
template <class T>
std::vector<T> conv_oracle(const std::vector<T>& in, int h, int w, int ci,
                           const std::vector<T>& ker, int co, int k, int stride) {
    auto reflect = [](int i, int n) {
        if (n == 1) return 0;
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * n - 2 - i;
        }
        return i;
    };
    const int pad = k / 2;
    const int oh = (h + stride - 1) / stride, ow = (w + stride - 1) / stride;
    std::vector<T> out(static_cast<std::size_t>(co) * oh * ow, T(0));
    for (int oc = 0; oc < co; ++oc)
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x)
                for (int ic = 0; ic < ci; ++ic)
                    for (int ky = 0; ky < k; ++ky)
                        for (int kx = 0; kx < k; ++kx) {
                            const int iy = reflect(y * stride - pad + ky, h);
                            const int ix = reflect(x * stride - pad + kx, w);
                            out[(static_cast<std::size_t>(oc) * oh + y) * ow + x] +=
                                in[(static_cast<std::size_t>(ic) * h + iy) * w + ix] *
                                ker[((static_cast<std::size_t>(oc) * ci + ic) * k + ky) * k + kx];
                        }
    return out;
}

}  // namespace

TEST_CASE("make_tensor rejects non-finite values") {
    CHECK_THROWS_AS(make_tensor<float>({2}, {1.0f, std::nanf("")}),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_tensor<double>({1}, {INFINITY}), std::invalid_argument);
}

TEST_CASE("conv2d_reflect: 1x1 identity kernel is a no-op") {
    Rng rng(1);
    auto x = random_tensor<float>({1, 1, 4, 4}, rng);
    auto k = make_tensor<float>({1, 1, 1, 1}, {1.0f});
    auto y = conv2d_reflect(x, k);
    CHECK(y->values == x->values);
}

TEST_CASE("conv2d_reflect: constant input stays constant under averaging kernel") {
    auto x = make_tensor<float>({1, 1, 5, 6}, std::vector<float>(30, 0.7f));
    auto k = make_tensor<float>({1, 1, 3, 3}, std::vector<float>(9, 1.0f / 9.0f));
    auto y = conv2d_reflect(x, k);
    for (float v : y->values) CHECK(v == doctest::Approx(0.7f));
}

TEST_CASE("conv2d_reflect: matches six-loop oracle") {
    Rng rng(2);
    for (int stride : {1, 2}) {
        auto x = random_tensor<double>({1, 1, 4, 4}, rng);
        auto k = random_tensor<double>({1, 1, 3, 3}, rng);
        auto y = conv2d_reflect(x, k, stride);
        const auto oracle = conv_oracle(x->values, 4, 4, 1, k->values, 1, 3, stride);
        REQUIRE(y->numel() == oracle.size());
        for (std::size_t i = 0; i < oracle.size(); ++i)
            CHECK(y->values[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
    }
}

TEST_CASE("conv2d_reflect: multi-channel strided oracle check") {
    Rng rng(3);
    auto x = random_tensor<double>({1, 3, 7, 5}, rng);
    auto k = random_tensor<double>({4, 3, 5, 5}, rng);
    auto y = conv2d_reflect(x, k, 2);
    CHECK(y->shape == std::vector<int>{1, 4, 4, 3});
    const auto oracle = conv_oracle(x->values, 7, 5, 3, k->values, 4, 5, 2);
    for (std::size_t i = 0; i < oracle.size(); ++i)
        CHECK(y->values[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
}

TEST_CASE("conv2d_reflect: stride-1 preserves shape for odd kernels") {
    Rng rng(4);
    for (int k : {1, 3, 5, 7, 9}) {
        auto x = random_tensor<float>({1, 2, 11, 13}, rng);
        auto ker = random_tensor<float>({3, 2, k, k}, rng);
        auto y = conv2d_reflect(x, ker, 1);
        CHECK(y->shape == std::vector<int>{1, 3, 11, 13});
    }
}

TEST_CASE("conv2d_reflect: error paths") {
    Rng rng(5);
    auto x = random_tensor<float>({1, 2, 4, 4}, rng);
    CHECK_THROWS_AS(conv2d_reflect(x, random_tensor<float>({1, 2, 2, 2}, rng)),
                    UnsupportedKernel);
    CHECK_THROWS_AS(conv2d_reflect(x, random_tensor<float>({1, 3, 3, 3}, rng)),
                    ShapeMismatch);
}

TEST_CASE("instance_norm: constant channel maps to beta") {
    auto x = make_tensor<float>({1, 2, 3, 3}, std::vector<float>(18, 0.4f));
    auto gamma = make_tensor<float>({2}, {1.0f, 1.0f});
    auto beta = make_tensor<float>({2}, {0.0f, 0.7f});
    auto y = instance_norm(x, gamma, beta, 1e-5f);
    for (int i = 0; i < 9; ++i) CHECK(y->values[i] == doctest::Approx(0.0f));
    for (int i = 9; i < 18; ++i) CHECK(y->values[i] == doctest::Approx(0.7f));
}

TEST_CASE("instance_norm: closed-form +-1 channel") {
    std::vector<double> vals(16);
    for (int i = 0; i < 16; ++i) vals[i] = (i % 2 == 0) ? -1.0 : 1.0;
    auto x = make_tensor<double>({1, 1, 4, 4}, vals);
    auto y = instance_norm(x, make_tensor<double>({1}, {1.0}),
                           make_tensor<double>({1}, {0.0}), 1e-5);
    const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
    for (int i = 0; i < 16; ++i)
        CHECK(y->values[i] == doctest::Approx((i % 2 == 0) ? -expect : expect).epsilon(1e-12));
}

TEST_CASE("primitive suite point values") {
    auto x = make_tensor<float>({2}, {-2.0f, 3.0f});
    auto r = relu(x);
    CHECK(r->values[0] == 0.0f);
    CHECK(r->values[1] == 3.0f);
    CHECK(tanh_op(make_tensor<float>({1}, {0.0f}))->values[0] == 0.0f);

    auto u = upsample2x(make_tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}));
    CHECK(u->shape == std::vector<int>{1, 1, 4, 4});
    CHECK(u->values == std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});

    auto a = make_tensor<float>({2, 2}, {1, 2, 3, 4});
    auto b = make_tensor<float>({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(a, b)->values == std::vector<float>{19, 22, 43, 50});
    CHECK(transpose2d(a)->values == std::vector<float>{1, 3, 2, 4});

    auto cat = concat_channels(make_tensor<float>({1, 1, 1, 2}, {1, 2}),
                               make_tensor<float>({1, 2, 1, 2}, {3, 4, 5, 6}));
    CHECK(cat->shape == std::vector<int>{1, 3, 1, 2});
    CHECK(cat->values == std::vector<float>{1, 2, 3, 4, 5, 6});
}

TEST_CASE("backward: sum and sum of squares") {
    auto x = make_tensor<float>({3}, {1.0f, 2.0f, 3.0f}, true);
    backward(sum(x));
    CHECK(x->grad == std::vector<float>{1, 1, 1});

    auto y = make_tensor<float>({3}, {1.0f, 2.0f, 3.0f}, true);
    backward(sum(mul(y, y)));
    CHECK(y->grad == std::vector<float>{2, 4, 6});
}

TEST_CASE("backward: rejects non-scalar output") {
    auto x = make_tensor<float>({2}, {1.0f, 2.0f}, true);
    CHECK_THROWS_AS(backward(add(x, x)), NotScalar);
}

TEST_CASE("backward: reused subexpression accumulates both paths") {
    auto x = make_tensor<double>({1}, {3.0}, true);
    auto sq = mul(x, x);
    backward(add(sq, sq));  // d/dx (2x^2) = 4x
    CHECK(x->grad[0] == doctest::Approx(12.0));
}

TEST_CASE("grad_check: exact quadratic") {
    Rng rng(6);
    auto x = random_tensor<double>({5}, rng);
    const double err = grad_check<double>(
        [](const TensorPtr<double>& t) { return sum(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-8);
}

TEST_CASE("grad_check: composite conv -> instance_norm -> relu -> mean") {
    Rng rng(7);
    auto x = random_tensor<double>({1, 2, 5, 5}, rng, false, 0.1, 1.0);
    auto k = random_tensor<double>({3, 2, 3, 3}, rng);
    auto gamma = make_tensor<double>({3}, {1.0, 0.9, 1.1});
    auto beta = make_tensor<double>({3}, {0.05, 0.2, -0.03});
    const double err = grad_check<double>(
        [&](const TensorPtr<double>& t) {
            auto y = instance_norm(conv2d_reflect(t, k, 1), gamma, beta, 1e-5);
            // keep away from the relu kink for a smooth check
            return mean(relu(add_scalar(y, 3.0)));
        },
        x, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("grad_check: every primitive passes at f64") {
    Rng rng(8);
    auto x = random_tensor<double>({1, 2, 4, 4}, rng, false, 0.2, 1.0);
    auto other = random_tensor<double>({1, 2, 4, 4}, rng, false, 0.2, 1.0);

    using Fn = std::function<TensorPtr<double>(const TensorPtr<double>&)>;
    const std::vector<Fn> fns = {
        [&](const TensorPtr<double>& t) { return sum(add(t, other)); },
        [&](const TensorPtr<double>& t) { return sum(sub(other, t)); },
        [&](const TensorPtr<double>& t) { return sum(mul(t, other)); },
        [&](const TensorPtr<double>& t) { return sum(scale(t, 2.5)); },
        [&](const TensorPtr<double>& t) { return sum(tanh_op(t)); },
        [&](const TensorPtr<double>& t) { return mean(relu(t)); },
        [&](const TensorPtr<double>& t) { return sum(upsample2x(t)); },
        [&](const TensorPtr<double>& t) { return sum(spatial_crop(t, 1, 1, 2, 2)); },
        [&](const TensorPtr<double>& t) { return sum(concat_channels(t, other)); },
        [&](const TensorPtr<double>& t) {
            return sum(matmul(reshape(t, {4, 8}), reshape(other, {8, 4})));
        },
        [&](const TensorPtr<double>& t) {
            return sum(mul(transpose2d(reshape(t, {8, 4})), transpose2d(reshape(t, {8, 4}))));
        },
    };
    for (const auto& fn : fns) CHECK(grad_check<double>(fn, x, 1e-6) < 1e-6);
}

TEST_CASE("softmax_ce_mean: uniform logits give ln 2, gradient checks out") {
    auto logits = make_tensor<double>({1, 2, 2, 2}, std::vector<double>(8, 0.0));
    const std::vector<int> labels = {0, 1, 0, 1};
    CHECK(softmax_ce_mean(logits, labels)->values[0] ==
          doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Rng rng(9);
    auto rnd = random_tensor<double>({1, 2, 4, 4}, rng);
    std::vector<int> rlabels(16);
    for (auto& l : rlabels) l = rng.uniform_index(2);
    const double err = grad_check<double>(
        [&](const TensorPtr<double>& t) { return softmax_ce_mean(t, rlabels); }, rnd, 1e-6);
    CHECK(err < 1e-6);
}

TEST_CASE("adam_step: zero gradient leaves params unchanged") {
    auto p = make_tensor<float>({3}, {0.5f, -0.2f, 0.9f}, true);
    const auto before = p->values;
    std::vector<TensorPtr<float>> params = {p};
    AdamState<float> st;
    zero_grads(params);
    adam_step(params, st);
    CHECK(p->values == before);
    CHECK(st.step == 1);
}

TEST_CASE("adam_step: closed-form first step with unit gradient") {
    auto p = make_tensor<double>({4}, std::vector<double>(4, 1.0), true);
    p->ensure_grad();
    for (auto& g : p->grad) g = 1.0;
    std::vector<TensorPtr<double>> params = {p};
    AdamState<double> st;
    st.lr = 1e-3;
    adam_step(params, st);
    // mhat = vhat = 1 after bias correction: delta = -lr / (1 + eps)
    for (double v : p->values)
        CHECK(v == doctest::Approx(1.0 - 1e-3 * (1.0 / (1.0 + 1e-8))).epsilon(1e-12));
}

TEST_CASE("adam_step: drives x^2 toward zero monotonically at first") {
    auto x = make_tensor<double>({1}, {1.0}, true);
    std::vector<TensorPtr<double>> params = {x};
    AdamState<double> st;
    st.lr = 1e-2;
    double prev = std::abs(x->values[0]);
    for (int i = 0; i < 100; ++i) {
        zero_grads(params);
        backward(mul(x, x));
        adam_step(params, st);
        const double now = std::abs(x->values[0]);
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("determinism: identical seeds give bit-identical forward and grads") {
    auto run = [] {
        Rng rng(1234);
        auto x = random_tensor<float>({1, 2, 6, 6}, rng, true);
        auto k = random_tensor<float>({2, 2, 3, 3}, rng, true);
        auto loss = mean(mul(conv2d_reflect(x, k), conv2d_reflect(x, k)));
        backward(loss);
        return std::tuple{loss->values[0], x->grad, k->grad};
    };
    CHECK(run() == run());
}

TEST_CASE("tensor archive: bit-exact round-trip") {
    Rng rng(10);
    std::vector<ArchiveEntry> entries;
    entries.push_back(to_entry("layer0.weight", random_tensor<float>({4, 3, 3, 3}, rng)));
    entries.push_back(to_entry("layer0.gamma", random_tensor<float>({4}, rng)));
    const std::string path = "test_diffcore_tmp.dstw";
    write_archive(path, entries);
    const auto back = read_archive(path);
    REQUIRE(back.size() == entries.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].name == entries[i].name);
        CHECK(back[i].shape == entries[i].shape);
        CHECK(back[i].data == entries[i].data);
    }
    CHECK_THROWS_AS(read_archive("does_not_exist.dstw"), IoError);
    std::remove(path.c_str());
}
