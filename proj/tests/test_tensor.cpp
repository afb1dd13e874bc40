#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "minisam/gradcheck.hpp"
#include "minisam/rng.hpp"
#include "minisam/tensor.hpp"

using namespace minisam;

namespace {

Tensor random_tensor(const Shape& shape, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
    Tensor t = Tensor::zeros(shape);
    for (int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// textbook triple loop, the oracle for the Eigen-backed matmul
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int l = 0; l < k; ++l)
                acc += static_cast<double>(a.data()[i * k + l]) * b.data()[l * m + j];
            out.data()[i * m + j] = static_cast<float>(acc);
        }
    return out;
}

}  // namespace

TEST_CASE("tensor handles share storage; clone does not") {
    Tensor a = Tensor::full({2, 3}, 1.5f);
    Tensor b = a;
    b.data()[0] = 9.0f;
    CHECK(a.data()[0] == 9.0f);
    CHECK(a.same_storage(b));
    Tensor c = a.clone();
    c.data()[0] = -1.0f;
    CHECK(a.data()[0] == 9.0f);
    CHECK_FALSE(a.same_storage(c));
}

TEST_CASE("matmul matches the naive triple loop") {
    Rng rng(11);
    for (auto [n, k, m] : {std::tuple{1, 1, 1}, {3, 4, 5}, {7, 16, 2}, {8, 8, 8}}) {
        Tensor a = random_tensor({n, k}, rng);
        Tensor b = random_tensor({k, m}, rng);
        CHECK(max_rel_err(matmul(a, b), naive_matmul(a, b)) < 1e-5f);
    }
}

TEST_CASE("transpose2d round-trips and permutes indices") {
    Rng rng(3);
    Tensor a = random_tensor({3, 5}, rng);
    Tensor t = transpose2d(a);
    REQUIRE(t.shape() == Shape{5, 3});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 5; ++j) CHECK(t.data()[j * 3 + i] == a.data()[i * 5 + j]);
    CHECK(max_rel_err(transpose2d(t), a) == 0.0f);
}

TEST_CASE("gelu matches the tanh formulation") {
    for (float x : {-3.0f, -1.0f, -0.1f, 0.0f, 0.5f, 2.0f}) {
        Tensor t = Tensor::scalar(x);
        const double k = std::sqrt(2.0 / std::numbers::pi);
        const double expected =
            0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
        CHECK(gelu(t).item() == doctest::Approx(expected).epsilon(1e-5));
        // and stays within the approximation's known distance of the exact erf form
        const double exact = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
        CHECK(std::abs(gelu(t).item() - exact) < 1e-3);
    }
}

TEST_CASE("softmax rows sum to 1 and order is preserved") {
    Rng rng(5);
    Tensor x = random_tensor({4, 6}, rng, -3.0f, 3.0f);
    Tensor s = softmax(x, 1);
    for (int i = 0; i < 4; ++i) {
        double sum = 0.0;
        for (int j = 0; j < 6; ++j) {
            sum += s.data()[i * 6 + j];
            CHECK(s.data()[i * 6 + j] > 0.0f);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
    // monotone: bigger logit, bigger probability
    Tensor y = Tensor::from({1, 3}, {1.0f, 2.0f, 0.0f});
    Tensor p = softmax(y, 1);
    CHECK(p.data()[1] > p.data()[0]);
    CHECK(p.data()[0] > p.data()[2]);
}

TEST_CASE("softmax is shift-invariant (stable for large logits)") {
    Tensor x = Tensor::from({1, 3}, {1000.0f, 1001.0f, 999.0f});
    Tensor p = softmax(x, 1);
    Tensor y = Tensor::from({1, 3}, {0.0f, 1.0f, -1.0f});
    Tensor q = softmax(y, 1);
    CHECK(max_rel_err(p, q) < 1e-5f);
}

TEST_CASE("layer_norm output has zero mean and unit variance per row") {
    Rng rng(9);
    const int d = 16;
    Tensor x = random_tensor({3, d}, rng, -2.0f, 5.0f);
    Tensor ln = layer_norm(x, Tensor::full({d}, 1.0f), Tensor::zeros({d}));
    for (int i = 0; i < 3; ++i) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < d; ++j) mean += ln.data()[i * d + j];
        mean /= d;
        for (int j = 0; j < d; ++j) {
            const double c = ln.data()[i * d + j] - mean;
            var += c * c;
        }
        var /= d;
        CHECK(std::abs(mean) < 1e-5);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("conv2d hand case: 3x3 mean filter on a delta image") {
    Tensor x = Tensor::zeros({1, 5, 5});
    x.data()[2 * 5 + 2] = 9.0f;
    Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f / 9.0f);
    Tensor y = conv2d(x, w, Tensor(), 1, 1, 1);
    REQUIRE(y.shape() == Shape{1, 5, 5});
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            const float expected = (std::abs(i - 2) <= 1 && std::abs(j - 2) <= 1) ? 1.0f : 0.0f;
            CHECK(y.data()[i * 5 + j] == doctest::Approx(expected).epsilon(1e-6));
        }
}

TEST_CASE("conv2d stride and output extent") {
    Rng rng(2);
    Tensor x = random_tensor({2, 8, 8}, rng);
    Tensor w = random_tensor({4, 2, 3, 3}, rng);
    Tensor y = conv2d(x, w, Tensor(), 2, 1, 1);
    CHECK(y.shape() == Shape{4, 4, 4});
}

TEST_CASE("grouped conv2d keeps channels independent") {
    Tensor x = Tensor::zeros({2, 3, 3});
    for (int64_t i = 0; i < 9; ++i) x.data()[i] = 1.0f;  // channel 0 ones, channel 1 zeros
    Tensor w = Tensor::full({2, 1, 1, 1}, 5.0f);
    Tensor y = conv2d(x, w, Tensor(), 1, 0, 2);
    CHECK(y.data()[0] == 5.0f);
    CHECK(y.data()[9] == 0.0f);
}

TEST_CASE("transpose_conv2d output extent and sum preservation") {
    Rng rng(4);
    Tensor x = random_tensor({3, 4, 4}, rng);
    Tensor w = Tensor::full({3, 2, 2, 2}, 1.0f);
    Tensor y = transpose_conv2d(x, w, Tensor(), 2);
    REQUIRE(y.shape() == Shape{2, 8, 8});
    // all-ones 2x2 kernel at stride 2: each input pixel scatters to 4 output
    // cells, so every output channel sums to 4x the total input sum
    double in_sum = 0.0, out_sum = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) in_sum += x.data()[i];
    for (int64_t i = 0; i < 64; ++i) out_sum += y.data()[i];
    CHECK(out_sum == doctest::Approx(4.0 * in_sum).epsilon(1e-4));
}

TEST_CASE("bilinear_resize is identity at the same size and exact on constants") {
    Rng rng(6);
    Tensor x = random_tensor({2, 6, 6}, rng);
    CHECK(max_rel_err(bilinear_resize(x, 6, 6), x) < 1e-6f);
    Tensor c = Tensor::full({1, 4, 4}, 3.25f);
    Tensor up = bilinear_resize(c, 9, 9);
    for (int64_t i = 0; i < up.size(); ++i) CHECK(up.data()[i] == doctest::Approx(3.25f));
}

TEST_CASE("structural ops: reshape/slice/concat round trips") {
    Rng rng(8);
    Tensor x = random_tensor({4, 6}, rng);
    Tensor r = reshape(x, {2, 12});
    CHECK(r.shape() == Shape{2, 12});
    CHECK_THROWS(reshape(x, {5, 5}));

    Tensor left = slice_cols(x, 0, 2), right = slice_cols(x, 2, 4);
    CHECK(max_rel_err(concat_cols({left, right}), x) == 0.0f);
    Tensor top = slice_rows(x, 0, 1), bottom = slice_rows(x, 1, 3);
    CHECK(max_rel_err(concat_rows({top, bottom}), x) == 0.0f);
}

TEST_CASE("reductions: sum_all, mean_all, mean_rows") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(sum_all(x).item() == 21.0f);
    CHECK(mean_all(x).item() == doctest::Approx(3.5f));
    Tensor mr = mean_rows(x);
    REQUIRE(mr.shape() == Shape{1, 3});
    CHECK(mr.data()[0] == doctest::Approx(2.5f));
    CHECK(mr.data()[2] == doctest::Approx(4.5f));
}

TEST_CASE("add_rowwise broadcasts the bias over rows") {
    Tensor x = Tensor::zeros({3, 2});
    Tensor b = Tensor::from({2}, {1.0f, -2.0f});
    Tensor y = add_rowwise(x, b);
    for (int i = 0; i < 3; ++i) {
        CHECK(y.data()[i * 2 + 0] == 1.0f);
        CHECK(y.data()[i * 2 + 1] == -2.0f);
    }
}

// ---- tape mechanics ----

TEST_CASE("backward through a small expression matches the hand derivative") {
    // f(x) = sum(x * x) -> df/dx = 2x
    Tensor x = Tensor::from({1, 3}, {1.0f, -2.0f, 0.5f}, /*requires_grad=*/true);
    Tape tape;
    Tensor loss = sum_all(mul(x, x));
    tape.backward(loss);
    REQUIRE(x.has_grad());
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
    CHECK(x.grad()[1] == doctest::Approx(-4.0f));
    CHECK(x.grad()[2] == doctest::Approx(1.0f));
}

TEST_CASE("gradients accumulate when a tensor is used twice") {
    Tensor x = Tensor::from({1, 1}, {3.0f}, true);
    Tape tape;
    Tensor loss = sum_all(add(x, x));  // d/dx = 2
    tape.backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(2.0f));
}

TEST_CASE("no tape, no recording; frozen inputs receive no gradient") {
    Tensor x = Tensor::from({1, 1}, {2.0f}, true);
    Tensor y = mul(x, x);  // outside any tape
    CHECK_FALSE(x.has_grad());
    CHECK(y.item() == 4.0f);

    Tensor frozen = Tensor::from({1, 1}, {5.0f}, false);
    Tape tape;
    Tensor loss = sum_all(mul(frozen, frozen));
    tape.backward(loss);
    CHECK_FALSE(frozen.has_grad());
}

TEST_CASE("finite_difference_grad agrees with backward on a composite function") {
    Rng rng(13);
    Tensor x = random_tensor({2, 4}, rng);
    x.set_requires_grad(true);
    auto f = [](const Tensor& t) {
        Tensor h = gelu(t);
        return sum_all(mul(h, h)).item();
    };
    Tensor fd = finite_difference_grad(f, x);
    Tape tape;
    Tensor h = gelu(x);
    tape.backward(sum_all(mul(h, h)));
    Tensor analytic = Tensor::zeros(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) analytic.data()[i] = x.grad()[i];
    CHECK(max_rel_err(analytic, fd) < 1e-3f);
}

TEST_CASE("full gradient suite passes at the 1e-3 threshold") {
    const auto results = run_gradcheck(0);
    CHECK(results.size() >= 20);  // every op plus end-to-end losses
    for (const auto& r : results) {
        INFO(r.name << " rel err " << r.max_rel_err);
        CHECK(r.pass);
    }
    CHECK(gradcheck_all_pass(results));
}
