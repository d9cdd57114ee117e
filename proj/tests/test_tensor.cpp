#include <doctest.h>

#include <cmath>

#include "testutil.hpp"
#include "unlearn/tensor.hpp"

using namespace unlearn;

namespace {

Tensor randn(Shape s, Rng& rng, bool grad = true) {
    Tensor t = Tensor::randn(std::move(s), rng);
    t.set_requires_grad(grad);
    return t;
}

}  // namespace

TEST_CASE("conv2d matches hand values") {
    Tensor x(Shape{1, 1, 3, 3}, 1.0);
    Tensor w(Shape{1, 1, 3, 3}, 1.0);
    Tensor out = conv2d(x, w, Tensor(), 1, 0);
    CHECK(out.shape() == Shape{1, 1, 1, 1});
    CHECK(out.item() == doctest::Approx(9.0));

    Tensor wz(Shape{2, 1, 3, 3}, 0.0);
    Tensor out2 = conv2d(x, wz, Tensor(), 1, 1);
    for (int64_t i = 0; i < out2.numel(); ++i) CHECK(out2.data()[i] == 0.0);
}

TEST_CASE("conv2d matches the nested-loop oracle") {
    Rng rng(11);
    for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
        Tensor x = Tensor::randn(Shape{2, 2, 5, 5}, rng);
        Tensor w = Tensor::randn(Shape{3, 2, 3, 3}, rng);
        Tensor b = Tensor::randn(Shape{3}, rng);
        Tensor got = conv2d(x, w, b, stride, pad);
        Tensor want = testutil::conv2d_loop(x, w, b, stride, pad);
        REQUIRE(got.shape() == want.shape());
        for (int64_t i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
    }
}

TEST_CASE("conv2d shape errors are descriptive") {
    Rng rng(1);
    Tensor x = Tensor::randn(Shape{1, 2, 5, 5}, rng);
    Tensor w = Tensor::randn(Shape{3, 4, 3, 3}, rng);
    CHECK_THROWS_WITH_AS(conv2d(x, w, Tensor(), 1, 1), doctest::Contains("channels"), std::runtime_error);
    Tensor wbig = Tensor::randn(Shape{3, 2, 9, 9}, rng);
    CHECK_THROWS_WITH_AS(conv2d(x, wbig, Tensor(), 1, 0), doctest::Contains("exceeds"), std::runtime_error);
}

TEST_CASE("core op forward values") {
    Tensor z = Tensor::scalar(0.0);
    CHECK(sigmoid(z).item() == doctest::Approx(0.5));

    Tensor s = softmax(Tensor(Shape{1, 3}, {0.0, 0.0, 0.0}), 1);
    for (int i = 0; i < 3; ++i) CHECK(s.data()[i] == doctest::Approx(1.0 / 3.0));

    CHECK_THROWS_AS(softmax(s, 2), std::runtime_error);
    CHECK_THROWS_AS(add(Tensor(Shape{2, 3}), Tensor(Shape{4})), std::runtime_error);

    Tensor a(Shape{2, 2}, {1, -2, 3, -4});
    Tensor r = relu(a);
    CHECK(r.data()[0] == 1.0);
    CHECK(r.data()[1] == 0.0);
    Tensor c = clamp(a, -1.5, 2.0);
    CHECK(c.data()[1] == -1.5);
    CHECK(c.data()[2] == 2.0);
}

TEST_CASE("broadcasting add/mul with gradient reduction") {
    Rng rng(3);
    Tensor a = randn(Shape{2, 3, 4}, rng);
    Tensor b = randn(Shape{4}, rng);
    double err = testutil::gradcheck({a, b}, [&]() { return sum(mul(add(a, b), add(a, b))); });
    CHECK(err < 1e-6);
    Tensor out = add(a, b);
    CHECK(out.shape() == Shape{2, 3, 4});
    CHECK(out.data()[5] == doctest::Approx(a.data()[5] + b.data()[1]));
}

TEST_CASE("backward on trivial graphs") {
    Tensor w(Shape{3}, {1.0, 2.0, 3.0});
    w.set_requires_grad(true);
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = sum(w);
        backward(loss);
    }
    for (int i = 0; i < 3; ++i) CHECK(w.grad_vec()[static_cast<size_t>(i)] == 1.0);

    Tensor w2(Shape{2}, {1.0, 2.0});
    w2.set_requires_grad(true);
    {
        Tape tape;
        TapeScope scope(tape);
        backward(sum(mul(w2, w2)));
    }
    CHECK(w2.grad_vec()[0] == doctest::Approx(2.0));
    CHECK(w2.grad_vec()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward preconditions") {
    Tensor w(Shape{2}, {1.0, 2.0});
    w.set_requires_grad(true);
    Tape tape;
    TapeScope scope(tape);
    Tensor y = mul(w, w);
    CHECK_THROWS_WITH_AS(backward(y), doctest::Contains("scalar"), std::runtime_error);
    Tensor loss = sum(y);
    backward(loss);
    CHECK_THROWS_WITH_AS(backward(loss), doctest::Contains("consumed"), std::runtime_error);
}

TEST_CASE("gradient accumulation is exactly additive") {
    Rng rng(5);
    Tensor x = randn(Shape{4}, rng);
    auto f = [&]() { return sum(mul(x, x)); };
    auto g = [&]() { return sum(scalar_mul(x, 3.0)); };
    std::vector<double> gf, gg, gfg;
    {
        Tape t;
        TapeScope s(t);
        backward(f());
        gf = x.grad_vec();
        x.zero_grad();
    }
    {
        Tape t;
        TapeScope s(t);
        backward(g());
        gg = x.grad_vec();
        x.zero_grad();
    }
    {
        Tape t;
        TapeScope s(t);
        backward(add(f(), g()));
        gfg = x.grad_vec();
        x.zero_grad();
    }
    for (size_t i = 0; i < gf.size(); ++i) CHECK(gfg[i] == gf[i] + gg[i]);
}

TEST_CASE("zero-grad reset reproduces gradients bit for bit") {
    Rng rng(7);
    Tensor x = randn(Shape{2, 1, 4, 4}, rng);
    Tensor w = randn(Shape{2, 1, 3, 3}, rng);
    auto run = [&]() {
        Tape t;
        TapeScope s(t);
        backward(mean(relu(conv2d(x, w, Tensor(), 1, 1))));
        auto g = w.grad_vec();
        w.zero_grad();
        x.zero_grad();
        return g;
    };
    auto g1 = run();
    auto g2 = run();
    CHECK(g1 == g2);
}

TEST_CASE("forward determinism") {
    Rng rng1(42), rng2(42);
    Tensor a = Tensor::randn(Shape{64}, rng1);
    Tensor b = Tensor::randn(Shape{64}, rng2);
    CHECK(a.vec() == b.vec());
    Tensor ya = exp(sigmoid(a));
    Tensor yb = exp(sigmoid(b));
    CHECK(ya.vec() == yb.vec());
}

TEST_CASE("matmul gradients match finite differences for all transpose flags") {
    Rng rng(13);
    Tensor a = randn(Shape{4, 3}, rng);
    Tensor b = randn(Shape{3, 2}, rng);
    double err = testutil::gradcheck({a, b}, [&]() { return sum(mul(matmul(a, b), matmul(a, b))); });
    CHECK(err < 1e-4);

    Tensor at = randn(Shape{3, 4}, rng);
    err = testutil::gradcheck({at, b}, [&]() { return sum(matmul(at, b, true, false)); });
    CHECK(err < 1e-4);
    Tensor bt = randn(Shape{2, 3}, rng);
    err = testutil::gradcheck({a, bt}, [&]() { return sum(matmul(a, bt, false, true)); });
    CHECK(err < 1e-4);
    err = testutil::gradcheck({at, bt}, [&]() { return sum(matmul(at, bt, true, true)); });
    CHECK(err < 1e-4);
    CHECK_THROWS_AS(matmul(a, a), std::runtime_error);
}

TEST_CASE("composed conv graph matches finite differences") {
    Rng rng(17);
    Tensor x = randn(Shape{1, 1, 6, 6}, rng);
    Tensor w = randn(Shape{2, 1, 3, 3}, rng);
    Tensor b = randn(Shape{2}, rng);
    double err = testutil::gradcheck({x, w, b}, [&]() { return mean(relu(conv2d(x, w, b, 1, 1))); });
    CHECK(err < 1e-4);
}

TEST_CASE("gradient checks across the op set") {
    Rng rng(23);
    for (uint64_t seed = 0; seed < 3; ++seed) {
        Rng r(seed + 100);
        Tensor a = randn(Shape{2, 3, 4}, r);
        Tensor b = randn(Shape{2, 3, 4}, r);
        CHECK(testutil::gradcheck({a, b}, [&]() { return sum(mul(sub(a, b), div(a, exp(b)))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return mean(sigmoid(affine(a, 2.0, -0.5))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return sum(log(add(exp(a), exp(scalar_mul(a, -1.0))))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return sum(sqrt(add(mul(a, a), affine(a, 0.0, 0.1)))); }) < 1e-4);
        // keep |a| away from the abs kink and clamp edges
        Tensor far = add(mul(a, a), Tensor(a.shape(), 0.5));
        far.set_requires_grad(true);
        CHECK(testutil::gradcheck({far}, [&]() { return sum(abs(far)); }) < 1e-4);
        CHECK(testutil::gradcheck({far}, [&]() { return sum(clamp(far, -100.0, 100.0)); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return sum(mul(softmax(a, 1), softmax(a, 1))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return sum(mul(sum_axis(a, 1), sum_axis(a, 1))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return mean(reshape(a, Shape{4, 6})); }) < 1e-4);
        CHECK(testutil::gradcheck({a, b}, [&]() { return sum(mul(concat({a, b}, 1), concat({b, a}, 1))); }) < 1e-4);
        CHECK(testutil::gradcheck({a}, [&]() { return sum(mul(slice(a, 1, 1, 2), slice(a, 1, 0, 2))); }) < 1e-4);

        Tensor x4 = randn(Shape{1, 2, 4, 4}, r);
        CHECK(testutil::gradcheck({x4}, [&]() { return mean(max_pool2d(x4)); }) < 1e-4);
        CHECK(testutil::gradcheck({x4}, [&]() { return mean(mul(nearest_upsample2d(x4), nearest_upsample2d(x4))); }) < 1e-4);
    }
}

TEST_CASE("slice and concat validate arguments") {
    Tensor a(Shape{2, 3});
    CHECK_THROWS_AS(slice(a, 1, 2, 2), std::runtime_error);
    CHECK_THROWS_AS(slice(a, 3, 0, 1), std::runtime_error);
    CHECK_THROWS_AS(concat({a, Tensor(Shape{3, 3})}, 1), std::runtime_error);
}

TEST_CASE("dropout scales the kept entries and is deterministic") {
    Rng rng(9);
    Tensor x(Shape{1000}, 1.0);
    Rng d1(4), d2(4);
    Tensor y1 = dropout(x, 0.25, d1, true);
    Tensor y2 = dropout(x, 0.25, d2, true);
    CHECK(y1.vec() == y2.vec());
    double mean_kept = 0;
    for (double v : y1.vec()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
        mean_kept += v;
    }
    CHECK(mean_kept / 1000.0 == doctest::Approx(1.0).epsilon(0.1));
    Tensor ye = dropout(x, 0.25, d1, false);
    CHECK(ye.vec() == x.vec());
    CHECK_THROWS_AS(dropout(x, 1.0, d1, true), std::runtime_error);
}
