#include <doctest.h>

#include <cmath>

#include "testutil.hpp"
#include "unlearn/checkpoint.hpp"
#include "unlearn/losses.hpp"
#include "unlearn/lora.hpp"
#include "unlearn/nets.hpp"

using namespace unlearn;

namespace {

SegNet frozen_segnet(uint64_t seed) {
    Rng rng(seed);
    return clone_frozen(SegNet::build(16, 32, 64, rng));
}

}  // namespace

TEST_CASE("zero-init adapters leave the forward bitwise unchanged") {
    SegNet teacher = frozen_segnet(1);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.05, 7);
    Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor x = Tensor::randn(Shape{2, 1, 32, 32}, rng);
        SegOut t = forward_seg(teacher, x);
        SegOut s = forward_seg(teacher, x, &set);  // eval mode: no dropout
        CHECK(t.logits.vec() == s.logits.vec());
        CHECK(t.features.vec() == s.features.vec());
    }
}

TEST_CASE("policy selects exactly the decoder convs and the head") {
    SegNet teacher = frozen_segnet(3);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.05, 7);
    std::vector<std::string> targets;
    for (const auto& a : set.adapters) targets.push_back(a.target);
    CHECK(targets == std::vector<std::string>{"dec1.conv1", "dec1.conv2", "dec2.conv1", "dec2.conv2", "head"});
    for (const auto& a : set.adapters) CHECK(teacher.layer(a.target).tag != "encoder");
    CHECK_THROWS_WITH_AS(inject(teacher, {"nonsense"}, 8, 32.0, 0.0, 7), doctest::Contains("unknown tag"),
                         std::runtime_error);
}

TEST_CASE("inject requires frozen weights") {
    Rng rng(4);
    SegNet net = SegNet::build(16, 32, 64, rng);  // build leaves weights trainable
    CHECK_THROWS_WITH_AS(inject(net, {"head"}, 4, 32.0, 0.0, 7), doctest::Contains("frozen"), std::runtime_error);
}

TEST_CASE("trainable count per adapter is r*(d+k)") {
    Rng rng(5);
    SegNet teacher = clone_frozen(SegNet::build(16, 64, 64, rng));
    AdapterSet set = inject(teacher, {"decoder"}, 8, 32.0, 0.0, 7);
    const LoraAdapter* ad = set.find("dec1.conv2");  // 64 x (64*3*3) kernel view
    REQUIRE(ad != nullptr);
    CHECK(ad->d == 64);
    CHECK(ad->k == 576);
    CHECK(ad->A.numel() + ad->B.numel() == 8 * (64 + 576));
}

TEST_CASE("rank rules: clamp on degenerate rows, error when r exceeds min(d,k)/2") {
    CHECK(effective_rank(8, 1, 16) == 1);
    CHECK(effective_rank(8, 64, 576) == 8);
    CHECK(effective_rank(8, 16, 144) == 8);
    CHECK_THROWS_WITH_AS(effective_rank(8, 16, 9), doctest::Contains("too large"), std::runtime_error);

    SegNet teacher = frozen_segnet(6);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    CHECK(set.find("head")->rank == 1);
    CHECK(set.find("head")->scale == doctest::Approx(4.0));  // alpha / requested r
    CHECK(set.find("dec1.conv1")->rank == 8);

    Rng rng(7);
    ClsNet cls = clone_frozen(ClsNet::build(16, 32, 3, rng));
    // trunk.conv1 views as [16,9]: max rank 4
    CHECK_THROWS_WITH_AS(inject(cls, {"trunk"}, 8, 32.0, 0.0, 7), doctest::Contains("too large"),
                         std::runtime_error);
    // head views as [3,32]: max rank 1, so r=4 with head in the policy is rejected
    CHECK_THROWS_AS(inject(cls, {"trunk", "head"}, 4, 32.0, 0.0, 7), std::runtime_error);
    AdapterSet cset = inject(cls, {"trunk"}, 4, 32.0, 0.0, 7);
    CHECK(cset.find("trunk.conv1")->rank == 4);
    CHECK(cset.find("trunk.conv2")->rank == 4);
    AdapterSet call = inject(cls, {"trunk", "head"}, 1, 32.0, 0.0, 7);
    CHECK(call.find("head")->rank == 1);
}

TEST_CASE("adapted forward against the factored-path oracle") {
    SegNet teacher = frozen_segnet(8);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    Rng rng(9);
    for (auto& ad : set.adapters) {
        for (auto& v : ad.B.vec()) v = rng.normal(0.0, 0.05);
    }
    // oracle: y = conv(x, W) + scale * conv(x, reshape(B*A)) computed with loop conv
    const Layer& layer = teacher.layer("dec2.conv2");
    const LoraAdapter* ad = set.find("dec2.conv2");
    Tensor x = Tensor::randn(Shape{1, 16, 8, 8}, rng);

    Tensor base = testutil::conv2d_loop(x, layer.w, layer.b, 1, 1);
    Tensor delta_kernel(layer.w.shape());
    for (int i = 0; i < ad->d; ++i)
        for (int j = 0; j < ad->k; ++j) {
            double acc = 0;
            for (int r = 0; r < ad->rank; ++r)
                acc += ad->B.data()[i * ad->rank + r] * ad->A.data()[static_cast<int64_t>(r) * ad->k + j];
            delta_kernel.data()[static_cast<int64_t>(i) * ad->k + j] = acc * ad->scale;
        }
    Tensor branch = testutil::conv2d_loop(x, delta_kernel, Tensor(), 1, 1);

    Tensor got = conv2d(x, adapted_weight(layer, *ad), layer.b, 1, 1);
    for (int64_t i = 0; i < got.numel(); ++i) {
        CHECK(std::fabs(got.data()[i] - (base.data()[i] + branch.data()[i])) < 1e-6);
    }
}

TEST_CASE("adapter-only output with W=0 equals scale*B(Ax)") {
    Rng rng(10);
    ClsNet cls = clone_frozen(ClsNet::build(16, 32, 4, rng));
    Layer& head = cls.layer("head");
    std::fill(head.w.vec().begin(), head.w.vec().end(), 0.0);
    std::fill(head.b.vec().begin(), head.b.vec().end(), 0.0);
    AdapterSet set = inject(cls, {"head"}, 2, 32.0, 0.0, 7);
    LoraAdapter* ad = set.find("head");
    for (auto& v : ad->B.vec()) v = rng.normal();

    Tensor x = Tensor::randn(Shape{3, 32}, rng);
    Tensor got = matmul(x, adapted_weight(head, *ad), false, true);
    // scale * B (A x) with explicit loops
    for (int n = 0; n < 3; ++n) {
        std::vector<double> ax(static_cast<size_t>(ad->rank), 0.0);
        for (int r = 0; r < ad->rank; ++r)
            for (int j = 0; j < ad->k; ++j)
                ax[static_cast<size_t>(r)] += ad->A.data()[static_cast<int64_t>(r) * ad->k + j] * x.data()[n * 32 + j];
        for (int i = 0; i < ad->d; ++i) {
            double acc = 0;
            for (int r = 0; r < ad->rank; ++r) acc += ad->B.data()[i * ad->rank + r] * ax[static_cast<size_t>(r)];
            CHECK(got.data()[n * ad->d + i] == doctest::Approx(ad->scale * acc).epsilon(1e-10));
        }
    }
}

TEST_CASE("merge and remove state machine") {
    SegNet teacher = frozen_segnet(11);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    Rng rng(12);
    for (auto& ad : set.adapters)
        for (auto& v : ad.B.vec()) v = rng.normal(0.0, 0.05);

    Tensor x = Tensor::randn(Shape{1, 1, 32, 32}, rng);
    SegOut teacher_out = forward_seg(teacher, x);

    SegNet restored = remove(teacher, set);
    SegOut restored_out = forward_seg(restored, x);
    CHECK(restored_out.logits.vec() == teacher_out.logits.vec());

    SegNet merged = merge(teacher, set);
    SegOut merged_out = forward_seg(merged, x);
    SegOut factored_out = forward_seg(teacher, x, &set);
    for (int64_t i = 0; i < merged_out.logits.numel(); ++i)
        CHECK(std::fabs(merged_out.logits.data()[i] - factored_out.logits.data()[i]) < 1e-6);

    CHECK_THROWS_WITH_AS(merge(merged, set), doctest::Contains("already merged"), std::runtime_error);
    CHECK_THROWS_WITH_AS(remove(merged, set), doctest::Contains("carry no adapters"), std::runtime_error);
}

TEST_CASE("budget accounting") {
    Budget paper = budget_symbolic(0.74e6, 25.17e6);
    CHECK(paper.pct == doctest::Approx(2.93).epsilon(0.01));

    SegNet teacher = frozen_segnet(13);
    AdapterSet none;
    CHECK(budget(teacher, none).trainable == 0);

    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    Budget b = budget(teacher, set);
    // closed form over the desk decoder/head shapes with the per-layer rank rule
    int64_t expect = 8 * (32 + 96 * 9) + 8 * (32 + 32 * 9) + 8 * (16 + 48 * 9) + 8 * (16 + 16 * 9) + 1 * (1 + 16);
    CHECK(b.trainable == expect);
    CHECK(b.total == teacher.param_count());
    CHECK(b.pct < 15.0);
    CHECK(b.pct == doctest::Approx(100.0 * static_cast<double>(expect) / static_cast<double>(b.total)));

    // additive over adapters, invariant to injection order
    AdapterSet dec = inject(teacher, {"decoder"}, 8, 32.0, 0.0, 7);
    AdapterSet head = inject(teacher, {"head"}, 8, 32.0, 0.0, 7);
    CHECK(budget(teacher, dec).trainable + budget(teacher, head).trainable == b.trainable);
    AdapterSet rev = inject(teacher, {"head", "decoder"}, 8, 32.0, 0.0, 7);
    CHECK(budget(teacher, rev).trainable == b.trainable);
}

TEST_CASE("spectral bound holds and matches the SVD oracle") {
    SegNet teacher = frozen_segnet(14);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    for (const auto& db : drift_bound(set)) {
        CHECK(db.lhs == 0.0);  // B = 0 at init
        CHECK(db.lhs <= db.rhs);
    }

    Rng rng(15);
    // rank-1 factors with unit spectral norm: lhs <= sqrt(r) * scale
    {
        int d = 6, k = 10, r = 4;
        LoraAdapter ad;
        ad.target = "unit";
        ad.d = d;
        ad.k = k;
        ad.rank = r;
        ad.alpha = static_cast<double>(r);
        ad.scale = 1.0;
        ad.A = Tensor(Shape{r, k}, 0.0);
        ad.B = Tensor(Shape{d, r}, 0.0);
        ad.A.data()[0] = 1.0;  // e1 outer product pieces
        ad.B.data()[0] = 1.0;
        AdapterSet one;
        one.adapters.push_back(ad);
        auto db = drift_bound(one)[0];
        CHECK(db.lhs <= std::sqrt(static_cast<double>(r)) + 1e-12);
        CHECK(db.lhs <= db.rhs + 1e-12);
    }

    // random draws: inequality holds, power iteration matches Jacobi SVD
    for (int trial = 0; trial < 100; ++trial) {
        for (auto& ad : set.adapters) {
            for (auto& v : ad.A.vec()) v = rng.normal(0.0, 0.3);
            for (auto& v : ad.B.vec()) v = rng.normal(0.0, 0.3);
        }
        for (const auto& db : drift_bound(set)) CHECK(db.lhs <= db.rhs * (1.0 + 1e-9));
    }
    for (int trial = 0; trial < 20; ++trial) {
        Tensor m = Tensor::randn(Shape{8, 40}, rng);
        CHECK(std::fabs(spectral_norm(m) - testutil::spectral_oracle(m)) < 1e-6);
    }
}

TEST_CASE("gradient locality: only adapter tensors receive gradient") {
    SegNet teacher = frozen_segnet(16);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.0, 7);
    Rng rng(17);
    Tensor x = Tensor::randn(Shape{1, 1, 16, 16}, rng);
    Tape tape;
    {
        TapeScope scope(tape);
        SegOut out = forward_seg(teacher, x, &set, true, &rng);
        backward(mean(mul(out.logits, out.logits)));
    }
    for (const auto& l : teacher.layers) {
        CHECK_FALSE(l.w.has_grad());
        CHECK_FALSE(l.b.has_grad());
    }
    bool any = false;
    for (auto& ad : set.adapters) {
        if (ad.A.has_grad() || ad.B.has_grad()) any = true;
    }
    CHECK(any);
}

TEST_CASE("adapter checkpoint round-trips") {
    SegNet teacher = frozen_segnet(18);
    AdapterSet set = inject(teacher, {"decoder", "head"}, 8, 32.0, 0.05, 7);
    Rng rng(19);
    for (auto& ad : set.adapters)
        for (auto& v : ad.B.vec()) v = rng.normal(0.0, 0.05);

    std::string path = "adapters_test.ckpt";
    save_adapters(set, path);
    AdapterSet loaded = load_adapters(path, teacher);
    CHECK(loaded.rank == 8);
    CHECK(loaded.alpha == doctest::Approx(32.0));
    CHECK(loaded.dropout_p == doctest::Approx(0.05));
    CHECK(loaded.policy == std::vector<std::string>{"decoder", "head"});
    REQUIRE(loaded.adapters.size() == set.adapters.size());

    Tensor x = Tensor::randn(Shape{1, 1, 32, 32}, rng);
    SegOut a = forward_seg(teacher, x, &set);
    SegOut b = forward_seg(teacher, x, &loaded);
    // float32 quantization in the container
    for (int64_t i = 0; i < a.logits.numel(); ++i)
        CHECK(a.logits.data()[i] == doctest::Approx(b.logits.data()[i]).epsilon(1e-4));

    // byte-identical second save
    save_adapters(loaded, "adapters_test2.ckpt");
    auto e1 = read_container(path);
    auto e2 = read_container("adapters_test2.ckpt");
    REQUIRE(e1.size() == e2.size());
    for (size_t i = 0; i < e1.size(); ++i) {
        CHECK(e1[i].name == e2[i].name);
        CHECK(e1[i].data == e2[i].data);
    }
    std::remove(path.c_str());
    std::remove("adapters_test2.ckpt");
}
