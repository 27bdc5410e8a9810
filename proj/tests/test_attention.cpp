#include <doctest.h>

#include <cmath>

#include "bmt/attention.hpp"
#include "oracles.hpp"

using bmt::AttentionMask;
using bmt::Tensor;

namespace {

bmt::AttentionParams random_attention(const bmt::MultiHeadConfig& cfg, bmt::Rng& rng) {
    bmt::ParamStore store;
    bmt::ParamBuilder b(store, rng, true);
    return bmt::detail::build_attention(b, "att", cfg);
}

} // namespace

TEST_CASE("scaled dot-product attention normalizes and respects single keys") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    Tensor I = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor out = bmt::scaled_dot_product_attention(I, I, I, nullptr, 0.0, ctx);
    // rows are softmax mixes of the identity rows, so each row sums to 1
    for (size_t i = 0; i < 2; ++i)
        CHECK(out.at(i, 0) + out.at(i, 1) == doctest::Approx(1.0).epsilon(1e-12));

    // a single key takes all the mass for every query
    bmt::Rng rng(3);
    Tensor q = oracle::random_tensor({4, 3}, rng, -1, 1, false);
    Tensor k = oracle::random_tensor({1, 3}, rng, -1, 1, false);
    Tensor v = Tensor::from_values({1, 2}, {0.25, -4.0});
    Tensor single = bmt::scaled_dot_product_attention(q, k, v, nullptr, 0.0, ctx);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(single.at(i, 0) == doctest::Approx(0.25));
        CHECK(single.at(i, 1) == doctest::Approx(-4.0));
    }
}

TEST_CASE("scaled dot-product attention hand case") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    Tensor q = Tensor::from_values({1, 2}, {10, 0});
    Tensor k = Tensor::from_values({2, 2}, {10, 0, 0, 10});
    Tensor v = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor out = bmt::scaled_dot_product_attention(q, k, v, nullptr, 0.0, ctx);
    CHECK(std::abs(out.at(0, 0) - 1.0) <= 1e-4);
    CHECK(std::abs(out.at(0, 1) - 0.0) <= 1e-4);
}

TEST_CASE("fully masked query row raises the degenerate-mask error") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    Tensor q = Tensor::from_values({1, 2}, {1, 0});
    Tensor kv = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    AttentionMask mask = AttentionMask::padding(1, {0, 0});
    CHECK_THROWS_AS(bmt::scaled_dot_product_attention(q, kv, kv, &mask, 0.0, ctx),
                    bmt::DegenerateMaskError);
}

TEST_CASE("single-head attention with identity projections reduces to SDPA * Wout") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(17);
    const int d = 4;
    bmt::MultiHeadConfig cfg{1, d, d, d, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    // overwrite projections with identities
    std::vector<double> ident(static_cast<size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i) ident[static_cast<size_t>(i) * d + i] = 1.0;
    params.Wq[0].leaf_values_mut() = ident;
    params.Wk[0].leaf_values_mut() = ident;
    params.Wv[0].leaf_values_mut() = ident;

    Tensor q = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor kv = oracle::random_tensor({5, 4}, rng, -1, 1, false);
    Tensor mha = bmt::multi_head_attention(q, kv, kv, cfg, params, nullptr, ctx);
    Tensor expect = bmt::matmul(
        bmt::scaled_dot_product_attention(q, kv, kv, nullptr, 0.0, ctx), params.Wout);
    REQUIRE(mha.shape() == expect.shape());
    for (size_t i = 0; i < mha.size(); ++i)
        CHECK(mha.values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("multi-head attention output shape for the reference dims") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(29);
    bmt::MultiHeadConfig cfg{4, 128, 1024, 1024, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    Tensor q = oracle::random_tensor({5, 128}, rng, -1, 1, false);
    Tensor kv = oracle::random_tensor({7, 1024}, rng, -1, 1, false);
    Tensor out = bmt::multi_head_attention(q, kv, kv, cfg, params, nullptr, ctx);
    CHECK(out.shape() == bmt::Shape{5, 128});
}

TEST_CASE("indivisible internal width is a configuration error") {
    bmt::Rng rng(5);
    bmt::MultiHeadConfig cfg{3, 4, 4, 4, 0.0}; // 4 % 3 != 0
    bmt::ParamStore store;
    bmt::ParamBuilder b(store, rng, true);
    CHECK_THROWS_AS(bmt::detail::build_attention(b, "bad", cfg), bmt::ConfigError);
}

TEST_CASE("two-head attention gradcheck") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(31);
    bmt::MultiHeadConfig cfg{2, 4, 6, 4, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    Tensor q = oracle::random_tensor({3, 4}, rng);
    Tensor kv = oracle::random_tensor({5, 6}, rng);
    Tensor weight = oracle::random_tensor({3, 4}, rng, -1, 1, false);

    std::vector<Tensor> leaves = {q, kv, params.Wout};
    for (int h = 0; h < 2; ++h) {
        leaves.push_back(params.Wq[static_cast<size_t>(h)]);
        leaves.push_back(params.Wk[static_cast<size_t>(h)]);
        leaves.push_back(params.Wv[static_cast<size_t>(h)]);
    }
    auto make_loss = [&] {
        Tensor out = bmt::multi_head_attention(q, kv, kv, cfg, params, nullptr, ctx);
        return bmt::sum(bmt::mul(out, weight));
    };
    auto check = oracle::gradcheck(make_loss, leaves);
    CHECK(check.max_rel_err <= 1e-3);
}

TEST_CASE("permutation equivariance over key/value rows") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(41);
    bmt::MultiHeadConfig cfg{2, 4, 6, 8, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    Tensor q = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor kv = oracle::random_tensor({5, 6}, rng, -1, 1, false);

    std::vector<size_t> perm = {3, 0, 4, 1, 2};
    std::vector<double> permuted(5 * 6);
    for (size_t r = 0; r < 5; ++r)
        for (size_t c = 0; c < 6; ++c) permuted[r * 6 + c] = kv.at(perm[r], c);
    Tensor kv_perm = Tensor::from_values({5, 6}, permuted);

    Tensor out = bmt::multi_head_attention(q, kv, kv, cfg, params, nullptr, ctx);
    Tensor out_perm = bmt::multi_head_attention(q, kv_perm, kv_perm, cfg, params, nullptr, ctx);
    for (size_t i = 0; i < out.size(); ++i)
        CHECK(out.values()[i] == doctest::Approx(out_perm.values()[i]).epsilon(1e-12));
}

TEST_CASE("padding invariance: masked key rows cannot influence the output") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(43);
    bmt::MultiHeadConfig cfg{2, 4, 6, 8, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    Tensor q = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor kv = oracle::random_tensor({5, 6}, rng, -1, 1, false);
    const std::vector<uint8_t> key_valid = {1, 1, 1, 0, 0};
    AttentionMask mask = AttentionMask::padding(3, key_valid);

    Tensor base = bmt::multi_head_attention(q, kv, kv, cfg, params, &mask, ctx);
    std::vector<double> mutated = kv.values();
    for (size_t r = 3; r < 5; ++r)
        for (size_t c = 0; c < 6; ++c) mutated[r * 6 + c] = 1e3 * (static_cast<double>(r) + 1.0);
    Tensor kv_mut = Tensor::from_values({5, 6}, mutated);
    Tensor out = bmt::multi_head_attention(q, kv_mut, kv_mut, cfg, params, &mask, ctx);
    for (size_t i = 0; i < base.size(); ++i)
        CHECK(std::abs(base.values()[i] - out.values()[i]) <= 1e-9);
}

TEST_CASE("causal mask: future tokens cannot change past outputs") {
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    bmt::Rng rng(47);
    bmt::MultiHeadConfig cfg{2, 4, 4, 4, 0.0};
    bmt::AttentionParams params = random_attention(cfg, rng);
    Tensor x = oracle::random_tensor({5, 4}, rng, -1, 1, false);
    AttentionMask mask = AttentionMask::causal(5);
    CHECK(mask.kind == AttentionMask::Kind::causal);

    Tensor base = bmt::multi_head_attention(x, x, x, cfg, params, &mask, ctx);
    std::vector<double> mutated = x.values();
    for (size_t c = 0; c < 4; ++c) mutated[4 * 4 + c] += 7.5; // edit the last token only
    Tensor x_mut = Tensor::from_values({5, 4}, mutated);
    Tensor out = bmt::multi_head_attention(x_mut, x_mut, x_mut, cfg, params, &mask, ctx);
    for (size_t r = 0; r < 4; ++r)
        for (size_t c = 0; c < 4; ++c) CHECK(base.at(r, c) == out.at(r, c)); // bit-identical
}

TEST_CASE("attention weights over unmasked keys sum to one") {
    bmt::Rng rng(53);
    Tensor logits = oracle::random_tensor({4, 6}, rng, -2, 2, false);
    AttentionMask mask = AttentionMask::padding(4, {1, 0, 1, 1, 0, 1});
    Tensor w = bmt::softmax_rows(logits, &mask.matrix);
    for (size_t i = 0; i < 4; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < 6; ++j) s += w.at(i, j);
        CHECK(std::abs(s - 1.0) <= 1e-9);
        CHECK(w.at(i, 1) == 0.0);
        CHECK(w.at(i, 4) == 0.0);
    }
}
