#include <doctest.h>

#include <cmath>

#include "bmt/encoder.hpp"
#include "oracles.hpp"

using bmt::Tensor;

namespace {

bmt::ModelConfig toy_encoder_config() {
    bmt::ModelConfig cfg;
    cfg.d_a = 4;
    cfg.d_v = 6;
    cfg.d_c = 4;
    cfg.num_layers = 1;
    cfg.heads = 2;
    cfg.d_internal = 4;
    cfg.dropout = 0.0;
    cfg.vocab_size = 8;
    return cfg;
}

bmt::EncoderParams build_random_encoder(const bmt::ModelConfig& cfg, bmt::ParamStore& store,
                                        uint64_t seed) {
    bmt::Rng rng(seed);
    bmt::ParamBuilder b(store, rng, true);
    return bmt::build_encoder(b, cfg);
}

void zero_sublayer_output_weights(bmt::EncoderParams& enc) {
    for (auto& layer : enc.layers) {
        for (auto* att : {&layer.self_a, &layer.self_v, &layer.cross_a, &layer.cross_v}) {
            auto& w = att->Wout.leaf_values_mut();
            std::fill(w.begin(), w.end(), 0.0);
        }
        for (auto* ffn : {&layer.ffn_a, &layer.ffn_v}) {
            auto& w2 = ffn->W2.leaf_values_mut();
            std::fill(w2.begin(), w2.end(), 0.0);
            auto& b2 = ffn->b2.leaf_values_mut();
            std::fill(b2.begin(), b2.end(), 0.0);
        }
    }
}

} // namespace

TEST_CASE("positional encoding basics") {
    Tensor pe = bmt::positional_encoding(5, 8);
    for (size_t i = 0; i < 4; ++i) {
        CHECK(pe.at(0, 2 * i) == 0.0);     // sin(0)
        CHECK(pe.at(0, 2 * i + 1) == 1.0); // cos(0)
    }
    for (double v : pe.values()) {
        CHECK(v <= 1.0);
        CHECK(v >= -1.0);
    }
    CHECK_THROWS_AS(bmt::positional_encoding(4, 5), bmt::ConfigError);
}

TEST_CASE("encoder layer preserves the reference shapes") {
    bmt::ModelConfig cfg;
    cfg.d_a = 128;
    cfg.d_v = 1024;
    cfg.d_c = 300;
    cfg.num_layers = 1;
    cfg.heads = 4;
    cfg.d_internal = 1024;
    cfg.dropout = 0.0;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 2);

    bmt::Rng rng(3);
    Tensor a = oracle::random_tensor({7, 128}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({5, 1024}, rng, -1, 1, false);
    const auto masks = bmt::make_encoder_masks(std::vector<uint8_t>(7, 1), std::vector<uint8_t>(5, 1));
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto [a_out, v_out] = bmt::encoder_layer(a, v, enc.layers[0], masks, cfg, ctx);
    CHECK(a_out.shape() == bmt::Shape{7, 128});
    CHECK(v_out.shape() == bmt::Shape{5, 1024});
}

TEST_CASE("a layer with zeroed sub-layer output weights is the identity") {
    const bmt::ModelConfig cfg = toy_encoder_config();
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 5);
    zero_sublayer_output_weights(enc);

    bmt::Rng rng(7);
    Tensor a = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({5, 6}, rng, -1, 1, false);
    const auto masks = bmt::make_encoder_masks(std::vector<uint8_t>(3, 1), std::vector<uint8_t>(5, 1));
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto [a_out, v_out] = bmt::encoder_layer(a, v, enc.layers[0], masks, cfg, ctx);
    CHECK(a_out.values() == a.values()); // exact
    CHECK(v_out.values() == v.values());
}

TEST_CASE("residual identity: zeroed encoder equals the positionally-encoded input") {
    bmt::ModelConfig cfg = toy_encoder_config();
    cfg.num_layers = 2;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 11);
    zero_sublayer_output_weights(enc);

    bmt::Rng rng(13);
    Tensor a = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({4, 6}, rng, -1, 1, false);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto out = bmt::encode(a, v, std::vector<uint8_t>(3, 1), std::vector<uint8_t>(4, 1), enc, cfg, ctx);

    Tensor expect_a = bmt::add(a, bmt::positional_encoding(3, 4));
    Tensor expect_v = bmt::add(v, bmt::positional_encoding(4, 6));
    CHECK(out.audio.values() == expect_a.values()); // exact, bit-for-bit
    CHECK(out.visual.values() == expect_v.values());
}

TEST_CASE("N = 0 returns the positionally-encoded inputs") {
    bmt::ModelConfig cfg = toy_encoder_config();
    cfg.num_layers = 0;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 17);

    bmt::Rng rng(19);
    Tensor a = oracle::random_tensor({4, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({3, 6}, rng, -1, 1, false);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto out = bmt::encode(a, v, std::vector<uint8_t>(4, 1), std::vector<uint8_t>(3, 1), enc, cfg, ctx);
    Tensor expect_a = bmt::add(a, bmt::positional_encoding(4, 4));
    CHECK(out.audio.values() == expect_a.values());
}

TEST_CASE("two-layer encode preserves shapes and is deterministic at eval") {
    bmt::ModelConfig cfg = toy_encoder_config();
    cfg.num_layers = 2;
    cfg.heads = 2;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 23);

    bmt::Rng rng(29);
    Tensor a = oracle::random_tensor({6, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({4, 6}, rng, -1, 1, false);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto out1 = bmt::encode(a, v, std::vector<uint8_t>(6, 1), std::vector<uint8_t>(4, 1), enc, cfg, ctx);
    auto out2 = bmt::encode(a, v, std::vector<uint8_t>(6, 1), std::vector<uint8_t>(4, 1), enc, cfg, ctx);
    CHECK(out1.audio.shape() == bmt::Shape{6, 4});
    CHECK(out1.visual.shape() == bmt::Shape{4, 6});
    CHECK(out1.audio.values() == out2.audio.values());
    CHECK(out1.visual.values() == out2.visual.values());
}

TEST_CASE("encoder gradcheck at toy dims") {
    const bmt::ModelConfig cfg = toy_encoder_config();
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 31);

    bmt::Rng rng(37);
    Tensor a = oracle::random_tensor({3, 4}, rng);
    Tensor v = oracle::random_tensor({4, 6}, rng);
    Tensor wa = oracle::random_tensor({3, 4}, rng, -1, 1, false);
    Tensor wv = oracle::random_tensor({4, 6}, rng, -1, 1, false);
    const auto masks = bmt::make_encoder_masks(std::vector<uint8_t>(3, 1), std::vector<uint8_t>(4, 1));
    const bmt::TrainContext ctx = bmt::TrainContext::eval();

    std::vector<Tensor> leaves = {a, v};
    for (const auto& [path, t] : store.by_path) leaves.push_back(t);
    auto make_loss = [&] {
        auto [ao, vo] = bmt::encoder_layer(a, v, enc.layers[0], masks, cfg, ctx);
        return bmt::add(bmt::sum(bmt::mul(ao, wa)), bmt::sum(bmt::mul(vo, wv)));
    };
    auto check = oracle::gradcheck(make_loss, leaves);
    CHECK(check.max_rel_err <= 1e-3);
}

TEST_CASE("padding invariance across the full encoder") {
    bmt::ModelConfig cfg = toy_encoder_config();
    cfg.num_layers = 2;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 41);

    bmt::Rng rng(43);
    const std::vector<uint8_t> a_valid = {1, 1, 1, 0, 0};
    const std::vector<uint8_t> v_valid = {1, 1, 0};
    Tensor a = oracle::random_tensor({5, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({3, 6}, rng, -1, 1, false);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto base = bmt::encode(a, v, a_valid, v_valid, enc, cfg, ctx);

    auto mutate_rows = [](const Tensor& t, const std::vector<uint8_t>& valid) {
        std::vector<double> vals = t.values();
        for (size_t r = 0; r < valid.size(); ++r)
            if (!valid[r])
                for (size_t c = 0; c < t.cols(); ++c) vals[r * t.cols() + c] += 500.0;
        return Tensor::from_values(t.shape(), vals);
    };
    auto out = bmt::encode(mutate_rows(a, a_valid), mutate_rows(v, v_valid), a_valid, v_valid, enc,
                           cfg, ctx);
    for (size_t r = 0; r < 5; ++r) {
        if (!a_valid[r]) continue;
        for (size_t c = 0; c < 4; ++c)
            CHECK(std::abs(base.audio.at(r, c) - out.audio.at(r, c)) <= 1e-9);
    }
    for (size_t r = 0; r < 3; ++r) {
        if (!v_valid[r]) continue;
        for (size_t c = 0; c < 6; ++c)
            CHECK(std::abs(base.visual.at(r, c) - out.visual.at(r, c)) <= 1e-9);
    }
}

TEST_CASE("cross-modal sensitivity: audio rows influence the visual stream") {
    bmt::ModelConfig cfg = toy_encoder_config();
    cfg.num_layers = 1;
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 47);

    bmt::Rng rng(53);
    Tensor a = oracle::random_tensor({4, 4}, rng, -1, 1, false);
    Tensor v = oracle::random_tensor({3, 6}, rng, -1, 1, false);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    auto base = bmt::encode(a, v, std::vector<uint8_t>(4, 1), std::vector<uint8_t>(3, 1), enc, cfg, ctx);

    std::vector<double> vals = a.values();
    for (size_t c = 0; c < 4; ++c) vals[2 * 4 + c] += 1.0; // perturb one unmasked audio row
    Tensor a_mut = Tensor::from_values({4, 4}, vals);
    auto out = bmt::encode(a_mut, v, std::vector<uint8_t>(4, 1), std::vector<uint8_t>(3, 1), enc,
                           cfg, ctx);
    double diff = 0.0;
    for (size_t i = 0; i < base.visual.size(); ++i)
        diff = std::max(diff, std::abs(base.visual.values()[i] - out.visual.values()[i]));
    CHECK(diff > 1e-9);
}

TEST_CASE("encode rejects empty sequences and bad masks") {
    const bmt::ModelConfig cfg = toy_encoder_config();
    bmt::ParamStore store;
    auto enc = build_random_encoder(cfg, store, 59);
    const bmt::TrainContext ctx = bmt::TrainContext::eval();
    Tensor a = Tensor::zeros({3, 4});
    Tensor v = Tensor::zeros({2, 6});
    CHECK_THROWS_AS(bmt::encode(a, v, {1, 1}, {1, 1}, enc, cfg, ctx), bmt::DimensionError);
}
