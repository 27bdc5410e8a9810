#include <doctest.h>

#include <cmath>

#include "bmt/tensor.hpp"
#include "oracles.hpp"

using bmt::Tensor;

TEST_CASE("matmul identity and projector") {
    Tensor I = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor A = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor C = bmt::matmul(I, A);
    CHECK(C.values() == std::vector<double>{1, 2, 3, 4});

    Tensor P = Tensor::from_values({2, 2}, {1, 0, 0, 0});
    Tensor B = Tensor::from_values({2, 2}, {5, 6, 7, 8});
    Tensor PB = bmt::matmul(P, B);
    CHECK(PB.values() == std::vector<double>{5, 6, 0, 0});

    CHECK_THROWS_AS(bmt::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), bmt::DimensionError);
}

TEST_CASE("matmul gradient matches the hand value and finite differences") {
    Tensor A = Tensor::from_values({1, 2}, {1, 2}, true);
    Tensor B = Tensor::from_values({2, 1}, {3, 4}, true);
    Tensor loss = bmt::sum(bmt::matmul(A, B));
    bmt::backward(loss);
    CHECK(A.grad() == std::vector<double>{3, 4});
    CHECK(B.grad() == std::vector<double>{1, 2});

    auto check = oracle::gradcheck([&] { return bmt::sum(bmt::matmul(A, B)); }, {A, B});
    CHECK(check.max_rel_err <= 1e-3);
}

TEST_CASE("elementwise basics") {
    CHECK(bmt::sigmoid(Tensor::scalar(0.0)).item() == doctest::Approx(0.5));
    CHECK(bmt::exp(Tensor::scalar(0.0)).item() == doctest::Approx(1.0));

    Tensor x = Tensor::from_values({1}, {-3.0}, true);
    Tensor y = bmt::relu(x);
    CHECK(y.item() == 0.0);
    bmt::backward(bmt::sum(y));
    CHECK(x.grad()[0] == 0.0);

    CHECK_THROWS_AS(bmt::add(Tensor::zeros({2, 2}), Tensor::zeros({3, 2})), bmt::DimensionError);

    // scalar broadcast on either side
    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    CHECK(bmt::add(m, Tensor::scalar(1.0)).values() == std::vector<double>{2, 3, 4, 5});
    CHECK(bmt::mul(Tensor::scalar(2.0), m).values() == std::vector<double>{2, 4, 6, 8});
}

TEST_CASE("softmax_rows: uniform, masked, degenerate") {
    Tensor x = Tensor::from_values({1, 3}, {0, 0, 0});
    Tensor y = bmt::softmax_rows(x);
    for (size_t j = 0; j < 3; ++j) CHECK(y.at(0, j) == doctest::Approx(1.0 / 3.0));

    bmt::BoolMask mask(1, 2, true);
    mask.set(0, 0, false);
    Tensor big = Tensor::from_values({1, 2}, {1e6, 0.0});
    Tensor masked = bmt::softmax_rows(big, &mask);
    CHECK(masked.at(0, 0) == 0.0);
    CHECK(masked.at(0, 1) == doctest::Approx(1.0));

    bmt::BoolMask all_off(1, 2, false);
    CHECK_THROWS_AS(bmt::softmax_rows(big, &all_off), bmt::DegenerateMaskError);
}

TEST_CASE("softmax_rows rows sum to one and gradcheck passes") {
    bmt::Rng rng(7);
    Tensor x = oracle::random_tensor({3, 4}, rng);
    Tensor y = bmt::softmax_rows(x);
    for (size_t i = 0; i < 3; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < 4; ++j) s += y.at(i, j);
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    Tensor w = oracle::random_tensor({3, 4}, rng, -1.0, 1.0, false);
    auto check = oracle::gradcheck([&] { return bmt::sum(bmt::mul(bmt::softmax_rows(x), w)); }, {x});
    CHECK(check.max_rel_err <= 1e-4);
}

TEST_CASE("layer_norm: constant row, two-point row, gradcheck") {
    Tensor gain = Tensor::full({4}, 1.0);
    Tensor bias = Tensor::zeros({4});
    Tensor constant = Tensor::full({1, 4}, 3.7);
    Tensor normed = bmt::layer_norm(constant, gain, bias);
    for (size_t j = 0; j < 4; ++j) CHECK(normed.at(0, j) == doctest::Approx(0.0).epsilon(1e-6));

    Tensor two = Tensor::from_values({1, 2}, {1.0, -1.0});
    Tensor g2 = Tensor::full({2}, 1.0);
    Tensor b2 = Tensor::zeros({2});
    Tensor y2 = bmt::layer_norm(two, g2, b2);
    CHECK(y2.at(0, 0) == doctest::Approx(1.0).epsilon(1e-4));
    CHECK(y2.at(0, 1) == doctest::Approx(-1.0).epsilon(1e-4));

    bmt::Rng rng(11);
    Tensor x = oracle::random_tensor({2, 3, 4}, rng);
    Tensor g = oracle::random_tensor({4}, rng, 0.5, 1.5);
    Tensor b = oracle::random_tensor({4}, rng, -0.5, 0.5);
    Tensor w = oracle::random_tensor({2, 3, 4}, rng, -1.0, 1.0, false);
    auto check = oracle::gradcheck(
        [&] { return bmt::sum(bmt::mul(bmt::layer_norm(x, g, b), w)); }, {x, g, b});
    CHECK(check.max_rel_err <= 1e-4);
}

TEST_CASE("conv1d: identity kernel, zero kernel, boundary average, oracle") {
    bmt::Rng rng(3);
    Tensor x = oracle::random_tensor({5, 1}, rng, -1.0, 1.0, false);
    Tensor ident = Tensor::from_values({1, 1, 1}, {1.0});
    CHECK(bmt::conv1d(x, ident).values() == x.values()); // bit-for-bit

    Tensor zeros3 = Tensor::zeros({3, 1, 1});
    Tensor zero_out = bmt::conv1d(x, zeros3);
    for (double v : zero_out.values()) CHECK(v == 0.0);

    Tensor seq = Tensor::from_values({3, 1}, {1, 2, 3});
    Tensor avg = Tensor::full({3, 1, 1}, 1.0 / 3.0);
    Tensor out = bmt::conv1d(seq, avg);
    CHECK(out.at(0, 0) == doctest::Approx(1.0));
    CHECK(out.at(1, 0) == doctest::Approx(2.0));
    CHECK(out.at(2, 0) == doctest::Approx(5.0 / 3.0));

    CHECK_THROWS_AS(bmt::conv1d(seq, Tensor::zeros({2, 1, 1})), bmt::ConfigError);

    // random case against the brute-force oracle
    Tensor xr = oracle::random_tensor({7, 3}, rng, -1.0, 1.0, false);
    Tensor wr = oracle::random_tensor({5, 3, 2}, rng, -1.0, 1.0, false);
    const auto expect = oracle::conv1d_brute(xr.values(), 7, 3, wr.values(), 5, 2);
    const auto got = bmt::conv1d(xr, wr).values();
    REQUIRE(got.size() == expect.size());
    for (size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("conv1d gradcheck") {
    bmt::Rng rng(5);
    Tensor x = oracle::random_tensor({6, 2}, rng);
    Tensor w = oracle::random_tensor({3, 2, 2}, rng);
    Tensor mask = oracle::random_tensor({6, 2}, rng, -1.0, 1.0, false);
    auto check = oracle::gradcheck([&] { return bmt::sum(bmt::mul(bmt::conv1d(x, w), mask)); }, {x, w});
    CHECK(check.max_rel_err <= 1e-3);
}

TEST_CASE("backward: ones, analytic, accumulation, contract errors") {
    Tensor x = Tensor::from_values({2, 2}, {1, 2, 3, 4}, true);
    bmt::backward(bmt::sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1, 1});

    Tensor y = Tensor::from_values({1, 2}, {1, 2}, true);
    bmt::backward(bmt::sum(bmt::mul(y, y)));
    CHECK(y.grad() == std::vector<double>{2, 4});

    // repeated backward accumulates
    Tensor z = Tensor::from_values({1}, {3.0}, true);
    Tensor loss = bmt::sum(bmt::mul(z, z));
    bmt::backward(loss);
    bmt::backward(loss);
    CHECK(z.grad()[0] == doctest::Approx(12.0));

    CHECK_THROWS_AS(bmt::backward(Tensor::from_values({2}, {1, 2}, true)), bmt::ContractError);
    CHECK_THROWS_AS(bmt::backward(Tensor::scalar(1.0)), bmt::ContractError);
}

TEST_CASE("shared-input graphs add one contribution per use") {
    Tensor x = Tensor::from_values({1}, {2.0}, true);
    // f(x) = x*x + 3x; df/dx = 2x + 3 = 7
    Tensor loss = bmt::sum(bmt::add(bmt::mul(x, x), bmt::scale(x, 3.0)));
    bmt::backward(loss);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("add_bias, concat_cols, reshape, rows_select gradcheck") {
    bmt::Rng rng(13);
    Tensor x = oracle::random_tensor({3, 4}, rng);
    Tensor b = oracle::random_tensor({4}, rng);
    Tensor y = oracle::random_tensor({3, 2}, rng);
    Tensor table = oracle::random_tensor({5, 3}, rng);
    const std::vector<int> ids = {4, 0, 0, 2};
    auto make_loss = [&] {
        Tensor cat = bmt::concat_cols(bmt::add_bias(x, b), y);
        Tensor flat = bmt::reshape(cat, {2, 9});
        Tensor picked = bmt::rows_select(table, ids);
        return bmt::add(bmt::sum(bmt::mul(flat, flat)), bmt::sum(picked));
    };
    auto check = oracle::gradcheck(make_loss, {x, b, y, table});
    CHECK(check.max_rel_err <= 1e-3);
}

TEST_CASE("bce_with_logits matches the direct formula and its gradient") {
    bmt::Rng rng(17);
    Tensor z = oracle::random_tensor({2, 3}, rng, -3.0, 3.0);
    Tensor t = Tensor::from_values({2, 3}, {1, 0, 1, 0, 1, 0});
    Tensor loss_t = bmt::bce_with_logits(z, t);
    for (size_t i = 0; i < 6; ++i) {
        const double zi = z.values()[i];
        const double ti = t.values()[i];
        const double p = 1.0 / (1.0 + std::exp(-zi));
        const double expect = -(ti * std::log(p) + (1.0 - ti) * std::log(1.0 - p));
        CHECK(loss_t.values()[i] == doctest::Approx(expect).epsilon(1e-9));
    }
    auto check = oracle::gradcheck([&] { return bmt::sum(bmt::bce_with_logits(z, t)); }, {z});
    CHECK(check.max_rel_err <= 1e-4);
}

TEST_CASE("dropout: deterministic per seed, inverted scaling") {
    Tensor x = Tensor::full({100, 10}, 1.0);
    bmt::Rng r1(42), r2(42);
    Tensor a = bmt::dropout(x, 0.4, r1);
    Tensor b = bmt::dropout(x, 0.4, r2);
    CHECK(a.values() == b.values());
    for (double v : a.values()) CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.6)));
    CHECK_THROWS_AS(bmt::dropout(x, 1.0, r1), bmt::ConfigError);
}

TEST_CASE("random composite op pipeline passes finite differences") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        bmt::Rng rng(seed);
        Tensor a = oracle::random_tensor({3, 4}, rng);
        Tensor w = oracle::random_tensor({4, 4}, rng);
        Tensor g = oracle::random_tensor({4}, rng, 0.5, 1.5);
        Tensor b = oracle::random_tensor({4}, rng, -0.2, 0.2);
        auto make_loss = [&] {
            Tensor h = bmt::relu(bmt::matmul(a, w));
            Tensor n = bmt::layer_norm(h, g, b);
            Tensor s = bmt::softmax_rows(n);
            return bmt::sum(bmt::mul(s, bmt::exp(bmt::scale(n, 0.1))));
        };
        auto check = oracle::gradcheck(make_loss, {a, w, g, b});
        CHECK(check.max_rel_err <= 1e-3);
    }
}
