// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <string>

#include "mpreid/archive.hpp"
#include "mpreid/errors.hpp"
#include "mpreid/ops.hpp"
#include "mpreid/optimizer.hpp"
#include "support.hpp"

using namespace mpreid;
using testsupport::gradient_error;
using testsupport::LossBuilder;
using testsupport::random_tensor;

namespace {

// Weighted sum with fixed random weights so every output element carries a
// distinct gradient.
Var probe(Tape& tape, const Var& out, std::uint64_t seed) {
    const auto w = random_tensor(out.value().shape(), seed + 1000);
    return ops::sum(ops::mul(out, tape.constant(w)));
}

Tensor away_from_zero(Shape shape, std::uint64_t seed) {
    auto t = random_tensor(shape, seed, 0.2, 1.0);
    auto signs = random_tensor(shape, seed + 7);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] *= signs[i] < 0 ? -1.0 : 1.0;
    return t;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
    Tape tape;
    const auto s = ops::softmax(tape.constant(Tensor::vector({0, 0, 0})));
    for (std::size_t i = 0; i < 3; ++i) CHECK(s.value()[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("identity matmul returns the operand") {
    Tape tape;
    const auto a = random_tensor({3, 5}, 3);
    const auto out = ops::matmul(tape.constant(Tensor::identity(3)), tape.constant(a));
    CHECK(out.value().values() == a.values());
}

TEST_CASE("softmax rows are positive distributions") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Tape tape;
        const auto x = random_tensor({6, 9}, seed, -30.0, 30.0);
        for (int axis : {-1, 0}) {
            const auto s = ops::softmax(tape.constant(x), axis).value();
            const std::size_t outer = axis == -1 ? 6 : 9;
            const std::size_t inner = axis == -1 ? 9 : 6;
            for (std::size_t r = 0; r < outer; ++r) {
                double total = 0.0;
                for (std::size_t c = 0; c < inner; ++c) {
                    const double v = axis == -1 ? s.at(r, c) : s.at(c, r);
                    CHECK(v > 0.0);
                    total += v;
                }
                CHECK(std::abs(total - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("backward of sum of squares") {
    Tape tape;
    const auto x = tape.parameter("x", Tensor::vector({1, 2}));
    const auto grads = tape.backward(ops::sum(ops::mul(x, x)));
    CHECK(grads.at("x").values() == std::vector<double>{2, 4});
}

TEST_CASE("parameters off the loss path get exact zero gradients") {
    Tape tape;
    const auto x = tape.parameter("x", Tensor::vector({1, 2}));
    tape.parameter("unused", Tensor::matrix(2, 2, {1, 2, 3, 4}));
    const auto grads = tape.backward(ops::sum(x));
    const auto& g = grads.at("unused");
    CHECK(g.shape() == Shape{2, 2});
    for (double v : g.values()) CHECK(v == 0.0);
}

TEST_CASE("backward contract and state errors") {
    Tape tape;
    const auto x = tape.parameter("x", Tensor::vector({1, 2}));
    CHECK_THROWS_AS(tape.backward(x), ContractError);
    const auto loss = ops::sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), StateError);
}

TEST_CASE("parameters with the same name share one leaf") {
    Tape tape;
    const auto a = tape.parameter("w", Tensor::vector({1}));
    const auto b = tape.parameter("w", Tensor::vector({5}));
    CHECK(a.id() == b.id());
    const auto grads = tape.backward(ops::sum(ops::add(a, b)));
    CHECK(grads.at("w")[0] == 2.0);
}

TEST_CASE("shape mismatch names both shapes") {
    Tape tape;
    const auto a = tape.constant(Tensor({2, 3}, 1.0));
    const auto b = tape.constant(Tensor({4, 2}, 1.0));
    try {
        ops::matmul(a, b);
        FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        CHECK(msg.find(shape_str({2, 3})) != std::string::npos);
        CHECK(msg.find(shape_str({4, 2})) != std::string::npos);
    }
}

TEST_CASE("non-finite results raise a numeric error") {
    Tape tape;
    const auto a = tape.constant(Tensor::vector({1e300}));
    CHECK_THROWS_AS(ops::mul(a, a), NumericError);
    CHECK_THROWS_AS(ops::scale(a, std::numeric_limits<double>::infinity()), NumericError);
}

TEST_CASE("forward results are bit-identical across runs") {
    auto run = [] {
        Tape tape;
        const auto x = tape.constant(random_tensor({5, 8}, 11));
        const auto w = tape.constant(random_tensor({8, 8}, 12));
        ops::AttentionLayout layout{{{0, 5, 0, 5}}, 2, {}};
        const auto h = ops::gelu(ops::matmul(x, w));
        return ops::attention(h, h, h, layout).value().values();
    };
    CHECK(run() == run());
}

TEST_CASE("layer norm gradient matches finite differences on a 4x8 input") {
    const LossBuilder f = [](Tape& tape, const std::vector<Var>& v) {
        return probe(tape, ops::layer_norm(v[0], v[1], v[2]), 5);
    };
    const double err = gradient_error(f, {random_tensor({4, 8}, 1), random_tensor({8}, 2), random_tensor({8}, 3)});
    CHECK(err < 1e-4);
}

TEST_CASE("every op passes finite-difference checks on 10 seeds") {
    struct Case {
        const char* name;
        std::function<std::vector<Tensor>(std::uint64_t)> inputs;
        std::function<Var(Tape&, const std::vector<Var>&)> op;
    };
    const std::vector<std::size_t> rows = {2, 0, 3, 2};
    const std::vector<std::pair<std::size_t, std::size_t>> cells = {{0, 1}, {2, 2}, {1, 0}, {0, 1}};
    const std::vector<Case> cases = {
        {"matmul", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({4, 2}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::matmul(v[0], v[1]); }},
        {"matmul_nt", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({5, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::matmul_nt(v[0], v[1]); }},
        {"transpose", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::transpose(v[0]); }},
        {"linear",
         [](auto s) {
             return std::vector{random_tensor({3, 4}, s), random_tensor({4, 2}, s + 1), random_tensor({2}, s + 2)};
         },
         [](Tape&, const std::vector<Var>& v) { return ops::linear(v[0], v[1], v[2]); }},
        {"add", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::add(v[0], v[1]); }},
        {"sub", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::sub(v[0], v[1]); }},
        {"mul", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({3, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::mul(v[0], v[1]); }},
        {"scale", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::scale(v[0], -1.7); }},
        {"add_scalar", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::add_scalar(v[0], 0.3); }},
        {"add_row", [](auto s) { return std::vector{random_tensor({3, 4}, s), random_tensor({4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::add_row(v[0], v[1]); }},
        {"sum", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::sum(v[0]); }},
        {"mean", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::mean(v[0]); }},
        {"sum_rows", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::sum_rows(v[0]); }},
        {"concat0", [](auto s) { return std::vector{random_tensor({2, 4}, s), random_tensor({3, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::concat({v[0], v[1]}, 0); }},
        {"concat1", [](auto s) { return std::vector{random_tensor({3, 2}, s), random_tensor({3, 4}, s + 1)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::concat({v[0], v[1]}, 1); }},
        {"slice_rows", [](auto s) { return std::vector{random_tensor({5, 3}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::slice_rows(v[0], 1, 3); }},
        {"gather_rows", [](auto s) { return std::vector{random_tensor({4, 3}, s)}; },
         [&rows](Tape&, const std::vector<Var>& v) { return ops::gather_rows(v[0], rows); }},
        {"gather_elements", [](auto s) { return std::vector{random_tensor({3, 3}, s)}; },
         [&cells](Tape&, const std::vector<Var>& v) { return ops::gather_elements(v[0], cells); }},
        {"reshape", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::reshape(v[0], {2, 6}); }},
        {"softmax", [](auto s) { return std::vector{random_tensor({3, 5}, s, -3, 3)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::softmax(v[0]); }},
        {"softmax_axis0", [](auto s) { return std::vector{random_tensor({3, 5}, s, -3, 3)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::softmax(v[0], 0); }},
        {"log_softmax", [](auto s) { return std::vector{random_tensor({3, 5}, s, -3, 3)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::log_softmax(v[0]); }},
        {"log_softmax_axis0", [](auto s) { return std::vector{random_tensor({3, 5}, s, -3, 3)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::log_softmax(v[0], 0); }},
        {"layer_norm",
         [](auto s) { return std::vector{random_tensor({4, 8}, s), random_tensor({8}, s + 1), random_tensor({8}, s + 2)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::layer_norm(v[0], v[1], v[2]); }},
        {"gelu", [](auto s) { return std::vector{random_tensor({3, 4}, s, -3, 3)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::gelu(v[0]); }},
        {"relu", [](auto s) { return std::vector{away_from_zero({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::relu(v[0]); }},
        {"l2_normalize", [](auto s) { return std::vector{random_tensor({3, 4}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::l2_normalize(v[0]); }},
        {"pairwise_distance", [](auto s) { return std::vector{random_tensor({4, 3}, s)}; },
         [](Tape&, const std::vector<Var>& v) { return ops::pairwise_distance(v[0]); }},
        {"attention",
         [](auto s) {
             return std::vector{random_tensor({5, 4}, s), random_tensor({6, 4}, s + 1), random_tensor({6, 4}, s + 2)};
         },
         [](Tape&, const std::vector<Var>& v) {
             ops::AttentionLayout layout{{{0, 2, 0, 4}, {2, 3, 2, 4}}, 2, {0, 0, 1, 0, 0, 0}};
             return ops::attention(v[0], v[1], v[2], layout);
         }},
    };
    for (const auto& c : cases) {
        CAPTURE(c.name);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            const LossBuilder f = [&](Tape& tape, const std::vector<Var>& v) { return probe(tape, c.op(tape, v), seed); };
            CHECK(gradient_error(f, c.inputs(seed * 17 + 1)) < 1e-4);
        }
    }
}

TEST_CASE("archive round trip preserves names, shapes and bits") {
    const auto path = std::filesystem::temp_directory_path() / "mpreid_archive_test.mpt";
    TensorMap m;
    m.emplace("a", random_tensor({3, 4}, 1));
    m.emplace("b/c", Tensor::scalar(std::nextafter(1.0, 2.0)));
    save_archive(path, m);
    const auto back = load_archive(path);
    REQUIRE(back.size() == 2);
    CHECK(back.at("a").shape() == Shape{3, 4});
    CHECK(back.at("a").values() == m.at("a").values());
    CHECK(back.at("b/c").values() == m.at("b/c").values());
    std::filesystem::remove(path);
}

TEST_CASE("adam with zero learning rate leaves parameters unchanged") {
    TensorMap params{{"w", random_tensor({2, 3}, 4)}};
    const auto before = params.at("w").values();
    GradientMap grads{{"w", random_tensor({2, 3}, 5)}};
    Adam adam;
    adam.step(params, grads, 0.0);
    CHECK(params.at("w").values() == before);
    CHECK(adam.steps() == 1);
}

TEST_CASE("adam state round trip reproduces the next update") {
    TensorMap a{{"w", random_tensor({2, 3}, 4)}};
    Adam adam;
    adam.step(a, {{"w", random_tensor({2, 3}, 5)}}, 1e-2);
    Adam restored;
    restored.load_state(adam.state());
    TensorMap b = a;
    const GradientMap g{{"w", random_tensor({2, 3}, 6)}};
    adam.step(a, g, 1e-2);
    restored.step(b, g, 1e-2);
    CHECK(a.at("w").values() == b.at("w").values());
}

TEST_CASE("learning rate warms up linearly then stays constant") {
    CHECK(scheduled_lr(1.0, 0, 100, 0.1) == doctest::Approx(0.1));
    CHECK(scheduled_lr(1.0, 4, 100, 0.1) == doctest::Approx(0.5));
    CHECK(scheduled_lr(1.0, 9, 100, 0.1) == doctest::Approx(1.0));
    CHECK(scheduled_lr(1.0, 50, 100, 0.1) == 1.0);
    CHECK(scheduled_lr(1.0, 0, 100, 0.0) == 1.0);
}
