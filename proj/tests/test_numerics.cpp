#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "poisonlab/tensor.hpp"

using namespace poisonlab;

namespace {

Tensor rand_tensor(std::vector<int> shape, Rng& rng, Real scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (Real& v : t.values()) v = (rng.real01() * 2.0 - 1.0) * scale;
    return t;
}

}  // namespace

TEST_CASE("matmul values") {
    // identity case
    Tensor eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    Tensor out = matmul(eye, m);
    CHECK(out.values()[0] == 1.0);
    CHECK(out.values()[1] == 2.0);
    CHECK(out.values()[2] == 3.0);
    CHECK(out.values()[3] == 4.0);

    // 1x2 · 2x1 by hand
    Tensor a = Tensor::from_values({1, 2}, {1, 2});
    Tensor b = Tensor::from_values({2, 1}, {3, 4});
    CHECK(matmul(a, b).item() == 11.0);

    CHECK_THROWS_AS(matmul(a, Tensor::from_values({3, 1}, {1, 2, 3})), DimensionError);
}

TEST_CASE("matmul gradient of sum equals column sums of b, and matches FD") {
    Rng rng(11);
    Tensor a = rand_tensor({3, 4}, rng);
    Tensor b = rand_tensor({4, 2}, rng);
    a.set_requires_grad(true);
    {
        Tape tape;
        Tensor loss = sum(matmul(a, b));
        backward(loss, tape);
    }
    // dL/da[i][k] = sum_j b[k][j]
    for (int i = 0; i < 3; ++i) {
        for (int k = 0; k < 4; ++k) {
            Real expect = b.values()[k * 2] + b.values()[k * 2 + 1];
            CHECK(a.grad()[i * 4 + k] == doctest::Approx(expect).epsilon(1e-9));
        }
    }
    // FD oracle, step 1e-4
    Tensor a2 = rand_tensor({3, 4}, rng), b2 = rand_tensor({4, 2}, rng);
    auto rep = gradcheck::check({a2, b2}, [&] { return sum(matmul(a2, b2)); }, 1e-4);
    CHECK(rep.ok);
}

TEST_CASE("softmax values") {
    Tensor s = softmax(Tensor::from_values({2}, {0, 0}), 0);
    CHECK(s.values()[0] == doctest::Approx(0.5));
    CHECK(s.values()[1] == doctest::Approx(0.5));

    // stabilization: no overflow at extreme logits
    Tensor big = softmax(Tensor::from_values({2}, {1000, 0}), 0);
    CHECK(big.values()[0] == doctest::Approx(1.0));
    CHECK(big.values()[1] == doctest::Approx(0.0));

    // independent high-precision oracle for [1,2,3]
    long double e1 = expl(1.0L), e2 = expl(2.0L), e3 = expl(3.0L);
    long double z = e1 + e2 + e3;
    Tensor t = softmax(Tensor::from_values({3}, {1, 2, 3}), 0);
    CHECK(t.values()[0] == doctest::Approx(static_cast<double>(e1 / z)).epsilon(1e-12));
    CHECK(t.values()[1] == doctest::Approx(static_cast<double>(e2 / z)).epsilon(1e-12));
    CHECK(t.values()[2] == doctest::Approx(static_cast<double>(e3 / z)).epsilon(1e-12));
}

TEST_CASE("softmax properties: normalization and shift invariance") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = rand_tensor({4, 6}, rng, 3.0);
        Tensor y = softmax(x, 1);
        for (int r = 0; r < 4; ++r) {
            Real s = 0;
            for (int c = 0; c < 6; ++c) s += y.values()[r * 6 + c];
            CHECK(std::fabs(s - 1.0) < 1e-6);
        }
        Tensor shifted = affine(x, 1.0, 17.5);
        Tensor y2 = softmax(shifted, 1);
        for (int i = 0; i < 24; ++i) CHECK(std::fabs(y.values()[i] - y2.values()[i]) < 1e-6);
    }
}

TEST_CASE("softmax gradient vs FD, both axes") {
    Rng rng(13);
    for (int axis = 0; axis < 2; ++axis) {
        Tensor x = rand_tensor({3, 5}, rng, 2.0);
        Tensor w = rand_tensor({3, 5}, rng);
        auto rep = gradcheck::check({x}, [&] { return sum(mul(softmax(x, axis), w)); });
        CHECK(rep.ok);
    }
}

TEST_CASE("cross_entropy values") {
    // uniform logits, V=4 -> ln 4
    Tensor logits = Tensor::zeros({3, 4});
    Tensor ce = cross_entropy(logits, {0, 3, 2});
    CHECK(ce.item() == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    // near-one-hot margin -> ~0
    Tensor sharp = Tensor::zeros({1, 4});
    sharp.values()[2] = 60.0;
    CHECK(cross_entropy(sharp, {2}).item() == doctest::Approx(0.0).epsilon(1e-9));

    // fixed 2x3 matrix against a long-double oracle
    Tensor fixed = Tensor::from_values({2, 3}, {1, 2, 3, 0, 0, 0});
    long double lse = 3.0L + logl(expl(-2.0L) + expl(-1.0L) + 1.0L);
    long double expect = ((lse - 3.0L) + logl(3.0L)) / 2.0L;
    CHECK(cross_entropy(fixed, {2, 0}).item() == doctest::Approx(static_cast<double>(expect)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy(fixed, {2, 7}), InputError);
}

TEST_CASE("cross_entropy and token_log_probs gradients vs FD") {
    Rng rng(17);
    Tensor logits = rand_tensor({4, 6}, rng, 2.0);
    auto rep = gradcheck::check({logits}, [&] { return cross_entropy(logits, {1, 5, 0, 3}); });
    CHECK(rep.ok);

    Tensor logits2 = rand_tensor({5, 6}, rng, 2.0);
    Tensor w = rand_tensor({3, 1}, rng);
    auto rep2 = gradcheck::check({logits2}, [&] { return sum(mul(token_log_probs(logits2, {2, 4, 1}, 2), w)); });
    CHECK(rep2.ok);
}

TEST_CASE("backward basics") {
    // loss = sum(x) -> grad all ones
    Tensor x = Tensor::from_values({2, 3}, {1, -2, 3, 4, -5, 6}, true);
    {
        Tape tape;
        Tensor loss = sum(x);
        backward(loss, tape);
    }
    for (Real g : x.grad()) CHECK(g == 1.0);

    // loss = sum(x*x) -> grad = 2x
    Tensor y = Tensor::from_values({4}, {1, -2, 0.5, 3}, true);
    {
        Tape tape;
        Tensor loss = sum(mul(y, y));
        backward(loss, tape);
    }
    for (int i = 0; i < 4; ++i) CHECK(y.grad()[i] == doctest::Approx(2 * y.values()[i]).epsilon(1e-12));

    // non-scalar loss -> contract error
    Tensor z = Tensor::from_values({2}, {1, 2}, true);
    Tape tape;
    Tensor out = mul(z, z);
    CHECK_THROWS_AS(backward(out, tape), ContractError);
}

TEST_CASE("backward twice accumulates exactly 2x") {
    Rng rng(23);
    Tensor x = rand_tensor({3, 3}, rng);
    x.set_requires_grad(true);
    Tape tape;
    Tensor h = gelu(matmul(x, x));
    Tensor loss = mean(h);
    backward(loss, tape);
    std::vector<Real> once(x.grad().begin(), x.grad().end());
    backward(loss, tape);
    for (size_t i = 0; i < once.size(); ++i) {
        CHECK(x.grad()[i] == doctest::Approx(2 * once[i]).epsilon(1e-12));
    }
}

TEST_CASE("two-layer MLP gradients vs FD oracle") {
    Rng rng(31);
    Tensor in = rand_tensor({2, 4}, rng);
    Tensor w1 = rand_tensor({4, 5}, rng);
    Tensor b1 = rand_tensor({5}, rng);
    Tensor w2 = rand_tensor({5, 1}, rng);
    Tensor b2 = rand_tensor({1}, rng);
    auto loss_fn = [&] {
        Tensor h = tanh_act(add(matmul(in, w1), b1));
        Tensor out = add(matmul(h, w2), b2);
        return mean(mul(out, out));
    };
    auto rep = gradcheck::check({in, w1, b1, w2, b2}, loss_fn);
    CHECK(rep.ok);
    CHECK(rep.worst < 1e-4);
}

TEST_CASE("elementwise and shape op gradients vs FD") {
    Rng rng(37);

    Tensor a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
    CHECK(gradcheck::check({a, b}, [&] { return sum(mul(add(a, b), sub(a, b))); }).ok);

    // broadcast bias add
    Tensor m = rand_tensor({3, 4}, rng), bias = rand_tensor({4}, rng);
    CHECK(gradcheck::check({m, bias}, [&] { return mean(add(m, bias)); }).ok);

    Tensor x = rand_tensor({10}, rng);
    CHECK(gradcheck::check({x}, [&] { return sum(gelu(x)); }).ok);
    CHECK(gradcheck::check({x}, [&] { return sum(tanh_act(x)); }).ok);
    CHECK(gradcheck::check({x}, [&] { return sum(sigmoid(x)); }).ok);
    CHECK(gradcheck::check({x}, [&] { return sum(exp_elem(x)); }).ok);
    CHECK(gradcheck::check({x}, [&] { return mean(affine(x, -2.5, 0.75)); }).ok);

    // keep FD probes away from the min/clamp kinks
    Tensor p = Tensor::from_values({4}, {0.3, -0.8, 1.4, -0.2});
    Tensor q = Tensor::from_values({4}, {-0.5, 0.6, 0.2, 0.9});
    CHECK(gradcheck::check({p, q}, [&] { return sum(min_elem(p, q)); }).ok);
    CHECK(gradcheck::check({p}, [&] { return sum(clamp(p, -0.5, 1.0)); }).ok);

    Tensor r = rand_tensor({2, 6}, rng);
    CHECK(gradcheck::check({r}, [&] { return mean(mul(reshape(r, {3, 4}), reshape(r, {3, 4}))); }).ok);
    Tensor w = rand_tensor({6, 2}, rng);
    CHECK(gradcheck::check({r}, [&] { return sum(mul(transpose(r), w)); }).ok);
    CHECK(gradcheck::check({r}, [&] { return sum(mean_rows(mul(r, r))); }).ok);
}

TEST_CASE("layer_norm, attention, embedding gradients vs FD") {
    Rng rng(41);
    Tensor x = rand_tensor({3, 8}, rng);
    Tensor gamma = rand_tensor({8}, rng, 0.5);
    Tensor beta = rand_tensor({8}, rng, 0.5);
    Tensor w = rand_tensor({3, 8}, rng);
    CHECK(gradcheck::check({x, gamma, beta}, [&] { return sum(mul(layer_norm(x, gamma, beta), w)); }).ok);

    Tensor q = rand_tensor({4, 8}, rng), k = rand_tensor({4, 8}, rng), v = rand_tensor({4, 8}, rng);
    Tensor w2 = rand_tensor({4, 8}, rng);
    CHECK(gradcheck::check({q, k, v}, [&] { return sum(mul(causal_self_attention(q, k, v, 2), w2)); }).ok);

    Tensor table = rand_tensor({6, 4}, rng);
    std::vector<int> ids = {3, 0, 3, 5};  // repeated id exercises scatter accumulation
    Tensor w3 = rand_tensor({4, 4}, rng);
    CHECK(gradcheck::check({table}, [&] { return sum(mul(embedding_rows(table, ids), w3)); }).ok);
}

TEST_CASE("bce_with_logits gradient and stability") {
    Rng rng(43);
    Tensor z = rand_tensor({6}, rng, 3.0);
    std::vector<Real> labels = {0, 1, 1, 0, 1, 0};
    CHECK(gradcheck::check({z}, [&] { return bce_with_logits(z, labels); }).ok);

    // extreme logits stay finite
    Tensor extreme = Tensor::from_values({2}, {500.0, -500.0});
    CHECK(std::isfinite(bce_with_logits(extreme, {1.0, 0.0}).item()));
}

TEST_CASE("adam: zero gradient leaves params unchanged") {
    Tensor p = Tensor::from_values({3}, {1.0, -2.0, 3.0}, true);
    std::vector<Tensor> params = {p};
    AdamState state;
    p.grad();  // allocate zero gradient
    adam_step(params, state, {});
    CHECK(p.values()[0] == 1.0);
    CHECK(p.values()[1] == -2.0);
    CHECK(p.values()[2] == 3.0);
}

TEST_CASE("adam: bias-corrected first step moves by -lr*sign(g)") {
    Tensor p = Tensor::from_values({2}, {0.0, 0.0}, true);
    auto g = p.grad();
    g[0] = 0.37;
    g[1] = -2.1;
    std::vector<Tensor> params = {p};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = 0.01;
    adam_step(params, state, cfg);
    CHECK(p.values()[0] == doctest::Approx(-0.01).epsilon(1e-6));
    CHECK(p.values()[1] == doctest::Approx(0.01).epsilon(1e-6));
}

TEST_CASE("adam: 3-step trace on scalar quadratic matches reference recurrence") {
    // reference implementation of the same update, written independently
    double theta_ref = 2.0, m = 0, v = 0;
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> trace_ref;
    for (int t = 1; t <= 3; ++t) {
        double g = theta_ref;  // d/dθ of θ²/2
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mh = m / (1 - std::pow(b1, t));
        double vh = v / (1 - std::pow(b2, t));
        theta_ref -= lr * mh / (std::sqrt(vh) + eps);
        trace_ref.push_back(theta_ref);
    }

    Tensor p = Tensor::scalar(2.0, true);
    std::vector<Tensor> params = {p};
    AdamState state;
    AdamConfig cfg;
    cfg.lr = lr;
    for (int t = 0; t < 3; ++t) {
        p.zero_grad();
        {
            Tape tape;
            Tensor loss = scale(mul(p, p), 0.5);
            backward(loss, tape);
        }
        adam_step(params, state, cfg);
        CHECK(p.item() == doctest::Approx(trace_ref[t]).epsilon(1e-12));
    }
}

TEST_CASE("operations are deterministic given identical inputs") {
    Rng rng(47);
    Tensor a = rand_tensor({5, 5}, rng);
    Tensor b = rand_tensor({5, 5}, rng);
    Tensor o1 = matmul(gelu(a), softmax(b, 1));
    Tensor o2 = matmul(gelu(a), softmax(b, 1));
    for (int64_t i = 0; i < o1.size(); ++i) CHECK(o1.values()[i] == o2.values()[i]);
}

TEST_CASE("non-finite results abort with a numeric error") {
    Tensor huge = Tensor::from_values({2}, {1000.0, 1000.0});
    CHECK_THROWS_AS(exp_elem(huge), NumericError);
    Tensor a = Tensor::from_values({1, 1}, {1e308});
    Tensor b = Tensor::from_values({1, 1}, {1e308});
    CHECK_THROWS_AS(add(a, b), NumericError);
}

TEST_CASE("broadcast rejects non-suffix shapes") {
    Tensor a = Tensor::zeros({4, 3});
    Tensor b = Tensor::zeros({4});
    CHECK_THROWS_AS(add(a, b), DimensionError);
}
