#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "doctest.h"

#include "deconf/numerics.hpp"

using namespace deconf;

TEST_CASE("seeded rng reproduces its stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.standard_normal() == b.standard_normal());
    }
}

TEST_CASE("different seeds give different streams") {
    Rng a(42), b(43);
    bool any_differ = false;
    for (int i = 0; i < 10; ++i) {
        if (a.standard_normal() != b.standard_normal()) {
            any_differ = true;
        }
    }
    CHECK(any_differ);
}

TEST_CASE("standard normal sample mean concentrates") {
    Rng rng(1);
    double sum = 0.0;
    for (int i = 0; i < 100000; ++i) {
        sum += rng.standard_normal();
    }
    CHECK(std::abs(sum / 100000.0) < 0.02);
}

TEST_CASE("child streams are independent of the parent stream") {
    Rng parent(7);
    Rng c0 = parent.child(0);
    Rng c1 = parent.child(1);
    CHECK(c0.standard_normal() != c1.standard_normal());
    // Deriving a child does not consume parent state.
    Rng parent2(7);
    (void)parent2.child(0);
    Rng parent3(7);
    CHECK(parent2.standard_normal() == parent3.standard_normal());
}

TEST_CASE("normal with zero std returns the mean exactly") {
    Rng rng(3);
    CHECK(rng.normal(5.0, 0.0) == 5.0);
}

TEST_CASE("normal with negative std is rejected") {
    Rng rng(3);
    CHECK_THROWS_AS(rng.normal(0.0, -1.0), config_error);
}

TEST_CASE("normal sample variance matches") {
    Rng rng(5);
    const int n = 100000;
    double sum = 0.0, sq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal(0.0, 0.5);
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(var - 0.25) < 0.01);
}

TEST_CASE("normal mean matches the beta coefficient distribution") {
    // beta_i ~ N(1 - i/p, (1/p)^2) with p = 4, i = 2 has mean 0.5.
    Rng rng(6);
    const int n = 100000;
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += rng.normal(1.0 - 2.0 / 4.0, 1.0 / 4.0);
    }
    CHECK(std::abs(sum / n - 0.5) < 0.005);
}

TEST_CASE("affine computes Wx + b") {
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(2, 2);
    Eigen::VectorXd x(2);
    x << 3.0, -1.0;
    Eigen::VectorXd zero_b = Eigen::VectorXd::Zero(2);
    CHECK(affine(I, x, zero_b) == x);

    Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(2, 2);
    Eigen::VectorXd b(2);
    b << 1.0, 2.0;
    CHECK(affine(Z, x, b) == b);

    Eigen::MatrixXd W(2, 2);
    W << 1.0, 2.0, 3.0, 4.0;
    Eigen::VectorXd ones = Eigen::VectorXd::Ones(2);
    const Eigen::VectorXd y = affine(W, ones, zero_b);
    CHECK(y(0) == 3.0);
    CHECK(y(1) == 7.0);
}

TEST_CASE("affine names both shapes on mismatch") {
    Eigen::MatrixXd W(2, 3);
    Eigen::VectorXd x(2), b(2);
    try {
        affine(W, x, b);
        FAIL("expected shape_error");
    } catch (const shape_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("2x3") != std::string::npos);
    }
}

TEST_CASE("param store rejects duplicate names and tracks shapes") {
    ParamStore ps;
    Eigen::MatrixXd& w = ps.add("w", 2, 3);
    CHECK(w.rows() == 2);
    CHECK_THROWS_AS(ps.add("w", 1, 1), config_error);
    CHECK(ps.at("w").grad.rows() == 2);
    CHECK(ps.at("w").grad.cols() == 3);
    CHECK(ps.value_count() == 6);
    CHECK_THROWS_AS(ps.at("nope"), config_error);
}

TEST_CASE("adam leaves parameters unchanged under zero gradients") {
    ParamStore ps;
    ps.add("w", 3).setConstant(1.5);
    Adam adam;
    adam.step(ps);
    CHECK(adam.step_count() == 1);
    CHECK(ps.at("w").value.isApproxToConstant(1.5));
}

TEST_CASE("adam first step has bias-corrected magnitude") {
    ParamStore ps;
    ps.add("w", 1).setConstant(2.0);
    ps.at("w").grad.setConstant(0.3);
    const double lr = 0.05;
    Adam adam(AdamConfig{.learning_rate = lr});
    adam.step(ps);
    const double expected = 2.0 - lr * 0.3 / (0.3 + 1e-8);
    CHECK(ps.at("w").value(0, 0) == doctest::Approx(expected).epsilon(1e-9));
    // Gradients are untouched; the caller clears them.
    CHECK(ps.at("w").grad(0, 0) == 0.3);
}

TEST_CASE("adam drives a quadratic toward its minimum") {
    // The optimizer is its own oracle here: descent on f(w) = w^2 is
    // guaranteed by convexity.
    ParamStore ps;
    ps.add("w", 1).setConstant(1.0);
    Adam adam(AdamConfig{.learning_rate = 0.1});
    for (int i = 0; i < 100; ++i) {
        ps.zero_grads();
        ps.at("w").grad(0, 0) = 2.0 * ps.at("w").value(0, 0);
        adam.step(ps);
    }
    CHECK(std::abs(ps.at("w").value(0, 0)) < 0.1);
    CHECK(adam.step_count() == 100);
}

TEST_CASE("optimizer descends on a positive-definite quadratic") {
    Eigen::MatrixXd Q(3, 3);
    Q << 4.0, 1.0, 0.0,
         1.0, 3.0, 0.5,
         0.0, 0.5, 2.0;
    ParamStore ps;
    ps.add("x", 3).setConstant(1.0);
    auto loss_of = [&](const Eigen::VectorXd& x) { return x.dot(Q * x); };
    const double initial = loss_of(ps.at("x").value.col(0));
    Adam adam;
    for (int i = 0; i < 200; ++i) {
        ps.zero_grads();
        ps.at("x").grad = 2.0 * Q * ps.at("x").value;
        adam.step(ps);
    }
    CHECK(loss_of(ps.at("x").value.col(0)) < initial);
}

TEST_CASE("adam reports the parameter with a non-finite gradient") {
    ParamStore ps;
    ps.add("fine", 2);
    ps.add("broken", 2);
    ps.at("broken").grad(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Adam adam;
    try {
        adam.step(ps);
        FAIL("expected divergence_error");
    } catch (const divergence_error& e) {
        CHECK(std::string(e.what()).find("broken") != std::string::npos);
    }
}

TEST_CASE("grad_check on a smooth scalar function") {
    ParamStore ps;
    ps.add("w", 1).setConstant(3.0);
    auto loss = [](ParamStore& p) {
        const double w = p.at("w").value(0, 0);
        p.at("w").grad(0, 0) += 2.0 * w;
        return w * w;
    };
    const GradCheckReport report = grad_check_report(loss, ps, 1e-4);
    CHECK(report.max_rel_error < 1e-6);
    CHECK(report.worst_param == "w");
    // The analytic gradient is restored afterwards.
    CHECK(ps.at("w").grad(0, 0) == doctest::Approx(6.0));
}

TEST_CASE("grad_check is exact for linear functions") {
    ParamStore ps;
    ps.add("w", 1).setConstant(0.7);
    const double c = 2.5;
    auto loss = [c](ParamStore& p) {
        p.at("w").grad(0, 0) += c;
        return c * p.at("w").value(0, 0);
    };
    CHECK(grad_check(loss, ps, 1e-4) < 1e-9);
}

TEST_CASE("grad_check rejects a non-finite loss") {
    ParamStore ps;
    ps.add("w", 1);
    auto loss = [](ParamStore&) { return std::numeric_limits<double>::infinity(); };
    CHECK_THROWS_AS(grad_check(loss, ps, 1e-4), divergence_error);
}

TEST_CASE("grad_check flags a corrupted gradient") {
    ParamStore ps;
    ps.add("w", 1).setConstant(1.0);
    auto loss = [](ParamStore& p) {
        const double w = p.at("w").value(0, 0);
        p.at("w").grad(0, 0) += 2.0 * w + 0.5;  // wrong on purpose
        return w * w;
    };
    CHECK(grad_check(loss, ps, 1e-4) > 0.1);
}
