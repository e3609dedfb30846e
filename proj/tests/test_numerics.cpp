#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "toxlens/numerics.hpp"
#include "toxlens/rng.hpp"
#include "toxlens/tensor.hpp"

using namespace toxlens;

namespace {

// Quadrature oracle for the two-sided Student-t p-value: integrate the pdf
// with composite Simpson over [0, |t|], then p = 1 - 2 * integral.
double t_pdf(double x, double dof) {
  const double log_c = std::lgamma(0.5 * (dof + 1.0)) - std::lgamma(0.5 * dof) -
                       0.5 * std::log(dof * 3.14159265358979323846);
  return std::exp(log_c - 0.5 * (dof + 1.0) * std::log1p(x * x / dof));
}

double t_two_sided_p_quadrature(double t, double dof) {
  const double hi = std::fabs(t);
  const int n = 40000;  // even
  const double h = hi / n;
  double acc = t_pdf(0.0, dof) + t_pdf(hi, dof);
  for (int i = 1; i < n; ++i) acc += t_pdf(i * h, dof) * (i % 2 == 1 ? 4.0 : 2.0);
  const double integral = acc * h / 3.0;
  return 1.0 - 2.0 * integral;
}

}  // namespace

TEST_CASE("activation point values") {
  CHECK(apply_activation(ActivationKind::Silu, 0.0f) == 0.0f);
  CHECK(apply_activation(ActivationKind::GeluExact, 0.0f) == 0.0f);
  CHECK(apply_activation(ActivationKind::GeluTanh, 0.0f) == 0.0f);
  CHECK(apply_activation(ActivationKind::Sigmoid, 0.0f) == doctest::Approx(0.5).epsilon(1e-7));
  // silu(1) = 1 / (1 + e^-1)
  CHECK(apply_activation(ActivationKind::Silu, 1.0f) == doctest::Approx(0.731059).epsilon(1e-5));
}

TEST_CASE("activations stay finite and dip negative left of zero") {
  for (ActivationKind kind : {ActivationKind::GeluExact, ActivationKind::GeluTanh,
                              ActivationKind::Silu, ActivationKind::Sigmoid}) {
    for (double x = -20.0; x <= 20.0; x += 0.5) {
      CHECK(std::isfinite(apply_activation_f64(kind, x)));
      CHECK(std::isfinite(apply_activation(kind, static_cast<float>(x))));
    }
  }
  for (ActivationKind kind : {ActivationKind::GeluExact, ActivationKind::GeluTanh, ActivationKind::Silu}) {
    const double at1 = apply_activation_f64(kind, -1.0);
    const double at5 = apply_activation_f64(kind, -5.0);
    const double at20 = apply_activation_f64(kind, -20.0);
    CHECK(at1 < 0.0);
    CHECK(at5 < 0.0);
    CHECK(std::fabs(at20) < 1e-6);  // vanishes toward -inf
    CHECK(std::fabs(at20) < std::fabs(at5));
    CHECK(std::fabs(at5) < std::fabs(at1));
  }
}

TEST_CASE("gelu tanh approximation tracks exact gelu") {
  for (double x = -5.0; x <= 5.0; x += 0.01) {
    CHECK(std::fabs(apply_activation_f64(ActivationKind::GeluTanh, x) -
                    apply_activation_f64(ActivationKind::GeluExact, x)) < 1e-3);
  }
}

TEST_CASE("activation derivatives match central differences") {
  const double h = 1e-6;
  for (ActivationKind kind : {ActivationKind::GeluExact, ActivationKind::GeluTanh,
                              ActivationKind::Silu, ActivationKind::Sigmoid}) {
    for (double x = -4.0; x <= 4.0; x += 0.37) {
      const double fd = (apply_activation_f64(kind, x + h) - apply_activation_f64(kind, x - h)) / (2 * h);
      CHECK(activation_derivative_f64(kind, x) == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

TEST_CASE("pearson hand values") {
  const std::vector<double> a{1, 2, 3}, b{2, 4, 6}, c{3, 2, 1};
  CHECK(pearson(a, b) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pearson(a, c) == doctest::Approx(-1.0).epsilon(1e-12));
  const std::vector<double> x{1, 2, 3, 4}, y{1, 3, 2, 4};
  CHECK(pearson(x, y) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("pearson errors") {
  const std::vector<double> a{1, 2, 3}, short_b{1, 2}, flat{5, 5, 5};
  CHECK_THROWS_WITH_AS(pearson(a, short_b), doctest::Contains("length"), Error);
  CHECK_THROWS_AS(pearson(a, flat), Error);
  CHECK_THROWS_AS(pearson(flat, a), Error);
}

TEST_CASE("pearson symmetry and affine invariance") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> xs(17), ys(17);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      xs[i] = rng.normal();
      ys[i] = rng.normal();
    }
    const double r = pearson(xs, ys);
    CHECK(r == doctest::Approx(pearson(ys, xs)).epsilon(1e-12));
    const double a = rng.uniform(0.1, 3.0), b = rng.normal();
    std::vector<double> scaled(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) scaled[i] = a * xs[i] + b;
    CHECK(pearson(scaled, ys) == doctest::Approx(r).epsilon(1e-9));
    CHECK(r >= -1.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("cosine hand values and properties") {
  const Tensor1 e1(std::vector<float>{1, 0});
  const Tensor1 e2(std::vector<float>{0, 1});
  const Tensor1 ones(std::vector<float>{1, 1});
  CHECK(cosine(e1, e1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(cosine(e1, e2) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(cosine(ones, e1) == doctest::Approx(0.707107).epsilon(1e-6));

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = rng.uniform_int(2, 32);
    Tensor1 a(n), neg(n);
    for (int i = 0; i < n; ++i) {
      a[i] = static_cast<float>(rng.normal());
      neg[i] = -a[i];
    }
    CHECK(std::fabs(cosine(a, neg) + 1.0) <= 1e-12);
  }

  const Tensor1 zero(2);
  CHECK_THROWS_AS(cosine(zero, e1), Error);
  CHECK_THROWS_AS(cosine(e1, Tensor1(std::vector<float>{1, 0, 0})), Error);
}

TEST_CASE("softmax rows sum to one with max subtraction") {
  Rng rng(7);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<float> row(static_cast<std::size_t>(rng.uniform_int(1, 40)));
    for (float& v : row) v = static_cast<float>(rng.normal(0.0, trial % 3 == 0 ? 300.0 : 2.0));
    softmax_inplace(row);
    double sum = 0.0;
    for (float v : row) {
      CHECK(std::isfinite(v));
      sum += v;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm output has zero mean and unit variance") {
  Rng rng(13);
  const int d = 24;
  const Tensor1 gamma(std::vector<float>(d, 1.0f));
  const Tensor1 beta(std::vector<float>(d, 0.0f));
  for (int trial = 0; trial < 10; ++trial) {
    Tensor1 x(d);
    for (int i = 0; i < d; ++i) x[i] = static_cast<float>(rng.normal(3.0, 5.0));
    const Tensor1 y = layer_norm(x, gamma, beta);
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += y[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (y[i] - mean) * (y[i] - mean);
    var /= d;
    CHECK(std::fabs(mean) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-4);  // eps shifts variance by ~eps/var
  }
}

TEST_CASE("matmul matches hand computation") {
  const Tensor2 a(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor2 b(3, 2, {7, 8, 9, 10, 11, 12});
  const Tensor2 c = matmul(a, b);
  CHECK(c.at(0, 0) == doctest::Approx(58));
  CHECK(c.at(0, 1) == doctest::Approx(64));
  CHECK(c.at(1, 0) == doctest::Approx(139));
  CHECK(c.at(1, 1) == doctest::Approx(154));
  CHECK_THROWS_AS(matmul(a, a), Error);
}

TEST_CASE("incomplete beta closed forms") {
  // I_x(1,1) = x ; I_x(2,2) = 3x^2 - 2x^3
  for (double x = 0.05; x < 1.0; x += 0.1) {
    CHECK(regularized_incomplete_beta(1.0, 1.0, x) == doctest::Approx(x).epsilon(1e-10));
    CHECK(regularized_incomplete_beta(2.0, 2.0, x) ==
          doctest::Approx(3 * x * x - 2 * x * x * x).epsilon(1e-10));
  }
}

TEST_CASE("student t p-values against quadrature oracle") {
  for (const auto& [t, dof] : std::vector<std::pair<double, double>>{
           {0.5, 3}, {1.0, 10}, {1.8257418583505536, 10}, {2.5, 30}, {0.0, 7}, {-2.0, 14}}) {
    CHECK(student_t_two_sided_p(t, dof) ==
          doctest::Approx(t_two_sided_p_quadrature(t, dof)).epsilon(1e-8));
  }
}

TEST_CASE("pearson_with_p ranges") {
  Rng rng(99);
  std::vector<double> xs(50), ys(50);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i] = rng.normal();
    ys[i] = 0.3 * xs[i] + rng.normal();
  }
  const Correlation c = pearson_with_p(xs, ys);
  CHECK(c.p >= 0.0);
  CHECK(c.p <= 1.0);
  CHECK(c.r > 0.0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor1(std::vector<float>{}), Error);
  CHECK_THROWS_AS(Tensor1(std::vector<float>{1.0f, std::nanf("")}), Error);
  CHECK_THROWS_AS(Tensor2(2, 2, {1, 2, 3}), Error);
  CHECK_THROWS_AS(Tensor2(0, 2), Error);
  const Tensor2 t(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(t.row(1)[0] == 4.0f);
  CHECK(t.row_copy(0) == Tensor1(std::vector<float>{1, 2, 3}));
  CHECK(t.column_copy(1) == Tensor1(std::vector<float>{2, 5}));
}
