#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <sstream>

#include "biper/qe_analytics.hpp"
#include "doctest.h"

using namespace biper;
using boost::math::quadrature::gauss_kronrod;

namespace {

constexpr double kPi = std::numbers::pi;

// E over w ~ La(0, b) of h(|sin(omega0 w)|), integrated half-period by half-period.
template <class F>
double laplace_expectation(double omega0, double b, F h) {
  const double period = kPi / omega0;
  double total = 0.0;
  for (int k = 0; k < 100000; ++k) {
    const double lo = k * period, hi = lo + period;
    if (std::exp(-lo / b) < 1e-18) break;
    total += gauss_kronrod<double, 31>::integrate(
        [&](double w) { return std::exp(-w / b) / b * h(std::abs(std::sin(omega0 * w))); }, lo, hi, 10,
        1e-13);
  }
  return total;
}

double gamma_oracle(double omega0, double b) {
  return laplace_expectation(omega0, b, [](double s) { return s; });
}

double qe_oracle(double omega0, double b, double gamma) {
  return laplace_expectation(omega0, b, [gamma](double s) { return (s - gamma) * (s - gamma); });
}

// The closed form exactly as printed, exponentials and all.
double qe_printed(double x, double gamma) {
  const double e = std::exp(kPi / x);
  return 2 * x * x / (4 * x * x + 1) - 2 * gamma * x * (e + 1) / ((x * x + 1) * (e - 1)) + gamma * gamma;
}

}  // namespace

TEST_CASE("optimal gamma matches direct integration") {
  for (double b : {0.02, 0.1, 0.5}) {
    for (double omega0 : {1.0, 5.0, 20.0, 60.0}) {
      CHECK(qe::gamma_optimal(omega0, qe::LaplaceModel(b)) ==
            doctest::Approx(gamma_oracle(omega0, b)).epsilon(1e-9));
    }
  }
}

TEST_CASE("closed-form QE matches direct integration for arbitrary gamma") {
  for (double b : {0.05, 0.3}) {
    for (double omega0 : {2.0, 10.0, 30.0}) {
      for (double gamma : {0.0, 0.3, 0.7, 1.2}) {
        CHECK(qe::qe_closed_form(omega0, qe::LaplaceModel(b), gamma) ==
              doctest::Approx(qe_oracle(omega0, b, gamma)).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("stable evaluation agrees with the printed expression") {
  for (double x : {0.5, 0.954882, 2.0, 10.0, 100.0}) {
    for (double gamma : {0.2, qe::gamma_optimal_product(x)}) {
      CHECK(qe::qe_closed_form_product(x, gamma) == doctest::Approx(qe_printed(x, gamma)).epsilon(1e-12));
    }
  }
  // Where e^{pi/x} overflows the printed form is unusable; ours stays finite.
  CHECK(std::isinf(std::exp(kPi / 1e-3)));
  CHECK(std::isfinite(qe::qe_optimal_product(1e-3)));
  CHECK(qe::qe_optimal_product(1e-3) >= 0.0);
}

TEST_CASE("optimal gamma minimizes the closed-form QE") {
  for (double x : {0.3, 1.0, 7.0}) {
    const double g = qe::gamma_optimal_product(x);
    const double q = qe::qe_closed_form_product(x, g);
    CHECK(q <= qe::qe_closed_form_product(x, g + 1e-3));
    CHECK(q <= qe::qe_closed_form_product(x, g - 1e-3));
  }
}

TEST_CASE("QE peaks at 0.102835 when omega0 b is near 0.954882") {
  const auto m = qe::find_qe_maximum();
  CHECK(m.product == doctest::Approx(0.954882).epsilon(1e-6));
  CHECK(m.qe == doctest::Approx(0.102835).epsilon(1e-6));
  CHECK(std::abs(m.qe - 0.102835) < 1e-6);
  // Holds for any b: the maximum over omega0 sits at 0.954882 / b.
  for (double b : {0.01, 0.2}) {
    const qe::LaplaceModel model(b);
    const double at = qe::qe_closed_form(m.product / b, model, qe::gamma_optimal(m.product / b, model));
    CHECK(at == doctest::Approx(m.qe).epsilon(1e-12));
  }
}

TEST_CASE("QE tends to 0.5 - 4/pi^2 for large omega0 b") {
  CHECK(qe::qe_asymptote() == doctest::Approx(0.5 - 4.0 / (kPi * kPi)));
  CHECK(std::abs(qe::qe_optimal_product(1e4) - qe::qe_asymptote()) < 1e-6);
  CHECK(std::abs(qe::qe_optimal_product(1e6) - qe::qe_asymptote()) < 1e-9);
}

TEST_CASE("QE rises below the peak and falls above it") {
  const auto grid = qe::log_grid(1e-2, 1e3, 400);
  const double peak = qe::find_qe_maximum().product;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double a = qe::qe_optimal_product(grid[i - 1]), b = qe::qe_optimal_product(grid[i]);
    if (grid[i] < peak) CHECK(b > a);
    if (grid[i - 1] > peak) CHECK(b < a);
  }
}

TEST_CASE("transformed pdf integrates to one") {
  for (double x : {0.1, 1.0, 10.0}) {
    const double mass = qe::pdf_mass(x, qe::LaplaceModel(1.0));
    CHECK(std::abs(mass - 1.0) < 1e-8);
  }
  // Same density written in the w_hat variable, away from the integrable endpoints.
  const qe::LaplaceModel m(0.05);
  const double inner = gauss_kronrod<double, 61>::integrate(
      [&](double w) { return qe::pdf_transformed(w, 20.0, m); }, -0.9, 0.9, 15, 1e-12);
  CHECK(inner == doctest::Approx(qe::pdf_mass(20.0, m, -0.9, 0.9)).epsilon(1e-9));
}

TEST_CASE("pdf equals the truncated branch sum") {
  for (double x : {0.5, 3.0}) {
    for (double w : {-0.95, -0.3, 0.0, 0.4, 0.99}) {
      const double closed = qe::pdf_transformed(w, x, qe::LaplaceModel(1.0));
      const double series = qe::pdf_partial_sum(w, x, qe::LaplaceModel(1.0), 200);
      CHECK(std::abs(closed - series) < 1e-10 * std::max(1.0, closed));
    }
  }
}

TEST_CASE("pdf is symmetric and follows the empirical histogram") {
  const qe::LaplaceModel m(0.1);
  for (double w : {0.1, 0.5, 0.9}) {
    CHECK(qe::pdf_transformed(w, 15.0, m) == doctest::Approx(qe::pdf_transformed(-w, 15.0, m)));
  }
  const auto s = qe::sample_laplace(0.1, 200000, 4);
  std::size_t in = 0;
  for (double v : s) {
    const double h = std::sin(15.0 * v);
    if (h > 0.2 && h < 0.6) ++in;
  }
  CHECK(static_cast<double>(in) / s.size() == doctest::Approx(qe::pdf_mass(15.0, m, 0.2, 0.6)).epsilon(0.02));
}

TEST_CASE("domain errors") {
  const qe::LaplaceModel m(1.0);
  CHECK_THROWS_AS(qe::pdf_transformed(1.0, 1.0, m), std::domain_error);
  CHECK_THROWS_AS(qe::pdf_transformed(-1.5, 1.0, m), std::domain_error);
  CHECK_THROWS_AS(qe::pdf_transformed(0.0, 0.0, m), std::invalid_argument);
  CHECK_THROWS_AS(qe::LaplaceModel(0.0), std::invalid_argument);
  CHECK_THROWS_AS(qe::LaplaceModel(-1.0), std::invalid_argument);
  CHECK_THROWS_AS(qe::qe_closed_form_product(1.0, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(qe::pdf_partial_sum(0.0, 1.0, m, -1), std::invalid_argument);
  CHECK_THROWS_AS(qe::pdf_mass(1.0, m, 0.5, 0.2), std::invalid_argument);
  CHECK_THROWS_AS(qe::log_grid(2.0, 1.0, 5), std::invalid_argument);
}

TEST_CASE("Laplace fit is the mean absolute value") {
  const std::vector<double> w{0.5, -1.5, 2.0, 0.0};
  CHECK(qe::fit_laplace(w).b == 1.0);
  CHECK_THROWS_AS(qe::fit_laplace(std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(qe::fit_laplace(std::vector<double>{0.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(qe::fit_laplace(std::vector<double>{1.0, NAN}), std::invalid_argument);
  const auto s = qe::sample_laplace(0.3, 200000, 1);
  CHECK(qe::fit_laplace(s).b == doctest::Approx(0.3).epsilon(0.01));
  CHECK(qe::sample_laplace(0.3, 10, 5) == qe::sample_laplace(0.3, 10, 5));
}

TEST_CASE("Monte Carlo QE converges to the closed form") {
  for (double x : {0.5, 0.954882, 3.0}) {
    const double b = 0.1, omega0 = x / b;
    const double g = qe::gamma_optimal_product(x);
    const auto mc = qe::monte_carlo_qe(omega0, qe::LaplaceModel(b), g, 500000, 8);
    CHECK(mc.qe == doctest::Approx(qe::qe_optimal_product(x)).epsilon(0.01));
    CHECK(mc.mean_abs_sin == doctest::Approx(g).epsilon(0.005));
  }
}

TEST_CASE("QE curve and CSV output") {
  const auto grid = qe::log_grid(1.0, 100.0, 3);
  REQUIRE(grid.size() == 3);
  CHECK(grid[1] == doctest::Approx(10.0));
  const auto curve = qe::qe_curve(qe::LaplaceModel(0.1), grid);
  REQUIRE(curve.size() == 3);
  CHECK(curve[2].qe == doctest::Approx(qe::qe_optimal_product(10.0)));
  std::ostringstream os;
  qe::write_qe_csv(os, curve);
  CHECK(os.str().rfind("omega0,b,gamma,qe\n", 0) == 0);
  std::ostringstream ps;
  qe::write_pdf_csv(ps, qe::pdf_grid(5.0, qe::LaplaceModel(0.2), 11));
  const std::string pdf = ps.str();
  CHECK(pdf.rfind("w_hat,density\n", 0) == 0);
  CHECK(std::count(pdf.begin(), pdf.end(), '\n') == 12);
}
