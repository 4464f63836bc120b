#include "biper/qe_analytics.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <numbers>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>

namespace biper::qe {

namespace {

constexpr double kPi = std::numbers::pi;

void require_positive(double v, const char* what) {
  if (!(v > 0.0) || !std::isfinite(v)) {
    throw std::invalid_argument(std::string(what) + " must be positive and finite, got " +
                                std::to_string(v));
  }
}

void require_open_unit(double w_hat) {
  if (!(std::abs(w_hat) < 1.0)) {
    throw std::domain_error("pdf: |w_hat| must be < 1, got " + std::to_string(w_hat));
  }
}

// exp(-|a|/x) + 2 cosh(a/x) / (e^{pi/x} - 1), rewritten without overflow.
double branch_sum(double a, double x) {
  const double t = std::abs(a);
  const double tail = (std::exp((t - kPi) / x) + std::exp(-(t + kPi) / x)) /
                      -std::expm1(-kPi / x);
  return std::exp(-t / x) + tail;
}

}  // namespace

LaplaceModel::LaplaceModel(double scale) : b(scale) { require_positive(scale, "Laplace b"); }

LaplaceModel fit_laplace(std::span<const double> w) {
  if (w.empty()) throw std::invalid_argument("fit_laplace: empty sample");
  double s = 0.0;
  for (double v : w) {
    if (!std::isfinite(v)) throw std::invalid_argument("fit_laplace: non-finite sample");
    s += std::abs(v);
  }
  const double b = s / static_cast<double>(w.size());
  if (b <= 0.0) throw std::invalid_argument("fit_laplace: all-zero sample has no scale");
  return LaplaceModel(b);
}

double pdf_transformed(double w_hat, double omega0, LaplaceModel model) {
  require_positive(omega0, "omega0");
  require_open_unit(w_hat);
  const double x = omega0 * model.b;
  const double a = std::asin(w_hat);
  return branch_sum(a, x) / (2.0 * x * std::sqrt(1.0 - w_hat * w_hat));
}

double pdf_partial_sum(double w_hat, double omega0, LaplaceModel model, int K) {
  require_positive(omega0, "omega0");
  require_open_unit(w_hat);
  if (K < 0) throw std::invalid_argument("pdf_partial_sum: K must be >= 0");
  const double x = omega0 * model.b;
  const double a = std::asin(w_hat);
  const double front = 1.0 / (2.0 * x * std::sqrt(1.0 - w_hat * w_hat));
  double s = 0.0;
  // Add the smallest terms first.
  for (int m = K; m >= 1; --m) {
    for (int k : {m, -m}) {
      const double wk = (k % 2 == 0 ? a : -a) + kPi * k;
      s += std::exp(-std::abs(wk) / x);
    }
  }
  s += std::exp(-std::abs(a) / x);
  return front * s;
}

double gamma_optimal_product(double x) {
  require_positive(x, "omega0*b");
  // (e^{pi/x} + 1) / (e^{pi/x} - 1) = coth(pi / 2x), finite for every x > 0.
  return x / std::tanh(kPi / (2.0 * x)) / (x * x + 1.0);
}

double gamma_optimal(double omega0, LaplaceModel model) {
  require_positive(omega0, "omega0");
  return gamma_optimal_product(omega0 * model.b);
}

double qe_closed_form_product(double x, double gamma) {
  require_positive(x, "omega0*b");
  if (gamma < 0.0) throw std::invalid_argument("qe: gamma must be >= 0");
  const double second_moment = 2.0 * x * x / (4.0 * x * x + 1.0);
  return second_moment - 2.0 * gamma * gamma_optimal_product(x) + gamma * gamma;
}

double qe_closed_form(double omega0, LaplaceModel model, double gamma) {
  require_positive(omega0, "omega0");
  return qe_closed_form_product(omega0 * model.b, gamma);
}

double qe_optimal_product(double x) {
  const double g = gamma_optimal_product(x);
  return qe_closed_form_product(x, g);
}

double qe_asymptote() { return 0.5 - 4.0 / (kPi * kPi); }

QEMaximum find_qe_maximum(double lo, double hi, double tol) {
  require_positive(lo, "lo");
  if (!(hi > lo)) throw std::invalid_argument("find_qe_maximum: need hi > lo");
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(lo), b = std::log(hi);
  double c = b - phi * (b - a), d = a + phi * (b - a);
  double fc = qe_optimal_product(std::exp(c)), fd = qe_optimal_product(std::exp(d));
  while (b - a > tol) {
    if (fc > fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - phi * (b - a);
      fc = qe_optimal_product(std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + phi * (b - a);
      fd = qe_optimal_product(std::exp(d));
    }
  }
  const double x = std::exp(0.5 * (a + b));
  return {x, qe_optimal_product(x)};
}

std::vector<double> log_grid(double lo, double hi, std::size_t points) {
  require_positive(lo, "grid lower bound");
  if (points == 0) throw std::invalid_argument("log_grid: need at least one point");
  if (hi < lo) throw std::invalid_argument("log_grid: upper bound below lower bound");
  if (points == 1) return {lo};
  std::vector<double> grid(points);
  const double la = std::log(lo), lb = std::log(hi);
  for (std::size_t i = 0; i < points; ++i) {
    grid[i] = std::exp(la + (lb - la) * static_cast<double>(i) / static_cast<double>(points - 1));
  }
  grid.back() = hi;
  return grid;
}

std::vector<QEReport> qe_curve(LaplaceModel model, std::span<const double> omega_grid) {
  std::vector<QEReport> out;
  out.reserve(omega_grid.size());
  for (double omega0 : omega_grid) {
    require_positive(omega0, "omega0");
    QEReport r;
    r.omega0 = omega0;
    r.b = model.b;
    r.gamma = gamma_optimal(omega0, model);
    r.qe = qe_closed_form(omega0, model, r.gamma);
    out.push_back(std::move(r));
  }
  return out;
}

double pdf_mass(double omega0, LaplaceModel model, double lo, double hi) {
  require_positive(omega0, "omega0");
  if (lo < -1.0 || hi > 1.0 || lo > hi) throw std::invalid_argument("pdf_mass: bad interval");
  const double x = omega0 * model.b;
  // w_hat = sin(theta) cancels the 1/sqrt(1 - w_hat^2) factor.
  auto integrand = [x](double theta) { return branch_sum(theta, x) / (2.0 * x); };
  using boost::math::quadrature::gauss_kronrod;
  const double ta = std::asin(lo), tb = std::asin(hi);
  double total = 0.0;
  // Split at the kink in theta = 0.
  if (ta < 0.0) total += gauss_kronrod<double, 61>::integrate(integrand, ta, std::min(tb, 0.0), 15, 1e-14);
  if (tb > 0.0) total += gauss_kronrod<double, 61>::integrate(integrand, std::max(ta, 0.0), tb, 15, 1e-14);
  return total;
}

std::vector<PdfPoint> pdf_grid(double omega0, LaplaceModel model, std::size_t points) {
  if (points == 0) throw std::invalid_argument("pdf_grid: need at least one point");
  std::vector<PdfPoint> grid;
  grid.reserve(points);
  for (std::size_t i = 0; i < points; ++i) {
    const double theta =
        -kPi / 2.0 + kPi * (static_cast<double>(i) + 1.0) / (static_cast<double>(points) + 1.0);
    const double w_hat = std::sin(theta);
    grid.push_back({w_hat, pdf_transformed(w_hat, omega0, model)});
  }
  return grid;
}

std::vector<double> sample_laplace(double b, std::size_t n, std::uint64_t seed) {
  require_positive(b, "Laplace b");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> magnitude(1.0 / b);
  std::vector<double> out(n);
  for (auto& v : out) {
    const bool negative = (rng() >> 63) != 0;
    const double m = magnitude(rng);
    v = negative ? -m : m;
  }
  return out;
}

MonteCarloQE monte_carlo_qe(double omega0, LaplaceModel model, double gamma, std::size_t n,
                            std::uint64_t seed) {
  require_positive(omega0, "omega0");
  if (n == 0) throw std::invalid_argument("monte_carlo_qe: need samples");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> magnitude(1.0 / model.b);
  double qe_sum = 0.0, abs_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool negative = (rng() >> 63) != 0;
    const double w = negative ? -magnitude(rng) : magnitude(rng);
    const double s = std::sin(omega0 * w);
    const double q = s >= 0.0 ? gamma : -gamma;
    qe_sum += (s - q) * (s - q);
    abs_sum += std::abs(s);
  }
  return {qe_sum / static_cast<double>(n), abs_sum / static_cast<double>(n)};
}

void write_qe_csv(std::ostream& os, std::span<const QEReport> reports) {
  os << "omega0,b,gamma,qe\n";
  os.precision(17);
  for (const auto& r : reports) os << r.omega0 << ',' << r.b << ',' << r.gamma << ',' << r.qe << '\n';
}

void write_pdf_csv(std::ostream& os, std::span<const PdfPoint> grid) {
  os << "w_hat,density\n";
  os.precision(17);
  for (const auto& p : grid) os << p.w_hat << ',' << p.density << '\n';
}

}  // namespace biper::qe
