#pragma once

// Quantization-error theory for BiPer weights under a zero-mean Laplace
// model of the latent weights.
//
// With W ~ La(0, b) and w_hat = sin(omega0 W), everything depends on the
// product x = omega0 * b:
//
//   f(w_hat) = 1 / (2x sqrt(1 - w_hat^2)) *
//              [exp(-|asin w_hat| / x) + 2 cosh(asin w_hat / x) / (e^{pi/x} - 1)]
//   gamma*   = E|sin(omega0 W)| = x (e^{pi/x} + 1) / ((x^2 + 1)(e^{pi/x} - 1))
//   QE(g)    = 2x^2 / (4x^2 + 1) - 2 g gamma* + g^2
//
// With g = gamma* the error peaks at 0.102835 near x = 0.954882 and tends to
// 0.5 - 4/pi^2 as x grows.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <utility>
#include <vector>

#include "biper/tensor.hpp"

namespace biper::qe {

struct LaplaceModel {
  double b = 1.0;

  explicit LaplaceModel(double scale);
};

struct PdfPoint {
  double w_hat;
  double density;
};

struct QEReport {
  double omega0 = 0.0;
  double b = 0.0;
  double gamma = 0.0;
  double qe = 0.0;
  std::vector<PdfPoint> pdf_grid;
};

/// Zero-mean Laplace MLE: b = mean |w|.
LaplaceModel fit_laplace(std::span<const double> w);
inline LaplaceModel fit_laplace(const Tensor& w) { return fit_laplace(w.data()); }

double pdf_transformed(double w_hat, double omega0, LaplaceModel model);
/// Sum over k in [-K, K] of the per-branch densities at w_k = (-1)^k asin(w_hat) + pi k.
double pdf_partial_sum(double w_hat, double omega0, LaplaceModel model, int K);

double gamma_optimal(double omega0, LaplaceModel model);
double gamma_optimal_product(double x);

double qe_closed_form(double omega0, LaplaceModel model, double gamma);
double qe_closed_form_product(double x, double gamma);
/// QE with the optimal gamma substituted.
double qe_optimal_product(double x);

/// Limit of qe_optimal_product as x -> infinity: 0.5 - 4/pi^2.
double qe_asymptote();

struct QEMaximum {
  double product;  // omega0 * b at the maximum
  double qe;
};

/// Golden-section search for the interior maximum over x in [lo, hi] (log scale).
QEMaximum find_qe_maximum(double lo = 1e-2, double hi = 1e2, double tol = 1e-9);

std::vector<QEReport> qe_curve(LaplaceModel model, std::span<const double> omega_grid);
std::vector<double> log_grid(double lo, double hi, std::size_t points);

/// Probability mass of w_hat in [lo, hi], integrated in theta = asin(w_hat)
/// with adaptive Gauss-Kronrod.
double pdf_mass(double omega0, LaplaceModel model, double lo = -1.0, double hi = 1.0);

/// Density on `points` abscissae w_hat = sin(theta), theta uniform in
/// (-pi/2, pi/2) excluding the endpoints.
std::vector<PdfPoint> pdf_grid(double omega0, LaplaceModel model, std::size_t points);

// ---- Monte Carlo ---------------------------------------------------------

std::vector<double> sample_laplace(double b, std::size_t n, std::uint64_t seed);

struct MonteCarloQE {
  double qe;             // E[(sin(omega0 w) - gamma Sign(sin(omega0 w)))^2]
  double mean_abs_sin;   // E|sin(omega0 w)|
};

MonteCarloQE monte_carlo_qe(double omega0, LaplaceModel model, double gamma, std::size_t n,
                            std::uint64_t seed);

// ---- CSV -----------------------------------------------------------------

void write_qe_csv(std::ostream& os, std::span<const QEReport> reports);
void write_pdf_csv(std::ostream& os, std::span<const PdfPoint> grid);

}  // namespace biper::qe
