#include <optional>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "biper/bitkernel.hpp"
#include "biper/qe_analytics.hpp"
#include "biper/quantization.hpp"
#include "biper/training.hpp"

namespace py = pybind11;
using namespace biper;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::tuple binarized(const BinarizedTensor& b) { return py::make_tuple(to_array(b.values), b.scale); }

ScalingMode scaling_arg(const std::string& s) { return parse_scaling_mode(s); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "BiPer binarization, quantization-error analytics and bit kernels";

  // analytics
  m.def("gamma_optimal", [](double omega0, double b) { return qe::gamma_optimal(omega0, qe::LaplaceModel(b)); },
        py::arg("omega0"), py::arg("b"));
  m.def(
      "qe_closed_form",
      [](double omega0, double b, std::optional<double> gamma) {
        const qe::LaplaceModel model(b);
        return qe::qe_closed_form(omega0, model, gamma ? *gamma : qe::gamma_optimal(omega0, model));
      },
      py::arg("omega0"), py::arg("b"), py::arg("gamma") = py::none());
  m.def("qe_optimal_product", &qe::qe_optimal_product, py::arg("x"));
  m.def("qe_asymptote", &qe::qe_asymptote);
  m.def(
      "find_qe_maximum",
      [](double lo, double hi) {
        const auto r = qe::find_qe_maximum(lo, hi);
        return py::make_tuple(r.product, r.qe);
      },
      py::arg("lo") = 1e-2, py::arg("hi") = 1e2, "(omega0*b, QE) at the maximum");
  m.def(
      "pdf", [](double w_hat, double omega0, double b) { return qe::pdf_transformed(w_hat, omega0, qe::LaplaceModel(b)); },
      py::arg("w_hat"), py::arg("omega0"), py::arg("b"));
  m.def(
      "pdf_mass",
      [](double omega0, double b, double lo, double hi) { return qe::pdf_mass(omega0, qe::LaplaceModel(b), lo, hi); },
      py::arg("omega0"), py::arg("b"), py::arg("lo") = -1.0, py::arg("hi") = 1.0);
  m.def(
      "monte_carlo_qe",
      [](double omega0, double b, double gamma, std::size_t n, std::uint64_t seed) {
        const auto r = qe::monte_carlo_qe(omega0, qe::LaplaceModel(b), gamma, n, seed);
        return py::make_tuple(r.qe, r.mean_abs_sin);
      },
      py::arg("omega0"), py::arg("b"), py::arg("gamma"), py::arg("n"), py::arg("seed") = 0,
      "(QE, mean |sin|) estimated from Laplace samples");
  m.def("fit_laplace", [](const Array& w) { return qe::fit_laplace(to_tensor(w)).b; }, py::arg("w"));

  // binarizers
  m.def("sign_binarize", [](const Array& w) { return binarized(sign_binarize(to_tensor(w))); }, py::arg("w"));
  m.def(
      "biper_binarize", [](const Array& w, double omega0) { return binarized(biper_binarize(to_tensor(w), omega0)); },
      py::arg("w"), py::arg("omega0"));
  m.def(
      "binarize_weights",
      [](const Array& w, const std::string& method, double omega0, const std::string& scaling) {
        QuantSpec spec{parse_quant_method(method), omega0, scaling_arg(scaling)};
        return binarized(binarize_weights(to_tensor(w), spec));
      },
      py::arg("w"), py::arg("method") = "biper", py::arg("omega0") = 20.0,
      py::arg("scaling") = "per-channel-mean-abs");
  m.def(
      "biper_surrogate_grad",
      [](const Array& w, double omega0) { return to_array(biper_surrogate_grad(to_tensor(w), omega0)); },
      py::arg("w"), py::arg("omega0"));
  m.def(
      "empirical_qe",
      [](const Array& w, const std::string& method, double omega0, const std::string& scaling) {
        return empirical_qe(to_tensor(w), {parse_quant_method(method), omega0, scaling_arg(scaling)});
      },
      py::arg("w"), py::arg("method") = "biper", py::arg("omega0") = 20.0,
      py::arg("scaling") = "per-channel-mean-abs");

  // bit kernels
  m.def(
      "pack",
      [](const Array& signs) {
        const auto p = bits::pack({to_tensor(signs), {1.0}});
        py::array_t<std::uint64_t> words({static_cast<py::ssize_t>(p.rows), static_cast<py::ssize_t>(p.words_per_row)});
        std::copy(p.words.begin(), p.words.end(), words.mutable_data());
        return words;
      },
      py::arg("signs"), "packs +-1 entries along the last axis into rows of 64-bit words");
  m.def(
      "xnor_dot",
      [](const Array& a, const Array& b) {
        if (a.ndim() != 1 || b.ndim() != 1 || a.size() != b.size()) {
          throw std::invalid_argument("xnor_dot: expected two 1-D arrays of equal length");
        }
        const auto pa = bits::pack({to_tensor(a), {1.0}}), pb = bits::pack({to_tensor(b), {1.0}});
        return bits::xnor_dot(pa, 0, pb, 0);
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "binary_linear",
      [](const Array& a, const Array& w, std::vector<double> scale) {
        return to_array(bits::binary_linear(bits::pack({to_tensor(a), {1.0}}), bits::pack({to_tensor(w), scale})));
      },
      py::arg("a"), py::arg("w"), py::arg("scale") = std::vector<double>{1.0});

  // schedule
  m.def("cosine_lr", &train::cosine_lr, py::arg("epoch"), py::arg("total"), py::arg("lr0"));
}
