#include <sstream>
#include <string>
#include <vector>

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "structobs/cli.hpp"
#include "structobs/data.hpp"
#include "structobs/errors.hpp"
#include "structobs/lowrank_gaussian.hpp"
#include "structobs/sampling.hpp"

namespace py = pybind11;
using namespace structobs;

namespace {

ObservationNoise noise_of(const Vector& omega_p, const Vector& omega_d) { return {omega_p, omega_d}; }

py::tuple grad_tuple(const DistributionGrad& g) { return py::make_tuple(g.mu, g.cov_factor, g.cov_diag); }

py::dict draw_dict(const Draw& d) {
  py::dict out;
  out["z"] = d.z;
  out["dist"] = d.dist;
  out["omega_p"] = d.noise.omega_p;
  out["omega_d"] = d.noise.omega_d;
  out["sample"] = d.sample;
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Low-rank Gaussian image models";

  auto value_error = py::module_::import("builtins").attr("ValueError");
  auto runtime_error = py::module_::import("builtins").attr("RuntimeError");
  py::register_exception<DimensionError>(m, "DimensionError", value_error);
  py::register_exception<DegenerateInputError>(m, "DegenerateInputError", value_error);
  py::register_exception<LimitExceededError>(m, "LimitExceededError", value_error);
  py::register_exception<NumericalError>(m, "NumericalError", runtime_error);
  py::register_exception<FormatError>(m, "FormatError", runtime_error);

  py::class_<LowRankGaussian>(m, "LowRankGaussian")
      .def(py::init<Vector, Matrix, Vector>(), py::arg("mu"), py::arg("cov_factor"), py::arg("cov_diag"))
      .def_static("with_constant_diag", &LowRankGaussian::with_constant_diag, py::arg("mu"),
                  py::arg("cov_factor"), py::arg("epsilon"))
      .def_property_readonly("size", &LowRankGaussian::size)
      .def_property_readonly("rank", &LowRankGaussian::rank)
      .def_property_readonly("mu", &LowRankGaussian::mu)
      .def_property_readonly("cov_factor", &LowRankGaussian::cov_factor)
      .def_property_readonly("cov_diag", &LowRankGaussian::cov_diag)
      .def("with_mu", &LowRankGaussian::with_mu)
      .def("with_cov_factor", &LowRankGaussian::with_cov_factor)
      .def("__repr__", [](const LowRankGaussian& d) {
        return "LowRankGaussian(size=" + std::to_string(d.size()) + ", rank=" + std::to_string(d.rank()) + ")";
      });

  m.def("log_prob", py::overload_cast<const LowRankGaussian&, const Vector&>(&log_prob), py::arg("dist"),
        py::arg("x"));
  m.def("entropy", py::overload_cast<const LowRankGaussian&>(&entropy), py::arg("dist"));
  m.def("marginal_variance", &marginal_variance, py::arg("dist"));
  m.def("logdet", [](const LowRankGaussian& d) { return build_cache(d).logdet_sigma; }, py::arg("dist"));
  m.def(
      "log_prob_grad",
      [](const LowRankGaussian& d, const Vector& x) { return grad_tuple(log_prob_grad(d, x)); },
      py::arg("dist"), py::arg("x"), "(d_mu, d_cov_factor, d_cov_diag) of log_prob");
  m.def(
      "entropy_grad", [](const LowRankGaussian& d) { return grad_tuple(entropy_grad(d)); }, py::arg("dist"));

  m.def(
      "sample",
      [](const LowRankGaussian& d, const Vector& omega_p, const Vector& omega_d) {
        return sample(d, noise_of(omega_p, omega_d));
      },
      py::arg("dist"), py::arg("omega_p"), py::arg("omega_d"));
  m.def("slerp", &slerp, py::arg("a"), py::arg("b"), py::arg("t"));
  m.def(
      "slerp_interpolate",
      [](const LowRankGaussian& d, const Vector& omega_p_a, const Vector& omega_p_b, const Vector& omega_d,
         double t) { return slerp_interpolate(d, noise_of(omega_p_a, omega_d), noise_of(omega_p_b, omega_d), t); },
      py::arg("dist"), py::arg("omega_p_a"), py::arg("omega_p_b"), py::arg("omega_d"), py::arg("t"));
  m.def(
      "principal_components",
      [](const Matrix& p) {
        const auto c = principal_components(p);
        return py::make_tuple(c.u, c.singular_values, c.v);
      },
      py::arg("cov_factor"), "(U, s, V) with P = U diag(s) V^T");
  m.def("scale_components", &scale_components, py::arg("dist"), py::arg("scales"));
  m.def(
      "scaled_sample",
      [](const LowRankGaussian& d, const Vector& omega_p, const Vector& omega_d, const Vector& coefficients) {
        return scaled_sample(d, noise_of(omega_p, omega_d), coefficients);
      },
      py::arg("dist"), py::arg("omega_p"), py::arg("omega_d"), py::arg("coefficients"));

  m.def(
      "condition_on_edit",
      [](const LowRankGaussian& d, const std::vector<Index>& indices, const Vector& values, std::size_t max_edits) {
        return condition_on_edit(d, indices, values, {max_edits});
      },
      py::arg("dist"), py::arg("indices"), py::arg("values"), py::arg("max_edits") = 4096);
  m.def(
      "conditioned_image",
      [](const LowRankGaussian& d, const std::vector<Index>& indices, const Vector& values, std::size_t max_edits) {
        return conditioned_image(d, indices, values, {max_edits});
      },
      py::arg("dist"), py::arg("indices"), py::arg("values"), py::arg("max_edits") = 4096);

  m.def(
      "synthetic_blobs",
      [](Index width, Index height, Index channels, Index count, std::uint64_t seed, double noise) {
        return synthetic_blobs({width, height, channels}, count, seed, noise).pixels;
      },
      py::arg("width"), py::arg("height"), py::arg("channels") = 1, py::arg("count") = 64, py::arg("seed") = 0,
      py::arg("noise") = 0.1, "Rows of flattened (H, W, C) images in [0, 1]");

  py::class_<LoadedModel>(m, "Model")
      .def(py::init([](const std::filesystem::path& path) { return load_model(path); }), py::arg("checkpoint"))
      .def_property_readonly("width", [](const LoadedModel& l) { return l.shape().width; })
      .def_property_readonly("height", [](const LoadedModel& l) { return l.shape().height; })
      .def_property_readonly("channels", [](const LoadedModel& l) { return l.shape().channels; })
      .def_property_readonly("rank", &LoadedModel::rank)
      .def_property_readonly("latent_dim", &LoadedModel::latent_dim)
      .def(
          "draw", [](const LoadedModel& l, std::uint64_t seed) { return draw_dict(draw(l, seed)); },
          py::arg("seed"), "dict with z, dist, omega_p, omega_d and sample")
      .def(
          "edit",
          [](const LoadedModel& l, std::uint64_t seed, const std::vector<std::tuple<Index, Index, Index, double>>& edits) {
            std::vector<PixelEdit> pixels;
            for (const auto& [x, y, c, v] : edits) pixels.push_back({x, y, c, v});
            const Draw d = draw(l, seed);
            return apply_edits(d.dist, d.sample, pixels, l.shape());
          },
          py::arg("seed"), py::arg("edits"), "Conditioned image for (x, y, c, value) edits of the seeded sample");

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Run the command-line tool in process; returns (exit code, stdout, stderr)");
}
