#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "fvi/block_cov.hpp"
#include "fvi/cnngp_kernel.hpp"
#include "fvi/config.hpp"
#include "fvi/error.hpp"
#include "fvi/evaluate.hpp"
#include "fvi/fvi.hpp"
#include "fvi/likelihoods.hpp"
#include "fvi/metrics.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// (B, B, P) array -> StructuredCov; (i, j) and (j, i) must agree.
fvi::StructuredCov cov_from_array(const Array& a) {
  if (a.ndim() != 3 || a.shape(0) != a.shape(1)) throw fvi::DomainError("expected a (B, B, P) array");
  const auto b = static_cast<std::size_t>(a.shape(0));
  const auto p = static_cast<std::size_t>(a.shape(2));
  const auto v = a.unchecked<3>();
  fvi::StructuredCov k(b, p);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i; j < b; ++j) {
      for (std::size_t q = 0; q < p; ++q) {
        const auto ii = static_cast<py::ssize_t>(i), jj = static_cast<py::ssize_t>(j), qq = static_cast<py::ssize_t>(q);
        if (v(ii, jj, qq) != v(jj, ii, qq)) throw fvi::DomainError("block array is not symmetric");
        k.set(i, j, q, v(ii, jj, qq));
      }
    }
  }
  return k;
}

Array cov_to_array(const fvi::StructuredCov& k) {
  const auto b = static_cast<py::ssize_t>(k.batch());
  const auto p = static_cast<py::ssize_t>(k.dim());
  Array out({b, b, p});
  auto v = out.mutable_unchecked<3>();
  for (py::ssize_t i = 0; i < b; ++i) {
    for (py::ssize_t j = 0; j < b; ++j) {
      for (py::ssize_t q = 0; q < p; ++q) {
        v(i, j, q) = k.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j), static_cast<std::size_t>(q));
      }
    }
  }
  return out;
}

std::vector<double> flat(const Array& a) { return {a.data(), a.data() + a.size()}; }

fvi::Tensor tensor_for(const fvi::ArchSpec& arch, const Array& x) {
  if (static_cast<std::size_t>(x.size()) != arch.input.size()) {
    throw fvi::DomainError("input has " + std::to_string(x.size()) + " values, architecture expects " +
                           std::to_string(arch.input.size()));
  }
  return fvi::Tensor(arch.input, flat(x));
}

fvi::LikelihoodFamily family_from(const std::string& name, double berhu_c) {
  switch (fvi::family_tag_from_string(name)) {
    case fvi::FamilyTag::Gaussian: return fvi::LikelihoodFamily::gaussian();
    case fvi::FamilyTag::Laplace: return fvi::LikelihoodFamily::laplace();
    case fvi::FamilyTag::BerHu: return fvi::LikelihoodFamily::berhu(berhu_c);
    case fvi::FamilyTag::Boltzmann: break;
  }
  throw fvi::DomainError("expected a regression family (gaussian, laplace, berhu)");
}

fvi::Config config_from(const py::dict& settings) {
  fvi::Config config;
  for (const auto& [key, value] : settings) {
    fvi::apply_override(config, py::str(key).cast<std::string>() + "=" + py::str(value).cast<std::string>());
  }
  return config;
}

// A model plus the configuration and dataset it was built from.
struct Experiment {
  fvi::Config config;
  fvi::ToyDataset data;
  fvi::FviModel model;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Functional variational inference with CNN-GP priors";

  py::register_exception<fvi::DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<fvi::NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("schur_inverse", [](const Array& k) { return cov_to_array(fvi::schur_inverse(cov_from_array(k))); },
        py::arg("blocks"), "Inverse of a (B, B, P) grid of diagonal blocks, in the same layout.");
  m.def("logdet", [](const Array& k) { return fvi::logdet(cov_from_array(k)); }, py::arg("blocks"));
  m.def(
      "gaussian_kl",
      [](const Array& mq, const Array& kq, const Array& mp, const Array& kp) {
        return fvi::gaussian_kl(fvi::GaussianBatch(flat(mq), cov_from_array(kq)),
                                fvi::GaussianBatch(flat(mp), cov_from_array(kp)));
      },
      py::arg("mean_q"), py::arg("blocks_q"), py::arg("mean_p"), py::arg("blocks_p"),
      "KL(q || p); means are (B, P) or flat B * P.");

  m.def("builtin_arches", [] { return std::vector<std::string>{"regression1d", "depth8", "seg8", "kernel-check"}; });
  m.def(
      "equivalent_kernel",
      [](const std::string& arch_name, const Array& xi, const Array& xj) {
        const fvi::ArchSpec arch = fvi::builtin_arch(arch_name);
        const auto out = fvi::equivalent_kernel(arch, tensor_for(arch, xi), tensor_for(arch, xj));
        return Array(static_cast<py::ssize_t>(out.size()), out.data());
      },
      py::arg("arch"), py::arg("x_i"), py::arg("x_j"), "Per-pixel kernel diagonal of a builtin prior.");
  m.def(
      "prior_blocks",
      [](const std::string& arch_name, const std::vector<Array>& batch, double noise_var) {
        fvi::ArchSpec arch = fvi::builtin_arch(arch_name);
        arch.noise_var = noise_var;
        std::vector<fvi::Tensor> xs;
        for (const auto& x : batch) xs.push_back(tensor_for(arch, x));
        const fvi::GaussianBatch g = fvi::prior_structured_cov(arch, xs);
        return py::make_tuple(Array(static_cast<py::ssize_t>(g.mean.size()), g.mean.data()), cov_to_array(g.cov));
      },
      py::arg("arch"), py::arg("batch"), py::arg("noise_var") = 0.1, "Prior mean and (B, B, P) blocks.");

  m.def("berhu_loss", &fvi::berhu_loss, py::arg("y"), py::arg("c"));
  m.def("berhu_log_z0", &fvi::berhu_log_z0, py::arg("c"));
  m.def("berhu_w", &fvi::berhu_w, py::arg("c"));
  m.def(
      "logpdf",
      [](const std::string& family, double y, double f, double sigma, double berhu_c) {
        return fvi::location_scale_logpdf(family_from(family, berhu_c), y, f, sigma);
      },
      py::arg("family"), py::arg("y"), py::arg("f"), py::arg("sigma"), py::arg("berhu_c") = 1.0);
  m.def(
      "spearman", [](const Array& a, const Array& b) { return fvi::spearman(flat(a), flat(b)); }, py::arg("a"),
      py::arg("b"));

  py::class_<Experiment>(m, "Experiment", "A toy task, its dataset and a model built from config keys.")
      .def(py::init([](const py::dict& settings) {
             Experiment e{config_from(settings), {}, {}};
             e.data = fvi::config_dataset(e.config);
             e.model = fvi::config_model(e.config);
             return e;
           }),
           py::arg("settings") = py::dict())
      .def_property_readonly("task", [](const Experiment& e) { return e.config.task; })
      .def_property_readonly("train_size", [](const Experiment& e) { return e.data.train.size(); })
      .def_property_readonly("test_size", [](const Experiment& e) { return e.data.test.size(); })
      .def_property_readonly("forward_count", [](const Experiment& e) { return e.model.family.net().forward_count(); })
      .def(
          "train",
          [](Experiment& e) {
            fvi::TrainLog log;
            {
              py::gil_scoped_release release;
              log = fvi::train(e.model, e.data.train, fvi::config_train(e.config));
            }
            py::list rows;
            for (const auto& r : log.rows) {
              rows.append(py::dict(py::arg("epoch") = r.epoch, py::arg("step") = r.step,
                                   py::arg("objective") = r.objective, py::arg("data_term") = r.data_term,
                                   py::arg("kl") = r.kl, py::arg("lr") = r.lr, py::arg("c_threshold") = r.c_threshold));
            }
            return rows;
          },
          "Train with the configured settings; returns one dict per step.")
      .def(
          "test_input", [](const Experiment& e, std::size_t i) { return e.data.test.inputs.at(i).data; },
          py::arg("index"))
      .def(
          "predict",
          [](const Experiment& e, const Array& x) {
            const fvi::Tensor t = tensor_for(e.model.prior, x);
            if (e.model.task == fvi::TaskKind::Regression) {
              const auto pred = fvi::predict_regression(e.model, t);
              std::vector<double> mean, epi, alea;
              for (const auto& p : pred.pixels) {
                mean.push_back(p.mean);
                epi.push_back(p.epistemic_var);
                alea.push_back(p.aleatoric_var);
              }
              return py::dict(py::arg("mean") = mean, py::arg("epistemic_var") = epi, py::arg("aleatoric_var") = alea);
            }
            const auto pred = fvi::predict_classes(e.model, t, e.config.eval_samples, e.config.seed);
            return py::dict(py::arg("probs") = pred.probs, py::arg("entropy") = pred.entropy,
                            py::arg("labels") = pred.labels);
          },
          py::arg("x"), "One network evaluation per call.")
      .def("evaluate",
           [](const Experiment& e) {
             if (e.model.task == fvi::TaskKind::Regression) {
               const auto r = fvi::evaluate_regression(e.model, e.data);
               return py::dict(py::arg("calibration_score") = r.calibration.score, py::arg("rms") = r.errors.rms,
                               py::arg("train_epistemic_median") = r.train_epistemic_median,
                               py::arg("ood_epistemic_median") = r.ood_epistemic_median);
             }
             const auto r = fvi::evaluate_segmentation(e.model, e.data, e.config.eval_samples, e.config.seed);
             return py::dict(py::arg("calibration_score") = r.calibration.score,
                             py::arg("accuracy") = r.scores.accuracy, py::arg("mean_iou") = r.scores.mean_iou,
                             py::arg("noisy_entropy_median") = r.noisy_entropy_median,
                             py::arg("clean_entropy_median") = r.clean_entropy_median);
           })
      .def(
          "save",
          [](const Experiment& e, const std::string& path) {
            std::ofstream out(path);
            if (!out) throw fvi::DomainError("cannot write '" + path + "'");
            fvi::write_model(out, e.model);
          },
          py::arg("path"))
      .def(
          "load",
          [](Experiment& e, const std::string& path) {
            std::ifstream in(path);
            if (!in) throw fvi::DomainError("cannot open checkpoint '" + path + "'");
            e.model = fvi::read_model(in);
          },
          py::arg("path"));
}
