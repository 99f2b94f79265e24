#pragma once

#include <string>
#include <vector>

#include "mvar/model.hpp"
#include "mvar/rng.hpp"

namespace mvar {

struct GradCheckEntry {
  std::string tensor;
  double rel_err = 0;  // ||analytic - central FD|| / max(norms, 1e-12)
  bool ok = false;
};

// Adds noise to every tensor (including the zero-initialized head) so
// gradients flow everywhere before finite differencing.
template <typename T>
void perturb_params(ModelParams<T>& p, const ModelConfig& cfg, uint64_t seed, double scale) {
  Rng rng(derive_seed(seed, 0x9e47));
  visit_params(p, cfg, [&](const std::string&, Mat<T>& m) {
    for (auto& x : m.v) x += (T)(rng.normal() * scale);
  });
}

// Central finite differences at float64 over every element of every
// parameter tensor against the analytic gradient of the teacher-forcing
// loss on one random pyramid. Slow but exhaustive; meant for tiny configs.
inline std::vector<GradCheckEntry> gradcheck_model(ModelConfig cfg, uint64_t seed,
                                                   double eps = 1e-5, double tol = 1e-5) {
  finalize_config(cfg);
  ModelParams<double> params = init_model_params<double>(cfg, seed);
  perturb_params(params, cfg, seed, 0.2);

  Rng rng(derive_seed(seed, 0x91));
  TokenMapPyramid pyr;
  pyr.schedule = cfg.schedule;
  for (int s : cfg.schedule.sides) {
    std::vector<int> m((size_t)s * s);
    for (auto& id : m) id = rng.uniform_int(cfg.vocab);
    pyr.maps.push_back(std::move(m));
  }
  int cls = rng.uniform_int(cfg.n_classes);

  ModelParams<double> grads = make_model_params<double>(cfg);
  loss_and_grad<double>(pyr, cls, cfg, params, &grads);

  auto loss_at = [&]() { return loss_and_grad<double>(pyr, cls, cfg, params, nullptr); };

  std::vector<GradCheckEntry> out;
  std::vector<Mat<double>*> theta = param_tensors(params, cfg);
  std::vector<Mat<double>*> gan = param_tensors(grads, cfg);
  std::vector<std::string> names;
  visit_params(params, cfg, [&](const std::string& n, Mat<double>&) { names.push_back(n); });

  for (size_t t = 0; t < theta.size(); ++t) {
    Mat<double>& m = *theta[t];
    double num = 0, den_a = 0, den_f = 0;
    for (size_t k = 0; k < m.v.size(); ++k) {
      double keep = m.v[k];
      m.v[k] = keep + eps;
      double lp = loss_at();
      m.v[k] = keep - eps;
      double lm = loss_at();
      m.v[k] = keep;
      double fd = (lp - lm) / (2 * eps);
      double an = gan[t]->v[k];
      num += (an - fd) * (an - fd);
      den_a += an * an;
      den_f += fd * fd;
    }
    GradCheckEntry e;
    e.tensor = names[t];
    e.rel_err = std::sqrt(num) / std::max({std::sqrt(den_a), std::sqrt(den_f), 1e-12});
    e.ok = e.rel_err <= tol;
    out.push_back(e);
  }
  return out;
}

}  // namespace mvar
