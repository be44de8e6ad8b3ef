#include "mfbn/eigenbound.hpp"

#include <numeric>
#include <ostream>

#include "mfbn/csv.hpp"

namespace mfbn {

double layer_contribution(const OrderParamProfile& profile, std::size_t l) {
  const ArchSpec& spec = profile.arch;
  if (l < 1 || l > profile.depth() || profile.depth() != spec.depth())
    throw SpectralError("layer index " + std::to_string(l) + " outside 1.." +
                        std::to_string(profile.depth()));
  const LayerSpec& layer = spec.layer(l);
  const LayerOrderParams& prev = profile[l - 1];
  const LayerOrderParams& cur = profile[l];
  if (!layer.is_conv())
    return static_cast<double>(spec.channels_before(l) * spec.sites_before(l)) * prev.h_tilde *
           cur.delta_tilde;

  if (!prev.h_hat || !cur.delta_hat)
    throw SpectralError("layer " + std::to_string(l) + ": convolutional layer needs H-hat and Delta-hat");
  const double k1 = static_cast<double>(layer.sites()) - 1;
  const double fan = static_cast<double>(spec.channels_before(l) * *layer.kernel_sites);
  return fan * (k1 * *prev.h_hat + prev.h_tilde) * (k1 * *cur.delta_hat + cur.delta_tilde);
}

double critical_learning_rate(double lambda, double momentum) {
  if (!(lambda > 0)) throw SpectralError("degenerate spectrum");
  return 2 * (1 + momentum) / lambda;
}

SpectralReport spectral_report(const OrderParamProfile& profile, double momentum) {
  SpectralReport r;
  r.momentum = momentum;
  for (std::size_t l = 1; l <= profile.depth(); ++l)
    r.f_per_layer.push_back(layer_contribution(profile, l));
  r.lambda_bound = std::accumulate(r.f_per_layer.begin(), r.f_per_layer.end(), 0.0);
  r.eta_star = critical_learning_rate(r.lambda_bound, momentum);
  r.eta_opt = r.eta_star / 2;
  return r;
}

SpectralReport spectral_report(const OrderParamProfile& profile) {
  return spectral_report(profile, profile.arch.init.momentum);
}

std::vector<SweepRow> gamma_sweep(const ArchSpec& spec, const std::vector<double>& gamma_grid,
                                  double momentum, const ProfileOptions& options) {
  if (gamma_grid.empty()) throw SpectralError("empty gamma grid");
  for (std::size_t l = 1; l < spec.depth(); ++l)
    if (!spec.layer(l).batch_norm)
      throw SpectralError("gamma sweep needs BatchNorm on every hidden layer (layer " +
                          std::to_string(l) + " has none)");

  std::vector<SweepRow> rows;
  rows.reserve(2 * gamma_grid.size());
  for (double g : gamma_grid) {
    const SpectralReport r = spectral_report(run_profile(with_gamma(spec, g), options), momentum);
    rows.push_back({g, r.lambda_bound, r.eta_star, r.eta_opt, true});
  }
  const SpectralReport v =
      spectral_report(run_profile(without_batch_norm(spec), options), momentum);
  for (double g : gamma_grid) rows.push_back({g, v.lambda_bound, v.eta_star, v.eta_opt, false});
  return rows;
}

void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "gamma,lambda_bound,eta_star,eta_opt,variant\n";
  for (const SweepRow& r : rows)
    out << csv_number(r.gamma) << ',' << csv_number(r.lambda_bound) << ','
        << csv_number(r.eta_star) << ',' << csv_number(r.eta_opt) << ','
        << (r.batch_norm ? "bn" : "vanilla") << '\n';
}

void write_report_csv(std::ostream& out, const OrderParamProfile& profile,
                      const SpectralReport& report) {
  out << "layer,gamma_cap,gamma_tilde,gamma_hat,h,h_tilde,h_hat,delta,delta_tilde,delta_hat,f\n";
  for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
    const LayerOrderParams& p = profile.per_layer[l];
    const bool base = l == 0;
    auto opt = [base](double x) { return base ? std::string() : csv_number(x); };
    out << l << ',' << opt(p.gamma_cap) << ',' << opt(p.gamma_tilde) << ','
        << csv_number(p.gamma_hat) << ',' << csv_number(p.h) << ',' << csv_number(p.h_tilde)
        << ',' << csv_number(p.h_hat) << ',' << opt(p.delta) << ',' << opt(p.delta_tilde) << ','
        << (base ? std::string() : csv_number(p.delta_hat)) << ','
        << (base ? std::string() : csv_number(report.f_per_layer.at(l - 1))) << '\n';
  }
}

}  // namespace mfbn
