#pragma once

#include <cstddef>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfbn/arch.hpp"
#include "mfbn/meanfield.hpp"

namespace mfbn {

class SpectralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SpectralReport {
  std::vector<double> f_per_layer;  // f_1..f_L
  double lambda_bound = 0;
  double eta_star = 0;
  double eta_opt = 0;
  double momentum = 0;
};

// FC:   f_l = N_{l-1} H̃_{l-1} Δ̃_l
// Conv: f_l = C_{l-1}|F_l| [(|K_l|-1)Δ̂_l + Δ̃_l] [(|K_l|-1)Ĥ_{l-1} + H̃_{l-1}]
double layer_contribution(const OrderParamProfile& profile, std::size_t l);

// Throws SpectralError("degenerate spectrum") when Σf_l is not positive.
SpectralReport spectral_report(const OrderParamProfile& profile, double momentum);
SpectralReport spectral_report(const OrderParamProfile& profile);  // momentum from the arch

// η* for a given bound; 2(1+μ)/λ.
double critical_learning_rate(double lambda, double momentum);

struct SweepRow {
  double gamma = 0;
  double lambda_bound = 0;
  double eta_star = 0;
  double eta_opt = 0;
  bool batch_norm = true;
};

// One BN row per grid point (γ applied to every BN layer) followed by one
// vanilla reference row per grid point. The architecture must use BN on every hidden
// layer.
std::vector<SweepRow> gamma_sweep(const ArchSpec& spec, const std::vector<double>& gamma_grid,
                                  double momentum, const ProfileOptions& options = {});

// gamma,lambda_bound,eta_star,eta_opt,variant
void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows);

// Profile columns plus the per-layer contribution f (empty on row 0).
void write_report_csv(std::ostream& out, const OrderParamProfile& profile,
                      const SpectralReport& report);

}  // namespace mfbn
