#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfbn/arch.hpp"
#include "mfbn/meanfield.hpp"
#include "mfbn/nnkernel.hpp"

namespace mfbn {

struct McEstimate {
  double mean = 0;
  double std_error = 0;
  std::size_t n_samples = 0;
};

// Mean and standard error of the mean; needs at least two samples.
McEstimate summarize(const std::vector<double>& samples);

// Second moments of one activation-like tensor (channels x sites*m).
//   self  = E ‖a(x)_α‖²            per site
//   tilde = E_{x≠x'} ⟨a(x)_α, a(x')_α⟩
//   hat   = E_{x≠x', α≠β} ⟨a(x)_α, a(x')_β⟩   (sites > 1 only)
// With `per_channel` the inner products are divided by the channel count.
struct Moments {
  double self = 0;
  double tilde = 0;
  std::optional<double> hat;
};
Moments cross_moments(const Matrix& a, std::size_t sites, std::size_t batch, bool per_channel);

using InputSampler = std::function<Matrix(std::size_t batch, std::uint64_t seed)>;

// i.i.d. N(0, 1) entries shaped for the architecture's input.
Matrix gaussian_inputs(const ArchSpec& spec, std::size_t batch, std::uint64_t seed);

struct OracleConfig {
  std::size_t n_nets = 8;
  std::size_t batch = 4096;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  StatsMode stats_mode = StatsMode::FrozenStats;
  InputSampler sampler;  // empty: gaussian_inputs
};

struct LayerEstimates {
  McEstimate gamma_cap, gamma_tilde;
  std::optional<McEstimate> gamma_hat;
  McEstimate h, h_tilde;
  std::optional<McEstimate> h_hat;
  McEstimate delta, delta_tilde;
  std::optional<McEstimate> delta_hat;
};

struct OrderParamEstimates {
  std::vector<LayerEstimates> per_layer;  // 0..L; layer 0 carries only the H family
  McEstimate v_statistic;                 // ‖Σ_i ∇_W f_k(x_i)‖²/m² for one k per net
  std::vector<McEstimate> f_cross;        // per layer, cross-pair ⟨∇f(x), ∇f(x')⟩
  std::size_t n_nets = 0;
  std::size_t batch = 0;
};

// One random net per replicate. Replicate r uses output component r mod N_L
// for the backward seed. BN layers use batch statistics over the whole batch
// (m >= 256).
OrderParamEstimates estimate_order_params(const ArchSpec& spec, const OracleConfig& config);

class PowerIterationError : public std::runtime_error {
 public:
  PowerIterationError(double rayleigh, double residual, std::size_t iterations);
  double rayleigh() const { return rayleigh_; }
  double residual() const { return residual_; }

 private:
  double rayleigh_;
  double residual_;
};

struct PowerResult {
  double lambda = 0;
  std::size_t iterations = 0;
  double residual = 0;  // ‖Gv - λv‖ / λ
};

// Top eigenvalue of a symmetric PSD matrix. Converged when the Rayleigh
// quotient changes by at most tol (relative) between iterations and the
// relative residual is at most √tol. A second random start is always run and
// the larger result kept.
PowerResult power_iteration(const Matrix& g, std::uint64_t seed, double tol = 1e-8,
                            std::size_t max_iter = 10000);

struct SpectrumOptions {
  std::size_t max_gram_rows = 20000;
  bool dense_check = false;  // also run a dense eigensolver on the Gram matrix
  bool gram = true;          // false: only the v-statistic and per-layer f
  InputSampler sampler;
};

struct EmpiricalSpectrum {
  double lambda_max = 0;                  // top eigenvalue of the weight FIM
  std::optional<double> lambda_max_dense;
  double v_statistic = 0;                 // mean over outputs k of ‖Σ_i ∇f_k(x_i)‖²/m²
  double v_std_error = 0;                 // spread over k
  std::vector<double> per_layer_f;        // cross-pair f_l, mean over k
  std::vector<double> per_layer_factorized;  // FC: N_{l-1} H̃_{l-1} Δ̃_l from the same net
  std::size_t power_iterations = 0;
  double power_residual = 0;
};

// Gram matrix (1/m) B Bᵀ over rows (k, i) = ∇_W f_k(x_i); row index k*m + i.
// FC layers use the factorised inner products, conv layers explicit rows.
Matrix fim_gram(const NetInstance& net, const Matrix& inputs);

EmpiricalSpectrum empirical_fim_lambda_max(const ArchSpec& spec, std::uint64_t seed, std::size_t batch,
                                           const SpectrumOptions& options = {});

struct ValidationConfig {
  OracleConfig oracle;
  ProfileOptions profile;
  double z_threshold = 3;
  double order_margin = 0.10;
  double bound_margin = 0.20;
  bool check_bound = true;
  double perturb_theory = 1.0;  // test hook: scales every theory value
};

struct DiscrepancyRow {
  std::string quantity;
  std::size_t layer = 0;
  double theory = 0;
  double empirical = 0;
  double std_error = 0;
  double z = 0;
  double allowed = 0;  // z_threshold·SE + margin·|theory|
  bool gated = true;
  bool pass = true;
};

struct DiscrepancyReport {
  std::vector<DiscrepancyRow> rows;
  std::vector<std::string> warnings;
  std::size_t n_nets = 0;
  std::size_t batch = 0;

  bool passed() const;
  int exit_code() const { return passed() ? 0 : 1; }
};

DiscrepancyReport compare_theory_vs_empirical(const ArchSpec& spec, const ValidationConfig& config);

// quantity,layer,theory,empirical,std_error,z
void write_discrepancy_csv(std::ostream& out, const DiscrepancyReport& report);
void print_discrepancy_summary(std::ostream& out, const DiscrepancyReport& report);

}  // namespace mfbn
