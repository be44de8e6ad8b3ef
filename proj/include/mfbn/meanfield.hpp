#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfbn/arch.hpp"

namespace mfbn {

// Width-averaged second moments of one layer. The hat family (cross-site
// correlations) exists only for convolutional layers and conv inputs.
//
//   gamma_cap   Γ   mean squared pre-activation
//   gamma_tilde Γ̃   squared data-mean of the pre-activation
//   gamma_hat   Γ̂   cross-site, cross-example pre-activation correlation
//   h*, delta*      the same statistics for activations and for δ = ∂f/∂z
//
// Row 0 of a profile is the input: only the H family is meaningful there.
struct LayerOrderParams {
  double gamma_cap = 0;
  double gamma_tilde = 0;
  std::optional<double> gamma_hat;
  double h = 0;
  double h_tilde = 0;
  std::optional<double> h_hat;
  double delta = 0;
  double delta_tilde = 0;
  std::optional<double> delta_hat;
  double c_tilde = 0;
  std::optional<double> c_hat;
};

struct DeltaPair {
  double delta = 0;
  double delta_tilde = 0;
};

struct DeltaTriple {
  double delta = 0;
  double delta_tilde = 0;
  double delta_hat = 0;
};

class MeanFieldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Where the cross-site backward correlation Δ̂ starts when a conv layer
// feeds a fully-connected layer. kZero is what a random FC head produces in
// expectation (independent weights per site); kMatchTilde sets the seed to
// Δ̃ before applying the conv rule.
enum class DeltaHatSeed { kZero, kMatchTilde };

// Variance that divides the BN backward rules. kGammaCap uses Γ_l. kCentered
// uses the batch variance a BN layer actually normalises by, Γ_l - Γ̃_l for FC
// layers and Γ_l - Γ̂_l - (Γ̃_l - Γ̂_l)/|K_l| for conv layers (the squared
// per-unit mean is the cross-example correlation).
enum class BnBackwardVariance { kGammaCap, kCentered };

struct ProfileOptions {
  DeltaHatSeed delta_hat_seed = DeltaHatSeed::kZero;
  BnBackwardVariance bn_variance = BnBackwardVariance::kGammaCap;
  // Ratios c̃, ĉ are clamped to [0, 1]; excursions larger than this are
  // recorded as warnings.
  double clamp_warning = 1e-9;
};

struct OrderParamProfile {
  std::vector<LayerOrderParams> per_layer;  // indices 0..L
  ArchSpec arch;
  std::vector<std::string> warnings;

  std::size_t depth() const { return per_layer.size() - 1; }
  const LayerOrderParams& operator[](std::size_t l) const { return per_layer.at(l); }
};

// √(1−c²) + cπ/2 + c·asin c; equals 1 at c = 0 and π at c = 1.
double relu_correlation_bracket(double c);
// π/2 + asin c.
double relu_derivative_bracket(double c);

LayerOrderParams input_base_case(const ArchSpec& spec);

LayerOrderParams forward_step_fc_vanilla(const LayerOrderParams& prev, const InitSpec& init);
LayerOrderParams forward_step_fc_bn(const LayerOrderParams& prev, const InitSpec& init, double gamma);
LayerOrderParams forward_step_conv(const LayerOrderParams& prev, const InitSpec& init, bool bn,
                                   double gamma);
// Linear output layer: H = Γ, H̃ = Γ̃ (and Ĥ = Γ̂ when the input carries Γ̂).
LayerOrderParams forward_step_linear(const LayerOrderParams& prev, const InitSpec& init,
                                     bool conv);

DeltaPair backward_step_fc(const DeltaPair& next, const LayerOrderParams& current,
                           const InitSpec& init, bool bn, double gamma);
DeltaTriple backward_step_conv(const DeltaTriple& next, const LayerOrderParams& current,
                               const InitSpec& init, bool bn, double gamma);

// Batch variance of a BN layer's pre-activations in the large-batch limit.
double centered_bn_variance(const LayerOrderParams& current, std::size_t sites);

// Forward pass l = 1..L, then backward pass l = L..1 with Δ_L = Δ̃_L = 1.
// Throws MeanFieldError (naming the layer) on degenerate layers, non-zero β
// or hidden non-ReLU activations.
OrderParamProfile run_profile(const ArchSpec& spec, const ProfileOptions& options = {});

// Columns: layer,gamma_cap,gamma_tilde,gamma_hat,h,h_tilde,h_hat,delta,delta_tilde,delta_hat
// Absent values are empty fields; numbers round-trip exactly.
void write_profile_csv(std::ostream& out, const OrderParamProfile& profile);

}  // namespace mfbn
