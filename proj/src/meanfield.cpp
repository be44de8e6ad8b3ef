#include "mfbn/meanfield.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <sstream>

#include "mfbn/csv.hpp"

namespace mfbn {

namespace {

constexpr double kPi = std::numbers::pi;

struct ClampLog {
  std::vector<std::string>* sink = nullptr;
  double tolerance = 1e-9;
  std::size_t layer = 0;
};

double clamped_ratio(double num, double den, const char* name, const ClampLog& log) {
  if (!(den > 0)) throw MeanFieldError("degenerate layer: zero pre-activation variance");
  const double c = num / den;
  if (log.sink && (c < -log.tolerance || c > 1 + log.tolerance)) {
    std::ostringstream msg;
    msg << "layer " << log.layer << ": " << name << " = " << c << " clamped to [0, 1]";
    log.sink->push_back(msg.str());
  }
  return std::clamp(c, 0.0, 1.0);
}

LayerOrderParams affine_moments(const LayerOrderParams& prev, const InitSpec& init, bool conv,
                                const ClampLog& log) {
  LayerOrderParams out;
  out.gamma_cap = init.sigma_b_sq + init.sigma_w_sq * prev.h;
  out.gamma_tilde = init.sigma_b_sq + init.sigma_w_sq * prev.h_tilde;
  out.c_tilde = clamped_ratio(out.gamma_tilde, out.gamma_cap, "c_tilde", log);
  if (conv) {
    if (!prev.h_hat) throw MeanFieldError("convolutional layer needs H-hat of its input");
    out.gamma_hat = init.sigma_b_sq + init.sigma_w_sq * *prev.h_hat;
    out.c_hat = clamped_ratio(*out.gamma_hat, out.gamma_cap, "c_hat", log);
  }
  return out;
}

void relu_vanilla(LayerOrderParams& p) {
  p.h = p.gamma_cap / 2;
  p.h_tilde = p.gamma_cap / (2 * kPi) * relu_correlation_bracket(p.c_tilde);
  if (p.c_hat) p.h_hat = p.gamma_cap / (2 * kPi) * relu_correlation_bracket(*p.c_hat);
}

void relu_bn(LayerOrderParams& p, double gamma) {
  const double g2 = gamma * gamma;
  p.h = g2 / 2;
  p.h_tilde = g2 / (2 * kPi);
  if (p.gamma_hat) p.h_hat = g2 / (2 * kPi);
}

LayerOrderParams linear_impl(const LayerOrderParams& prev, const InitSpec& init, bool conv,
                             const ClampLog& log) {
  LayerOrderParams out = affine_moments(prev, init, conv, log);
  out.h = out.gamma_cap;
  out.h_tilde = out.gamma_tilde;
  out.h_hat = out.gamma_hat;
  return out;
}

LayerOrderParams forward_conv_impl(const LayerOrderParams& prev, const InitSpec& init, bool bn,
                                   double gamma, const ClampLog& log) {
  LayerOrderParams out = affine_moments(prev, init, true, log);
  if (bn) {
    relu_bn(out, gamma);
  } else {
    relu_vanilla(out);
  }
  return out;
}

struct BackwardFactors {
  double delta;
  double tilde;
  std::optional<double> hat;
};

BackwardFactors backward_factors(const LayerOrderParams& cur, const InitSpec& init, bool bn,
                                 double gamma, double variance) {
  if (bn) {
    if (!(variance > 0)) throw MeanFieldError("degenerate layer: zero pre-activation variance");
    const double g2w = gamma * gamma * init.sigma_w_sq;
    const double q = g2w / (4 * variance);
    return {g2w / (2 * variance), q, q};
  }
  BackwardFactors f{init.sigma_w_sq / 2,
                    init.sigma_w_sq / (2 * kPi) * relu_derivative_bracket(cur.c_tilde),
                    std::nullopt};
  if (cur.c_hat) f.hat = init.sigma_w_sq / (2 * kPi) * relu_derivative_bracket(*cur.c_hat);
  return f;
}

}  // namespace

double relu_correlation_bracket(double c) {
  return std::sqrt(std::max(0.0, 1 - c * c)) + c * kPi / 2 + c * std::asin(c);
}

double relu_derivative_bracket(double c) { return kPi / 2 + std::asin(c); }

LayerOrderParams input_base_case(const ArchSpec& spec) {
  LayerOrderParams in;
  in.h = 1;
  in.h_tilde = 0;
  if (!spec.layers.empty() && spec.layers.front().is_conv()) in.h_hat = 0.0;
  return in;
}

LayerOrderParams forward_step_fc_vanilla(const LayerOrderParams& prev, const InitSpec& init) {
  LayerOrderParams out = affine_moments(prev, init, false, {});
  relu_vanilla(out);
  return out;
}

LayerOrderParams forward_step_fc_bn(const LayerOrderParams& prev, const InitSpec& init,
                                    double gamma) {
  LayerOrderParams out = affine_moments(prev, init, false, {});
  relu_bn(out, gamma);
  return out;
}

LayerOrderParams forward_step_conv(const LayerOrderParams& prev, const InitSpec& init, bool bn,
                                   double gamma) {
  return forward_conv_impl(prev, init, bn, gamma, {});
}

LayerOrderParams forward_step_linear(const LayerOrderParams& prev, const InitSpec& init,
                                     bool conv) {
  return linear_impl(prev, init, conv, {});
}

DeltaPair backward_step_fc(const DeltaPair& next, const LayerOrderParams& current,
                           const InitSpec& init, bool bn, double gamma) {
  const BackwardFactors f = backward_factors(current, init, bn, gamma, current.gamma_cap);
  return {f.delta * next.delta, f.tilde * next.delta_tilde};
}

DeltaTriple backward_step_conv(const DeltaTriple& next, const LayerOrderParams& current,
                               const InitSpec& init, bool bn, double gamma) {
  const BackwardFactors f = backward_factors(current, init, bn, gamma, current.gamma_cap);
  if (!f.hat) throw MeanFieldError("convolutional backward step needs c-hat");
  return {f.delta * next.delta, f.tilde * next.delta_tilde, *f.hat * next.delta_hat};
}

double centered_bn_variance(const LayerOrderParams& current, std::size_t sites) {
  if (!current.gamma_hat) return current.gamma_cap - current.gamma_tilde;
  const double k = static_cast<double>(sites);
  return current.gamma_cap - *current.gamma_hat - (current.gamma_tilde - *current.gamma_hat) / k;
}

OrderParamProfile run_profile(const ArchSpec& spec, const ProfileOptions& options) {
  OrderParamProfile profile;
  profile.arch = spec;
  const std::size_t depth = spec.depth();
  if (depth == 0) throw MeanFieldError("architecture has no layers");

  auto fail = [](std::size_t l, const std::string& what) -> MeanFieldError {
    return MeanFieldError("layer " + std::to_string(l) + ": " + what);
  };

  for (std::size_t l = 1; l <= depth; ++l) {
    const LayerSpec& layer = spec.layer(l);
    if (layer.beta != 0) throw fail(l, "non-zero beta is not covered by the recursions");
    if (layer.activation != Activation::ReLU && l != depth)
      throw fail(l, "hidden layers must use ReLU");
  }

  profile.per_layer.reserve(depth + 1);
  profile.per_layer.push_back(input_base_case(spec));
  for (std::size_t l = 1; l <= depth; ++l) {
    const LayerSpec& layer = spec.layer(l);
    const LayerOrderParams& prev = profile.per_layer.back();
    const ClampLog log{&profile.warnings, options.clamp_warning, l};
    try {
      LayerOrderParams next;
      if (layer.activation == Activation::Linear) {
        next = linear_impl(prev, spec.init, layer.is_conv(), log);
      } else if (layer.is_conv()) {
        next = forward_conv_impl(prev, spec.init, layer.batch_norm, layer.gamma, log);
      } else {
        next = affine_moments(prev, spec.init, false, log);
        if (layer.batch_norm) {
          relu_bn(next, layer.gamma);
        } else {
          relu_vanilla(next);
        }
      }
      profile.per_layer.push_back(next);
    } catch (const MeanFieldError& e) {
      throw fail(l, e.what());
    }
  }

  LayerOrderParams& out = profile.per_layer[depth];
  out.delta = 1;
  out.delta_tilde = 1;
  if (spec.layer(depth).is_conv()) out.delta_hat = 1.0;

  for (std::size_t l = depth - 1; l >= 1; --l) {
    const LayerSpec& layer = spec.layer(l);
    const LayerSpec& above = spec.layer(l + 1);
    LayerOrderParams& cur = profile.per_layer[l];
    const LayerOrderParams& next = profile.per_layer[l + 1];
    try {
      const double variance = options.bn_variance == BnBackwardVariance::kCentered
                                  ? centered_bn_variance(cur, layer.sites())
                                  : cur.gamma_cap;
      const BackwardFactors f =
          backward_factors(cur, spec.init, layer.batch_norm, layer.gamma, variance);
      if (!layer.is_conv()) {
        cur.delta = f.delta * next.delta;
        cur.delta_tilde = f.tilde * next.delta_tilde;
      } else {
        if (!f.hat) throw MeanFieldError("convolutional backward step needs c-hat");
        if (above.is_conv()) {
          // Per-site averages: the backward map preserves the sum over sites,
          // so a stride that changes |K| rescales by |K_{l+1}|/|K_l|.
          const double ratio =
              static_cast<double>(above.sites()) / static_cast<double>(layer.sites());
          cur.delta = f.delta * next.delta * ratio;
          cur.delta_tilde = f.tilde * next.delta_tilde * ratio;
          cur.delta_hat = *f.hat * *next.delta_hat * ratio;
        } else {
          // Conv layer feeding an FC layer: the FC rule acts on the flattened
          // units; dividing by |K_l| turns the totals into per-site averages.
          const double sites = static_cast<double>(layer.sites());
          const double hat_seed =
              options.delta_hat_seed == DeltaHatSeed::kMatchTilde ? next.delta_tilde : 0.0;
          cur.delta = f.delta * next.delta / sites;
          cur.delta_tilde = f.tilde * next.delta_tilde / sites;
          cur.delta_hat = *f.hat * hat_seed / sites;
        }
      }
    } catch (const MeanFieldError& e) {
      throw fail(l, e.what());
    }
  }
  return profile;
}

void write_profile_csv(std::ostream& out, const OrderParamProfile& profile) {
  out << "layer,gamma_cap,gamma_tilde,gamma_hat,h,h_tilde,h_hat,delta,delta_tilde,delta_hat\n";
  for (std::size_t l = 0; l < profile.per_layer.size(); ++l) {
    const LayerOrderParams& p = profile.per_layer[l];
    const bool base = l == 0;
    out << l << ',' << (base ? "" : csv_number(p.gamma_cap)) << ','
        << (base ? "" : csv_number(p.gamma_tilde)) << ',' << csv_number(p.gamma_hat) << ','
        << csv_number(p.h) << ',' << csv_number(p.h_tilde) << ',' << csv_number(p.h_hat) << ','
        << (base ? "" : csv_number(p.delta)) << ',' << (base ? "" : csv_number(p.delta_tilde))
        << ',' << (base ? "" : csv_number(p.delta_hat)) << '\n';
  }
}

}  // namespace mfbn
