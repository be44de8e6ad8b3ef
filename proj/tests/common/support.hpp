#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mfbn/arch.hpp"

namespace mfbn::test {

inline std::string source_path(const std::string& rel) { return std::string(MFBN_SOURCE_DIR) + "/" + rel; }

inline ArchSpec load_config(const std::string& name) {
  return load_arch(source_path("configs/" + name + ".json"));
}

inline double rel_err(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0 ? 0 : std::abs(a - b) / scale;
}

// FC stack: ReLU hidden layers of the given widths, linear output.
inline ArchSpec fc_spec(std::size_t input, const std::vector<std::size_t>& hidden, std::size_t outputs,
                        bool bn = false, double gamma = 1.0) {
  ArchSpec s;
  s.input = {input, 1};
  std::size_t prev = input;
  for (std::size_t w : hidden) {
    LayerSpec l;
    l.width = w;
    l.fan_in = prev;
    l.batch_norm = bn;
    l.gamma = gamma;
    s.layers.push_back(l);
    prev = w;
  }
  LayerSpec out;
  out.width = outputs;
  out.fan_in = prev;
  out.activation = Activation::Linear;
  s.layers.push_back(out);
  return s;
}

// Random valid architecture: optional conv stack (square maps, 3x3 or 1x1
// kernels, stride 1 or 2) followed by FC layers and a linear output.
// `small` keeps every layer at a handful of units for finite-difference work.
inline ArchSpec random_spec(std::mt19937_64& rng, bool allow_conv = true, bool small = false) {
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_real_distribution<double> u01(0, 1);
  ArchSpec spec;
  spec.init.sigma_w_sq = 0.2 + 3.8 * u01(rng);
  spec.init.sigma_b_sq = u01(rng) < 0.2 ? 0.0 : 2 * u01(rng);
  spec.init.momentum = 0.95 * u01(rng);
  const bool bn = coin(rng);
  auto pick_gamma = [&] { return 0.1 + 3.9 * u01(rng); };

  const bool conv = allow_conv && coin(rng);
  std::size_t side = 0;
  if (conv) {
    side = small ? 3 + rng() % 4 : 5 + rng() % 12;
    spec.input = {1 + rng() % (small ? 3 : 4), side * side};
    const std::size_t n_conv = 1 + rng() % 3;
    for (std::size_t i = 0; i < n_conv; ++i) {
      const std::size_t k = side >= 3 && coin(rng) ? 3 : 1;
      const std::size_t stride = side > k + 2 && coin(rng) ? 2 : 1;
      const std::size_t out = (side - k) / stride + 1;
      if ((side - k) % stride != 0) break;
      LayerSpec l;
      l.kind = LayerKind::Convolutional;
      l.width = 1 + rng() % (small ? 4 : 12);
      l.kernel_sites = k * k;
      l.spatial_sites = out * out;
      l.batch_norm = bn;
      l.gamma = pick_gamma();
      spec.layers.push_back(l);
      side = out;
    }
  } else {
    spec.input = {1 + rng() % (small ? 8 : 800), 1};
  }
  const std::size_t n_fc = (spec.layers.empty() ? 1 : 0) + rng() % 4;
  for (std::size_t i = 0; i < n_fc; ++i) {
    LayerSpec l;
    l.width = 1 + rng() % (small ? 8 : 1200);
    l.batch_norm = bn && coin(rng);
    l.gamma = pick_gamma();
    spec.layers.push_back(l);
  }
  LayerSpec out;
  out.width = 1 + rng() % (small ? 4 : 20);
  out.activation = Activation::Linear;
  spec.layers.push_back(out);
  for (std::size_t l = 1; l <= spec.layers.size(); ++l) {
    LayerSpec& layer = spec.layers[l - 1];
    layer.fan_in = layer.is_conv() ? spec.channels_before(l) * *layer.kernel_sites
                                   : spec.channels_before(l) * spec.sites_before(l);
  }
  return spec;
}

}  // namespace mfbn::test
