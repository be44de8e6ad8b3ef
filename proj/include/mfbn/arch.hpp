#pragma once

#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mfbn {

enum class LayerKind { FullyConnected, Convolutional };
enum class Activation { ReLU, Linear };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Activation act);

// One affine map followed by optional BatchNorm and a pointwise activation.
// For convolutional layers `width` is the channel count C_l, `kernel_sites`
// is |F_l| and `spatial_sites` is |K_l|; both are absent for FC layers.
struct LayerSpec {
  LayerKind kind = LayerKind::FullyConnected;
  std::size_t fan_in = 0;
  std::size_t width = 0;
  std::optional<std::size_t> kernel_sites;
  std::optional<std::size_t> spatial_sites;
  bool batch_norm = false;
  double gamma = 1.0;
  double beta = 0.0;
  Activation activation = Activation::ReLU;

  bool is_conv() const { return kind == LayerKind::Convolutional; }
  // |K_l| for conv layers, 1 for FC layers.
  std::size_t sites() const { return spatial_sites.value_or(1); }
  // Number of scalar outputs per example.
  std::size_t units() const { return width * sites(); }

  bool operator==(const LayerSpec&) const = default;
};

struct InitSpec {
  double sigma_w_sq = 2.0;
  double sigma_b_sq = 0.5;
  double momentum = 0.9;

  bool operator==(const InitSpec&) const = default;
};

// Input shape. FC inputs have `sites == 1` and `channels == N_0`.
struct InputSpec {
  std::size_t channels = 0;
  std::size_t sites = 1;

  std::size_t units() const { return channels * sites; }
  bool operator==(const InputSpec&) const = default;
};

struct ArchSpec {
  InputSpec input;
  InitSpec init;
  std::vector<LayerSpec> layers;

  std::size_t depth() const { return layers.size(); }
  bool has_batch_norm() const;
  bool has_conv() const;
  // Channels and sites feeding layer `l` (1-based, l = 1..L).
  std::size_t channels_before(std::size_t l) const;
  std::size_t sites_before(std::size_t l) const;
  const LayerSpec& layer(std::size_t l) const { return layers.at(l - 1); }

  bool operator==(const ArchSpec&) const = default;
};

// Thrown by parse_arch; `path()` is the JSON path of the offending field.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& message);
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

struct Diagnostic {
  std::size_t layer = 0;  // 1-based; 0 means the document as a whole
  std::string message;
};

std::string format(const Diagnostic& d);

// Parses the JSON architecture document (see docs/arch_schema.md), applies
// defaults and throws ConfigError when the result fails validate_dims.
ArchSpec parse_arch(std::string_view text);
ArchSpec load_arch(const std::string& path);
std::string serialize_arch(const ArchSpec& spec);

std::vector<Diagnostic> validate_dims(const ArchSpec& spec);

// Output sites for a square map with a square kernel, no padding.
// Throws std::invalid_argument when the geometry does not fit.
std::size_t conv_output_sites(std::size_t input_sites, std::size_t kernel_sites, std::size_t stride);

// Same spec with `gamma` applied to every BatchNorm layer.
ArchSpec with_gamma(ArchSpec spec, double gamma);
// Same spec with BatchNorm removed everywhere.
ArchSpec without_batch_norm(ArchSpec spec);

}  // namespace mfbn
