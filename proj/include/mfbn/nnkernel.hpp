#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "mfbn/arch.hpp"

namespace mfbn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class NetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Activations are stored channels x (sites * examples); column n*K + α holds
// site α of example n. A multi-site tensor flattened to units uses unit index
// α*C + c, so the same memory viewed as (C*K) x m is the flat layout consumed
// by a fully-connected layer and by the input batch.
struct ConvGeometry {
  std::size_t in_side = 0;
  std::size_t out_side = 0;
  std::size_t kernel_side = 0;
  std::size_t stride = 1;
  std::vector<std::size_t> patch;  // patch[α*F + β] = input site under kernel offset β at output α

  std::size_t in_sites() const { return in_side * in_side; }
  std::size_t out_sites() const { return out_side * out_side; }
  std::size_t kernel_sites() const { return kernel_side * kernel_side; }
};

// Square input map, square kernel, no padding; the stride is inferred from
// the site counts. Throws NetError when the counts do not describe such a map.
ConvGeometry infer_geometry(std::size_t in_sites, std::size_t kernel_sites, std::size_t out_sites);

struct LayerParams {
  Matrix W;          // FC: N_l x N_{l-1}; conv: C_l x (|F_l| C_{l-1}), column β*C_{l-1} + c
  Vector b;          // one per output unit / channel
  Vector gamma;      // BN scale per unit / channel (empty without BN)
  Vector beta;
  std::optional<ConvGeometry> conv;
};

struct BnStats {
  Vector mean;
  Vector stddev;
};

struct NetInstance {
  ArchSpec spec;
  std::uint64_t seed = 0;
  std::vector<LayerParams> layers;              // index l-1
  std::vector<std::optional<BnStats>> frozen;   // statistics for ForwardMode::BatchNormFrozen

  std::size_t depth() const { return layers.size(); }
  std::size_t parameter_count() const;
  double parameter_norm() const;
};

// W ~ N(0, σ_w²/fan_in), b ~ N(0, σ_b²), γ and β from the architecture. Layer l
// draws from its own substream of `seed`, so sampling is order independent.
NetInstance sample_network(const ArchSpec& spec, std::uint64_t seed);

enum class ForwardMode {
  Vanilla,              // the network must not contain BatchNorm layers
  BatchNormPopulation,  // statistics from the batch, m >= 256 enforced
  BatchNormMinibatch,   // statistics from the batch, m >= 2
  BatchNormFrozen,      // statistics from NetInstance::frozen
};

enum class StatsMode { FrozenStats, FullBN };

struct LayerTape {
  Matrix z;       // pre-activation W h + b
  Matrix u;       // (z - mean)/s, BN layers only
  Matrix h;       // activation output
  Matrix delta;   // ∂objective/∂z
  Matrix grad_y;  // ∂objective/∂(γu + β), BN layers only
  std::optional<BnStats> stats;
};

struct BatchTape {
  Matrix input;                   // C_0 x (K_0 m)
  std::vector<LayerTape> layers;  // index l-1
  std::size_t batch = 0;
  bool has_backward = false;

  const Matrix& output() const { return layers.back().h; }
};

constexpr std::size_t kPopulationBatch = 256;
constexpr double kMinStddev = 1e-12;

BatchTape forward(const NetInstance& net, const Matrix& batch, ForwardMode mode);

// `seed_grad` is ∂objective/∂z^L with shape N_L x m. Fills delta (and
// grad_y) on every layer of the tape.
void backward(const NetInstance& net, BatchTape& tape, const Matrix& seed_grad, StatsMode mode);

// Seed selecting output component k for every example (Jacobian row mode).
Matrix output_component_seed(const NetInstance& net, std::size_t batch, std::size_t k);

// Copies the batch statistics of a tape into net.frozen.
void freeze_statistics(NetInstance& net, const BatchTape& tape);

struct ParamGrads {
  std::vector<Matrix> W;
  std::vector<Vector> b;
  std::vector<Vector> gamma;
  std::vector<Vector> beta;
};

// Gradients summed over the batch.
ParamGrads parameter_gradients(const NetInstance& net, const BatchTape& tape);

// Row i is the column-major vec of ∂objective_i/∂W^l for example i alone
// (Σ_α δ_{iα} a_{iα}ᵀ for conv layers). Shape m x (rows(W) cols(W)).
Matrix weight_gradient_rows(const NetInstance& net, const BatchTape& tape, std::size_t l);

// Input of layer l (1-based) as channels x (sites * m); l = 1 is the batch.
const Matrix& layer_input(const BatchTape& tape, std::size_t l);

// im2col for a conv layer: (|F| C_in) x (K_out m).
Matrix im2col(const ConvGeometry& g, const Matrix& input, std::size_t channels, std::size_t batch);

// Tape dump: "MFBT" magic, u32 tensor count, then per tensor u32 name length,
// name bytes, u32 rank, u64 dims, float64 data (column-major), all
// little-endian.
struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
};
void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_tensors(std::istream& in);
std::vector<NamedTensor> tape_tensors(const BatchTape& tape);

}  // namespace mfbn
