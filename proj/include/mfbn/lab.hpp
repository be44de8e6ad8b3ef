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
#include "mfbn/nnkernel.hpp"

namespace mfbn {

// Malformed or truncated IDX file. `offset()` is the byte position where
// reading failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& path, std::size_t offset, const std::string& message);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

struct IdxImages {
  std::size_t count = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols, row-major per image
};

IdxImages read_idx_images(const std::string& path);
std::vector<std::uint8_t> read_idx_labels(const std::string& path);

// Examples are columns: inputs is dims x n, targets is classes x n (one-hot).
struct Dataset {
  Matrix inputs;
  Matrix targets;
  std::vector<std::uint8_t> labels;
  Vector feature_mean;    // statistics subtracted / divided out of `inputs`
  Vector feature_stddev;  // constant features keep stddev 1 and end up at 0

  std::size_t size() const { return static_cast<std::size_t>(inputs.cols()); }
  std::size_t dims() const { return static_cast<std::size_t>(inputs.rows()); }
  std::size_t classes() const { return static_cast<std::size_t>(targets.rows()); }
};

// Per-feature statistics of `inputs`; features with stddev below 1e-8 get 1.
void fit_standardization(const Matrix& inputs, Vector& mean, Vector& stddev);
// Applies the given statistics in place and stores them as metadata.
void standardize(Dataset& data, const Vector& mean, const Vector& stddev);

// Pixels scaled to [0, 1], then standardized with the selected examples' own
// statistics. `count` = 0 selects everything from `first` on.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t first = 0,
                 std::size_t count = 0);

struct TrainTest {
  Dataset train;
  Dataset test;
};

// First n_train examples for training and the next n_test for testing; both
// standardized with the training statistics. The directory holds
// images-idx3-ubyte and labels-idx1-ubyte (train-* names are accepted too).
TrainTest mnist_subset(const std::string& dir, std::size_t n_train, std::size_t n_test);

// i.i.d. N(0, 1) inputs labelled by argmax of a fixed random linear map.
Dataset synthetic_gaussian(std::size_t n, std::size_t input_dim, std::size_t n_classes, std::uint64_t seed);
TrainTest synthetic_split(std::size_t n_train, std::size_t n_test, std::size_t input_dim, std::size_t n_classes,
                          std::uint64_t seed);

// Mean over examples of ½‖f(x) − y‖².
double mse_loss(const Matrix& outputs, const Matrix& targets);

struct TrainConfig {
  double eta = 0.01;
  std::size_t epochs = 5;
  std::size_t batch = 0;  // 0: full batch
  std::uint64_t seed = 1;
  double explosion_factor = 1e6;
};

struct RunOutcome {
  double gamma = 0;  // the swept x value (γ, or σ_w² for baselines)
  double eta = 0;
  std::uint64_t seed = 0;
  std::optional<double> final_test_loss;
  bool diverged = false;
  std::size_t epochs_run = 0;
  double initial_train_loss = 0;
  std::vector<double> train_loss;  // full training set, end of each epoch
  std::vector<double> test_loss;
  std::string note;  // why training stopped early, if it did
};

// Momentum gradient descent θ ← θ − η∇L + μ(θ − θ_prev) on mse_loss with
// gradients through the BatchNorm statistics. μ comes from spec.init. Test
// loss uses BN statistics of the full training set. Divergence: non-finite
// loss, parameter norm above explosion_factor × initial, or a degenerate
// BatchNorm layer.
RunOutcome train(const ArchSpec& spec, const TrainTest& data, const TrainConfig& config);

struct PhaseCell {
  double x = 0;
  double log10_eta = 0;
  std::vector<RunOutcome> runs;  // one per seed, in seed order

  bool any_diverged() const;
  std::optional<double> mean_test_loss() const;  // over non-diverged runs
};

struct PhaseGrid {
  std::string x_name = "gamma";
  std::vector<double> x_grid;
  std::vector<double> log10_eta_grid;
  std::vector<PhaseCell> cells;     // x-major: cells[i * |eta grid| + j]
  std::vector<double> eta_star;     // theory per x
  std::vector<std::string> errors;  // per-cell failures that are not divergence

  const PhaseCell& cell(std::size_t i, std::size_t j) const { return cells.at(i * log10_eta_grid.size() + j); }
};

struct SweepConfig {
  std::vector<double> x_grid;
  std::vector<double> log10_eta_grid;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t epochs = 5;
  std::size_t batch = 0;
  std::size_t jobs = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
};

// γ on every BN layer of `spec` takes the grid values; overlay from the
// γ-adjusted recursions.
PhaseGrid phase_sweep(const ArchSpec& spec, const SweepConfig& config, const TrainTest& data);
// x is σ_w²; BatchNorm is removed and the overlay uses the vanilla recursions.
PhaseGrid baseline_sweep(const ArchSpec& spec, const SweepConfig& config, const TrainTest& data);

std::vector<double> grid_range(double first, double last, double step);

struct BoundaryPoint {
  double x = 0;
  std::optional<double> largest_stable_log10_eta;  // below the first diverged cell
  bool diverged_on_grid = false;                   // some cell diverged
  double log10_eta_star = 0;
};

std::vector<BoundaryPoint> extract_boundary(const PhaseGrid& grid);

// Per (x, seed) column: cells that converge although a smaller η diverged.
struct MonotonicityReport {
  std::size_t violations = 0;
  std::size_t boundary_cells = 0;  // cells adjacent to a stable/diverged switch
};
MonotonicityReport check_monotonicity(const PhaseGrid& grid);

void write_heatmap_csv(std::ostream& out, const PhaseGrid& grid);
void write_heatmap_svg(std::ostream& out, const PhaseGrid& grid);
void emit_heatmap(const PhaseGrid& grid, const std::string& csv_path, const std::string& svg_path);

// Momentum GD on L(θ) = ½ Σ λ_i θ_i², started from θ_i = 1.
struct QuadraticRun {
  bool diverged = false;
  std::size_t steps = 0;
  double final_norm = 0;
};
QuadraticRun quadratic_momentum_gd(const std::vector<double>& curvatures, double eta, double mu,
                                   std::size_t steps = 20000, double explosion_factor = 1e6);

}  // namespace mfbn
