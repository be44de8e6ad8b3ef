#include "mfbn/lab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <mutex>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "mfbn/csv.hpp"
#include "mfbn/eigenbound.hpp"
#include "mfbn/meanfield.hpp"
#include "mfbn/parallel.hpp"
#include "mfbn/rng.hpp"

namespace mfbn {

FormatError::FormatError(const std::string& path, std::size_t offset, const std::string& message)
    : std::runtime_error(path + ": " + message + " (at byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

namespace {

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
  if (b.size() < at + 4)
    throw FormatError(path, b.size(),
                      "truncated header: expected at least " + std::to_string(at + 4) + " bytes, found " +
                          std::to_string(b.size()));
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

void check_magic(std::uint32_t magic, std::uint32_t want, const std::string& path) {
  if (magic == want) return;
  char msg[96];
  std::snprintf(msg, sizeof msg, "bad magic 0x%08x, expected 0x%08x", magic, want);
  throw FormatError(path, 0, msg);
}

void check_size(const std::vector<std::uint8_t>& b, std::size_t expected, const std::string& path) {
  if (b.size() == expected) return;
  throw FormatError(path, std::min(b.size(), expected),
                    (b.size() < expected ? "truncated file: expected " : "trailing data: expected ") +
                        std::to_string(expected) + " bytes, found " + std::to_string(b.size()));
}

}  // namespace

IdxImages read_idx_images(const std::string& path) {
  const auto b = read_bytes(path);
  check_magic(be32(b, 0, path), 0x00000803u, path);
  IdxImages img;
  img.count = be32(b, 4, path);
  img.rows = be32(b, 8, path);
  img.cols = be32(b, 12, path);
  check_size(b, 16 + img.count * img.rows * img.cols, path);
  img.pixels.assign(b.begin() + 16, b.end());
  return img;
}

std::vector<std::uint8_t> read_idx_labels(const std::string& path) {
  const auto b = read_bytes(path);
  check_magic(be32(b, 0, path), 0x00000801u, path);
  const std::size_t n = be32(b, 4, path);
  check_size(b, 8 + n, path);
  return {b.begin() + 8, b.end()};
}

void fit_standardization(const Matrix& inputs, Vector& mean, Vector& stddev) {
  const double n = static_cast<double>(inputs.cols());
  mean = inputs.rowwise().mean();
  stddev = ((inputs.colwise() - mean).array().square().rowwise().sum() / n).sqrt().matrix();
  for (Eigen::Index i = 0; i < stddev.size(); ++i)
    if (stddev[i] < 1e-8) stddev[i] = 1.0;
}

void standardize(Dataset& data, const Vector& mean, const Vector& stddev) {
  data.inputs = (data.inputs.colwise() - mean).array().colwise() / stddev.array();
  data.feature_mean = mean;
  data.feature_stddev = stddev;
}

namespace {

constexpr std::size_t kMnistClasses = 10;

Dataset raw_mnist(const IdxImages& img, const std::vector<std::uint8_t>& labels, std::size_t first,
                  std::size_t count, const std::string& where) {
  if (labels.size() != img.count)
    throw std::runtime_error(where + ": " + std::to_string(img.count) + " images but " +
                             std::to_string(labels.size()) + " labels");
  if (count == 0) count = img.count > first ? img.count - first : 0;
  if (first + count > img.count || count == 0)
    throw std::runtime_error(where + ": requested examples " + std::to_string(first) + ".." +
                             std::to_string(first + count) + " but the file holds " + std::to_string(img.count));
  const std::size_t dims = img.rows * img.cols;
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(dims), static_cast<Eigen::Index>(count));
  d.targets = Matrix::Zero(kMnistClasses, static_cast<Eigen::Index>(count));
  for (std::size_t n = 0; n < count; ++n) {
    const std::uint8_t* px = img.pixels.data() + (first + n) * dims;
    for (std::size_t p = 0; p < dims; ++p)
      d.inputs(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n)) = px[p] / 255.0;
    const std::uint8_t y = labels[first + n];
    if (y >= kMnistClasses) throw FormatError(where, 8 + first + n, "label " + std::to_string(y) + " out of range");
    d.labels.push_back(y);
    d.targets(y, static_cast<Eigen::Index>(n)) = 1.0;
  }
  return d;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t first,
                 std::size_t count) {
  Dataset d = raw_mnist(read_idx_images(images_path), read_idx_labels(labels_path), first, count, images_path);
  Vector mean, sd;
  fit_standardization(d.inputs, mean, sd);
  standardize(d, mean, sd);
  return d;
}

TrainTest mnist_subset(const std::string& dir, std::size_t n_train, std::size_t n_test) {
  namespace fs = std::filesystem;
  fs::path images = fs::path(dir) / "images-idx3-ubyte";
  fs::path labels = fs::path(dir) / "labels-idx1-ubyte";
  if (!fs::exists(images) && fs::exists(fs::path(dir) / "train-images-idx3-ubyte")) {
    images = fs::path(dir) / "train-images-idx3-ubyte";
    labels = fs::path(dir) / "train-labels-idx1-ubyte";
  }
  if (!fs::exists(images)) throw std::runtime_error("no IDX image file in " + dir);
  const IdxImages img = read_idx_images(images.string());
  const auto lab = read_idx_labels(labels.string());
  TrainTest tt;
  tt.train = raw_mnist(img, lab, 0, n_train, images.string());
  tt.test = raw_mnist(img, lab, n_train, n_test, images.string());
  Vector mean, sd;
  fit_standardization(tt.train.inputs, mean, sd);
  standardize(tt.train, mean, sd);
  standardize(tt.test, mean, sd);
  return tt;
}

Dataset synthetic_gaussian(std::size_t n, std::size_t input_dim, std::size_t n_classes, std::uint64_t seed) {
  if (n_classes == 0 || n < n_classes) throw std::invalid_argument("synthetic data needs n >= n_classes >= 1");
  Rng rng = make_stream(seed, 0);
  Rng label_rng = make_stream(seed, 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  Dataset d;
  d.inputs.resize(static_cast<Eigen::Index>(input_dim), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < d.inputs.size(); ++i) d.inputs.data()[i] = nd(rng);
  Matrix labeller(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(input_dim));
  for (Eigen::Index i = 0; i < labeller.size(); ++i) labeller.data()[i] = nd(label_rng);
  const Matrix scores = labeller * d.inputs;
  d.targets = Matrix::Zero(static_cast<Eigen::Index>(n_classes), static_cast<Eigen::Index>(n));
  for (Eigen::Index c = 0; c < scores.cols(); ++c) {
    Eigen::Index k = 0;
    scores.col(c).maxCoeff(&k);
    d.targets(k, c) = 1.0;
    d.labels.push_back(static_cast<std::uint8_t>(k));
  }
  d.feature_mean = Vector::Zero(static_cast<Eigen::Index>(input_dim));
  d.feature_stddev = Vector::Ones(static_cast<Eigen::Index>(input_dim));
  return d;
}

TrainTest synthetic_split(std::size_t n_train, std::size_t n_test, std::size_t input_dim, std::size_t n_classes,
                          std::uint64_t seed) {
  const Dataset all = synthetic_gaussian(n_train + n_test, input_dim, n_classes, seed);
  TrainTest tt;
  auto take = [&](std::size_t first, std::size_t count) {
    Dataset d;
    d.inputs = all.inputs.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count));
    d.targets = all.targets.middleCols(static_cast<Eigen::Index>(first), static_cast<Eigen::Index>(count));
    d.labels.assign(all.labels.begin() + static_cast<std::ptrdiff_t>(first),
                    all.labels.begin() + static_cast<std::ptrdiff_t>(first + count));
    d.feature_mean = all.feature_mean;
    d.feature_stddev = all.feature_stddev;
    return d;
  };
  tt.train = take(0, n_train);
  tt.test = take(n_train, n_test);
  return tt;
}

double mse_loss(const Matrix& outputs, const Matrix& targets) {
  return 0.5 * (outputs - targets).squaredNorm() / static_cast<double>(outputs.cols());
}

namespace {

ParamGrads zero_like(const NetInstance& net) {
  ParamGrads z;
  for (const auto& p : net.layers) {
    z.W.push_back(Matrix::Zero(p.W.rows(), p.W.cols()));
    z.b.push_back(Vector::Zero(p.b.size()));
    z.gamma.push_back(Vector::Zero(p.gamma.size()));
    z.beta.push_back(Vector::Zero(p.beta.size()));
  }
  return z;
}

// v ← μv − ηg; θ ← θ + v.
void momentum_step(NetInstance& net, ParamGrads& v, const ParamGrads& g, double eta, double mu) {
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    LayerParams& p = net.layers[l];
    v.W[l] = mu * v.W[l] - eta * g.W[l];
    p.W += v.W[l];
    v.b[l] = mu * v.b[l] - eta * g.b[l];
    p.b += v.b[l];
    if (p.gamma.size() > 0) {
      v.gamma[l] = mu * v.gamma[l] - eta * g.gamma[l];
      p.gamma += v.gamma[l];
      v.beta[l] = mu * v.beta[l] - eta * g.beta[l];
      p.beta += v.beta[l];
    }
  }
}

Matrix gather_columns(const Matrix& m, const std::vector<std::size_t>& idx, std::size_t first, std::size_t count) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(count));
  for (std::size_t i = 0; i < count; ++i) out.col(static_cast<Eigen::Index>(i)) = m.col(static_cast<Eigen::Index>(idx[first + i]));
  return out;
}

struct EvalLosses {
  double train;
  double test;
};

EvalLosses evaluate(NetInstance net, const TrainTest& data) {
  const bool bn = net.spec.has_batch_norm();
  const BatchTape t = forward(net, data.train.inputs, bn ? ForwardMode::BatchNormMinibatch : ForwardMode::Vanilla);
  const double train = mse_loss(t.output(), data.train.targets);
  if (bn) freeze_statistics(net, t);
  const BatchTape s = forward(net, data.test.inputs, bn ? ForwardMode::BatchNormFrozen : ForwardMode::Vanilla);
  return {train, mse_loss(s.output(), data.test.targets)};
}

}  // namespace

RunOutcome train(const ArchSpec& spec, const TrainTest& data, const TrainConfig& config) {
  if (!(config.eta > 0)) throw std::invalid_argument("learning rate must be positive");
  if (data.train.dims() != spec.input.units())
    throw std::invalid_argument("data has " + std::to_string(data.train.dims()) + " features, network expects " +
                                std::to_string(spec.input.units()));
  if (data.train.classes() != spec.layers.back().units())
    throw std::invalid_argument("data has " + std::to_string(data.train.classes()) + " classes, network has " +
                                std::to_string(spec.layers.back().units()) + " outputs");
  const std::size_t n = data.train.size();
  const std::size_t mb = config.batch == 0 ? n : std::min(config.batch, n);
  const bool bn = spec.has_batch_norm();
  if (bn && mb < 2) throw std::invalid_argument("BatchNorm training needs batches of at least 2");

  RunOutcome out;
  out.eta = config.eta;
  out.seed = config.seed;
  NetInstance net = sample_network(spec, derive_seed(config.seed, 0));
  const double mu = spec.init.momentum;
  const double limit = config.explosion_factor * net.parameter_norm();
  ParamGrads velocity = zero_like(net);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});

  auto fail = [&](const std::string& why) {
    out.diverged = true;
    out.final_test_loss.reset();
    out.note = why;
    return out;
  };

  try {
    out.initial_train_loss = evaluate(net, data).train;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      if (mb < n) {
        Rng rng = make_stream(derive_seed(config.seed, 1), epoch);
        std::shuffle(order.begin(), order.end(), rng);
      }
      for (std::size_t first = 0; first + mb <= n; first += mb) {
        const Matrix x = mb == n ? data.train.inputs : gather_columns(data.train.inputs, order, first, mb);
        const Matrix y = mb == n ? data.train.targets : gather_columns(data.train.targets, order, first, mb);
        BatchTape tape = forward(net, x, bn ? ForwardMode::BatchNormMinibatch : ForwardMode::Vanilla);
        const double loss = mse_loss(tape.output(), y);
        if (!std::isfinite(loss)) return fail("non-finite training loss in epoch " + std::to_string(epoch + 1));
        backward(net, tape, (tape.output() - y) / static_cast<double>(mb), StatsMode::FullBN);
        momentum_step(net, velocity, parameter_gradients(net, tape), config.eta, mu);
        const double norm = net.parameter_norm();
        if (!std::isfinite(norm) || norm > limit)
          return fail("parameter norm exceeded the explosion threshold in epoch " + std::to_string(epoch + 1));
      }
      const EvalLosses e = evaluate(net, data);
      out.epochs_run = epoch + 1;
      out.train_loss.push_back(e.train);
      out.test_loss.push_back(e.test);
      if (!std::isfinite(e.train) || !std::isfinite(e.test))
        return fail("non-finite loss after epoch " + std::to_string(epoch + 1));
      out.final_test_loss = e.test;
    }
  } catch (const NetError& e) {
    return fail(e.what());
  }
  return out;
}

bool PhaseCell::any_diverged() const {
  return std::any_of(runs.begin(), runs.end(), [](const RunOutcome& r) { return r.diverged; });
}

std::optional<double> PhaseCell::mean_test_loss() const {
  double sum = 0;
  std::size_t k = 0;
  for (const auto& r : runs)
    if (!r.diverged && r.final_test_loss) {
      sum += *r.final_test_loss;
      ++k;
    }
  if (k == 0) return std::nullopt;
  return sum / static_cast<double>(k);
}

std::vector<double> grid_range(double first, double last, double step) {
  if (!(step > 0) || last < first) throw std::invalid_argument("grid needs step > 0 and last >= first");
  const auto n = static_cast<std::size_t>(std::floor((last - first) / step + 1e-9)) + 1;
  std::vector<double> g;
  for (std::size_t i = 0; i < n; ++i) g.push_back(first + step * static_cast<double>(i));
  return g;
}

namespace {

PhaseGrid run_sweep(const SweepConfig& cfg, const TrainTest& data, const std::string& x_name,
                    const std::function<ArchSpec(double)>& spec_at) {
  if (cfg.x_grid.empty() || cfg.log10_eta_grid.empty() || cfg.seeds.empty())
    throw std::invalid_argument("sweep grids and seed list must be nonempty");
  PhaseGrid grid;
  grid.x_name = x_name;
  grid.x_grid = cfg.x_grid;
  grid.log10_eta_grid = cfg.log10_eta_grid;
  std::vector<ArchSpec> specs;
  for (double x : cfg.x_grid) {
    specs.push_back(spec_at(x));
    grid.eta_star.push_back(spectral_report(run_profile(specs.back())).eta_star);
  }
  const std::size_t ne = cfg.log10_eta_grid.size(), ns = cfg.seeds.size();
  grid.cells.resize(cfg.x_grid.size() * ne);
  for (std::size_t i = 0; i < cfg.x_grid.size(); ++i)
    for (std::size_t j = 0; j < ne; ++j) {
      PhaseCell& c = grid.cells[i * ne + j];
      c.x = cfg.x_grid[i];
      c.log10_eta = cfg.log10_eta_grid[j];
      c.runs.resize(ns);
    }
  const std::size_t total = grid.cells.size() * ns;
  std::vector<std::string> errors(total);
  std::atomic<std::size_t> done{0};
  std::mutex progress_mutex;
  parallel_for(total, cfg.jobs, [&](std::size_t task) {
    const std::size_t cell = task / ns, s = task % ns;
    const std::size_t i = cell / ne;
    PhaseCell& c = grid.cells[cell];
    TrainConfig tc;
    tc.eta = std::pow(10.0, c.log10_eta);
    tc.epochs = cfg.epochs;
    tc.batch = cfg.batch;
    tc.seed = cfg.seeds[s];
    RunOutcome r;
    try {
      r = train(specs[i], data, tc);
    } catch (const std::exception& e) {
      r.eta = tc.eta;
      r.seed = tc.seed;
      r.diverged = true;
      r.note = e.what();
      errors[task] = x_name + "=" + csv_number(c.x) + " log10_eta=" + csv_number(c.log10_eta) + " seed " +
                     std::to_string(tc.seed) + ": " + e.what();
    }
    r.gamma = c.x;
    c.runs[s] = std::move(r);
    const std::size_t d = ++done;
    if (cfg.progress) {
      std::lock_guard<std::mutex> lock(progress_mutex);
      cfg.progress(d, total);
    }
  });
  for (auto& e : errors)
    if (!e.empty()) grid.errors.push_back(std::move(e));
  return grid;
}

}  // namespace

PhaseGrid phase_sweep(const ArchSpec& spec, const SweepConfig& config, const TrainTest& data) {
  if (!spec.has_batch_norm()) throw std::invalid_argument("phase sweep needs a BatchNorm architecture");
  return run_sweep(config, data, "gamma", [&](double g) { return with_gamma(spec, g); });
}

PhaseGrid baseline_sweep(const ArchSpec& spec, const SweepConfig& config, const TrainTest& data) {
  const ArchSpec vanilla = without_batch_norm(spec);
  return run_sweep(config, data, "sigma_w_sq", [&](double w) {
    if (!(w > 0)) throw std::invalid_argument("sigma_w_sq grid values must be positive");
    ArchSpec s = vanilla;
    s.init.sigma_w_sq = w;
    return s;
  });
}

std::vector<BoundaryPoint> extract_boundary(const PhaseGrid& grid) {
  std::vector<BoundaryPoint> out;
  const std::size_t ne = grid.log10_eta_grid.size();
  for (std::size_t i = 0; i < grid.x_grid.size(); ++i) {
    BoundaryPoint b;
    b.x = grid.x_grid[i];
    b.log10_eta_star = std::log10(grid.eta_star[i]);
    std::size_t j = 0;
    while (j < ne && !grid.cell(i, j).any_diverged()) ++j;
    b.diverged_on_grid = j < ne;
    if (j > 0) b.largest_stable_log10_eta = grid.log10_eta_grid[j - 1];
    out.push_back(b);
  }
  return out;
}

MonotonicityReport check_monotonicity(const PhaseGrid& grid) {
  MonotonicityReport rep;
  const std::size_t ne = grid.log10_eta_grid.size();
  for (std::size_t i = 0; i < grid.x_grid.size(); ++i) {
    const std::size_t ns = grid.cell(i, 0).runs.size();
    for (std::size_t s = 0; s < ns; ++s) {
      std::vector<bool> d(ne);
      for (std::size_t j = 0; j < ne; ++j) d[j] = grid.cell(i, j).runs[s].diverged;
      bool seen = false;
      for (std::size_t j = 0; j < ne; ++j) {
        if (seen && !d[j]) ++rep.violations;
        seen = seen || d[j];
        const bool edge = (j > 0 && d[j] != d[j - 1]) || (j + 1 < ne && d[j] != d[j + 1]);
        if (edge) ++rep.boundary_cells;
      }
    }
  }
  return rep;
}

void write_heatmap_csv(std::ostream& out, const PhaseGrid& grid) {
  out << grid.x_name << ",log10_eta,mean_test_loss,any_diverged,n_seeds\n";
  for (const auto& c : grid.cells)
    out << csv_number(c.x) << ',' << csv_number(c.log10_eta) << ',' << csv_number(c.mean_test_loss()) << ','
        << (c.any_diverged() ? 1 : 0) << ',' << c.runs.size() << '\n';
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// Viridis sampled at five points.
std::string ramp(double t) {
  static const double stops[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  t = std::clamp(t, 0.0, 1.0) * 4;
  const int k = std::min(3, static_cast<int>(t));
  const double f = t - k;
  char buf[16];
  int rgb[3];
  for (int c = 0; c < 3; ++c) rgb[c] = static_cast<int>(std::lround(stops[k][c] + f * (stops[k + 1][c] - stops[k][c])));
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", rgb[0], rgb[1], rgb[2]);
  return buf;
}

}  // namespace

void write_heatmap_svg(std::ostream& out, const PhaseGrid& grid) {
  const double left = 70, top = 30, pw = 480, ph = 360, bar = 16;
  const double width = left + pw + 110, height = top + ph + 60;
  const std::size_t nx = grid.x_grid.size(), ne = grid.log10_eta_grid.size();
  const double cw = pw / static_cast<double>(nx), ch = ph / static_cast<double>(ne);

  double lo = INFINITY, hi = -INFINITY;
  for (const auto& c : grid.cells)
    if (auto m = c.mean_test_loss(); m && *m > 0) {
      lo = std::min(lo, std::log10(*m));
      hi = std::max(hi, std::log10(*m));
    }
  const bool any_finite = lo <= hi;
  auto shade = [&](double loss) {
    if (!(loss > 0) || !any_finite) return ramp(0);
    return ramp(hi > lo ? (std::log10(loss) - lo) / (hi - lo) : 0.5);
  };
  // y of a log10 η value: linear between the row centres.
  const double e0 = grid.log10_eta_grid.front(), e1 = grid.log10_eta_grid.back();
  auto y_of = [&](double v) {
    const double row = ne > 1 ? (v - e0) / (e1 - e0) * static_cast<double>(ne - 1) : 0.0;
    return top + ph - (row + 0.5) * ch;
  };

  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fmt("%.0f", width) << "\" height=\""
      << fmt("%.0f", height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out << "<defs>\n<pattern id=\"diverged\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\">"
         "<rect width=\"6\" height=\"6\" fill=\"#ffffff\"/><path d=\"M0,6 L6,0\" stroke=\"#c0c0c0\"/></pattern>\n";
  out << "<clipPath id=\"plot\"><rect x=\"" << fmt("%.2f", left) << "\" y=\"" << fmt("%.2f", top) << "\" width=\""
      << fmt("%.2f", pw) << "\" height=\"" << fmt("%.2f", ph) << "\"/></clipPath>\n";
  out << "<linearGradient id=\"ramp\" x1=\"0\" y1=\"1\" x2=\"0\" y2=\"0\">";
  for (int k = 0; k <= 4; ++k)
    out << "<stop offset=\"" << fmt("%.2f", k / 4.0) << "\" stop-color=\"" << ramp(k / 4.0) << "\"/>";
  out << "</linearGradient>\n</defs>\n";

  for (std::size_t i = 0; i < nx; ++i)
    for (std::size_t j = 0; j < ne; ++j) {
      const PhaseCell& c = grid.cell(i, j);
      const double x = left + static_cast<double>(i) * cw;
      const double y = top + ph - static_cast<double>(j + 1) * ch;
      const auto m = c.mean_test_loss();
      const std::string fill = c.any_diverged() || !m ? "url(#diverged)" : shade(*m);
      out << "<rect x=\"" << fmt("%.2f", x) << "\" y=\"" << fmt("%.2f", y) << "\" width=\"" << fmt("%.2f", cw)
          << "\" height=\"" << fmt("%.2f", ch) << "\" fill=\"" << fill << "\" stroke=\"#ffffff\" stroke-width=\"0.5\"/>\n";
    }
  out << "<rect x=\"" << fmt("%.2f", left) << "\" y=\"" << fmt("%.2f", top) << "\" width=\"" << fmt("%.2f", pw)
      << "\" height=\"" << fmt("%.2f", ph) << "\" fill=\"none\" stroke=\"#000000\"/>\n";

  // Theory overlay: η* solid, η*/2 dashed.
  for (int half = 0; half < 2; ++half) {
    out << "<polyline clip-path=\"url(#plot)\" fill=\"none\" stroke=\"#000000\" stroke-width=\"2\""
        << (half ? " stroke-dasharray=\"6,4\"" : "") << " points=\"";
    for (std::size_t i = 0; i < nx; ++i) {
      const double v = std::log10(grid.eta_star[i] / (half ? 2.0 : 1.0));
      out << (i ? " " : "") << fmt("%.2f", left + (static_cast<double>(i) + 0.5) * cw) << ','
          << fmt("%.2f", y_of(v));
    }
    out << "\"/>\n";
  }

  // Axes.
  for (std::size_t i = 0; i < nx; ++i)
    out << "<text x=\"" << fmt("%.2f", left + (static_cast<double>(i) + 0.5) * cw) << "\" y=\""
        << fmt("%.2f", top + ph + 14) << "\" text-anchor=\"middle\">" << fmt("%g", grid.x_grid[i]) << "</text>\n";
  for (std::size_t j = 0; j < ne; ++j)
    out << "<text x=\"" << fmt("%.2f", left - 6) << "\" y=\"" << fmt("%.2f", top + ph - (static_cast<double>(j) + 0.5) * ch + 4)
        << "\" text-anchor=\"end\">" << fmt("%.2f", grid.log10_eta_grid[j]) << "</text>\n";
  out << "<text x=\"" << fmt("%.2f", left + pw / 2) << "\" y=\"" << fmt("%.2f", top + ph + 34)
      << "\" text-anchor=\"middle\">" << (grid.x_name == "gamma" ? "&#947;" : "&#963;_w&#178;") << "</text>\n";
  out << "<text x=\"16\" y=\"" << fmt("%.2f", top + ph / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << fmt("%.2f", top + ph / 2) << ")\">log10 &#951;</text>\n";
  out << "<text x=\"" << fmt("%.2f", left) << "\" y=\"18\">test loss (hatched: diverged); line: &#951;*, dashed: &#951;*/2</text>\n";

  const double bx = left + pw + 20;
  if (any_finite) {
    out << "<rect x=\"" << fmt("%.2f", bx) << "\" y=\"" << fmt("%.2f", top) << "\" width=\"" << fmt("%.2f", bar)
        << "\" height=\"" << fmt("%.2f", ph) << "\" fill=\"url(#ramp)\" stroke=\"#000000\"/>\n";
    out << "<text x=\"" << fmt("%.2f", bx + bar + 4) << "\" y=\"" << fmt("%.2f", top + 8) << "\">"
        << fmt("%.3g", std::pow(10.0, hi)) << "</text>\n";
    out << "<text x=\"" << fmt("%.2f", bx + bar + 4) << "\" y=\"" << fmt("%.2f", top + ph) << "\">"
        << fmt("%.3g", std::pow(10.0, lo)) << "</text>\n";
  } else {
    out << "<text x=\"" << fmt("%.2f", bx) << "\" y=\"" << fmt("%.2f", top + 12) << "\">all runs diverged</text>\n";
  }
  out << "</svg>\n";
}

void emit_heatmap(const PhaseGrid& grid, const std::string& csv_path, const std::string& svg_path) {
  std::ofstream csv(csv_path, std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write " + csv_path);
  write_heatmap_csv(csv, grid);
  std::ofstream svg(svg_path, std::ios::binary);
  if (!svg) throw std::runtime_error("cannot write " + svg_path);
  write_heatmap_svg(svg, grid);
  if (!csv.good() || !svg.good()) throw std::runtime_error("write failed for " + csv_path + " or " + svg_path);
}

QuadraticRun quadratic_momentum_gd(const std::vector<double>& curvatures, double eta, double mu, std::size_t steps,
                                   double explosion_factor) {
  const std::size_t n = curvatures.size();
  std::vector<double> theta(n, 1.0), prev(n, 1.0);
  const double start = std::sqrt(static_cast<double>(n));
  QuadraticRun r;
  for (std::size_t t = 1; t <= steps; ++t) {
    double norm2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double next = theta[i] - eta * curvatures[i] * theta[i] + mu * (theta[i] - prev[i]);
      prev[i] = theta[i];
      theta[i] = next;
      norm2 += next * next;
    }
    r.steps = t;
    r.final_norm = std::sqrt(norm2);
    if (!std::isfinite(r.final_norm) || r.final_norm > explosion_factor * start) {
      r.diverged = true;
      return r;
    }
  }
  return r;
}

}  // namespace mfbn
