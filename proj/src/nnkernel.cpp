#include "mfbn/nnkernel.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>

#include "mfbn/rng.hpp"

namespace mfbn {

namespace {

std::size_t isqrt_exact(std::size_t n, const char* what) {
  const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (r * r != n) throw NetError(std::string(what) + " (" + std::to_string(n) + ") is not a perfect square");
  return r;
}

std::string layer_name(std::size_t l) { return "layer " + std::to_string(l); }

Eigen::Map<const Matrix> flat_view(const Matrix& a, std::size_t batch) {
  const auto m = static_cast<Eigen::Index>(batch);
  return {a.data(), a.size() / m, m};
}

BnStats batch_stats(const Matrix& z, std::size_t l) {
  BnStats s;
  s.mean = z.rowwise().mean();
  s.stddev = (z.colwise() - s.mean).array().square().rowwise().mean().sqrt();
  for (Eigen::Index i = 0; i < s.stddev.size(); ++i)
    if (!(s.stddev[i] >= kMinStddev))
      throw NetError(layer_name(l) + ": degenerate statistics (s = " + std::to_string(s.stddev[i]) +
                     " for unit " + std::to_string(i) + ")");
  return s;
}

void col2im_add(const ConvGeometry& g, const Matrix& grad_patches, std::size_t channels,
                std::size_t batch, Matrix& grad_input) {
  const auto C = static_cast<Eigen::Index>(channels);
  const std::size_t F = g.kernel_sites(), Ko = g.out_sites(), Ki = g.in_sites();
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t a = 0; a < Ko; ++a) {
      const auto col = static_cast<Eigen::Index>(n * Ko + a);
      for (std::size_t b = 0; b < F; ++b)
        grad_input.col(static_cast<Eigen::Index>(n * Ki + g.patch[a * F + b])) +=
            grad_patches.block(static_cast<Eigen::Index>(b) * C, col, C, 1);
    }
}

}  // namespace

ConvGeometry infer_geometry(std::size_t in_sites, std::size_t kernel_sites, std::size_t out_sites) {
  ConvGeometry g;
  g.in_side = isqrt_exact(in_sites, "input sites");
  g.kernel_side = isqrt_exact(kernel_sites, "kernel sites");
  g.out_side = isqrt_exact(out_sites, "output sites");
  if (g.kernel_side > g.in_side || g.out_side == 0) throw NetError("kernel larger than its input map");
  const std::size_t span = g.in_side - g.kernel_side;
  if (g.out_side == 1) {
    g.stride = span + 1;
  } else {
    g.stride = span / (g.out_side - 1);
    if (g.stride == 0 || span / g.stride + 1 != g.out_side)
      throw NetError("no stride maps " + std::to_string(in_sites) + " sites to " +
                     std::to_string(out_sites) + " with a " + std::to_string(kernel_sites) +
                     "-site kernel");
  }
  const std::size_t F = g.kernel_sites();
  g.patch.resize(g.out_sites() * F);
  for (std::size_t oy = 0; oy < g.out_side; ++oy)
    for (std::size_t ox = 0; ox < g.out_side; ++ox)
      for (std::size_t ky = 0; ky < g.kernel_side; ++ky)
        for (std::size_t kx = 0; kx < g.kernel_side; ++kx)
          g.patch[(oy * g.out_side + ox) * F + ky * g.kernel_side + kx] =
              (oy * g.stride + ky) * g.in_side + ox * g.stride + kx;
  return g;
}

std::size_t NetInstance::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : layers)
    n += static_cast<std::size_t>(p.W.size() + p.b.size() + p.gamma.size() + p.beta.size());
  return n;
}

double NetInstance::parameter_norm() const {
  double s = 0;
  for (const auto& p : layers)
    s += p.W.squaredNorm() + p.b.squaredNorm() + p.gamma.squaredNorm() + p.beta.squaredNorm();
  return std::sqrt(s);
}

NetInstance sample_network(const ArchSpec& spec, std::uint64_t seed) {
  NetInstance net;
  net.spec = spec;
  net.seed = seed;
  net.frozen.resize(spec.depth());
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    const LayerSpec& layer = spec.layer(l);
    LayerParams p;
    const auto out = static_cast<Eigen::Index>(layer.width);
    const auto fan_in = static_cast<Eigen::Index>(layer.fan_in);
    if (layer.is_conv())
      p.conv = infer_geometry(spec.sites_before(l), *layer.kernel_sites, layer.sites());

    Rng wr = make_stream(seed, 2 * l);
    std::normal_distribution<double> wd(0.0, std::sqrt(spec.init.sigma_w_sq / static_cast<double>(fan_in)));
    p.W.resize(out, fan_in);
    for (Eigen::Index j = 0; j < fan_in; ++j)
      for (Eigen::Index i = 0; i < out; ++i) p.W(i, j) = wd(wr);

    p.b = Vector::Zero(out);
    if (spec.init.sigma_b_sq > 0) {
      Rng br = make_stream(seed, 2 * l + 1);
      std::normal_distribution<double> bd(0.0, std::sqrt(spec.init.sigma_b_sq));
      for (Eigen::Index i = 0; i < out; ++i) p.b[i] = bd(br);
    }
    if (layer.batch_norm) {
      p.gamma = Vector::Constant(out, layer.gamma);
      p.beta = Vector::Constant(out, layer.beta);
    }
    net.layers.push_back(std::move(p));
  }
  return net;
}

Matrix im2col(const ConvGeometry& g, const Matrix& input, std::size_t channels, std::size_t batch) {
  const auto C = static_cast<Eigen::Index>(channels);
  const std::size_t F = g.kernel_sites(), Ko = g.out_sites(), Ki = g.in_sites();
  Matrix P(static_cast<Eigen::Index>(F) * C, static_cast<Eigen::Index>(Ko * batch));
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t a = 0; a < Ko; ++a) {
      const auto col = static_cast<Eigen::Index>(n * Ko + a);
      for (std::size_t b = 0; b < F; ++b)
        P.block(static_cast<Eigen::Index>(b) * C, col, C, 1) =
            input.col(static_cast<Eigen::Index>(n * Ki + g.patch[a * F + b]));
    }
  return P;
}

const Matrix& layer_input(const BatchTape& tape, std::size_t l) {
  return l <= 1 ? tape.input : tape.layers.at(l - 2).h;
}

BatchTape forward(const NetInstance& net, const Matrix& batch, ForwardMode mode) {
  const ArchSpec& spec = net.spec;
  const std::size_t m = static_cast<std::size_t>(batch.cols());
  if (m == 0) throw NetError("empty batch");
  if (static_cast<std::size_t>(batch.rows()) != spec.input.units())
    throw NetError("batch has " + std::to_string(batch.rows()) + " rows, input expects " +
                   std::to_string(spec.input.units()));
  if (mode == ForwardMode::Vanilla && spec.has_batch_norm())
    throw NetError("vanilla forward mode on a network with BatchNorm");
  if (mode == ForwardMode::BatchNormPopulation && spec.has_batch_norm() && m < kPopulationBatch)
    throw NetError("population statistics need a batch of at least " +
                   std::to_string(kPopulationBatch) + " (got " + std::to_string(m) + ")");
  if (mode == ForwardMode::BatchNormMinibatch && spec.has_batch_norm() && m < 2)
    throw NetError("minibatch statistics need at least 2 examples");

  BatchTape tape;
  tape.batch = m;
  tape.input = Eigen::Map<const Matrix>(batch.data(), static_cast<Eigen::Index>(spec.input.channels),
                                        static_cast<Eigen::Index>(spec.input.sites * m));
  tape.layers.resize(net.depth());
  for (std::size_t l = 1; l <= net.depth(); ++l) {
    const LayerSpec& layer = spec.layer(l);
    const LayerParams& p = net.layers[l - 1];
    LayerTape& t = tape.layers[l - 1];
    const Matrix& a = layer_input(tape, l);
    if (p.conv) {
      t.z.noalias() = p.W * im2col(*p.conv, a, spec.channels_before(l), m);
    } else {
      t.z.noalias() = p.W * flat_view(a, m);
    }
    t.z.colwise() += p.b;

    if (layer.batch_norm) {
      if (mode == ForwardMode::BatchNormFrozen) {
        if (!net.frozen.at(l - 1)) throw NetError(layer_name(l) + ": no frozen statistics");
        t.stats = *net.frozen[l - 1];
      } else {
        t.stats = batch_stats(t.z, l);
      }
      t.u = (t.z.colwise() - t.stats->mean).array().colwise() / t.stats->stddev.array();
      Matrix y = (t.u.array().colwise() * p.gamma.array()).matrix();
      y.colwise() += p.beta;
      t.h = layer.activation == Activation::ReLU ? Matrix(y.cwiseMax(0.0)) : y;
    } else {
      t.h = layer.activation == Activation::ReLU ? Matrix(t.z.cwiseMax(0.0)) : t.z;
    }
  }
  return tape;
}

Matrix output_component_seed(const NetInstance& net, std::size_t batch, std::size_t k) {
  const LayerSpec& out = net.spec.layers.back();
  if (k >= out.width) throw NetError("output component " + std::to_string(k) + " out of range");
  Matrix s = Matrix::Zero(static_cast<Eigen::Index>(out.width),
                          static_cast<Eigen::Index>(out.sites() * batch));
  s.row(static_cast<Eigen::Index>(k)).setOnes();
  return s;
}

void backward(const NetInstance& net, BatchTape& tape, const Matrix& seed_grad, StatsMode mode) {
  const ArchSpec& spec = net.spec;
  const std::size_t L = net.depth();
  const std::size_t m = tape.batch;
  if (tape.layers.size() != L) throw NetError("tape does not belong to this network");
  if (seed_grad.rows() != tape.layers.back().h.rows() || seed_grad.cols() != tape.layers.back().h.cols())
    throw NetError("seed gradient shape mismatch");

  Matrix g = seed_grad;  // ∂objective/∂h^l
  for (std::size_t l = L; l >= 1; --l) {
    const LayerSpec& layer = spec.layer(l);
    const LayerParams& p = net.layers[l - 1];
    LayerTape& t = tape.layers[l - 1];
    if (layer.activation == Activation::ReLU) g = (t.h.array() > 0).select(g, 0.0);
    if (layer.batch_norm) {
      t.grad_y = g;
      const Matrix gu = (g.array().colwise() * p.gamma.array()).matrix();
      const Eigen::ArrayXd inv_s = t.stats->stddev.array().inverse();
      if (mode == StatsMode::FrozenStats) {
        t.delta = (gu.array().colwise() * inv_s).matrix();
      } else {
        const Vector mean_g = gu.rowwise().mean();
        const Vector mean_gu = gu.cwiseProduct(t.u).rowwise().mean();
        Matrix d = gu.colwise() - mean_g;
        d -= (t.u.array().colwise() * mean_gu.array()).matrix();
        t.delta = (d.array().colwise() * inv_s).matrix();
      }
    } else {
      t.grad_y.resize(0, 0);
      t.delta = std::move(g);
    }
    if (l == 1) break;

    const std::size_t c_in = spec.channels_before(l);
    const std::size_t k_in = spec.sites_before(l);
    if (p.conv) {
      const Matrix gp = p.W.transpose() * t.delta;
      g = Matrix::Zero(static_cast<Eigen::Index>(c_in), static_cast<Eigen::Index>(k_in * m));
      col2im_add(*p.conv, gp, c_in, m, g);
    } else {
      Matrix flat = p.W.transpose() * t.delta;
      g = Eigen::Map<Matrix>(flat.data(), static_cast<Eigen::Index>(c_in),
                             static_cast<Eigen::Index>(k_in * m));
    }
  }
  tape.has_backward = true;
}

void freeze_statistics(NetInstance& net, const BatchTape& tape) {
  net.frozen.assign(net.depth(), std::nullopt);
  for (std::size_t l = 0; l < net.depth(); ++l) net.frozen[l] = tape.layers.at(l).stats;
}

ParamGrads parameter_gradients(const NetInstance& net, const BatchTape& tape) {
  if (!tape.has_backward) throw NetError("parameter gradients need a backward pass");
  ParamGrads out;
  const std::size_t m = tape.batch;
  for (std::size_t l = 1; l <= net.depth(); ++l) {
    const LayerParams& p = net.layers[l - 1];
    const LayerTape& t = tape.layers[l - 1];
    const Matrix& a = layer_input(tape, l);
    if (p.conv) {
      out.W.push_back(t.delta * im2col(*p.conv, a, net.spec.channels_before(l), m).transpose());
    } else {
      out.W.push_back(t.delta * flat_view(a, m).transpose());
    }
    out.b.push_back(t.delta.rowwise().sum());
    if (p.gamma.size() > 0) {
      out.gamma.push_back(t.grad_y.cwiseProduct(t.u).rowwise().sum());
      out.beta.push_back(t.grad_y.rowwise().sum());
    } else {
      out.gamma.emplace_back();
      out.beta.emplace_back();
    }
  }
  return out;
}

Matrix weight_gradient_rows(const NetInstance& net, const BatchTape& tape, std::size_t l) {
  if (!tape.has_backward) throw NetError("gradient rows need a backward pass");
  if (l < 1 || l > net.depth()) throw NetError("layer index out of range");
  const LayerParams& p = net.layers[l - 1];
  const LayerTape& t = tape.layers[l - 1];
  const std::size_t m = tape.batch;
  const Eigen::Index rows_w = p.W.rows(), cols_w = p.W.cols();
  Matrix out(static_cast<Eigen::Index>(m), rows_w * cols_w);
  if (p.conv) {
    const Matrix P = im2col(*p.conv, layer_input(tape, l), net.spec.channels_before(l), m);
    const auto K = static_cast<Eigen::Index>(p.conv->out_sites());
    for (std::size_t i = 0; i < m; ++i) {
      const auto c0 = static_cast<Eigen::Index>(i) * K;
      Matrix gw = t.delta.middleCols(c0, K) * P.middleCols(c0, K).transpose();
      out.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(gw.data(), gw.size());
    }
  } else {
    const auto a = flat_view(layer_input(tape, l), m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      for (Eigen::Index c = 0; c < cols_w; ++c)
        out.row(ii).segment(c * rows_w, rows_w) = a(c, ii) * t.delta.col(ii).transpose();
    }
  }
  return out;
}

namespace {

template <class T>
void put(std::ostream& out, T v) {
  static_assert(std::endian::native == std::endian::little, "tensor dump assumes a little-endian host");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.write(buf, sizeof(T));
}

template <class T>
T get(std::istream& in) {
  char buf[sizeof(T)];
  if (!in.read(buf, sizeof(T))) throw NetError("tensor dump truncated");
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

NamedTensor to_tensor(const std::string& name, const Matrix& m) {
  return {name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())},
          std::vector<double>(m.data(), m.data() + m.size())};
}

}  // namespace

void write_tensors(std::ostream& out, const std::vector<NamedTensor>& tensors) {
  out.write("MFBT", 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put<std::uint64_t>(out, d);
    for (double x : t.data) put<double>(out, x);
  }
}

std::vector<NamedTensor> read_tensors(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MFBT", 4) != 0) throw NetError("not a tensor dump");
  const auto count = get<std::uint32_t>(in);
  std::vector<NamedTensor> out(count);
  for (auto& t : out) {
    t.name.resize(get<std::uint32_t>(in));
    if (!in.read(t.name.data(), static_cast<std::streamsize>(t.name.size())))
      throw NetError("tensor dump truncated");
    t.dims.resize(get<std::uint32_t>(in));
    std::uint64_t n = 1;
    for (auto& d : t.dims) n *= (d = get<std::uint64_t>(in));
    t.data.resize(n);
    for (auto& x : t.data) x = get<double>(in);
  }
  return out;
}

std::vector<NamedTensor> tape_tensors(const BatchTape& tape) {
  std::vector<NamedTensor> out{to_tensor("input", tape.input)};
  for (std::size_t l = 0; l < tape.layers.size(); ++l) {
    const LayerTape& t = tape.layers[l];
    const std::string p = "layer" + std::to_string(l + 1) + ".";
    out.push_back(to_tensor(p + "z", t.z));
    if (t.u.size()) out.push_back(to_tensor(p + "u", t.u));
    out.push_back(to_tensor(p + "h", t.h));
    if (t.delta.size()) out.push_back(to_tensor(p + "delta", t.delta));
  }
  return out;
}

}  // namespace mfbn
