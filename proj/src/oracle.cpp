#include "mfbn/oracle.hpp"

#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <sstream>

#include "mfbn/csv.hpp"
#include "mfbn/eigenbound.hpp"
#include "mfbn/parallel.hpp"
#include "mfbn/rng.hpp"

namespace mfbn {

McEstimate summarize(const std::vector<double>& samples) {
  const std::size_t n = samples.size();
  if (n < 2) throw std::invalid_argument("an estimate needs at least two samples");
  double mean = 0;
  for (double x : samples) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0;
  for (double x : samples) ss += (x - mean) * (x - mean);
  const double var = ss / static_cast<double>(n - 1);
  return {mean, std::sqrt(var / static_cast<double>(n)), n};
}

Moments cross_moments(const Matrix& a, std::size_t sites, std::size_t batch, bool per_channel) {
  const auto K = static_cast<Eigen::Index>(sites);
  const auto m = static_cast<double>(batch);
  const double k = static_cast<double>(sites);
  if (batch < 2) throw std::invalid_argument("cross moments need at least two examples");
  if (static_cast<std::size_t>(a.cols()) != sites * batch)
    throw std::invalid_argument("tensor shape does not match sites x batch");

  const double total = a.squaredNorm();
  Matrix s = Matrix::Zero(a.rows(), K);  // Σ_n a_{nα}
  double per_example = 0;                // Σ_n ‖Σ_α a_{nα}‖²
  for (std::size_t n = 0; n < batch; ++n) {
    const auto block = a.middleCols(static_cast<Eigen::Index>(n) * K, K);
    s += block;
    if (sites > 1) per_example += block.rowwise().sum().squaredNorm();
  }
  const double scale = per_channel ? 1.0 / static_cast<double>(a.rows()) : 1.0;
  Moments out;
  out.self = scale * total / (k * m);
  out.tilde = scale * (s.squaredNorm() - total) / (k * m * (m - 1));
  if (sites > 1) {
    const double all = s.rowwise().sum().squaredNorm();
    out.hat = scale * (all - s.squaredNorm() - per_example + total) / (k * (k - 1) * m * (m - 1));
  }
  return out;
}

Matrix gaussian_inputs(const ArchSpec& spec, std::size_t batch, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1a9u));
  std::normal_distribution<double> n(0.0, 1.0);
  Matrix x(static_cast<Eigen::Index>(spec.input.units()), static_cast<Eigen::Index>(batch));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

namespace {

ForwardMode stats_forward_mode(const ArchSpec& spec, std::size_t batch) {
  if (!spec.has_batch_norm()) return ForwardMode::Vanilla;
  return batch >= kPopulationBatch ? ForwardMode::BatchNormPopulation : ForwardMode::BatchNormMinibatch;
}

Matrix sample_inputs(const ArchSpec& spec, const InputSampler& sampler, std::size_t batch, std::uint64_t seed) {
  Matrix x = sampler ? sampler(batch, seed) : gaussian_inputs(spec, batch, seed);
  if (static_cast<std::size_t>(x.rows()) != spec.input.units() || static_cast<std::size_t>(x.cols()) != batch)
    throw std::invalid_argument("input sampler returned the wrong shape");
  return x;
}

// Σ_i ‖∇_{W_l} f(x_i)‖² for the current backward seed.
double per_example_sq_norm(const NetInstance& net, const BatchTape& tape, std::size_t l) {
  const LayerParams& p = net.layers[l - 1];
  if (p.conv) return weight_gradient_rows(net, tape, l).squaredNorm();
  const Matrix& in = layer_input(tape, l);
  const auto m = static_cast<Eigen::Index>(tape.batch);
  const Eigen::Map<const Matrix> a(in.data(), in.size() / m, m);
  return (a.colwise().squaredNorm().array() * tape.layers[l - 1].delta.colwise().squaredNorm().array()).sum();
}

struct ReplicateSample {
  std::vector<Moments> z, h, d;  // z, d: index l-1; h: index l (0 = input)
  double v = 0;
  std::vector<double> f_cross;
};

ReplicateSample measure_replicate(const ArchSpec& spec, const OracleConfig& cfg, std::size_t r) {
  const std::size_t m = cfg.batch;
  const NetInstance net = sample_network(spec, derive_seed(cfg.seed, r, 0));
  const Matrix x = sample_inputs(spec, cfg.sampler, m, derive_seed(cfg.seed, r, 1));
  BatchTape tape = forward(net, x, stats_forward_mode(spec, m));
  const std::size_t k = r % spec.layers.back().width;
  backward(net, tape, output_component_seed(net, m, k), cfg.stats_mode);

  ReplicateSample s;
  s.h.push_back(cross_moments(tape.input, spec.input.sites, m, true));
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    const LayerTape& t = tape.layers[l - 1];
    const std::size_t sites = spec.layer(l).sites();
    s.z.push_back(cross_moments(t.z, sites, m, true));
    s.h.push_back(cross_moments(t.h, sites, m, true));
    s.d.push_back(cross_moments(t.delta, sites, m, false));
  }
  const ParamGrads g = parameter_gradients(net, tape);
  const double m2 = static_cast<double>(m) * static_cast<double>(m);
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    const double total = g.W[l - 1].squaredNorm();
    s.v += total / m2;
    s.f_cross.push_back((total - per_example_sq_norm(net, tape, l)) / (m2 - static_cast<double>(m)));
  }
  return s;
}

McEstimate collect(const std::vector<ReplicateSample>& reps,
                   const std::function<double(const ReplicateSample&)>& get) {
  std::vector<double> v;
  v.reserve(reps.size());
  for (const auto& r : reps) v.push_back(get(r));
  return summarize(v);
}

}  // namespace

OrderParamEstimates estimate_order_params(const ArchSpec& spec, const OracleConfig& config) {
  if (config.n_nets < 2) throw std::invalid_argument("need at least 2 replicate nets");
  if (config.batch < kPopulationBatch)
    throw std::invalid_argument("order-parameter estimates need m >= " + std::to_string(kPopulationBatch));
  std::vector<ReplicateSample> reps(config.n_nets);
  parallel_for(config.n_nets, config.jobs,
               [&](std::size_t r) { reps[r] = measure_replicate(spec, config, r); });

  OrderParamEstimates est;
  est.n_nets = config.n_nets;
  est.batch = config.batch;
  est.per_layer.resize(spec.depth() + 1);
  auto fill_h = [&](LayerEstimates& e, std::size_t idx) {
    e.h = collect(reps, [idx](const ReplicateSample& s) { return s.h[idx].self; });
    e.h_tilde = collect(reps, [idx](const ReplicateSample& s) { return s.h[idx].tilde; });
    if (reps.front().h[idx].hat)
      e.h_hat = collect(reps, [idx](const ReplicateSample& s) { return *s.h[idx].hat; });
  };
  fill_h(est.per_layer[0], 0);
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    LayerEstimates& e = est.per_layer[l];
    const std::size_t i = l - 1;
    e.gamma_cap = collect(reps, [i](const ReplicateSample& s) { return s.z[i].self; });
    e.gamma_tilde = collect(reps, [i](const ReplicateSample& s) { return s.z[i].tilde; });
    e.delta = collect(reps, [i](const ReplicateSample& s) { return s.d[i].self; });
    e.delta_tilde = collect(reps, [i](const ReplicateSample& s) { return s.d[i].tilde; });
    if (reps.front().z[i].hat) {
      e.gamma_hat = collect(reps, [i](const ReplicateSample& s) { return *s.z[i].hat; });
      e.delta_hat = collect(reps, [i](const ReplicateSample& s) { return *s.d[i].hat; });
    }
    fill_h(e, l);
    est.f_cross.push_back(collect(reps, [i](const ReplicateSample& s) { return s.f_cross[i]; }));
  }
  est.v_statistic = collect(reps, [](const ReplicateSample& s) { return s.v; });
  return est;
}

PowerIterationError::PowerIterationError(double rayleigh, double residual, std::size_t iterations)
    : std::runtime_error([&] {
        std::ostringstream msg;
        msg << "power iteration did not converge after " << iterations
            << " iterations (Rayleigh quotient " << rayleigh << ", relative residual " << residual << ")";
        return msg.str();
      }()),
      rayleigh_(rayleigh),
      residual_(residual) {}

namespace {

PowerResult power_from(const Matrix& g, Vector v, double tol, std::size_t max_iter) {
  v.normalize();
  double last = 0, lambda = 0, residual = 0;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    const Vector w = g * v;
    lambda = v.dot(w);
    const double norm = w.norm();
    if (norm == 0) return {0.0, it, 0.0};
    residual = (w - lambda * v).norm() / std::abs(lambda);
    if (it > 1 && std::abs(lambda - last) <= tol * std::abs(lambda) && residual <= std::sqrt(tol))
      return {lambda, it, residual};
    last = lambda;
    v = w / norm;
  }
  throw PowerIterationError(lambda, residual, max_iter);
}

Vector random_unit(Eigen::Index n, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = nd(rng);
  return v;
}

}  // namespace

PowerResult power_iteration(const Matrix& g, std::uint64_t seed, double tol, std::size_t max_iter) {
  if (g.rows() != g.cols() || g.rows() == 0) throw std::invalid_argument("power iteration needs a square matrix");
  const PowerResult a = power_from(g, random_unit(g.rows(), derive_seed(seed, 0)), tol, max_iter);
  const PowerResult b = power_from(g, random_unit(g.rows(), derive_seed(seed, 1)), tol, max_iter);
  PowerResult best = a.lambda >= b.lambda ? a : b;
  best.iterations = a.iterations + b.iterations;
  return best;
}

namespace {

struct GramParts {
  Matrix gram;                     // (N_L m) x (N_L m), already divided by m
  std::vector<Matrix> layer_diag;  // per layer: block-diagonal kk blocks stacked, m x (N_L m)
};

GramParts build_gram(const NetInstance& net, const Matrix& inputs) {
  const ArchSpec& spec = net.spec;
  const std::size_t m = static_cast<std::size_t>(inputs.cols());
  const std::size_t outs = spec.layers.back().width * spec.layers.back().sites();
  if (spec.layers.back().sites() != 1) throw std::invalid_argument("FIM Gram needs an FC output layer");
  const auto n = static_cast<Eigen::Index>(outs * m);
  const auto mm = static_cast<Eigen::Index>(m);

  BatchTape base = forward(net, inputs, stats_forward_mode(spec, m));
  std::vector<BatchTape> tapes(outs, base);
  for (std::size_t k = 0; k < outs; ++k)
    backward(net, tapes[k], output_component_seed(net, m, k), StatsMode::FrozenStats);

  GramParts parts;
  parts.gram = Matrix::Zero(n, n);
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    Matrix gl;
    if (net.layers[l - 1].conv) {
      Matrix rows(n, net.layers[l - 1].W.size());
      for (std::size_t k = 0; k < outs; ++k)
        rows.middleRows(static_cast<Eigen::Index>(k) * mm, mm) = weight_gradient_rows(net, tapes[k], l);
      gl = rows * rows.transpose();
    } else {
      const Matrix& in = layer_input(base, l);
      const Eigen::Map<const Matrix> a(in.data(), in.size() / mm, mm);
      const Matrix aa = a.transpose() * a;
      const Eigen::Index units = tapes[0].layers[l - 1].delta.rows();
      Matrix d(units, n);
      for (std::size_t k = 0; k < outs; ++k) d.middleCols(static_cast<Eigen::Index>(k) * mm, mm) = tapes[k].layers[l - 1].delta;
      gl = d.transpose() * d;
      for (std::size_t r = 0; r < outs; ++r)
        for (std::size_t c = 0; c < outs; ++c)
          gl.block(static_cast<Eigen::Index>(r) * mm, static_cast<Eigen::Index>(c) * mm, mm, mm).array() *= aa.array();
    }
    Matrix diag(mm, n);
    for (std::size_t k = 0; k < outs; ++k) {
      const auto o = static_cast<Eigen::Index>(k) * mm;
      diag.middleCols(o, mm) = gl.block(o, o, mm, mm);
    }
    parts.layer_diag.push_back(std::move(diag));
    parts.gram += gl;
  }
  parts.gram /= static_cast<double>(m);
  return parts;
}

}  // namespace

Matrix fim_gram(const NetInstance& net, const Matrix& inputs) { return build_gram(net, inputs).gram; }

EmpiricalSpectrum empirical_fim_lambda_max(const ArchSpec& spec, std::uint64_t seed, std::size_t batch,
                                           const SpectrumOptions& options) {
  if (batch < 2) throw std::invalid_argument("spectrum needs at least two examples");
  const NetInstance net = sample_network(spec, derive_seed(seed, 0));
  const Matrix x = sample_inputs(spec, options.sampler, batch, derive_seed(seed, 1));
  const std::size_t outs = spec.layers.back().width;
  const double m = static_cast<double>(batch);
  const std::size_t L = spec.depth();

  EmpiricalSpectrum out;
  out.per_layer_f.assign(L, 0.0);
  std::vector<double> v_per_k(outs, 0.0);

  if (options.gram) {
    if (outs * batch > options.max_gram_rows)
      throw std::invalid_argument("Gram matrix of " + std::to_string(outs * batch) + " rows exceeds the limit of " +
                                  std::to_string(options.max_gram_rows));
    const GramParts parts = build_gram(net, x);
    const PowerResult pr = power_iteration(parts.gram, derive_seed(seed, 2));
    out.lambda_max = pr.lambda;
    out.power_iterations = pr.iterations;
    out.power_residual = pr.residual;
    if (options.dense_check) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(parts.gram, Eigen::EigenvaluesOnly);
      out.lambda_max_dense = es.eigenvalues().maxCoeff();
    }
    const auto mm = static_cast<Eigen::Index>(batch);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t k = 0; k < outs; ++k) {
        const auto blk = parts.layer_diag[l].middleCols(static_cast<Eigen::Index>(k) * mm, mm);
        const double all = blk.sum();
        v_per_k[k] += all / (m * m);
        out.per_layer_f[l] += (all - blk.trace()) / (m * (m - 1)) / static_cast<double>(outs);
      }
  } else {
    const BatchTape base = forward(net, x, stats_forward_mode(spec, batch));
    for (std::size_t k = 0; k < outs; ++k) {
      BatchTape t = base;
      backward(net, t, output_component_seed(net, batch, k), StatsMode::FrozenStats);
      const ParamGrads g = parameter_gradients(net, t);
      for (std::size_t l = 1; l <= L; ++l) {
        const double total = g.W[l - 1].squaredNorm();
        v_per_k[k] += total / (m * m);
        out.per_layer_f[l - 1] +=
            (total - per_example_sq_norm(net, t, l)) / (m * (m - 1)) / static_cast<double>(outs);
      }
    }
  }
  double v = 0;
  for (double x_k : v_per_k) v += x_k;
  out.v_statistic = v / static_cast<double>(outs);
  out.v_std_error = outs >= 2 ? summarize(v_per_k).std_error : 0.0;

  // Factorised prediction from the same net's empirical moments.
  {
    BatchTape t = forward(net, x, stats_forward_mode(spec, batch));
    std::vector<Moments> dm(L);
    for (std::size_t k = 0; k < outs; ++k) {
      BatchTape tk = t;
      backward(net, tk, output_component_seed(net, batch, k), StatsMode::FrozenStats);
      for (std::size_t l = 1; l <= L; ++l) {
        const Moments mk = cross_moments(tk.layers[l - 1].delta, spec.layer(l).sites(), batch, false);
        dm[l - 1].tilde += mk.tilde / static_cast<double>(outs);
        if (mk.hat) dm[l - 1].hat = dm[l - 1].hat.value_or(0.0) + *mk.hat / static_cast<double>(outs);
      }
    }
    for (std::size_t l = 1; l <= L; ++l) {
      const LayerSpec& layer = spec.layer(l);
      const Moments hm = cross_moments(layer_input(t, l), spec.sites_before(l), batch, true);
      const double c_prev = static_cast<double>(spec.channels_before(l));
      if (layer.is_conv()) {
        const double k1 = static_cast<double>(layer.sites()) - 1;
        out.per_layer_factorized.push_back(c_prev * static_cast<double>(*layer.kernel_sites) *
                                           (k1 * hm.hat.value_or(0.0) + hm.tilde) *
                                           (k1 * dm[l - 1].hat.value_or(0.0) + dm[l - 1].tilde));
      } else {
        // Flattened FC input: per-unit cross moment of all C*K units.
        const Moments flat = cross_moments(
            Eigen::Map<const Matrix>(layer_input(t, l).data(), static_cast<Eigen::Index>(spec.channels_before(l) * spec.sites_before(l)),
                                     static_cast<Eigen::Index>(batch)),
            1, batch, false);
        out.per_layer_factorized.push_back(flat.tilde * dm[l - 1].tilde);
      }
    }
  }
  return out;
}

bool DiscrepancyReport::passed() const {
  for (const auto& r : rows)
    if (r.gated && !r.pass) return false;
  return true;
}

namespace {

void add_row(DiscrepancyReport& rep, const ValidationConfig& cfg, const std::string& q, std::size_t layer,
             double theory, const McEstimate& emp, double margin, bool gated) {
  DiscrepancyRow r;
  r.quantity = q;
  r.layer = layer;
  r.theory = theory * cfg.perturb_theory;
  r.empirical = emp.mean;
  r.std_error = emp.std_error;
  const double diff = r.empirical - r.theory;
  if (r.std_error > 0) {
    r.z = diff / r.std_error;
  } else {
    r.z = diff == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), diff);
  }
  r.allowed = cfg.z_threshold * r.std_error + margin * std::abs(r.theory);
  r.gated = gated;
  r.pass = std::abs(diff) <= r.allowed;
  rep.rows.push_back(r);
}

}  // namespace

DiscrepancyReport compare_theory_vs_empirical(const ArchSpec& spec, const ValidationConfig& config) {
  const OrderParamProfile theory = run_profile(spec, config.profile);
  const SpectralReport bound = spectral_report(theory);
  const OrderParamEstimates est = estimate_order_params(spec, config.oracle);

  DiscrepancyReport rep;
  rep.n_nets = est.n_nets;
  rep.batch = est.batch;
  std::size_t min_width = std::numeric_limits<std::size_t>::max();
  for (std::size_t l = 1; l < spec.depth(); ++l) min_width = std::min(min_width, spec.layer(l).units());
  if (min_width < 64)
    rep.warnings.push_back("narrowest hidden layer has " + std::to_string(min_width) +
                           " units; finite-width margins may fail");
  const bool full_bn = config.oracle.stats_mode == StatsMode::FullBN && spec.has_batch_norm();
  if (full_bn)
    rep.warnings.push_back("FullBN backward: gradient statistics are reported, not gated");

  const double om = config.order_margin;
  auto forward_rows = [&](std::size_t l) {
    const LayerOrderParams& t = theory[l];
    const LayerEstimates& e = est.per_layer[l];
    add_row(rep, config, "h", l, t.h, e.h, om, true);
    add_row(rep, config, "h_tilde", l, t.h_tilde, e.h_tilde, om, true);
    if (t.h_hat && e.h_hat) add_row(rep, config, "h_hat", l, *t.h_hat, *e.h_hat, om, true);
  };
  forward_rows(0);
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    const LayerOrderParams& t = theory[l];
    const LayerEstimates& e = est.per_layer[l];
    add_row(rep, config, "gamma_cap", l, t.gamma_cap, e.gamma_cap, om, true);
    add_row(rep, config, "gamma_tilde", l, t.gamma_tilde, e.gamma_tilde, om, true);
    if (t.gamma_hat && e.gamma_hat) add_row(rep, config, "gamma_hat", l, *t.gamma_hat, *e.gamma_hat, om, true);
    forward_rows(l);
  }
  for (std::size_t l = 1; l <= spec.depth(); ++l) {
    const LayerOrderParams& t = theory[l];
    const LayerEstimates& e = est.per_layer[l];
    add_row(rep, config, "delta", l, t.delta, e.delta, om, !full_bn);
    add_row(rep, config, "delta_tilde", l, t.delta_tilde, e.delta_tilde, om, !full_bn);
    if (t.delta_hat && e.delta_hat)
      add_row(rep, config, "delta_hat", l, *t.delta_hat, *e.delta_hat, om, !full_bn);
  }
  for (std::size_t l = 1; l <= spec.depth(); ++l)
    add_row(rep, config, "f", l, bound.f_per_layer[l - 1], est.f_cross[l - 1], config.bound_margin, false);
  add_row(rep, config, "sum_f", 0, bound.lambda_bound, est.v_statistic, config.bound_margin,
          config.check_bound && !full_bn);
  return rep;
}

void write_discrepancy_csv(std::ostream& out, const DiscrepancyReport& report) {
  out << "quantity,layer,theory,empirical,std_error,z\n";
  for (const auto& r : report.rows)
    out << r.quantity << ',' << r.layer << ',' << csv_number(r.theory) << ',' << csv_number(r.empirical) << ','
        << csv_number(r.std_error) << ',' << csv_number(r.z) << '\n';
}

void print_discrepancy_summary(std::ostream& out, const DiscrepancyReport& report) {
  std::size_t gated = 0, failed = 0;
  for (const auto& r : report.rows)
    if (r.gated) {
      ++gated;
      failed += r.pass ? 0 : 1;
    }
  out << "nets " << report.n_nets << ", batch " << report.batch << ": " << gated - failed << "/" << gated
      << " gated quantities within tolerance\n";
  for (const auto& w : report.warnings) out << "warning: " << w << '\n';
  const auto flags = out.flags();
  out << std::setprecision(6);
  for (const auto& r : report.rows) {
    if (r.pass && r.gated) continue;
    out << (r.gated ? "  FAIL " : "  info ") << std::left << std::setw(12) << r.quantity << std::right
        << " layer " << r.layer << "  theory " << r.theory << "  empirical " << r.empirical << " ± "
        << r.std_error << "  (allowed ±" << r.allowed << ")\n";
  }
  out.flags(flags);
  out << (report.passed() ? "PASS" : "FAIL") << '\n';
}

}  // namespace mfbn
