#include "mfbn/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "CLI11.hpp"
#include "mfbn/arch.hpp"
#include "mfbn/csv.hpp"
#include "mfbn/eigenbound.hpp"
#include "mfbn/lab.hpp"
#include "mfbn/meanfield.hpp"
#include "mfbn/oracle.hpp"

namespace mfbn::cli {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string arch;
  std::string out = ".";
  std::uint64_t seed = 1;
  std::size_t jobs = 1;
  double sigma_w_sq = 0, sigma_b_sq = 0, momentum = 0;
  std::size_t width = 0;
  CLI::Option* sigma_w_opt = nullptr;
  CLI::Option* sigma_b_opt = nullptr;
  CLI::Option* momentum_opt = nullptr;
  CLI::Option* width_opt = nullptr;
};

void add_common(CLI::App* app, Common& c, bool needs_arch = true) {
  auto* a = app->add_option("--arch", c.arch, "architecture document (JSON)");
  if (needs_arch) a->required();
  app->add_option("--out", c.out, "output directory")->capture_default_str();
  app->add_option("--seed", c.seed, "base random seed")->capture_default_str();
  app->add_option("--jobs", c.jobs, "worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  c.sigma_w_opt = app->add_option("--sigma-w-sq", c.sigma_w_sq, "override σ_w²")->check(CLI::PositiveNumber);
  c.sigma_b_opt = app->add_option("--sigma-b-sq", c.sigma_b_sq, "override σ_b²")->check(CLI::NonNegativeNumber);
  c.momentum_opt = app->add_option("--momentum", c.momentum, "override μ")->check(CLI::Range(0.0, 0.999999));
  c.width_opt = app->add_option("--width", c.width, "override every hidden layer width")->check(CLI::PositiveNumber);
}

ArchSpec load_spec(const Common& c) {
  ArchSpec spec;
  try {
    spec = load_arch(c.arch);
  } catch (const ConfigError& e) {
    if (e.path().empty() && std::string(e.what()).find(c.arch) != std::string::npos) throw;
    throw ConfigError(e.path(), c.arch + ": " + e.what());
  }
  if (c.sigma_w_opt->count()) spec.init.sigma_w_sq = c.sigma_w_sq;
  if (c.sigma_b_opt->count()) spec.init.sigma_b_sq = c.sigma_b_sq;
  if (c.momentum_opt->count()) spec.init.momentum = c.momentum;
  if (c.width_opt->count()) {
    for (std::size_t l = 1; l < spec.depth(); ++l) spec.layers[l - 1].width = c.width;
    for (std::size_t l = 1; l <= spec.depth(); ++l) {
      LayerSpec& layer = spec.layers[l - 1];
      layer.fan_in = layer.is_conv() ? spec.channels_before(l) * *layer.kernel_sites
                                     : spec.channels_before(l) * spec.sites_before(l);
    }
  }
  const auto diags = validate_dims(spec);
  if (!diags.empty()) throw ConfigError("", c.arch + ": " + format(diags.front()));
  return spec;
}

fs::path out_dir(const Common& c) {
  std::error_code ec;
  fs::create_directories(c.out, ec);
  if (ec || !fs::is_directory(c.out)) throw UsageError("cannot create output directory '" + c.out + "'");
  return fs::path(c.out);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw UsageError("cannot write '" + p.string() + "'");
  return f;
}

// "a:b:step", optionally preceded by a "log10" token.
std::vector<double> parse_grid(const std::vector<std::string>& tokens, const std::string& flag) {
  std::string text;
  if (tokens.size() == 2 && tokens[0] == "log10") {
    text = tokens[1];
  } else if (tokens.size() == 1) {
    text = tokens[0];
    if (text.rfind("log10:", 0) == 0) text = text.substr(6);
  } else {
    throw UsageError(flag + " expects a:b:step");
  }
  double v[3];
  std::size_t pos = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t colon = text.find(':', pos);
    const std::string part = text.substr(pos, i < 2 ? colon - pos : std::string::npos);
    if ((i < 2 && colon == std::string::npos) || part.empty()) throw UsageError(flag + " expects a:b:step, got '" + text + "'");
    try {
      std::size_t used = 0;
      v[i] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + part + "' is not a number");
    }
    pos = colon + 1;
  }
  try {
    return grid_range(v[0], v[1], v[2]);
  } catch (const std::invalid_argument& e) {
    throw UsageError(flag + ": " + e.what());
  }
}

std::string g6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::string opt6(const std::optional<double>& v) { return v ? g6(*v) : "-"; }

ProfileOptions profile_options(const std::string& hat_seed, const std::string& variance) {
  ProfileOptions o;
  o.delta_hat_seed = hat_seed == "tilde" ? DeltaHatSeed::kMatchTilde : DeltaHatSeed::kZero;
  o.bn_variance = variance == "centered" ? BnBackwardVariance::kCentered : BnBackwardVariance::kGammaCap;
  return o;
}

void print_report(std::ostream& out, const OrderParamProfile& p, const SpectralReport& r) {
  const ArchSpec& spec = p.arch;
  const bool bn = spec.has_batch_norm();
  auto col = [&](const std::string& s) { out << ' ' << std::string(s.size() < 9 ? 9 - s.size() : 0, ' ') << s; };
  out << "layer  kind";
  if (bn) col("gamma");
  for (const char* h : {"Gamma", "Gamma~", "Gamma^", "H", "H~", "H^", "Delta", "Delta~", "Delta^", "f"}) col(h);
  out << '\n';
  for (std::size_t l = 0; l <= spec.depth(); ++l) {
    const LayerOrderParams& q = p[l];
    char head[16];
    std::snprintf(head, sizeof head, "%5zu", l);
    out << head << "  " << (l == 0 ? "in  " : spec.layer(l).is_conv() ? "conv" : "fc  ");
    if (bn) col(l > 0 && spec.layer(l).batch_norm ? g6(spec.layer(l).gamma) : "-");
    for (const std::string& s :
         {l ? g6(q.gamma_cap) : "-", l ? g6(q.gamma_tilde) : "-", l ? opt6(q.gamma_hat) : "-", g6(q.h),
          g6(q.h_tilde), opt6(q.h_hat), l ? g6(q.delta) : "-", l ? g6(q.delta_tilde) : "-",
          l ? opt6(q.delta_hat) : "-", l ? g6(r.f_per_layer[l - 1]) : "-"})
      col(s);
    out << '\n';
  }
  out << "lambda_bound " << g6(r.lambda_bound) << "\neta_star     " << g6(r.eta_star) << "  (momentum "
      << g6(r.momentum) << ")\neta_opt      " << g6(r.eta_opt) << '\n';
}

struct DataOptions {
  std::string mnist_dir = "data/mnist5k";
  bool synthetic = false;
  std::size_t subset = 2048;
  std::size_t test_subset = 512;
};

TrainTest load_data(const DataOptions& d, const ArchSpec& spec, std::uint64_t seed) {
  if (d.synthetic)
    return synthetic_split(d.subset, d.test_subset, spec.input.units(), spec.layers.back().units(), seed);
  return mnist_subset(d.mnist_dir, d.subset, d.test_subset);
}

int cmd_predict(const Common& c, double gamma, bool has_gamma, const ProfileOptions& opts, std::ostream& out,
                std::ostream& err) {
  ArchSpec spec = load_spec(c);
  if (has_gamma) {
    if (!spec.has_batch_norm()) throw UsageError("--gamma given but the architecture has no BatchNorm layer");
    spec = with_gamma(spec, gamma);
  }
  const OrderParamProfile profile = run_profile(spec, opts);
  const SpectralReport report = spectral_report(profile);
  for (const auto& w : profile.warnings) err << "warning: " << w << '\n';
  print_report(out, profile, report);
  const fs::path dir = out_dir(c);
  {
    auto f = open_out(dir / "profile.csv");
    write_report_csv(f, profile, report);
  }
  auto f = open_out(dir / "summary.csv");
  f << "lambda_bound,eta_star,eta_opt\n"
    << csv_number(report.lambda_bound) << ',' << csv_number(report.eta_star) << ',' << csv_number(report.eta_opt)
    << '\n';
  err << "wrote " << (dir / "profile.csv").string() << " and " << (dir / "summary.csv").string() << '\n';
  return kOk;
}

int cmd_sweep(const Common& c, const std::vector<double>& grid, const ProfileOptions& opts, std::ostream& out,
              std::ostream& err) {
  const ArchSpec spec = load_spec(c);
  const auto rows = gamma_sweep(spec, grid, spec.init.momentum, opts);
  write_sweep_csv(out, rows);
  const fs::path path = out_dir(c) / "sweep.csv";
  auto f = open_out(path);
  write_sweep_csv(f, rows);
  err << "wrote " << path.string() << " (" << rows.size() << " rows)\n";
  return kOk;
}

int cmd_validate(const Common& c, ValidationConfig cfg, double gamma, bool has_gamma, std::ostream& out,
                 std::ostream& err) {
  ArchSpec spec = load_spec(c);
  if (has_gamma && spec.has_batch_norm()) spec = with_gamma(spec, gamma);
  cfg.oracle.seed = c.seed;
  cfg.oracle.jobs = c.jobs;
  err << "sampling " << cfg.oracle.n_nets << " networks, batch " << cfg.oracle.batch << '\n';
  const DiscrepancyReport rep = compare_theory_vs_empirical(spec, cfg);
  for (const auto& w : rep.warnings) err << "warning: " << w << '\n';
  print_discrepancy_summary(out, rep);
  const fs::path path = out_dir(c) / "discrepancy.csv";
  auto f = open_out(path);
  write_discrepancy_csv(f, rep);
  err << "wrote " << path.string() << '\n';
  return rep.exit_code();
}

int cmd_grid(const Common& c, bool baseline, SweepConfig cfg, const DataOptions& data, std::size_t n_seeds,
             std::ostream& out, std::ostream& err) {
  const ArchSpec spec = load_spec(c);
  cfg.jobs = c.jobs;
  cfg.seeds.clear();
  for (std::size_t s = 0; s < n_seeds; ++s) cfg.seeds.push_back(c.seed + s);
  const fs::path dir = out_dir(c);
  const TrainTest tt = load_data(data, spec, c.seed);
  err << (data.synthetic ? "synthetic data: " : "MNIST subset: ") << tt.train.size() << " train / "
      << tt.test.size() << " test\n";
  cfg.progress = [&err](std::size_t done, std::size_t total) {
    err << "\rrun " << done << "/" << total << std::flush;
    if (done == total) err << '\n';
  };
  const PhaseGrid grid = baseline ? baseline_sweep(spec, cfg, tt) : phase_sweep(spec, cfg, tt);
  for (const auto& e : grid.errors) err << "cell error: " << e << '\n';
  const std::string stem = baseline ? "baseline" : "phase";
  emit_heatmap(grid, (dir / (stem + ".csv")).string(), (dir / (stem + ".svg")).string());

  out << grid.x_name << ",log10_eta_star,largest_stable_log10_eta,diverged_on_grid\n";
  for (const auto& b : extract_boundary(grid))
    out << csv_number(b.x) << ',' << csv_number(b.log10_eta_star) << ','
        << csv_number(b.largest_stable_log10_eta) << ',' << (b.diverged_on_grid ? 1 : 0) << '\n';
  const MonotonicityReport mono = check_monotonicity(grid);
  if (mono.violations > 0)
    err << "warning: " << mono.violations << " non-monotone cells among " << mono.boundary_cells
        << " boundary-adjacent cells\n";
  err << "wrote " << (dir / (stem + ".csv")).string() << " and " << (dir / (stem + ".svg")).string() << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mean-field learning-rate bounds for BatchNorm networks", "mfbn"};
  app.require_subcommand(1);

  Common predict_c, sweep_c, validate_c, phase_c, baseline_c;
  std::string hat_seed = "zero", variance = "gamma";
  auto add_profile_flags = [&](CLI::App* sub) {
    sub->add_option("--delta-hat-seed", hat_seed, "Δ̂ at a conv/FC boundary: zero or tilde")
        ->check(CLI::IsMember({"zero", "tilde"}))
        ->capture_default_str();
    sub->add_option("--bn-variance", variance, "BN backward divisor: gamma (Γ) or centered (Γ - Γ̃)")
        ->check(CLI::IsMember({"gamma", "centered"}))
        ->capture_default_str();
  };

  double gamma = 1.0;
  auto* predict = app.add_subcommand("predict", "order parameters, λ bound and η* for one architecture");
  add_common(predict, predict_c);
  auto* predict_gamma = predict->add_option("--gamma", gamma, "γ for every BatchNorm layer")->check(CLI::NonNegativeNumber);
  add_profile_flags(predict);

  std::vector<std::string> gamma_grid{"0.1:4:0.1"};
  auto* sweep = app.add_subcommand("sweep", "λ bound and η* over a γ grid, with the vanilla reference");
  add_common(sweep, sweep_c);
  sweep->add_option("--gamma-grid", gamma_grid, "a:b:step")->expected(1)->capture_default_str();
  add_profile_flags(sweep);

  ValidationConfig vcfg;
  std::string stats = "frozen";
  double vgamma = 1.0;
  bool no_bound = false;
  auto* validate = app.add_subcommand("validate", "Monte-Carlo check of the recursions; exit 1 on failure");
  add_common(validate, validate_c);
  validate->add_option("--nets", vcfg.oracle.n_nets, "replicate networks")->capture_default_str()->check(CLI::Range(2, 100000));
  validate->add_option("--batch", vcfg.oracle.batch, "examples per network (>= 256)")->capture_default_str();
  auto* validate_gamma = validate->add_option("--gamma", vgamma, "γ for every BatchNorm layer");
  validate->add_option("--stats", stats, "BN backward: frozen or full")->check(CLI::IsMember({"frozen", "full"}))->capture_default_str();
  validate->add_option("--z", vcfg.z_threshold, "standard errors allowed")->capture_default_str();
  validate->add_option("--order-margin", vcfg.order_margin, "relative margin for order parameters")->capture_default_str();
  validate->add_option("--bound-margin", vcfg.bound_margin, "relative margin for the λ bound")->capture_default_str();
  validate->add_flag("--no-bound-check", no_bound, "do not gate on Σf vs the v-statistic");
  validate->add_option("--perturb-theory", vcfg.perturb_theory, "multiply every prediction (fault injection)")->capture_default_str();
  add_profile_flags(validate);

  SweepConfig pcfg, bcfg;
  DataOptions pdata, bdata;
  std::size_t pseeds = 3, bseeds = 3;
  std::vector<std::string> phase_gamma{"0.5:4.5:0.5"}, phase_eta{"-3.5:-0.5:0.25"};
  std::vector<std::string> base_sigma{"0.5:4.5:0.5"}, base_eta{"-4.5:-1.5:0.25"};
  auto add_train_flags = [](CLI::App* sub, SweepConfig& cfg, DataOptions& data, std::size_t& seeds,
                            std::vector<std::string>& eta) {
    sub->add_option("--eta-grid", eta, "log10 η grid: [log10] a:b:step")->expected(1, 2)->capture_default_str();
    sub->add_option("--epochs", cfg.epochs, "epochs per run")->capture_default_str();
    sub->add_option("--batch", cfg.batch, "minibatch size (0 = full batch)")->capture_default_str();
    sub->add_option("--seeds", seeds, "restarts per cell")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--subset", data.subset, "training examples")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--test-subset", data.test_subset, "test examples")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--mnist-dir", data.mnist_dir, "directory with IDX files")->capture_default_str();
    sub->add_flag("--synthetic", data.synthetic, "use synthetic Gaussian data instead of MNIST");
  };
  pcfg.batch = bcfg.batch = 256;
  auto* phase = app.add_subcommand("phase", "(γ, log10 η) training grid: CSV and SVG");
  add_common(phase, phase_c);
  phase->add_option("--gamma-grid", phase_gamma, "a:b:step")->expected(1)->capture_default_str();
  add_train_flags(phase, pcfg, pdata, pseeds, phase_eta);
  auto* baseline = app.add_subcommand("baseline", "(σ_w², log10 η) grid without BatchNorm: CSV and SVG");
  add_common(baseline, baseline_c);
  baseline->add_option("--sigma-w-grid", base_sigma, "σ_w² grid a:b:step")->expected(1)->capture_default_str();
  add_train_flags(baseline, bcfg, bdata, bseeds, base_eta);

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    const ProfileOptions opts = profile_options(hat_seed, variance);
    if (*predict) return cmd_predict(predict_c, gamma, predict_gamma->count() > 0, opts, out, err);
    if (*sweep) return cmd_sweep(sweep_c, parse_grid(gamma_grid, "--gamma-grid"), opts, out, err);
    if (*validate) {
      vcfg.profile = opts;
      vcfg.check_bound = !no_bound;
      vcfg.oracle.stats_mode = stats == "full" ? StatsMode::FullBN : StatsMode::FrozenStats;
      return cmd_validate(validate_c, vcfg, vgamma, validate_gamma->count() > 0, out, err);
    }
    if (*phase) {
      pcfg.x_grid = parse_grid(phase_gamma, "--gamma-grid");
      pcfg.log10_eta_grid = parse_grid(phase_eta, "--eta-grid");
      return cmd_grid(phase_c, false, pcfg, pdata, pseeds, out, err);
    }
    if (*baseline) {
      bcfg.x_grid = parse_grid(base_sigma, "--sigma-w-grid");
      bcfg.log10_eta_grid = parse_grid(base_eta, "--eta-grid");
      return cmd_grid(baseline_c, true, bcfg, bdata, bseeds, out, err);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
  return kUsageError;
}

}  // namespace mfbn::cli
