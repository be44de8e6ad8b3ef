// Acceptance runner. Prints one PASS/FAIL line per criterion followed by
// indented details, and appends the same text to <out>/report_<N>.txt.
//
// Exit status: 0 when every selected criterion was evaluated, 1 with --strict
// when any of them failed, 2 when one could not be evaluated at all.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "mfbn/cli.hpp"
#include "mfbn/csv.hpp"
#include "mfbn/eigenbound.hpp"
#include "mfbn/lab.hpp"
#include "mfbn/meanfield.hpp"
#include "mfbn/oracle.hpp"
#include "support.hpp"

using namespace mfbn;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::vector<std::string> details;

  void note(const std::string& s) { details.push_back(s); }
  void require(bool ok, const std::string& s) {
    pass = pass && ok;
    details.push_back(std::string(ok ? "ok    " : "FAIL  ") + s);
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path out_root() { return fs::path(MFBN_ACCEPTANCE_OUT); }

fs::path scratch(const std::string& name) {
  const fs::path p = out_root() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string config(const std::string& name) { return test::source_path("configs/" + name + ".json"); }

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  return cli::run(args, out, err);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Largest relative difference between two CSV files with identical layout.
// Empty fields must line up; text fields must match exactly.
double csv_max_rel(const std::string& got_path, const std::string& want_path, std::string& problem) {
  const CsvTable got = read_csv_file(got_path);
  const CsvTable want = read_csv_file(want_path);
  if (got.header != want.header) {
    problem = "header differs";
    return INFINITY;
  }
  if (got.rows.size() != want.rows.size()) {
    problem = fmt("%zu rows, expected %zu", got.rows.size(), want.rows.size());
    return INFINITY;
  }
  double worst = 0;
  for (std::size_t r = 0; r < got.rows.size(); ++r)
    for (std::size_t c = 0; c < got.header.size(); ++c) {
      const std::string& a = got.rows[r][c];
      const std::string& b = want.rows[r][c];
      if (a.empty() || b.empty()) {
        if (a != b) problem = fmt("row %zu column %s: presence differs", r, got.header[c].c_str());
        if (a != b) return INFINITY;
        continue;
      }
      char* end = nullptr;
      const double x = std::strtod(a.c_str(), &end);
      if (*end != '\0') {
        if (a != b) {
          problem = fmt("row %zu column %s: '%s' vs '%s'", r, got.header[c].c_str(), a.c_str(), b.c_str());
          return INFINITY;
        }
        continue;
      }
      worst = std::max(worst, test::rel_err(x, std::stod(b)));
    }
  return worst;
}

// ---------------------------------------------------------------------------

Outcome criterion_1() {
  Outcome o;
  const fs::path dir = scratch("c1");
  for (const char* name : {"paper_fc_bn", "paper_fc_vanilla", "paper_conv_bn", "paper_conv_vanilla"}) {
    const fs::path d = dir / name;
    const auto t0 = std::chrono::steady_clock::now();
    const int code = run_cli({"predict", "--arch", config(name), "--out", d.string()});
    const double secs = seconds_since(t0);
    if (code != 0) {
      o.require(false, fmt("%s: predict exited %d", name, code));
      continue;
    }
    for (const char* kind : {"profile", "summary"}) {
      std::string problem;
      const double rel = csv_max_rel((d / (std::string(kind) + ".csv")).string(),
                                     test::source_path(std::string("tests/golden/") + name + "_" + kind + ".csv"),
                                     problem);
      o.require(rel <= 1e-12, fmt("%s %s: max relative difference %.3g%s%s", name, kind, rel,
                                  problem.empty() ? "" : ", ", problem.c_str()));
    }
    o.require(secs < 1.0, fmt("%s: predict took %.3f s (< 1 s)", name, secs));
  }
  for (const char* name : {"paper_fc_bn", "paper_conv_bn"}) {
    const fs::path d = dir / (std::string(name) + "_sweep");
    if (run_cli({"sweep", "--arch", config(name), "--out", d.string()}) != 0) {
      o.require(false, fmt("%s: sweep failed", name));
      continue;
    }
    std::string problem;
    const double rel = csv_max_rel((d / "sweep.csv").string(),
                                   test::source_path(std::string("tests/golden/") + name + "_sweep.csv"), problem);
    o.require(rel <= 1e-12, fmt("%s sweep: max relative difference %.3g%s%s", name, rel,
                                problem.empty() ? "" : ", ", problem.c_str()));
  }
  return o;
}

// ---------------------------------------------------------------------------

const std::set<std::string> kOrderQuantities{"h",         "h_tilde",     "h_hat",   "gamma_cap",   "gamma_tilde",
                                             "gamma_hat", "delta",       "delta_tilde", "delta_hat"};

DiscrepancyReport order_report(const ArchSpec& spec, BnBackwardVariance variance) {
  ValidationConfig cfg;
  cfg.oracle.n_nets = 8;
  cfg.oracle.batch = 4096;
  cfg.oracle.seed = 1;
  cfg.oracle.jobs = 1;
  cfg.check_bound = false;
  cfg.profile.bn_variance = variance;
  return compare_theory_vs_empirical(spec, cfg);
}

// Checks every order-parameter row at 3 SE + 10 %.
void judge_order_rows(Outcome& o, const std::string& label, const DiscrepancyReport& rep) {
  std::size_t n = 0, bad = 0;
  for (const auto& r : rep.rows) {
    if (!kOrderQuantities.count(r.quantity)) continue;
    ++n;
    const double allowed = 3 * r.std_error + 0.10 * std::abs(r.theory);
    if (std::abs(r.empirical - r.theory) > allowed) {
      ++bad;
      o.note(fmt("        %-12s layer %zu  theory %.6g  empirical %.6g +/- %.3g  (allowed %.3g)", r.quantity.c_str(),
                 r.layer, r.theory, r.empirical, r.std_error, allowed));
    }
  }
  o.require(bad == 0, fmt("%s: %zu/%zu order parameters within 3 SE + 10%%", label.c_str(), n - bad, n));
}

// Same comparison against the centered-variance recursions, reported only.
void centered_note(Outcome& o, const std::string& label, const ArchSpec& spec) {
  const DiscrepancyReport rep = order_report(spec, BnBackwardVariance::kCentered);
  std::size_t n = 0, bad = 0;
  for (const auto& r : rep.rows) {
    if (!kOrderQuantities.count(r.quantity)) continue;
    ++n;
    if (std::abs(r.empirical - r.theory) > 3 * r.std_error + 0.10 * std::abs(r.theory)) ++bad;
  }
  o.note(fmt("info  %s with the centered BN divisor: %zu/%zu within tolerance", label.c_str(), n - bad, n));
}

Outcome criterion_2() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const ArchSpec fc = load_arch(config("paper_fc_bn"));
  for (double gamma : {0.5, 1.0, 2.0}) {
    const ArchSpec spec = with_gamma(fc, gamma);
    const std::string label = fmt("FC BN width 1000, gamma %.1f", gamma);
    judge_order_rows(o, label, order_report(spec, BnBackwardVariance::kGammaCap));
    centered_note(o, label, spec);
  }
  const ArchSpec conv = load_arch(config("reduced_conv_bn"));
  judge_order_rows(o, "reduced conv BN (C = 8/16)", order_report(conv, BnBackwardVariance::kGammaCap));
  centered_note(o, "reduced conv BN (C = 8/16)", conv);
  const double secs = seconds_since(t0);
  o.require(secs < 600, fmt("runtime %.1f s (< 600 s)", secs));
  return o;
}

// ---------------------------------------------------------------------------

ArchSpec random_width32(std::mt19937_64& rng, std::size_t outputs) {
  std::uniform_real_distribution<double> u(0, 1);
  ArchSpec spec = test::fc_spec(16, {32, 32}, outputs, u(rng) < 0.5, 0.3 + 2.7 * u(rng));
  spec.init.sigma_w_sq = 0.5 + 2.5 * u(rng);
  spec.init.sigma_b_sq = u(rng);
  return spec;
}

Outcome criterion_3() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(31);

  double worst = 0;
  for (int i = 0; i < 5; ++i) {
    SpectrumOptions opt;
    opt.dense_check = true;
    const EmpiricalSpectrum s = empirical_fim_lambda_max(random_width32(rng, 2), rng(), 512, opt);
    worst = std::max(worst, test::rel_err(s.lambda_max, *s.lambda_max_dense));
  }
  o.require(worst <= 1e-6, fmt("dense vs power iteration on 5 nets (Gram 1024 x 1024): max relative gap %.3g", worst));

  std::size_t held = 0;
  double tightest = INFINITY;
  for (int i = 0; i < 100; ++i) {
    const EmpiricalSpectrum s = empirical_fim_lambda_max(random_width32(rng, 4), rng(), 64);
    if (s.v_statistic <= s.lambda_max + 3 * s.v_std_error) ++held;
    tightest = std::min(tightest, s.lambda_max / s.v_statistic);
  }
  o.require(held == 100, fmt("v-statistic <= lambda_max (+3 SE) on %zu/100 nets (smallest lambda_max/v %.4f)", held,
                             tightest));

  for (const char* name : {"paper_fc_vanilla", "paper_fc_bn"}) {
    ValidationConfig cfg;
    cfg.oracle.n_nets = 8;
    cfg.oracle.batch = 4096;
    cfg.oracle.jobs = 1;
    const DiscrepancyReport rep = compare_theory_vs_empirical(load_arch(config(name)), cfg);
    for (const auto& r : rep.rows) {
      if (r.quantity != "sum_f") continue;
      const double rel = std::abs(r.theory - r.empirical) / r.empirical;
      o.require(rel <= 0.20, fmt("%s (width 1000): sum f = %.4g vs v-statistic %.4g +/- %.3g, relative gap %.1f%%",
                                 name, r.theory, r.empirical, r.std_error, 100 * rel));
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 300, fmt("runtime %.1f s (< 300 s)", secs));
  return o;
}

// ---------------------------------------------------------------------------

ArchSpec small_conv(bool bn) {
  ArchSpec s;
  s.input = {2, 25};
  LayerSpec a;
  a.kind = LayerKind::Convolutional;
  a.width = 4;
  a.kernel_sites = 9;
  a.spatial_sites = 9;
  a.fan_in = 2 * 9;
  a.batch_norm = bn;
  a.gamma = 1.3;
  LayerSpec b = a;
  b.spatial_sites = 1;
  b.fan_in = 4 * 9;
  b.gamma = 0.7;
  LayerSpec out;
  out.width = 3;
  out.fan_in = 4;
  out.activation = Activation::Linear;
  s.layers = {a, b, out};
  return s;
}

Outcome criterion_4() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  for (bool conv : {false, true})
    for (bool bn : {false, true})
      for (StatsMode mode : {StatsMode::FrozenStats, StatsMode::FullBN}) {
        if (!bn && mode == StatsMode::FullBN) continue;
        double worst = 0;
        std::size_t params = 0;
        for (std::uint64_t seed = 1; seed <= 3; ++seed) {
          const ArchSpec spec = conv ? small_conv(bn) : test::fc_spec(6, {8, 8}, 3, bn, 1.4);
          const NetInstance net = sample_network(spec, seed);
          const Eigen::Index m = 7;
          const Matrix X = test::gaussian_matrix(static_cast<Eigen::Index>(spec.input.units()), m, 100 + seed);
          const Matrix R = test::gaussian_matrix(3, m, 200 + seed);
          const test::GradCheck g = test::check_gradients(net, X, R, mode);
          worst = std::max(worst, g.max_rel_error);
          params = g.checked;
        }
        o.require(worst < 1e-5, fmt("%s %s %s: %zu parameters x 3 nets, max relative error %.3g",
                                    conv ? "4-channel conv" : "width-8 FC", bn ? "BN" : "vanilla",
                                    mode == StatsMode::FullBN ? "FullBN" : "FrozenStats", params, worst));
      }
  const double secs = seconds_since(t0);
  o.require(secs < 60, fmt("runtime %.2f s (< 60 s)", secs));
  return o;
}

// ---------------------------------------------------------------------------

Outcome criterion_5() {
  Outcome o;
  for (double mu : {0.0, 0.9}) {
    for (double lambda : {0.5, 3.0, 40.0}) {
      const double eta_star = 2 * (1 + mu) / lambda;
      const bool below = !quadratic_momentum_gd({lambda}, 0.9 * eta_star, mu).diverged;
      const bool above = quadratic_momentum_gd({lambda}, 1.1 * eta_star, mu).diverged;
      o.require(below && above, fmt("1-D, mu %.1f, lambda %g: stable at 0.9 eta*, diverges at 1.1 eta*", mu, lambda));
    }
    const std::vector<double> diag{0.3, 7.0, 2.0, 0.01};
    const double eta_star = 2 * (1 + mu) / 7.0;
    const bool below = !quadratic_momentum_gd(diag, 0.9 * eta_star, mu).diverged;
    const bool above = quadratic_momentum_gd(diag, 1.1 * eta_star, mu).diverged;
    o.require(below && above, fmt("diagonal {0.3, 7, 2, 0.01}, mu %.1f: stable at 0.9 eta*, diverges at 1.1 eta*", mu));
  }
  return o;
}

// ---------------------------------------------------------------------------

SweepConfig desk_phase_config() {
  SweepConfig cfg;
  cfg.x_grid = {0.5, 1, 2, 4};
  cfg.log10_eta_grid = grid_range(-3.5, 0.5, 0.25);
  cfg.seeds = {1, 2, 3};
  cfg.epochs = 5;
  cfg.batch = 256;
  cfg.jobs = 1;
  return cfg;
}

PhaseGrid desk_phase_grid() {
  const TrainTest tt = mnist_subset(test::source_path("data/mnist5k"), 2048, 512);
  return phase_sweep(load_arch(config("desk_fc_bn")), desk_phase_config(), tt);
}

Outcome criterion_6() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const PhaseGrid grid = desk_phase_grid();
  const fs::path dir = scratch("c6");
  emit_heatmap(grid, (dir / "phase.csv").string(), (dir / "phase.svg").string());
  std::size_t matched = 0;
  for (const BoundaryPoint& b : extract_boundary(grid)) {
    if (!b.largest_stable_log10_eta || !b.diverged_on_grid) {
      o.note(fmt("      gamma %.1f: boundary not resolved on the grid", b.x));
      continue;
    }
    const double gap = *b.largest_stable_log10_eta - b.log10_eta_star;
    const bool ok = std::abs(gap) <= std::log10(2.0);
    matched += ok;
    o.note(fmt("%s gamma %.1f: largest stable log10 eta %.2f, predicted log10 eta* %.3f, gap %+.3f",
               ok ? "      " : "  off ", b.x, *b.largest_stable_log10_eta, b.log10_eta_star, gap));
  }
  for (const auto& e : grid.errors) o.note("      cell error: " + e);
  o.require(matched >= 3, fmt("%zu of 4 gamma values within a factor 2 of eta* (need 3); grid in %s", matched,
                              dir.string().c_str()));
  const double secs = seconds_since(t0);
  o.require(secs < 1800, fmt("runtime %.1f s (< 1800 s)", secs));
  return o;
}

// ---------------------------------------------------------------------------

Outcome criterion_7() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<double> grid = grid_range(0.1, 4.0, 0.1);
  for (const char* name : {"paper_fc_bn", "paper_conv_bn"}) {
    const ArchSpec spec = load_arch(config(name));
    const auto rows = gamma_sweep(spec, grid, spec.init.momentum);
    std::vector<double> bn, vanilla;
    for (const auto& r : rows) (r.batch_norm ? bn : vanilla).push_back(r.lambda_bound);
    std::size_t below = 0, considered = 0;
    double crossing = NAN;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (grid[i] <= 3 + 1e-9) {
        ++considered;
        below += bn[i] < vanilla[i];
      }
      if (i > 0 && std::isnan(crossing) && bn[i - 1] < vanilla[i - 1] && bn[i] >= vanilla[i])
        crossing = grid[i - 1] + (grid[i] - grid[i - 1]) * (vanilla[i - 1] - bn[i - 1]) /
                                     ((bn[i] - bn[i - 1]) - (vanilla[i] - vanilla[i - 1]));
    }
    o.require(below == considered,
              fmt("%s: lambda_bound(BN) < lambda_bound(vanilla) at %zu/%zu grid points with gamma <= 3 "
                  "(vanilla %.2f, BN at gamma 3: %.2f, curves cross at gamma %.3f)",
                  name, below, considered, vanilla[0], bn[29], crossing));
    bool monotone = true;
    for (std::size_t i = 1; i < bn.size(); ++i) monotone = monotone && bn[i] > bn[i - 1];
    o.require(monotone, fmt("%s: lambda_bound(gamma) strictly increasing on [0.1, 4]", name));
  }
  const double secs = seconds_since(t0);
  o.require(secs < 1, fmt("runtime %.3f s (< 1 s)", secs));
  return o;
}

// ---------------------------------------------------------------------------

void determinism(Outcome& o) {
  const fs::path a = scratch("c8_run_a"), b = scratch("c8_run_b");
  struct Case {
    std::vector<std::string> args;
    std::string file;
  };
  const std::vector<Case> cases{
      {{"predict", "--arch", config("paper_conv_bn")}, "profile.csv"},
      {{"sweep", "--arch", config("paper_fc_bn")}, "sweep.csv"},
      {{"validate", "--arch", config("desk_fc_bn"), "--nets", "3", "--batch", "256", "--seed", "9"},
       "discrepancy.csv"},
      {{"phase", "--arch", config("desk_fc_bn"), "--synthetic", "--subset", "256", "--test-subset", "64",
        "--gamma-grid", "1:2:1", "--eta-grid", "-3:-1:2", "--seeds", "2", "--epochs", "2"},
       "phase.csv"},
      {{"baseline", "--arch", config("desk_fc_vanilla"), "--synthetic", "--subset", "256", "--test-subset", "64",
        "--sigma-w-grid", "2:2:1", "--eta-grid", "-3:-1:2", "--seeds", "2", "--epochs", "2"},
       "baseline.csv"},
  };
  for (const auto& c : cases) {
    auto args_a = c.args, args_b = c.args;
    args_a.insert(args_a.end(), {"--out", a.string()});
    args_b.insert(args_b.end(), {"--out", b.string(), "--jobs", c.args[0] == "predict" || c.args[0] == "sweep" ? "1" : "2"});
    const int ca = run_cli(args_a), cb = run_cli(args_b);
    const bool same = slurp(a / c.file) == slurp(b / c.file) && !slurp(a / c.file).empty();
    o.require(ca == cb && ca != cli::kUsageError && same,
              fmt("%s twice with the same seed (1 vs 2 workers where parallel): byte-identical %s", c.args[0].c_str(),
                  c.file.c_str()));
  }
}

void std_error_scaling(Outcome& o) {
  // Per-net spread of the width-averaged estimates; the law is 1/sqrt(n_nets * width).
  auto ses = [](std::size_t width) {
    ArchSpec spec = test::fc_spec(64, {width, width}, 4);
    OracleConfig cfg;
    cfg.n_nets = 64;
    cfg.batch = 256;
    cfg.seed = 5;
    const OrderParamEstimates e = estimate_order_params(spec, cfg);
    return std::vector<double>{e.per_layer[1].h.std_error, e.per_layer[2].h.std_error,
                               e.per_layer[1].gamma_cap.std_error, e.per_layer[2].gamma_cap.std_error};
  };
  const auto narrow = ses(128), wide = ses(256);
  double log_sum = 0;
  for (std::size_t i = 0; i < narrow.size(); ++i) log_sum += std::log(wide[i] / narrow[i]);
  const double ratio = std::exp(log_sum / static_cast<double>(narrow.size()));
  const double law = 1 / std::sqrt(2.0);
  o.require(std::abs(ratio / law - 1) <= 0.30,
            fmt("std error ratio on doubling width (128 -> 256): %.3f, law 1/sqrt(2) = %.3f, within 30%%", ratio, law));
  o.note(fmt("info  read literally as 'halves', the target 0.5 +/- 30%% %s", std::abs(ratio / 0.5 - 1) <= 0.3
                                                                             ? "also holds"
                                                                             : "does not hold"));
}

void first_epoch_decrease(Outcome& o) {
  const ArchSpec spec = load_arch(config("desk_fc_bn"));
  const TrainTest tt = mnist_subset(test::source_path("data/mnist5k"), 2048, 512);
  std::size_t cells = 0, decreased = 0;
  for (double gamma : {0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0}) {
    const ArchSpec g = with_gamma(spec, gamma);
    for (std::uint64_t seed : {1, 2, 3}) {
      TrainConfig cfg;
      cfg.eta = spectral_report(run_profile(g)).eta_star / 4;
      cfg.epochs = 1;
      cfg.batch = 256;
      cfg.seed = seed;
      const RunOutcome r = train(g, tt, cfg);
      ++cells;
      decreased += !r.diverged && !r.train_loss.empty() && r.train_loss[0] < r.initial_train_loss;
    }
  }
  o.require(decreased * 10 >= cells * 9,
            fmt("first-epoch training loss decreases at eta*/4: %zu/%zu runs with gamma in [0.5, 2] (need 90%%)",
                decreased, cells));
}

void phase_properties(Outcome& o) {
  const PhaseGrid grid = desk_phase_grid();
  const MonotonicityReport m = check_monotonicity(grid);
  o.require(m.violations * 20 < std::max<std::size_t>(m.boundary_cells, 1),
            fmt("divergence monotone in eta: %zu violations among %zu boundary-adjacent cells (< 5%%)", m.violations,
                m.boundary_cells));
  std::size_t finite_iff = 0, runs = 0, slow_diverged = 0;
  for (const auto& c : grid.cells)
    for (const auto& r : c.runs) {
      ++runs;
      finite_iff += r.diverged == !(r.final_test_loss && std::isfinite(*r.final_test_loss));
    }
  for (std::size_t i = 0; i < grid.x_grid.size(); ++i) {
    if (grid.x_grid[i] > 2) continue;
    for (std::size_t j = 0; j < grid.log10_eta_grid.size(); ++j)
      if (grid.log10_eta_grid[j] < std::log10(grid.eta_star[i] / 10) && grid.cell(i, j).any_diverged()) ++slow_diverged;
  }
  o.require(finite_iff == runs, fmt("test loss finite iff not diverged: %zu/%zu runs", finite_iff, runs));
  o.require(slow_diverged == 0, fmt("no divergence below eta*/10 for gamma in [0.5, 2]: %zu diverged cells",
                                    slow_diverged));
}

Outcome criterion_8() {
  Outcome o;
  const std::string cmd = std::string("\"") + MFBN_UNIT_TESTS + "\" -tc=\"property*\" --minimal > \"" +
                          (out_root() / "properties.txt").string() + "\" 2>&1";
  const int rc = std::system(cmd.c_str());
  std::string summary;
  {
    std::istringstream in(slurp(out_root() / "properties.txt"));
    for (std::string line; std::getline(in, line);)
      if (line.find("test cases:") != std::string::npos || line.find("assertions:") != std::string::npos)
        summary += (summary.empty() ? "" : "; ") + line.substr(line.find(']') + 2);
  }
  o.require(rc == 0, "property suites (>= 200 randomized cases each): " +
                         (summary.empty() ? std::string("all passed") : summary));
  determinism(o);
  std_error_scaling(o);
  first_epoch_decrease(o);
  phase_properties(o);
  return o;
}

struct Criterion {
  int id;
  const char* title;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  bool strict = false;
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_flag("--strict", strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> all{
      {1, "recursion golden equivalence", criterion_1},
      {2, "order-parameter Monte-Carlo agreement", criterion_2},
      {3, "eigenvalue bound chain", criterion_3},
      {4, "gradient correctness", criterion_4},
      {5, "momentum GD stability law", criterion_5},
      {6, "phase-boundary reproduction", criterion_6},
      {7, "BatchNorm lowers the bound for gamma <= 3; monotone in gamma", criterion_7},
      {8, "property suites and determinism", criterion_8},
  };
  fs::create_directories(out_root());
  bool any_fail = false, any_error = false;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream text;
    try {
      const Outcome o = c.run();
      text << fmt("criterion %d %s  %s (%.1f s)\n", c.id, o.pass ? "PASS" : "FAIL", c.title, seconds_since(t0));
      for (const auto& d : o.details) text << "    " << d << '\n';
      any_fail = any_fail || !o.pass;
    } catch (const std::exception& e) {
      text << fmt("criterion %d ERROR %s: %s\n", c.id, c.title, e.what());
      any_error = true;
    }
    std::cout << text.str() << std::flush;
    std::ofstream(out_root() / fmt("report_%d.txt", c.id)) << text.str();
  }
  if (any_error) return 2;
  return strict && any_fail ? 1 : 0;
}
