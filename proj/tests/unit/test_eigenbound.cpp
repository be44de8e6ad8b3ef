#include <numbers>
#include <random>
#include <sstream>

#include "doctest.h"
#include "mfbn/csv.hpp"
#include "mfbn/eigenbound.hpp"
#include "support.hpp"

using namespace mfbn;

namespace {

std::vector<double> default_grid() {
  std::vector<double> g;
  for (int i = 0; i < 40; ++i) g.push_back(0.1 + 0.1 * i);
  return g;
}

}  // namespace

TEST_CASE("layer_contribution: FC formula") {
  OrderParamProfile p;
  p.arch = test::load_config("paper_fc_bn");
  p.per_layer.resize(5);
  p.per_layer[1].h_tilde = 1 / (2 * std::numbers::pi);
  p.per_layer[2].delta_tilde = 1;
  CHECK(layer_contribution(p, 2) == doctest::Approx(159.155).epsilon(1e-5));
  CHECK_THROWS_AS(layer_contribution(p, 0), SpectralError);
  CHECK_THROWS_AS(layer_contribution(p, 5), SpectralError);
}

TEST_CASE("layer_contribution: conv layer without hat values is a structural error") {
  OrderParamProfile p = run_profile(test::load_config("paper_conv_bn"));
  p.per_layer[2].delta_hat.reset();
  CHECK_THROWS_AS(layer_contribution(p, 2), SpectralError);
}

TEST_CASE("spectral_report arithmetic") {
  CHECK(critical_learning_rate(100, 0.9) == doctest::Approx(0.038).epsilon(1e-15));
  CHECK(critical_learning_rate(159.155, 0) == doctest::Approx(0.012566).epsilon(1e-4));
  CHECK_THROWS_WITH_AS(critical_learning_rate(0, 0.9), "degenerate spectrum", SpectralError);

  const OrderParamProfile p = run_profile(test::load_config("paper_fc_bn"));
  const SpectralReport r = spectral_report(p);
  double sum = 0;
  for (double f : r.f_per_layer) sum += f;
  CHECK(r.lambda_bound == sum);
  CHECK(r.eta_star * r.lambda_bound == doctest::Approx(3.8).epsilon(1e-15));
  CHECK(r.eta_opt == r.eta_star / 2);
  CHECK(r.f_per_layer[0] == 0.0);  // H̃₀ = 0
}

TEST_CASE("golden summaries and per-layer f") {
  for (const char* name : {"paper_fc_bn", "paper_fc_vanilla", "paper_conv_bn", "paper_conv_vanilla"}) {
    CAPTURE(name);
    const SpectralReport r = spectral_report(run_profile(test::load_config(name)));
    const std::string base = test::source_path(std::string("tests/golden/") + name);
    const CsvTable s = read_csv_file(base + "_summary.csv");
    CHECK(test::rel_err(*s.number(0, "lambda_bound"), r.lambda_bound) <= 1e-12);
    CHECK(test::rel_err(*s.number(0, "eta_star"), r.eta_star) <= 1e-12);
    CHECK(test::rel_err(*s.number(0, "eta_opt"), r.eta_opt) <= 1e-12);
    const CsvTable prof = read_csv_file(base + "_profile.csv");
    for (std::size_t l = 1; l < prof.rows.size(); ++l)
      CHECK(test::rel_err(*prof.number(l, "f"), r.f_per_layer[l - 1]) <= 1e-12);
  }
}

TEST_CASE("golden gamma sweeps") {
  for (const char* name : {"paper_fc_bn", "paper_conv_bn"}) {
    CAPTURE(name);
    const ArchSpec spec = test::load_config(name);
    const auto rows = gamma_sweep(spec, default_grid(), spec.init.momentum);
    const CsvTable g = read_csv_file(test::source_path(std::string("tests/golden/") + name + "_sweep.csv"));
    REQUIRE(rows.size() == g.rows.size());
    REQUIRE(rows.size() == 80);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      CHECK(rows[i].batch_norm == (g.rows[i][g.column("variant")] == "bn"));
      CHECK(rows[i].gamma == *g.number(i, "gamma"));
      CHECK(test::rel_err(rows[i].lambda_bound, *g.number(i, "lambda_bound")) <= 1e-12);
      CHECK(test::rel_err(rows[i].eta_star, *g.number(i, "eta_star")) <= 1e-12);
      CHECK(test::rel_err(rows[i].eta_opt, *g.number(i, "eta_opt")) <= 1e-12);
    }
  }
}

TEST_CASE("gamma sweep shape and monotonicity") {
  const ArchSpec spec = test::load_config("paper_fc_bn");
  const auto rows = gamma_sweep(spec, {0.5, 1, 2, 4}, 0.9);
  CHECK(rows.size() == 8);
  for (std::size_t i = 1; i < 4; ++i) CHECK(rows[i].eta_star < rows[i - 1].eta_star);

  const auto full = gamma_sweep(spec, default_grid(), 0.9);
  for (std::size_t i = 1; i < 40; ++i) CHECK(full[i].lambda_bound > full[i - 1].lambda_bound);
  for (std::size_t i = 0; i < 10; ++i) CHECK(full[i].eta_star > full[40 + i].eta_star);

  std::ostringstream out;
  write_sweep_csv(out, rows);
  std::istringstream in(out.str());
  const CsvTable t = read_csv(in);
  CHECK(t.rows.size() == 8);
  CHECK(t.rows[4][4] == "vanilla");

  CHECK_THROWS_AS(gamma_sweep(spec, {}, 0.9), SpectralError);
  CHECK_THROWS_AS(gamma_sweep(test::load_config("paper_fc_vanilla"), {1.0}, 0.9), SpectralError);
}

TEST_CASE("report CSV matches the golden layout") {
  const OrderParamProfile p = run_profile(test::load_config("paper_conv_bn"));
  std::ostringstream out;
  write_report_csv(out, p, spectral_report(p));
  std::istringstream in(out.str());
  const CsvTable t = read_csv(in);
  const CsvTable g = read_csv_file(test::source_path("tests/golden/paper_conv_bn_profile.csv"));
  CHECK(t.header == g.header);
  REQUIRE(t.rows.size() == g.rows.size());
  for (std::size_t r = 0; r < t.rows.size(); ++r)
    for (std::size_t c = 0; c < t.header.size(); ++c) {
      CHECK(t.rows[r][c].empty() == g.rows[r][c].empty());
      if (!t.rows[r][c].empty())
        CHECK(test::rel_err(std::stod(t.rows[r][c]), std::stod(g.rows[r][c])) <= 1e-12);
    }
}

TEST_CASE("property: f_l >= 0 and eta* scaling on random specs") {
  std::mt19937_64 rng(404);
  for (int i = 0; i < 300; ++i) {
    const ArchSpec spec = test::random_spec(rng);
    const OrderParamProfile p = run_profile(spec);
    const SpectralReport r = spectral_report(p);
    for (double f : r.f_per_layer) CHECK(f >= 0);
    CHECK(r.eta_star * r.lambda_bound == doctest::Approx(2 * (1 + spec.init.momentum)).epsilon(1e-14));
    CHECK(critical_learning_rate(2 * r.lambda_bound, r.momentum) == r.eta_star / 2);
  }
}

TEST_CASE("property: conv layer with one site reduces to the FC formula") {
  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  for (int i = 0; i < 300; ++i) {
    const std::size_t c0 = 1 + rng() % 64;
    const std::size_t f = 1 + rng() % 9;
    ArchSpec spec;
    spec.input = {c0, f};
    LayerSpec conv;
    conv.kind = LayerKind::Convolutional;
    conv.width = 1 + rng() % 16;
    conv.kernel_sites = f;
    conv.spatial_sites = 1;
    conv.fan_in = c0 * f;
    LayerSpec out;
    out.width = 3;
    out.fan_in = conv.width;
    out.activation = Activation::Linear;
    spec.layers = {conv, out};

    OrderParamProfile p;
    p.arch = spec;
    p.per_layer.resize(3);
    p.per_layer[0].h_tilde = u(rng);
    p.per_layer[0].h_hat = u(rng);
    p.per_layer[1].delta_tilde = u(rng);
    p.per_layer[1].delta_hat = u(rng);
    const double fc = static_cast<double>(c0 * f) * p.per_layer[0].h_tilde * p.per_layer[1].delta_tilde;
    CHECK(layer_contribution(p, 1) == fc);
  }
}
