#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "hess/config.hpp"
#include "hess/gradcheck.hpp"
#include "hess/report.hpp"
#include "test_util.hpp"

using namespace hess;

TEST(Report, NumbersRoundTrip) {
  for (double v : {0.0, -0.0, 1.0, 0.1, 1.0 / 3.0, 1e-300, 6.02214076e23, -2.5}) {
    EXPECT_EQ(report::parse_double(report::fmt(v)), v);
  }
  EXPECT_TRUE(std::isnan(report::parse_double(report::fmt(std::nan("")))));
  EXPECT_EQ(report::parse_double("inf"), std::numeric_limits<double>::infinity());
  EXPECT_EQ(report::fmt(-std::numeric_limits<double>::infinity()), "-inf");
  EXPECT_THROW(report::parse_double("1.5x"), ValidationError);
  EXPECT_THROW(report::parse_double(""), ValidationError);
}

TEST(Report, Split) {
  EXPECT_EQ(report::split("a,b,,c"), (std::vector<std::string>{"a", "b", "", "c"}));
  EXPECT_EQ(report::split("a,"), (std::vector<std::string>{"a", ""}));
}

TEST(Report, SweepCsvRoundTrip) {
  const std::vector<pipeline::ReportRow> rows{
      {"uniform", 1.0, 0.0, 0.0, 0.25, 0.125, 3},
      {"hess", 0.4, 0.8, 0.61, 1.0 / 3.0, std::nan(""), 3},
      {"reverse", 0.4, 0.8, 0.6, 2.0, 0.5, 4},
  };
  std::stringstream ss;
  report::write_sweep_csv(ss, rows);
  const auto back = report::read_sweep_csv(ss);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].mode, rows[i].mode);
    EXPECT_EQ(back[i].tau, rows[i].tau);
    EXPECT_EQ(back[i].rho, rows[i].rho);
    EXPECT_EQ(back[i].sparsity, rows[i].sparsity);
    EXPECT_EQ(back[i].e_cam, rows[i].e_cam);
    EXPECT_EQ(std::isnan(back[i].e_pc), std::isnan(rows[i].e_pc));
    EXPECT_EQ(back[i].seed, rows[i].seed);
  }
}

TEST(Report, SweepCsvRejectsBadInput) {
  const std::string header = std::string(report::kSweepHeader) + "\n";
  auto bad = [](const std::string& text) {
    std::istringstream in(text);
    return report::read_sweep_csv(in);
  };
  EXPECT_THROW(bad("mode,tau\n"), ValidationError);
  EXPECT_THROW(bad(header + "hess,0.4,0.8,0.5,1.0,1.0\n"), ValidationError);
  EXPECT_THROW(bad(header + "dense,0.4,0.8,0.5,1.0,1.0,0\n"), ParameterError);
  EXPECT_THROW(bad(header + "hess,1.4,0.8,0.5,1.0,1.0,0\n"), ValidationError);
  EXPECT_THROW(bad(header + "hess,0.4,0.8,0.5,-1.0,1.0,0\n"), ValidationError);
  EXPECT_THROW(bad(header + "hess,0.4,0.8,0.5,1.0,x,0\n"), ValidationError);
  EXPECT_TRUE(bad(header).empty());
}

TEST(Report, AllocationCsvFromRealRun) {
  const auto cfg = testutil::small_config();
  const auto model = toy::init_model(cfg, 31);
  const auto scene = toy::generate_scene(31, cfg.n_views, cfg.tokens_per_view, cfg.dim);
  const auto table = sens::uniform_table(cfg.n_layers, cfg.n_heads);
  const auto r = pipeline::run_sparse(model, scene, &table, {0.4, 0.8});
  std::stringstream ss;
  report::write_allocation_csv(ss, r.allocations, &table);
  const auto rows = report::read_allocation_csv(ss);
  ASSERT_EQ(rows.size(), cfg.n_layers * cfg.n_heads);
  for (const auto& row : rows) {
    EXPECT_EQ(row.final, r.allocations[row.layer].final[row.head]);
    EXPECT_EQ(row.hess, 1.0 / 3.0);
  }

  std::istringstream unbalanced(std::string(report::kAllocationHeader) + "\n0,0,0.5,2,2,3\n0,1,0.5,2,2,2\n");
  EXPECT_THROW(report::read_allocation_csv(unbalanced), ValidationError);
  std::istringstream short_line(std::string(report::kAllocationHeader) + "\n0,0,0.5,2\n");
  EXPECT_THROW(report::read_allocation_csv(short_line), ValidationError);
}

TEST(Report, LambdaCsvAndSvg) {
  std::stringstream ss;
  report::write_lambda_csv(ss, {{0.5, 0.4, 0.8, 0.6, 1.5, 0.25}});
  EXPECT_EQ(ss.str(), std::string(report::kLambdaHeader) + "\n0.5,0.4,0.8,0.6,1.5,0.25\n");

  std::stringstream svg;
  report::write_svg(svg, {{"uniform", 1, 0, 0.0, 1.0, 1.0, 0}, {"uniform", 0.4, 0.8, 0.6, 2.0, 1.0, 0}});
  const auto s = svg.str();
  EXPECT_EQ(s.rfind("<svg", 0), 0u);
  EXPECT_NE(s.find("</svg>"), std::string::npos);
  EXPECT_NE(s.find("polyline"), std::string::npos);
}

TEST(Config, GridFile) {
  std::istringstream in("# tau rho\n1.0 0.0\n0.9, 0.5\n\n0.4 0.8  # last\n");
  const auto g = read_grid(in);
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(g[1], (pipeline::SparseConfig{0.9, 0.5}));
  EXPECT_EQ(g[2], (pipeline::SparseConfig{0.4, 0.8}));

  auto parse = [](const std::string& text) {
    std::istringstream s(text);
    return read_grid(s);
  };
  EXPECT_THROW(parse(""), ParameterError);
  EXPECT_THROW(parse("0.5\n"), ParameterError);
  EXPECT_THROW(parse("0.5 0.5 0.5\n"), ParameterError);
  EXPECT_THROW(parse("1.5 0.5\n"), ParameterError);
  EXPECT_THROW(read_grid(std::string("/nonexistent/grid.txt")), ParameterError);
}

TEST(Config, DefaultGrid) {
  const auto& g = default_grid();
  ASSERT_EQ(g.size(), 4u);
  EXPECT_EQ(g.front(), (pipeline::SparseConfig{1.0, 0.0}));
  EXPECT_EQ(g.back(), (pipeline::SparseConfig{0.4, 0.8}));
}

TEST(Config, KeyValueFile) {
  RunConfig c;
  std::istringstream in(
      "# comment\n"
      "seed = 7\n"
      "n_layers=2\n"
      "  rho = 0.9   # trailing\n"
      "lambdas = 0, 1\n"
      "equal_baselines = yes\n"
      "sens_param = wk\n"
      "scores = s.json\n");
  load_config(c, in);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.model.n_layers, 2u);
  EXPECT_EQ(c.rho, 0.9);
  EXPECT_EQ(c.lambdas, (std::vector<double>{0.0, 1.0}));
  EXPECT_TRUE(c.equal_baselines);
  EXPECT_EQ(c.sens_param, toy::GradTarget::kKey);
  EXPECT_EQ(c.scores_path, "s.json");
  EXPECT_EQ(c.run_options().equal_baselines, true);
}

TEST(Config, BadSettings) {
  RunConfig c;
  EXPECT_THROW(apply_setting(c, "colour", "red"), ParameterError);
  EXPECT_THROW(apply_setting(c, "seed", "abc"), ParameterError);
  EXPECT_THROW(apply_setting(c, "tau", "0.4.1"), ValidationError);
  EXPECT_THROW(apply_setting(c, "force", "maybe"), ParameterError);
  EXPECT_THROW(apply_setting(c, "sens_param", "wo"), ParameterError);
  std::istringstream no_eq("seed 7\n");
  EXPECT_THROW(load_config(c, no_eq), ParameterError);
  EXPECT_THROW(load_config(c, std::string("/nonexistent/run.cfg")), ParameterError);
  for (auto t : {toy::GradTarget::kQuery, toy::GradTarget::kKey, toy::GradTarget::kValue})
    EXPECT_EQ(parse_sens_param(sens_param_name(t)), t);
}

TEST(GradCheck, AllChecksPass) {
  for (const auto& r : gradcheck::run_all(0, 1e-4)) {
    EXPECT_TRUE(r.pass) << r.name << " max rel err " << r.max_rel_err;
    EXPECT_GT(r.entries, 0u);
  }
}

TEST(GradCheck, InjectedFaultIsCaught) {
  fault::flip_matmul_backward_sign() = true;
  const auto r = gradcheck::check_autodiff(0, 1e-4);
  fault::flip_matmul_backward_sign() = false;
  EXPECT_FALSE(r.pass);
  EXPECT_GT(r.max_rel_err, 1e-4);
  EXPECT_TRUE(gradcheck::check_autodiff(0, 1e-4).pass);
}

TEST(GradCheck, ImpossibleToleranceFails) {
  // Central differences cannot get anywhere near 1e-12 relative accuracy.
  const auto r = gradcheck::check_autodiff(0, 1e-12);
  EXPECT_FALSE(r.pass);
}

TEST(GradCheck, RelativeError) {
  EXPECT_EQ(gradcheck::rel_err(1.0, 1.0), 0.0);
  EXPECT_EQ(gradcheck::rel_err(2.0, 1.0), 0.5);
  EXPECT_EQ(gradcheck::rel_err(1e-9, 0.0), 1e-9 / 1e-6);
}
