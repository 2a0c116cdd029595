// hess: calibrate head sensitivity scores on the toy multi-view model and run
// sparse inference experiments with them.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#include "CLI11.hpp"

#include "hess/calibration.hpp"
#include "hess/config.hpp"
#include "hess/gradcheck.hpp"
#include "hess/pipeline.hpp"
#include "hess/report.hpp"
#include "hess/toy_model.hpp"

namespace fs = std::filesystem;
using namespace hess;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitFailure = 2;

// Command-line values override the config file, so they are collected
// separately and applied after it has been read.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda, eps, tau, rho, lr, tol;
  std::optional<std::size_t> steps;
  std::optional<std::string> grid, scores, model, out, sens_param, lambdas;
  bool equal_baselines = false, scale_logits = false, force = false, train_first = false, inject_fault = false;
};

void add_common(CLI::App* sub, Overrides& o) {
  sub->add_option("--config", o.config, "key=value configuration file");
  sub->add_option("--seed", o.seed, "random seed");
  sub->add_option("--lambda", o.lambda, "weight of the camera term in the combined score");
  sub->add_option("--eps", o.eps, "inlier threshold on squared distance");
  sub->add_option("--tau", o.tau, "CDF threshold");
  sub->add_option("--rho", o.rho, "sparse ratio");
  sub->add_option("--grid", o.grid, "file of 'tau rho' pairs");
  sub->add_option("--scores", o.scores, "score table (JSON)");
  sub->add_option("--model", o.model, "model file");
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--sens-param", o.sens_param, "projection used for sensitivity: wq, wk or wv");
  sub->add_flag("--equal-baselines", o.equal_baselines, "give every head the mean baseline budget");
  sub->add_flag("--scale-logits", o.scale_logits, "scale pooled logits by 1/sqrt(d_h)");
  sub->add_flag("--force", o.force, "accept a score table calibrated on a different model");
}

RunConfig resolve(const Overrides& o) {
  RunConfig c;
  if (!o.config.empty()) load_config(c, o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.lambda) c.lambda = *o.lambda;
  if (o.eps) c.eps = *o.eps;
  if (o.tau) c.tau = *o.tau;
  if (o.rho) c.rho = *o.rho;
  if (o.lr) c.lr = *o.lr;
  if (o.tol) c.gradcheck_tol = *o.tol;
  if (o.steps) c.train_steps = *o.steps;
  if (o.grid) c.grid = read_grid(*o.grid);
  if (o.scores) c.scores_path = *o.scores;
  if (o.model) c.model_path = *o.model;
  if (o.out) c.out_dir = *o.out;
  if (o.sens_param) c.sens_param = parse_sens_param(*o.sens_param);
  if (o.lambdas) c.lambdas = parse_list(*o.lambdas);
  c.equal_baselines = c.equal_baselines || o.equal_baselines;
  c.scale_logits = c.scale_logits || o.scale_logits;
  c.force = c.force || o.force;
  c.train_first = c.train_first || o.train_first;
  c.validate();
  return c;
}

std::string out_path(const RunConfig& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  return (fs::path(c.out_dir) / name).string();
}

toy::ToyModel train_model(const RunConfig& c) {
  toy::ToyModel model = toy::init_model(c.model, c.seed);
  auto opt = c.train_options();
  opt.on_step = [&](std::size_t step, double loss) {
    if (step % 50 == 0 || step + 1 == c.train_steps) std::printf("step %5zu  loss %.6f\n", step, loss);
  };
  const auto res = toy::train_toy_stream(model, opt);
  std::printf("trained %zu steps: loss %.6f -> %.6f\n", c.train_steps, res.initial_loss, res.final_loss);
  return model;
}

toy::ToyModel obtain_model(const RunConfig& c) {
  if (fs::exists(c.model_path)) return toy::load_model(c.model_path);
  if (!c.train_first) throw ParameterError("model file " + c.model_path + " not found (use --train-first or `hess train`)");
  auto model = train_model(c);
  toy::save_model(model, c.model_path);
  std::printf("wrote %s\n", c.model_path.c_str());
  return model;
}

sens::HessTable load_table(const RunConfig& c, const toy::ToyModel& model) {
  return sens::load(c.scores_path, toy::fingerprint(model), c.force);
}

std::vector<toy::SyntheticScene> calibration_scenes(const RunConfig& c) {
  return toy::generate_scenes(c.seed, /*stream=*/2, c.calib_scenes, c.model);
}

std::vector<std::uint64_t> eval_seed_list(const RunConfig& c) {
  std::vector<std::uint64_t> seeds(c.eval_seeds);
  std::iota(seeds.begin(), seeds.end(), c.seed);
  return seeds;
}

std::vector<toy::SyntheticScene> sweep_scenes(const RunConfig& c) {
  std::vector<toy::SyntheticScene> all;
  for (std::uint64_t s : eval_seed_list(c)) {
    auto part = pipeline::eval_scenes(c.model, s, c.scenes_per_seed);
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

int cmd_train(const RunConfig& c) {
  auto model = train_model(c);
  toy::save_model(model, c.model_path);
  std::printf("wrote %s (fingerprint %s)\n", c.model_path.c_str(), toy::fingerprint(model).c_str());
  return kExitOk;
}

int cmd_calibrate(const RunConfig& c) {
  const auto model = obtain_model(c);
  const auto table = sens::calibrate(model, calibration_scenes(c), c.calibration_options());
  sens::save(table, c.scores_path);
  std::printf("calibrated on %zu scenes, lambda %.3g, sensitivity of %s\n", table.meta().num_samples, table.lambda(),
              sens_param_name(c.sens_param).c_str());
  for (std::size_t l = 0; l < table.num_layers(); ++l) {
    auto scores = table.hess(l);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
    std::printf("layer %zu top heads:", l);
    for (std::size_t i = 0; i < std::min<std::size_t>(3, order.size()); ++i)
      std::printf("  h%zu=%.4f", order[i], scores[order[i]]);
    std::printf("\n");
  }
  std::printf("wrote %s\n", c.scores_path.c_str());
  return kExitOk;
}

int cmd_sweep(const RunConfig& c) {
  const auto model = obtain_model(c);
  const auto table = load_table(c, model);
  const auto rows = pipeline::sweep(model, sweep_scenes(c), table, c.grid, pipeline::all_modes(), c.seed,
                                    c.run_options());
  const auto csv = out_path(c, "sweep.csv");
  {
    std::ofstream out(csv);
    report::write_sweep_csv(out, rows);
  }
  std::ofstream svg(out_path(c, "sweep.svg"));
  report::write_svg(svg, rows);
  report::write_sweep_csv(std::cout, rows);
  std::printf("wrote %s and sweep.svg\n", csv.c_str());
  return kExitOk;
}

int cmd_infer(const RunConfig& c) {
  const auto model = obtain_model(c);
  const auto table = load_table(c, model);
  const auto scene = pipeline::eval_scenes(c.model, c.seed, 1).front();
  const auto dense = pipeline::run_dense(model, scene, c.run_options());
  const auto sparse = pipeline::run_sparse(model, scene, &table, {c.tau, c.rho}, c.run_options());
  std::printf("dense:  e_cam %.6f  e_pc %.6f\n", dense.e_cam, dense.e_pc);
  std::printf("sparse: e_cam %.6f  e_pc %.6f  sparsity %.4f (tau %.3g, rho %.3g)\n", sparse.e_cam, sparse.e_pc,
              sparse.sparsity, c.tau, c.rho);
  {
    std::ofstream out(out_path(c, "allocations.csv"));
    report::write_allocation_csv(out, sparse.allocations, &table);
  }
  {
    std::ofstream out(out_path(c, "points.txt"));
    geom::PointCloud aligned = sparse.prediction.cloud;
    for (auto& p : aligned.points) p = sparse.alignment.apply(p);
    write_point_cloud(out, aligned);
  }
  std::printf("wrote allocations.csv and points.txt to %s\n", c.out_dir.c_str());
  return kExitOk;
}

int cmd_ablate(const RunConfig& c) {
  const auto model = obtain_model(c);
  const auto table = load_table(c, model);
  const auto rows =
      pipeline::ablate_lambda(model, sweep_scenes(c), table, c.lambdas, {c.tau, c.rho}, c.run_options());
  std::ofstream out(out_path(c, "ablate_lambda.csv"));
  report::write_lambda_csv(out, rows);
  report::write_lambda_csv(std::cout, rows);
  return kExitOk;
}

int cmd_sanity(const RunConfig& c) {
  const auto model = obtain_model(c);
  const auto table = load_table(c, model);
  const auto cfg = pipeline::highest_sparsity(c.grid);
  const auto rep = pipeline::sanity(model, table, cfg, eval_seed_list(c), c.scenes_per_seed, c.run_options());
  std::printf("tau %.3g rho %.3g, achieved sparsity %.4f\n", cfg.tau, cfg.rho, rep.sparsity);
  std::printf("seed,e_cam_hess,e_cam_reverse\n");
  for (std::size_t i = 0; i < rep.hess.size(); ++i)
    std::printf("%llu,%.6f,%.6f\n", static_cast<unsigned long long>(rep.hess[i].seed), rep.hess[i].agg.e_cam,
                rep.reverse[i].agg.e_cam);
  std::printf("median e_cam: hess %.6f  reverse %.6f\n", rep.median_hess, rep.median_reverse);
  std::printf("%s\n", pipeline::to_string(rep.verdict).c_str());
  if (model.loss_history.empty()) {
    std::printf("note: the model was never trained, so this result is not binding\n");
    return kExitOk;
  }
  return rep.verdict == pipeline::Verdict::kFail ? kExitFailure : kExitOk;
}

int cmd_gradcheck(const RunConfig& c, bool inject_fault) {
  if (inject_fault) fault::flip_matmul_backward_sign() = true;
  bool ok = true;
  for (const auto& r : gradcheck::run_all(c.seed, c.gradcheck_tol)) {
    std::printf("%s  %-40s max rel err %.3e over %zu entries (tol %.1e)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(),
                r.max_rel_err, r.entries, c.gradcheck_tol);
    ok = ok && r.pass;
  }
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head sensitivity scores and sensitivity-guided block-sparse attention on a toy multi-view model"};
  app.require_subcommand(1);
  Overrides o;
  std::map<std::string, CLI::App*> subs;
  for (const char* name : {"train", "calibrate", "sweep", "infer", "ablate-lambda", "sanity", "gradcheck"}) {
    subs[name] = app.add_subcommand(name);
    add_common(subs[name], o);
  }
  subs["train"]->description("train the toy model on freshly generated scenes");
  subs["train"]->add_option("--steps", o.steps, "descent steps");
  subs["train"]->add_option("--lr", o.lr, "learning rate");
  subs["calibrate"]->description("compute the per-head sensitivity table");
  subs["calibrate"]->add_flag("--train-first", o.train_first, "train and save a model if none exists");
  subs["sweep"]->description("uniform / hess / reverse budgets across the (tau, rho) grid");
  subs["infer"]->description("sparse inference on one scene with allocation dump");
  subs["ablate-lambda"]->description("errors as a function of lambda");
  subs["ablate-lambda"]->add_option("--lambdas", o.lambdas, "comma-separated lambda values");
  subs["sanity"]->description("hess against reversed ranking at the sparsest grid point");
  subs["gradcheck"]->description("finite-difference checks of the analytic gradients");
  subs["gradcheck"]->add_option("--tol", o.tol, "relative error tolerance");
  subs["gradcheck"]->add_flag("--inject-fault", o.inject_fault, "flip the sign of the matmul backward pass");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const RunConfig c = resolve(o);
    if (subs["train"]->parsed()) return cmd_train(c);
    if (subs["calibrate"]->parsed()) return cmd_calibrate(c);
    if (subs["sweep"]->parsed()) return cmd_sweep(c);
    if (subs["infer"]->parsed()) return cmd_infer(c);
    if (subs["ablate-lambda"]->parsed()) return cmd_ablate(c);
    if (subs["sanity"]->parsed()) return cmd_sanity(c);
    if (subs["gradcheck"]->parsed()) return cmd_gradcheck(c, o.inject_fault);
  } catch (const ParameterError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
