#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hess/errors.hpp"
#include "hess/pipeline.hpp"
#include "hess/report.hpp"
#include "hess/toy_model.hpp"

namespace hess {

inline const std::vector<pipeline::SparseConfig>& default_grid() {
  static const std::vector<pipeline::SparseConfig> g{{1.0, 0.0}, {0.9, 0.5}, {0.6, 0.7}, {0.4, 0.8}};
  return g;
}

struct RunConfig {
  std::uint64_t seed = 0;
  toy::ModelConfig model;

  std::size_t calib_scenes = 40;
  std::size_t eval_seeds = 10;
  std::size_t scenes_per_seed = 2;

  std::size_t train_steps = 1000;
  std::size_t train_batch = 8;
  std::size_t train_views = 8;
  double lr = 0.002;

  double tau = 0.4;
  double rho = 0.8;
  std::vector<pipeline::SparseConfig> grid = default_grid();
  double lambda = 0.5;
  std::vector<double> lambdas{0.0, 0.25, 0.5, 0.75, 1.0};
  double eps = 0.05;
  double conf_cutoff = 1.0;

  std::string scores_path = "hess_scores.json";
  std::string model_path = "toy_model.bin";
  std::string out_dir = ".";

  bool equal_baselines = false;
  bool scale_logits = false;
  toy::GradTarget sens_param = toy::GradTarget::kQuery;
  bool force = false;
  bool train_first = false;
  double gradcheck_tol = 1e-4;

  pipeline::RunOptions run_options() const {
    pipeline::RunOptions o;
    o.eps = eps;
    o.conf_cutoff = conf_cutoff;
    o.equal_baselines = equal_baselines;
    o.scale_logits = scale_logits;
    o.force = force;
    return o;
  }

  toy::TrainOptions train_options() const {
    toy::TrainOptions o;
    o.steps = train_steps;
    o.lr = lr;
    o.batch = train_batch;
    o.views = train_views;
    o.seed = seed;
    return o;
  }

  sens::CalibrationOptions calibration_options() const {
    sens::CalibrationOptions o;
    o.lambda = lambda;
    o.eps = eps;
    o.conf_cutoff = conf_cutoff;
    o.param = sens_param;
    o.seed = seed;
    return o;
  }

  void validate() const {
    auto frac = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw ParameterError(std::string(name) + " must lie in [0, 1]");
    };
    frac(tau, "tau");
    frac(rho, "rho");
    frac(lambda, "lambda");
    for (double l : lambdas) frac(l, "lambda");
    for (const auto& g : grid) {
      frac(g.tau, "tau");
      frac(g.rho, "rho");
    }
    if (grid.empty()) throw ParameterError("grid must not be empty");
    if (!(eps > 0.0)) throw ParameterError("eps must be > 0");
    if (!(conf_cutoff >= 0.0)) throw ParameterError("confidence cutoff must be >= 0");
    if (!(lr > 0.0)) throw ParameterError("lr must be > 0");
    if (calib_scenes == 0 || eval_seeds == 0 || scenes_per_seed == 0 || train_batch == 0 || train_views < 2) {
      throw ParameterError("scene counts must be positive (and train_views >= 2)");
    }
    if (scores_path == model_path) throw ParameterError("scores and model paths must differ");
    model.validate();
  }
};

inline toy::GradTarget parse_sens_param(const std::string& s) {
  if (s == "wq") return toy::GradTarget::kQuery;
  if (s == "wk") return toy::GradTarget::kKey;
  if (s == "wv") return toy::GradTarget::kValue;
  throw ParameterError("sens-param must be wq, wk or wv, got '" + s + "'");
}

inline std::string sens_param_name(toy::GradTarget t) {
  switch (t) {
    case toy::GradTarget::kKey: return "wk";
    case toy::GradTarget::kValue: return "wv";
    default: return "wq";
  }
}

// Grid file: one "tau rho" pair per line (comma or whitespace separated),
// '#' starts a comment.
inline std::vector<pipeline::SparseConfig> read_grid(std::istream& in) {
  std::vector<pipeline::SparseConfig> grid;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    for (char& c : line)
      if (c == ',') c = ' ';
    std::istringstream is(line);
    std::string a, b, extra;
    if (!(is >> a)) continue;
    if (!(is >> b) || (is >> extra)) throw ParameterError("grid line " + std::to_string(lineno) + ": expected 'tau rho'");
    pipeline::SparseConfig c{report::parse_double(a), report::parse_double(b)};
    attn::check_fraction(c.tau, "tau");
    attn::check_fraction(c.rho, "rho");
    grid.push_back(c);
  }
  if (grid.empty()) throw ParameterError("grid file has no entries");
  return grid;
}

inline std::vector<pipeline::SparseConfig> read_grid(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot read grid file " + path);
  return read_grid(in);
}

inline std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  for (auto f : report::split(s)) {
    std::erase_if(f, [](char c) { return c == ' ' || c == '\t'; });
    if (!f.empty()) out.push_back(report::parse_double(f));
  }
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ParameterError("expected a boolean, got '" + v + "'");
}

// Sets one key. Unknown keys are an error.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
  auto sz = [&] { return static_cast<std::size_t>(std::stoull(value)); };
  auto num = [&] { return report::parse_double(value); };
  const std::map<std::string, std::function<void()>> setters{
      {"seed", [&] { c.seed = std::stoull(value); }},
      {"n_layers", [&] { c.model.n_layers = sz(); }},
      {"n_heads", [&] { c.model.n_heads = sz(); }},
      {"dim", [&] { c.model.dim = sz(); }},
      {"head_dim", [&] { c.model.head_dim = sz(); }},
      {"ff_dim", [&] { c.model.ff_dim = sz(); }},
      {"n_views", [&] { c.model.n_views = sz(); }},
      {"tokens_per_view", [&] { c.model.tokens_per_view = sz(); }},
      {"block_size", [&] { c.model.block_size = sz(); }},
      {"calib_scenes", [&] { c.calib_scenes = sz(); }},
      {"eval_seeds", [&] { c.eval_seeds = sz(); }},
      {"scenes_per_seed", [&] { c.scenes_per_seed = sz(); }},
      {"train_steps", [&] { c.train_steps = sz(); }},
      {"train_batch", [&] { c.train_batch = sz(); }},
      {"train_views", [&] { c.train_views = sz(); }},
      {"lr", [&] { c.lr = num(); }},
      {"tau", [&] { c.tau = num(); }},
      {"rho", [&] { c.rho = num(); }},
      {"grid", [&] { c.grid = read_grid(value); }},
      {"lambda", [&] { c.lambda = num(); }},
      {"lambdas", [&] { c.lambdas = parse_list(value); }},
      {"eps", [&] { c.eps = num(); }},
      {"conf_cutoff", [&] { c.conf_cutoff = num(); }},
      {"scores", [&] { c.scores_path = value; }},
      {"model", [&] { c.model_path = value; }},
      {"out", [&] { c.out_dir = value; }},
      {"equal_baselines", [&] { c.equal_baselines = parse_bool(value); }},
      {"scale_logits", [&] { c.scale_logits = parse_bool(value); }},
      {"sens_param", [&] { c.sens_param = parse_sens_param(value); }},
      {"force", [&] { c.force = parse_bool(value); }},
      {"train_first", [&] { c.train_first = parse_bool(value); }},
      {"gradcheck_tol", [&] { c.gradcheck_tol = num(); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ParameterError("unknown setting '" + key + "'");
  try {
    it->second();
  } catch (const std::invalid_argument&) {
    throw ParameterError("bad value for " + key + ": '" + value + "'");
  } catch (const std::out_of_range&) {
    throw ParameterError("value out of range for " + key + ": '" + value + "'");
  }
}

// Flat "key = value" lines; blank lines and '#' comments are ignored.
inline void load_config(RunConfig& c, std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParameterError("config line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

inline void load_config(RunConfig& c, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParameterError("cannot read config file " + path);
  load_config(c, in);
}

}  // namespace hess
