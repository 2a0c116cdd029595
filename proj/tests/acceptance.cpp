// Acceptance run: one PASS/FAIL line per criterion, exit status 0 only if all
// pass. Usage: acceptance [--model PATH]
// Without --model the default toy model is trained from scratch (about two
// minutes on one core).

#include <Eigen/Geometry>
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>

#include "hess/calibration.hpp"
#include "hess/config.hpp"
#include "hess/gradcheck.hpp"
#include "hess/pipeline.hpp"
#include "hess/report.hpp"

using namespace hess;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
  void fail(const std::string& why) {
    if (pass) detail = why;
    pass = false;
  }
};

int failures = 0;

void print(int id, const char* name, const Outcome& o) {
  std::printf("%s  %2d  %-34s %s\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str());
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
  return buf;
}

bool bits_equal(double a, double b) { return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b); }

// ---------------------------------------------------------------------------
// 1, 2: water-filling

// Cap every head that exceeds c_max, hand the rest to the others in
// proportion to their weights, repeat until nothing new is capped.
std::vector<long double> iterate_oracle(double c_total, const std::vector<double>& w, double c_max) {
  const std::size_t n = w.size();
  std::vector<char> capped(n, 0);
  std::vector<long double> c(n, 0.0L);
  for (;;) {
    long double rest = c_total, wsum = 0.0L;
    std::size_t free = 0;
    for (std::size_t h = 0; h < n; ++h) {
      if (capped[h]) {
        rest -= c_max;
      } else {
        wsum += w[h];
        ++free;
      }
    }
    for (std::size_t h = 0; h < n; ++h) {
      if (capped[h]) c[h] = c_max;
      else c[h] = wsum > 0 ? rest * w[h] / wsum : rest / static_cast<long double>(free);
    }
    bool grew = false;
    for (std::size_t h = 0; h < n; ++h) {
      if (!capped[h] && c[h] > c_max) {
        capped[h] = 1;
        grew = true;
      }
    }
    if (!grew) return c;
  }
}

Outcome criterion_budget() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<std::size_t> heads(1, 32), cap(1, 64);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  std::size_t capped_instances = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = heads(rng), c_max = cap(rng);
    std::vector<double> w(n);
    for (double& x : w) x = 1e-3 + std::pow(u(rng), 4.0);
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& x : w) x /= s;
    const std::size_t c_total = std::uniform_int_distribution<std::size_t>(0, n * c_max)(rng);
    const auto a = budget::waterfill(c_total, w, c_max);
    if (std::accumulate(a.final.begin(), a.final.end(), std::size_t{0}) != c_total) o.fail("sum != C_total");
    for (std::size_t c : a.final)
      if (c > c_max) o.fail("head above C_max");
    const auto ref = iterate_oracle(static_cast<double>(c_total), w, static_cast<double>(c_max));
    for (std::size_t h = 0; h < n; ++h)
      worst = std::max(worst, static_cast<double>(std::abs(static_cast<long double>(a.capped_real[h]) - ref[h])));
    if (a.rounds > 0) ++capped_instances;
  }
  if (worst > 1e-9) o.fail("fixed point off by " + num(worst));
  const double secs = seconds_since(t0);
  if (secs >= 5.0) o.fail("took " + num(secs) + " s");
  if (o.pass) {
    o.detail = "2000 instances (" + std::to_string(capped_instances) + " with capping), max dev " + num(worst, 3) +
               ", " + num(secs, 2) + " s";
  }
  return o;
}

Outcome criterion_waterfill_examples() {
  Outcome o;
  const auto a = budget::waterfill(100, std::vector<double>{0.7, 0.1, 0.1, 0.1}, 40);
  const auto b = budget::waterfill(100, std::vector<double>{0.6, 0.3, 0.05, 0.05}, 35);
  if (a.final != std::vector<std::size_t>{40, 20, 20, 20}) o.fail("first example");
  if (b.final != std::vector<std::size_t>{35, 35, 15, 15}) o.fail("second example");
  if (b.rounds != 2) o.fail("second example took " + std::to_string(b.rounds) + " rounds");
  if (o.pass) o.detail = "[40,20,20,20] and [35,35,15,15] in 2 rounds";
  return o;
}

// ---------------------------------------------------------------------------
// 3: masked attention

Tensor random_tensor(std::mt19937_64& rng, std::size_t r, std::size_t c) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(r, c);
  for (double& v : t.data()) v = u(rng);
  return t;
}

// softmax(Q K^T / sqrt(d)) V with -inf logits where keep is false.
Tensor dense_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<char>& keep) {
  const std::size_t s = q.rows();
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor p = Tensor::zeros(s, s);
  for (std::size_t r = 0; r < s; ++r) {
    std::vector<double> logit(s);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < s; ++c) {
      double dot = 0.0;
      for (std::size_t j = 0; j < q.cols(); ++j) dot += q(r, j) * k(c, j);
      logit[c] = keep[r * s + c] ? dot * inv : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, logit[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < s; ++c) z += p(r, c) = std::exp(logit[c] - mx);
    for (std::size_t c = 0; c < s; ++c) p(r, c) /= z;
  }
  return kernels::matmul(p, v);
}

double max_prediction_diff(const toy::Prediction& a, const toy::Prediction& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.cameras.size(); ++i)
    d = std::max(d, (a.cameras.translations[i] - b.cameras.translations[i]).cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < a.cloud.size(); ++i)
    d = std::max(d, (a.cloud.points[i] - b.cloud.points[i]).cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < a.cloud.confidence.size(); ++i)
    d = std::max(d, std::abs(a.cloud.confidence[i] - b.cloud.confidence[i]));
  return d;
}

Outcome criterion_masked_attention() {
  Outcome o;
  const toy::ModelConfig cfg;
  double worst_full = 0.0;
  for (std::uint64_t i = 0; i < 20; ++i) {
    const auto model = toy::init_model(cfg, 3000 + i);
    const auto scene = toy::generate_scene(4000 + i, cfg.n_views, cfg.tokens_per_view, cfg.dim);
    const auto dense = pipeline::run_dense(model, scene);
    const auto sparse = pipeline::run_sparse(model, scene, nullptr, {1.0, 0.0});
    if (sparse.sparsity != 0.0) o.fail("full budget masked something");
    worst_full = std::max(worst_full, max_prediction_diff(dense.prediction, sparse.prediction));
  }
  if (worst_full > 1e-6) o.fail("full budget differs from dense by " + num(worst_full));

  std::mt19937_64 rng(3001);
  double worst_one = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t b = 3, s = 12, nb = 4;
    const Tensor q = random_tensor(rng, s, 4), k = random_tensor(rng, s, 4), v = random_tensor(rng, s, 3);
    std::vector<double> w(nb * nb);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (double& x : w) x = u(rng);
    const std::size_t drop = static_cast<std::size_t>(trial) % (nb * nb);
    w[drop] = 0.01;  // unique minimum
    Tensor probs({nb, nb}, w);
    for (std::size_t r = 0; r < nb; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < nb; ++c) sum += probs(r, c);
      for (std::size_t c = 0; c < nb; ++c) probs(r, c) /= sum;
    }
    const auto sel = attn::select_top_c(attn::ApproxAttentionMap::from_probs(probs, static_cast<long long>(b)),
                                        nb * nb - 1);
    std::vector<char> keep(s * s, 1);
    for (std::size_t r = 0; r < s; ++r)
      for (std::size_t c = 0; c < s; ++c)
        if ((r / b) * nb + c / b == drop) keep[r * s + c] = 0;
    Tape t;
    const Tensor got =
        attn::masked_attention(t.constant(q), t.constant(k), t.constant(v), sel, b, {}).value();
    worst_one = std::max(worst_one, kernels::max_abs_diff(got, dense_oracle(q, k, v, keep)));
    // The dropped block has to matter, or the comparison proves nothing.
    if (kernels::max_abs_diff(got, dense_oracle(q, k, v, std::vector<char>(s * s, 1))) < 1e-6)
      o.fail("dropping a block had no effect");
  }
  if (worst_one > 1e-10) o.fail("one inactive block differs from -inf oracle by " + num(worst_one));
  if (o.pass) {
    o.detail = "20 model/scene pairs max diff " + num(worst_full, 3) + "; single-block oracle " + num(worst_one, 3);
  }
  return o;
}

// ---------------------------------------------------------------------------
// 4: block selection

std::vector<char> oracle_select(const Tensor& probs, double tau, double rho) {
  const std::size_t n = probs.size();
  std::vector<std::pair<double, std::size_t>> v;
  for (std::size_t i = 0; i < n; ++i) v.emplace_back(-probs[i], i);
  std::sort(v.begin(), v.end());
  long double total = 0;
  for (const auto& e : v) total -= e.first;
  std::size_t m = 0;
  long double cum = 0;
  while (m < n && cum < tau * total) cum -= v[m++].first;
  const auto floor_count =
      static_cast<std::size_t>(std::floor(static_cast<long double>(n) * (1.0L - rho) + 1e-9L));
  m = std::min(n, std::max(m, floor_count));
  std::vector<char> out(n, 0);
  for (std::size_t i = 0; i < m; ++i) out[v[i].second] = 1;
  return out;
}

Outcome criterion_selection() {
  Outcome o;
  std::mt19937_64 rng(4001);
  std::uniform_int_distribution<std::size_t> side(1, 8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> level(1, 3), rho_steps(0, 10);
  std::size_t tie_trials = 0;
  for (int trial = 0; trial < 1000 && o.pass; ++trial) {
    const std::size_t r = side(rng), c = side(rng);
    const bool ties = trial % 2 == 0;
    tie_trials += ties;
    Tensor p = Tensor::zeros(r, c);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += p(i, j) = ties ? level(rng) : u(rng);
      for (std::size_t j = 0; j < c; ++j) p(i, j) /= s;
    }
    const auto map = attn::ApproxAttentionMap::from_probs(p, 1);
    const double tau = trial % 10 == 0 ? 1.0 : u(rng);
    const double rho = rho_steps(rng) / 10.0;
    if (attn::select_blocks(map, tau, rho).mask() != oracle_select(p, tau, rho))
      o.fail("select_blocks disagrees in trial " + std::to_string(trial));
    const std::size_t cnt = std::uniform_int_distribution<std::size_t>(0, r * c)(rng);
    const auto top = attn::select_top_c(map, cnt);
    if (top.active_count() != cnt ||
        top.mask() != oracle_select(p, 0.0, 1.0 - static_cast<double>(cnt) / static_cast<double>(r * c)))
      o.fail("select_top_c disagrees in trial " + std::to_string(trial));
  }
  if (o.pass) o.detail = "1000 maps, B <= 64, " + std::to_string(tie_trials) + " with exact ties";
  return o;
}

// ---------------------------------------------------------------------------
// 5: gradients of the two errors with respect to W_Q

Outcome criterion_gradients(const toy::ToyModel& trained, const std::vector<toy::SyntheticScene>& scenes,
                            const RunConfig& rc) {
  Outcome o;
  toy::ToyModel model = trained;
  const auto& cfg = model.config;
  std::mt19937_64 rng(5001);
  double worst = 0.0;
  std::size_t entries = 0, scenes_used = 0;
  bool h_zero = true;
  for (const auto& scene : scenes) {
    if (scenes_used == 2) break;
    const auto h = sens::dense_alignment(model, scene, rc.conf_cutoff);
    auto error = [&](const toy::ForwardOutput& f, Var hv, int kind) {
      return kind == 0 ? geom::camera_pose_error(f.camera_translations, scene.gt_cameras, hv)
                       : geom::point_cloud_error(f.points, f.confidence, scene.gt_cloud, hv, rc.eps, rc.conf_cutoff);
    };
    try {
      for (int kind = 0; kind < 2; ++kind) {
        Tape tape;
        auto pv = toy::bind(model.params, tape, toy::GradTarget::kQuery);
        const auto f = toy::forward(cfg, pv, scene, tape);
        Var hv = tape.leaf(h.affine());
        tape.backward(error(f, hv, kind));
        for (double g : hv.grad().data()) h_zero = h_zero && g == 0.0;
        auto value = [&] {
          Tape t;
          auto p = toy::bind(model.params, t, toy::GradTarget::kNone);
          const auto fo = toy::forward(cfg, p, scene, t);
          return error(fo, t.constant(h.affine()), kind).value().item();
        };
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
          for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            Tensor& wq = model.params.layers[l].heads[hd].w_q;
            const Tensor analytic = pv.layers[l].heads[hd].w_q.grad();
            std::uniform_int_distribution<std::size_t> pick(0, wq.size() - 1);
            for (int e = 0; e < 10; ++e) {
              const std::size_t i = pick(rng);
              const double orig = wq[i];
              wq[i] = orig + 1e-5;
              const double up = value();
              wq[i] = orig - 1e-5;
              const double down = value();
              wq[i] = orig;
              worst = std::max(worst, gradcheck::rel_err(analytic[i], (up - down) / 2e-5));
              ++entries;
            }
          }
        }
      }
      ++scenes_used;
    } catch (const SampleSkip&) {
      continue;  // no inliers for this scene; try the next one
    }
  }
  if (scenes_used == 0) o.fail("no scene with inliers");
  if (!h_zero) o.fail("alignment transform received a gradient");
  if (worst >= 1e-3) o.fail("max relative error " + num(worst));
  if (o.pass) {
    o.detail = std::to_string(entries) + " W_Q entries (e_cam and e_pc, " + std::to_string(scenes_used) +
               " scenes), max rel err " + num(worst, 3) + ", H gradient 0";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 6: FIM trace

Outcome criterion_fim(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& scenes,
                      const sens::HessTable& table, const RunConfig& rc) {
  Outcome o;
  std::mt19937_64 rng(6001);
  double worst = 0.0;
  auto explicit_trace = [](const std::vector<Tensor>& grads) {
    const auto p = static_cast<Eigen::Index>(grads.front().size());
    Eigen::MatrixXd fim = Eigen::MatrixXd::Zero(p, p);
    for (const auto& g : grads) {
      Eigen::Map<const Eigen::VectorXd> v(g.data().data(), p);
      fim += v * v.transpose();
    }
    return fim.trace() / static_cast<double>(grads.size());
  };
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t r = 1 + trial % 4, c = 1 + trial % 5, n = 1 + trial % 9;
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < n; ++i) g.push_back(random_tensor(rng, r, c));
    worst = std::max(worst, std::abs(sens::fim_trace(g) - explicit_trace(g)));
  }
  // Real per-sample W_Q gradients of one head.
  std::vector<Tensor> real;
  for (std::size_t i = 0; i < 4 && i < scenes.size(); ++i) {
    try {
      real.push_back(sens::per_sample_head_grads(model, scenes[i], sens::ErrorKind::kCam,
                                                 rc.calibration_options())[0][0]);
    } catch (const SampleSkip&) {
    }
  }
  if (!real.empty()) {
    const double ref = explicit_trace(real);
    worst = std::max(worst, std::abs(sens::fim_trace(real) - ref) / std::max(1.0, ref));
  }
  if (worst > 1e-12) o.fail("trace differs from explicit FIM by " + num(worst));

  double sum_dev = 0.0;
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    const auto t = sens::with_lambda(table, lambda);
    for (std::size_t l = 0; l < t.num_layers(); ++l) {
      for (const auto& col : {t.hess(l), t.hess_cam(l), t.hess_pc(l)}) {
        sum_dev = std::max(sum_dev, std::abs(std::accumulate(col.begin(), col.end(), 0.0) - 1.0));
      }
    }
  }
  if (sum_dev > 1e-9) o.fail("layer sums off by " + num(sum_dev));
  if (o.pass) o.detail = "trace dev " + num(worst, 3) + ", layer-sum dev " + num(sum_dev, 3) + " over 5 lambdas";
  return o;
}

// ---------------------------------------------------------------------------
// 7: alignment

Outcome criterion_alignment() {
  Outcome o;
  std::mt19937_64 rng(7001);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> scale(0.5, 3.0);
  auto rotation = [&] {
    Eigen::Quaterniond q(n01(rng), n01(rng), n01(rng), n01(rng));
    return geom::Mat3(q.normalized().toRotationMatrix());
  };
  auto points = [&](std::size_t n) {
    std::vector<geom::Vec3> p;
    for (std::size_t i = 0; i < n; ++i) p.emplace_back(n01(rng), n01(rng), n01(rng));
    return p;
  };
  auto moved = [](const geom::SimilarityTransform& h, const std::vector<geom::Vec3>& p) {
    std::vector<geom::Vec3> out;
    for (const auto& x : p) out.push_back(h.apply(x));
    return out;
  };
  auto distance = [](const geom::SimilarityTransform& a, const geom::SimilarityTransform& b) {
    return std::max({std::abs(a.scale - b.scale), (a.rotation - b.rotation).cwiseAbs().maxCoeff(),
                     (a.translation - b.translation).cwiseAbs().maxCoeff()});
  };

  double umeyama_err = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    geom::SimilarityTransform truth;
    truth.scale = scale(rng);
    truth.rotation = rotation();
    truth.translation = geom::Vec3(n01(rng), n01(rng), n01(rng)) * 3.0;
    const auto src = points(5 + trial % 20);
    umeyama_err = std::max(umeyama_err, distance(geom::umeyama(src, moved(truth, src)), truth));
  }
  if (umeyama_err > 1e-9) o.fail("Umeyama error " + num(umeyama_err));

  double icp_err = 0.0;
  std::size_t icp_iters = 0;
  for (int trial = 0; trial < 20; ++trial) {
    geom::SimilarityTransform truth;
    truth.scale = scale(rng);
    truth.rotation = rotation();
    truth.translation = geom::Vec3(n01(rng), n01(rng), n01(rng));
    const auto src = points(40);
    const auto dst = moved(truth, src);
    geom::SimilarityTransform init = truth;
    const geom::Vec3 axis = geom::Vec3(n01(rng), n01(rng), n01(rng)).normalized();
    init.rotation = Eigen::AngleAxisd(10.0 * M_PI / 180.0, axis).toRotationMatrix() * truth.rotation;
    const auto r = geom::icp_refine(src, dst, init, 20, 1e-15, /*keep_scale=*/false);
    icp_err = std::max(icp_err, distance(r.transform, truth));
    icp_iters = std::max(icp_iters, r.iterations);
  }
  if (icp_err > 1e-6) o.fail("ICP error " + num(icp_err));
  if (icp_iters > 20) o.fail("ICP took " + std::to_string(icp_iters) + " iterations");

  std::size_t increases = 0;
  for (int trial = 0; trial < 100; ++trial) {
    geom::SimilarityTransform truth;
    truth.scale = scale(rng);
    truth.rotation = Eigen::AngleAxisd(0.4, rotation().col(0)).toRotationMatrix();
    truth.translation = geom::Vec3(n01(rng), n01(rng), n01(rng)) * 0.3;
    const auto src = points(30);
    auto dst = moved(truth, src);
    for (auto& p : dst) p += geom::Vec3(n01(rng), n01(rng), n01(rng)) * 0.05;
    const auto r = geom::icp_refine(src, dst, geom::SimilarityTransform{}, 20, 1e-12, trial % 2 == 1);
    for (std::size_t i = 1; i < r.objective.size(); ++i) increases += r.objective[i] > r.objective[i - 1];
  }
  if (increases) o.fail(std::to_string(increases) + " ICP objective increases");
  if (o.pass) {
    o.detail = "Umeyama err " + num(umeyama_err, 3) + "; ICP from 10 deg err " + num(icp_err, 3) + " in <= " +
               std::to_string(icp_iters) + " iters; 100 monotone runs";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 8: ordering of the three modes on the trained model

std::vector<double> seed_errors(const toy::ToyModel& model, const sens::HessTable& table, pipeline::Mode mode,
                                pipeline::SparseConfig cfg, const RunConfig& rc,
                                const std::vector<std::uint64_t>& seeds) {
  std::vector<double> out;
  for (const auto& r : pipeline::per_seed(model, table, mode, cfg, seeds, rc.scenes_per_seed, rc.run_options()))
    out.push_back(r.agg.e_cam);
  return out;
}

Outcome criterion_direction(const toy::ToyModel& model, const sens::HessTable& table, const RunConfig& rc,
                            double setup_seconds, bool trained_here) {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<std::uint64_t> seeds(rc.eval_seeds);
  std::iota(seeds.begin(), seeds.end(), rc.seed);
  const auto top = pipeline::highest_sparsity(rc.grid);
  const double hess = pipeline::median(seed_errors(model, table, pipeline::Mode::kHess, top, rc, seeds));
  const double uniform = pipeline::median(seed_errors(model, table, pipeline::Mode::kUniform, top, rc, seeds));
  const double reverse = pipeline::median(seed_errors(model, table, pipeline::Mode::kReverse, top, rc, seeds));
  const double dense = pipeline::median(seed_errors(model, table, pipeline::Mode::kHess, {1.0, 0.0}, rc, seeds));
  const double secs = seconds_since(t0) + setup_seconds;

  std::printf("      median e_cam over %zu seeds at tau %s rho %s: hess %.4f  uniform %.4f  reverse %.4f;"
              " hess at sparsity 0: %.4f\n",
              seeds.size(), num(top.tau).c_str(), num(top.rho).c_str(), hess, uniform, reverse, dense);
  if (!(hess <= uniform)) o.fail("hess " + num(hess) + " > uniform " + num(uniform));
  if (!(uniform <= reverse)) o.fail("uniform " + num(uniform) + " > reverse " + num(reverse));
  if (!(dense <= hess)) o.fail("sparsity 0 " + num(dense) + " > max sparsity " + num(hess));
  if (trained_here && secs >= 600.0) o.fail("took " + num(secs) + " s");
  if (o.pass) {
    o.detail = "hess " + num(hess) + " <= uniform " + num(uniform) + " <= reverse " + num(reverse) + ", " +
               num(secs, 3) + " s";
  }
  return o;
}

// ---------------------------------------------------------------------------
// 9: lambda boundaries

Outcome criterion_lambda(const toy::ToyModel& model, const sens::HessTable& table, const RunConfig& rc) {
  Outcome o;
  const auto scenes = pipeline::eval_scenes(model.config, rc.seed, 4);
  const auto cfg = pipeline::highest_sparsity(rc.grid);
  const auto rows = pipeline::ablate_lambda(model, scenes, table, {0.0, 1.0}, cfg, rc.run_options());
  const auto pc_table = sens::combine(table.pc_scores(), table.pc_scores(), table.lambda(), table.meta());
  const auto cam_table = sens::combine(table.cam_scores(), table.cam_scores(), table.lambda(), table.meta());
  const auto pc = pipeline::run_scenes(model, scenes, &pc_table, cfg, rc.run_options());
  const auto cam = pipeline::run_scenes(model, scenes, &cam_table, cfg, rc.run_options());
  auto same = [](const pipeline::LambdaRow& r, const pipeline::Aggregate& a) {
    return bits_equal(r.sparsity, a.sparsity) && bits_equal(r.e_cam, a.e_cam) && bits_equal(r.e_pc, a.e_pc);
  };
  if (!same(rows[0], pc)) o.fail("lambda 0 differs from the pc-only table");
  if (!same(rows[1], cam)) o.fail("lambda 1 differs from the cam-only table");
  if (o.pass) o.detail = "lambda 0 and 1 rows bitwise equal to pc-only and cam-only runs";
  return o;
}

// ---------------------------------------------------------------------------
// 10: determinism and round trips

Outcome criterion_determinism(const toy::ToyModel& model, const std::vector<toy::SyntheticScene>& calib,
                              const sens::HessTable& table, const RunConfig& rc) {
  Outcome o;
  const auto tmp = std::filesystem::temp_directory_path() / ("hess_acceptance_" + std::to_string(::getpid()));
  std::filesystem::create_directories(tmp);

  const auto again = sens::calibrate(model, calib, rc.calibration_options());
  const std::string json_a = sens::to_json(table).dump(2), json_b = sens::to_json(again).dump(2);
  if (json_a != json_b) o.fail("calibration not byte-identical");

  std::vector<toy::SyntheticScene> scenes;
  for (std::uint64_t s = rc.seed; s < rc.seed + 2; ++s) {
    auto part = pipeline::eval_scenes(model.config, s, rc.scenes_per_seed);
    scenes.insert(scenes.end(), part.begin(), part.end());
  }
  auto sweep_csv = [&] {
    std::ostringstream out;
    report::write_sweep_csv(out, pipeline::sweep(model, scenes, table, rc.grid, pipeline::all_modes(), rc.seed,
                                                 rc.run_options()));
    return out.str();
  };
  const std::string csv = sweep_csv();
  if (csv != sweep_csv()) o.fail("sweep CSV not byte-identical");

  // Short training runs from the same seed.
  auto short_run = [&] {
    auto m = toy::init_model(model.config, rc.seed);
    auto opt = rc.train_options();
    opt.steps = 3;
    toy::train_toy_stream(m, opt);
    return toy::fingerprint(m);
  };
  if (short_run() != short_run()) o.fail("training not deterministic");

  // Everything written reloads and validates.
  const std::string table_path = (tmp / "scores.json").string(), model_path = (tmp / "model.bin").string();
  sens::save(table, table_path);
  const auto t2 = sens::load(table_path, toy::fingerprint(model));
  t2.validate();
  if (!(t2 == table)) o.fail("score table changed on reload");
  toy::save_model(model, model_path);
  if (toy::fingerprint(toy::load_model(model_path)) != toy::fingerprint(model)) o.fail("model changed on reload");
  std::istringstream csv_in(csv);
  if (report::read_sweep_csv(csv_in).size() != rc.grid.size() * 3) o.fail("sweep CSV reload");
  const auto run = pipeline::run_sparse(model, scenes.front(), &table, pipeline::highest_sparsity(rc.grid),
                                        rc.run_options());
  std::stringstream alloc;
  report::write_allocation_csv(alloc, run.allocations, &table);
  if (report::read_allocation_csv(alloc).size() != model.config.n_layers * model.config.n_heads)
    o.fail("allocation CSV reload");
  std::stringstream cloud;
  geom::write_point_cloud(cloud, run.prediction.cloud);
  const auto back = geom::read_point_cloud(cloud);
  if (back.points != run.prediction.cloud.points || back.confidence != run.prediction.cloud.confidence)
    o.fail("point cloud changed on reload");
  std::filesystem::remove_all(tmp);
  if (o.pass) o.detail = "calibration, sweep CSV and training repeat byte for byte; all artifacts reload";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::string model_path;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--model") == 0 && i + 1 < argc) {
      model_path = argv[++i];
    } else {
      std::fprintf(stderr, "usage: %s [--model PATH]\n", argv[0]);
      return 1;
    }
  }
  Log::set_sink([](const std::string&) {});

  try {
    print(1, "budget conservation and capping", criterion_budget());
    print(2, "water-filling worked examples", criterion_waterfill_examples());
    print(3, "masked attention exactness", criterion_masked_attention());
    print(4, "block selection oracle", criterion_selection());

    const RunConfig rc;
    const auto t0 = Clock::now();
    toy::ToyModel model;
    const bool train_here = model_path.empty();
    if (train_here) {
      std::printf("      training toy model: %zu steps, seed %llu\n", rc.train_steps,
                  static_cast<unsigned long long>(rc.seed));
      std::fflush(stdout);
      model = toy::init_model(rc.model, rc.seed);
      const auto res = toy::train_toy_stream(model, rc.train_options());
      std::printf("      loss %.4f -> %.4f in %.0f s\n", res.initial_loss, res.final_loss, seconds_since(t0));
    } else {
      model = toy::load_model(model_path);
      std::printf("      loaded %s (%zu training steps recorded)\n", model_path.c_str(), model.loss_history.size());
    }
    const auto calib = toy::generate_scenes(rc.seed, /*stream=*/2, rc.calib_scenes, model.config);
    const auto table = sens::calibrate(model, calib, rc.calibration_options());
    const double setup = seconds_since(t0);

    print(5, "gradient fidelity", criterion_gradients(model, calib, rc));
    print(6, "FIM trace identity", criterion_fim(model, calib, table, rc));
    print(7, "transform recovery", criterion_alignment());
    print(8, "mode ordering on trained model", criterion_direction(model, table, rc, setup, train_here));
    print(9, "lambda boundary consistency", criterion_lambda(model, table, rc));
    print(10, "determinism and round trips", criterion_determinism(model, calib, table, rc));
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance run aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d of 10 criteria failed\n", failures);
  return failures ? 2 : 0;
}
