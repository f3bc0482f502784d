#include "metaite/cli/commands.hpp"
#include "metaite/cli/config.hpp"
#include "metaite/eval/experiment.hpp"
#include "metaite/eval/metrics.hpp"
#include "metaite/io.hpp"
#include "metaite/meta_engine.hpp"
#include "metaite/numkit/kernel.hpp"
#include "oracles.hpp"
#include "param_flat.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

using namespace metaite;
using metaite::testing::fd_gradient;
using metaite::testing::flat_values;
using metaite::testing::from_flat;
using metaite::testing::random_matrix;
using metaite::testing::relative_error;
namespace fs = std::filesystem;

namespace {

struct Budget {
  long twins_iters = 2000;
  long news_iters = 1200;
  long robustness_iters = 500;
  int seeds = 10;
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* pattern, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

double loss_value(TaskKind kind, const ParamSet& p, const Matrix& x, const Vector& y) {
  ad::Tape t;
  const ParamVars v = attach(t, p);
  return loss_from_output(kind, t.constant(Matrix(y)), head_output(v.head, extract(v.extractor, t.constant(x)))).scalar();
}

std::vector<Matrix> values_of(const std::vector<ad::Var>& g) {
  std::vector<Matrix> out;
  for (const auto& v : g) out.push_back(v.value());
  return out;
}

ObservationalDataset toy_observational(Index n, Index p, TaskKind kind, RngStream& rng) {
  ObservationalDataset d;
  d.k = 2;
  d.kind = kind;
  d.x = random_matrix(rng, n, p);
  d.y_factual = Vector(n);
  for (Index i = 0; i < n; ++i) {
    d.t.push_back(static_cast<int>(i % 2));
    const double m = d.x(i, 0) - 0.5 * d.x(i, p - 1) + 0.3 * d.t.back();
    d.y_factual(i) = kind == TaskKind::classification ? (m + 0.3 * rng.normal() > 0.0 ? 1.0 : 0.0) : m;
  }
  return d;
}

Outcome gradient_correctness() {
  const auto start = std::chrono::steady_clock::now();
  double worst_loss = 0.0, worst_meta = 0.0;
  RngStream rng(101);
  for (TaskKind kind : {TaskKind::classification, TaskKind::regression}) {
    MetaConfig c;
    c.extractor = {8};
    c.head = {8, 8};
    c.alpha = 0.1;
    c.per_task_k = 6;
    c.weight_decay = 0.05;
    const ObservationalDataset d = toy_observational(80, 4, kind, rng);
    const ParamSet p = init_params(c.architecture(4), rng);
    std::vector<EpisodeBatch> eps;
    for (int e = 0; e < 2; ++e) eps.push_back(sample_episode(d, 1, c.per_task_k, rng));
    const Matrix& xs = eps[0].support_x;
    const Vector& ys = eps[0].support_y;
    const Matrix& xq = eps[0].query_x;

    auto check = [&](const std::function<ad::Var(ad::Tape&, const ParamVars&)>& build,
                     const std::function<double(const ParamSet&)>& value, double& worst) {
      ad::Tape t;
      const ParamVars v = attach(t, p);
      const auto analytic = values_of(t.grad(build(t, v), v.flatten()));
      const auto fd =
          fd_gradient([&](const std::vector<Matrix>& at) { return value(from_flat(p, at)); }, flat_values(p));
      worst = std::max(worst, relative_error(analytic, fd));
    };

    check(
        [&](ad::Tape& t, const ParamVars& v) {
          return loss_from_output(kind, t.constant(Matrix(ys)), head_output(v.head, extract(v.extractor, t.constant(xs))));
        },
        [&](const ParamSet& q) { return loss_value(kind, q, xs, ys); }, worst_loss);
    check([&](ad::Tape&, const ParamVars& v) { return l2_penalty(v, c.weight_decay); },
          [&](const ParamSet& q) { return l2_penalty(q, c.weight_decay); }, worst_loss);
    const double bw = median_bandwidth(extract(p.extractor, xs), extract(p.extractor, xq));
    check(
        [&](ad::Tape& t, const ParamVars& v) {
          return ad::mmd2(extract(v.extractor, t.constant(xs)), extract(v.extractor, t.constant(xq)), bw);
        },
        [&](const ParamSet& q) { return mmd2(extract(q.extractor, xs), extract(q.extractor, xq), bw); }, worst_loss);

    for (int steps : {1, 2}) {
      MetaConfig m = c;
      m.inner_steps = steps;
      m.mu = 1.0;
      m.epsilon = 0.5;
      m.gamma = 1.0;
      std::vector<double> bws;
      for (const auto& e : eps) bws.push_back(median_bandwidth(extract(p.extractor, e.support_x), extract(p.extractor, e.query_x)));
      check([&](ad::Tape& t, const ParamVars& v) { return meta_objective(t, v, eps, kind, m).objective; },
            [&](const ParamSet& q) {
              double query = 0.0, support = 0.0, disc = 0.0;
              for (std::size_t e = 0; e < eps.size(); ++e) {
                const ParamSet adapted = inner_adapt(q, eps[e].support_x, eps[e].support_y, kind, m);
                query += loss_value(kind, adapted, eps[e].query_x, eps[e].query_y);
                support += loss_value(kind, q, eps[e].support_x, eps[e].support_y);
                disc += mmd2(extract(q.extractor, eps[e].support_x), extract(q.extractor, eps[e].query_x), bws[e]);
              }
              const double n = static_cast<double>(eps.size());
              return m.mu * query / n + m.epsilon * support / n + m.gamma * disc / n + l2_penalty(q, m.weight_decay);
            },
            worst_meta);
    }
  }
  const double elapsed = seconds_since(start);
  return {worst_loss < 1e-4 && worst_meta < 1e-3 && elapsed < 60.0,
          fmt("worst loss-gradient rel err %.2e (< 1e-4), worst meta-gradient rel err %.2e (< 1e-3), %.1f s (< 60 s)",
              worst_loss, worst_meta, elapsed)};
}

Outcome mmd_oracle() {
  const auto start = std::chrono::steady_clock::now();
  RngStream rng(202);
  double worst = 0.0, worst_zero = 0.0, worst_sym = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Index n = 1 + static_cast<Index>(rng.index(64));
    const Index m = 1 + static_cast<Index>(rng.index(64));
    const Index dim = 1 + static_cast<Index>(rng.index(16));
    const Matrix a = random_matrix(rng, n, dim);
    const Matrix b = (random_matrix(rng, m, dim).array() + rng.normal()).matrix();
    const double bw = median_bandwidth(a, b);
    worst = std::max(worst, std::abs(mmd2(a, b, bw) - metaite::testing::naive_mmd2(a, b, bw)));
    worst_zero = std::max(worst_zero, std::abs(mmd2(a, a, bw)));
    worst_sym = std::max(worst_sym, std::abs(mmd2(a, b, bw) - mmd2(b, a, bw)));
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-10 && worst_zero < 1e-12 && worst_sym < 1e-12 && elapsed < 10.0,
          fmt("max |vectorized - double loop| %.2e (< 1e-10), max |mmd2(Z,Z)| %.2e, max asymmetry %.2e, %.2f s", worst,
              worst_zero, worst_sym, elapsed)};
}

Outcome metric_oracles() {
  RngStream rng(303);
  double worst = 0.0;
  bool exact_shift = true;
  double worst_shift = 0.0;
  for (int draw = 0; draw < 100; ++draw) {
    const Index n = 1 + static_cast<Index>(rng.index(1000));
    const Matrix y = random_matrix(rng, n, 2), yh = random_matrix(rng, n, 2);
    const Matrix y4 = random_matrix(rng, n, 4), yh4 = random_matrix(rng, n, 4);
    worst = std::max({worst, std::abs(sqrt_pehe(y, yh) - metaite::testing::naive_sqrt_pehe(y, yh)),
                      std::abs(ate_error(y, yh) - metaite::testing::naive_ate_error(y, yh)),
                      std::abs(rmse_multi(y4, yh4) - metaite::testing::naive_rmse(y4, yh4))});

    const double c = rng.normal(0.0, 10.0);
    const Matrix shifted = (yh.array() + c).matrix();
    worst_shift = std::max({worst_shift, std::abs(sqrt_pehe(y, shifted) - sqrt_pehe(y, yh)),
                            std::abs(ate_error(y, shifted) - ate_error(y, yh))});

    Matrix gy(n, 2), gyh(n, 2);
    for (Index i = 0; i < gy.size(); ++i) {
      gy.data()[i] = std::round(rng.normal(0.0, 64.0)) / 8.0;
      gyh.data()[i] = std::round(rng.normal(0.0, 64.0)) / 8.0;
    }
    const double dc = std::round(rng.normal(0.0, 64.0)) / 8.0;
    const Matrix gshift = (gyh.array() + dc).matrix();
    exact_shift = exact_shift && sqrt_pehe(gy, gshift) == sqrt_pehe(gy, gyh) && ate_error(gy, gshift) == ate_error(gy, gyh);
  }
  return {worst < 1e-12 && worst_shift < 1e-12 && exact_shift,
          fmt("max |metric - naive| %.2e (< 1e-12), max shift drift on reals %.2e, bitwise shift invariance on "
              "exactly representable outcomes: %s",
              worst, worst_shift, exact_shift ? "yes" : "no")};
}

Outcome sinusoid_sanity() {
  const auto start = std::chrono::steady_clock::now();
  MetaConfig c;
  c.extractor = {40};
  c.head = {40, 40};
  c.alpha = 1e-2;
  c.inner_steps = 4;
  c.per_task_k = 10;
  c.meta_batch = 5;
  c.mu = 1.0;
  c.epsilon = 0.0;
  c.gamma = 0.0;
  c.weight_decay = 0.0;
  const int k = c.per_task_k;
  auto draw_task = [&](RngStream& rng, EpisodeBatch& e) {
    const double amplitude = rng.uniform(0.1, 5.0), phase = rng.uniform(0.0, std::numbers::pi);
    auto fill = [&](Matrix& x, Vector& y) {
      x.resize(k, 1);
      y.resize(k);
      for (int i = 0; i < k; ++i) {
        x(i, 0) = rng.uniform(-5.0, 5.0);
        y(i) = amplitude * std::sin(x(i, 0) + phase);
      }
    };
    fill(e.support_x, e.support_y);
    fill(e.query_x, e.query_y);
    e.source_id = 0;
  };

  RngStream root(404);
  RngStream init = root.substream("init"), tasks = root.substream("tasks"), held = root.substream("heldout");
  ParamSet p = init_params(c.architecture(1), init);
  AdamState adam;
  std::vector<EpisodeBatch> batch(static_cast<std::size_t>(c.meta_batch));
  for (int it = 0; it < 2000; ++it) {
    for (auto& e : batch) draw_task(tasks, e);
    p = outer_step(p, batch, TaskKind::regression, c, adam).params;
  }
  int improved = 0;
  double pre_total = 0.0, post_total = 0.0;
  for (int t = 0; t < 100; ++t) {
    EpisodeBatch e;
    draw_task(held, e);
    const double pre = inference_loss(TaskKind::regression, e.support_y, predict(p, e.support_x, TaskKind::regression));
    const ParamSet adapted = inner_adapt(p, e.support_x, e.support_y, TaskKind::regression, c);
    const double post =
        inference_loss(TaskKind::regression, e.support_y, predict(adapted, e.support_x, TaskKind::regression));
    improved += post < pre;
    pre_total += pre;
    post_total += post;
  }
  const double elapsed = seconds_since(start);
  return {improved >= 90 && elapsed < 300.0,
          fmt("%d/100 held-out tasks improved (>= 90), mean support MSE %.3f -> %.3f, alpha %.0e, 2000 outer iters, "
              "%.1f s (< 300 s)",
              improved, pre_total / 100.0, post_total / 100.0, c.alpha, elapsed)};
}

RunPlan twins_plan(long iters) {
  RunPlan plan;
  plan.dataset.kind = DatasetKind::twins_bin;
  plan.dataset.n = 11400;
  plan.meta.max_iters = iters;
  return plan;
}

Outcome twins_reproduction(const Budget& budget) {
  const auto start = std::chrono::steady_clock::now();
  RunPlan plan = twins_plan(budget.twins_iters);
  plan.imbalance.keep_count = {-1, 80};
  RunPlan lr2 = plan;
  lr2.method.name = "ols_lr2";
  double meta_sum = 0.0, lr2_sum = 0.0;
  Index control = 0;
  for (int s = 0; s < budget.seeds; ++s) {
    const MetricsReport m = run_once(plan, static_cast<std::uint64_t>(s));
    const MetricsReport b = run_once(lr2, static_cast<std::uint64_t>(s));
    meta_sum += *m.sqrt_pehe;
    lr2_sum += *b.sqrt_pehe;
    control += m.train_group_sizes[0];
  }
  const double meta = meta_sum / budget.seeds, base = lr2_sum / budget.seeds;
  const double elapsed = seconds_since(start);
  return {meta <= base && meta >= 0.26 && meta <= 0.36 && elapsed < 1800.0,
          fmt("metaite sqrt_pehe %.4f vs ols_lr2 %.4f over %d seeds (band [0.26, 0.36]), mean control %.0f / treated 80, "
              "%ld iters, %.0f s (< 1800 s)",
              meta, base, budget.seeds, static_cast<double>(control) / budget.seeds, budget.twins_iters, elapsed)};
}

Outcome discrepancy_effect(const Budget& budget) {
  const auto start = std::chrono::steady_clock::now();
  RunPlan plan;
  plan.dataset.kind = DatasetKind::news;
  plan.dataset.k = 4;
  plan.meta.max_iters = budget.news_iters;
  const auto w = default_loss_weights(plan.dataset);
  plan.meta.mu = 1.0;
  plan.meta.epsilon = w[1];
  RunPlan off = plan;
  plan.meta.gamma = 1.0;
  off.meta.gamma = 0.0;
  int wins = 0;
  std::string pairs;
  for (int s = 0; s < budget.seeds; ++s) {
    const double on_mmd = *run_once(plan, static_cast<std::uint64_t>(s)).final_mmd2;
    const double off_mmd = *run_once(off, static_cast<std::uint64_t>(s)).final_mmd2;
    wins += on_mmd < off_mmd;
    pairs += fmt("%s%.4f/%.4f", s ? " " : "", on_mmd, off_mmd);
  }
  const int need = (8 * budget.seeds + 9) / 10;
  return {wins >= need, fmt("gamma=1 lower final MMD^2 in %d/%d seeds (>= %d), %ld iters, pairs on/off [%s], %.0f s", wins,
                            budget.seeds, need, budget.news_iters, pairs.c_str(), seconds_since(start))};
}

Outcome robustness_trend(const Budget& budget) {
  const auto start = std::chrono::steady_clock::now();
  RunPlan base = twins_plan(budget.robustness_iters);
  const std::vector<std::string> methods{"metaite", "ols_lr2"};
  const std::vector<double> fractions{1.0, 0.5, 0.2, 0.1, 0.05};
  const auto cells = robustness_cells(base, methods, fractions, budget.seeds);
  const auto outcomes = run_cells(cells, 1);
  std::map<std::pair<std::string, int>, std::map<double, double>> curve;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (!outcomes[i].report) return {false, "cell " + cells[i].id + " failed: " + outcomes[i].error};
    curve[{cells[i].plan.method.name, cells[i].repeat}][cells[i].fraction] = *outcomes[i].report->sqrt_pehe;
  }
  int good = 0;
  double worst_meta = 0.0, mean_lr2 = 0.0;
  for (int r = 0; r < budget.seeds; ++r) {
    const auto& m = curve[{"metaite", r}];
    const auto& b = curve[{"ols_lr2", r}];
    double meta_var = 0.0, lr2_deg = 0.0;
    for (double f : fractions) {
      meta_var = std::max(meta_var, std::abs(m.at(f) - m.at(1.0)) / m.at(1.0));
      lr2_deg = std::max(lr2_deg, (b.at(f) - b.at(1.0)) / b.at(1.0));
    }
    good += meta_var < 0.2 && lr2_deg > meta_var;
    worst_meta = std::max(worst_meta, meta_var);
    mean_lr2 += lr2_deg / budget.seeds;
  }
  const int need = (8 * budget.seeds + 9) / 10;
  return {good >= need,
          fmt("%d/%d seeds with metaite variation < 20%% and larger ols_lr2 degradation (>= %d); worst metaite variation "
              "%.1f%%, mean ols_lr2 degradation %.1f%%, ratios 1..20, %ld iters, %.0f s",
              good, budget.seeds, need, 100.0 * worst_meta, 100.0 * mean_lr2, budget.robustness_iters,
              seconds_since(start))};
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string body = read_file(e.path().string());
    if (e.path().filename() == "manifest.json") {
      auto j = nlohmann::json::parse(body);
      j.erase("started_at");
      j.erase("finished_at");
      body = j.dump();
    }
    files[fs::relative(e.path(), dir).string()] = body;
  }
  return files;
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "metaite_acceptance_determinism";
  nlohmann::json cfg = {{"seed", 7},
                        {"out_dir", dir.string()},
                        {"dataset", {{"kind", "news"}, {"n", 300}, {"topics", 12}}},
                        {"meta", {{"max_iters", 25}, {"extractor", {16}}, {"head", {16, 8}}}},
                        {"paths", {{"train", (dir / "train.csv").string()}, {"test", (dir / "test.csv").string()}}},
                        {"sweep", {{"methods", {"metaite", "ols_lr2", "knn"}}, {"fractions", {1.0, 0.2}}, {"repeats", 2}}}};
  const fs::path cfg_path = fs::temp_directory_path() / "metaite_acceptance_determinism.json";
  write_file_atomic(cfg_path.string(), cfg.dump(2));

  struct Step {
    std::string command;
    std::optional<std::string> mode;
  };
  const std::vector<Step> steps{{"gen-data", {}}, {"train", {}},           {"estimate", {}},
                                {"evaluate", {}}, {"sweep", "robustness"}, {"sweep", "repeat"}};
  auto pass = [&] {
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<std::map<std::string, std::string>> snaps;
    for (const auto& s : steps) {
      cli::CommandOptions o;
      o.config_path = cfg_path.string();
      o.mode = s.mode;
      std::ostringstream out, err;
      if (cli::run_command(s.command, o, out, err) != cli::kExitOk)
        throw std::runtime_error(s.command + " failed: " + err.str());
      snaps.push_back(snapshot(dir));
    }
    return snaps;
  };
  try {
    const auto first = pass(), second = pass();
    std::size_t compared = 0;
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (first[i] != second[i]) {
        std::string which;
        for (const auto& [name, body] : first[i]) {
          auto it = second[i].find(name);
          if (it == second[i].end() || it->second != body) which += " " + name;
        }
        return {false, "outputs differ after '" + steps[i].command + "':" + which};
      }
      compared += first[i].size();
    }
    return {true, fmt("%zu file snapshots byte-identical across two runs of gen-data, train, estimate, evaluate and "
                      "sweep (manifests compared without timestamps)",
                      compared)};
  } catch (const std::exception& e) {
    return {false, e.what()};
  }
}

Outcome default_fidelity() {
  const nlohmann::json expected = nlohmann::json::parse(R"({
    "meta_batch": 5, "per_task_k": 8, "inner_steps": 4,
    "extractor": [256, 128], "head": [128, 128, 64, 64],
    "alpha": 0.001, "beta": 0.001, "weight_decay": 0.05, "max_iters": 15000})");
  const nlohmann::json shipped = nlohmann::json::parse(cli::parse_config("{}").to_json())["meta"];
  std::string diff;
  for (const auto& [key, value] : expected.items())
    if (shipped.at(key) != value) diff += " " + key + "=" + shipped.at(key).dump();
  const MetaConfig plain;
  const bool struct_ok = plain.meta_batch == 5 && plain.per_task_k == 8 && plain.inner_steps == 4 &&
                         plain.extractor == std::vector<Index>{256, 128} &&
                         plain.head == std::vector<Index>{128, 128, 64, 64} && plain.alpha == 1e-3 &&
                         plain.beta == 1e-3 && plain.weight_decay == 0.05 && plain.max_iters == 15000;
  return {diff.empty() && struct_ok, diff.empty() ? "config snapshot matches: " + expected.dump()
                                                  : "mismatched keys:" + diff};
}

}  // namespace

int main(int argc, char** argv) {
  Budget budget;
  std::vector<std::string> wanted;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--full") {
      budget.twins_iters = budget.news_iters = budget.robustness_iters = 15000;
    } else {
      wanted.push_back(arg);
    }
  }
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"c1", [] { return gradient_correctness(); }},
      {"c2", [] { return mmd_oracle(); }},
      {"c3", [] { return metric_oracles(); }},
      {"c4", [] { return sinusoid_sanity(); }},
      {"c5", [&] { return twins_reproduction(budget); }},
      {"c6", [&] { return discrepancy_effect(budget); }},
      {"c7", [&] { return robustness_trend(budget); }},
      {"c8", [] { return determinism(); }},
      {"c9", [] { return default_fidelity(); }},
  };
  const std::map<std::string, std::string> titles{
      {"c1", "gradient correctness"}, {"c2", "mmd oracle equivalence"},   {"c3", "metric oracles"},
      {"c4", "meta-learning sanity"}, {"c5", "twins end-to-end"},         {"c6", "discrepancy-term effect"},
      {"c7", "robustness trend"},     {"c8", "determinism"},              {"c9", "default-config fidelity"}};
  int failures = 0, ran = 0;
  for (const auto& [id, fn] : criteria) {
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), id) == wanted.end()) continue;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s %s: %s\n", o.pass ? "PASS" : "FAIL", id.c_str(), titles.at(id).c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  if (ran == 0) {
    std::fprintf(stderr, "unknown criterion; expected c1..c9 or no argument\n");
    return 2;
  }
  return failures == 0 ? 0 : 1;
}
