#include "metaite/meta_engine.hpp"
#include "metaite/numkit/kernel.hpp"
#include "oracles.hpp"
#include "param_flat.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

using namespace metaite;
using metaite::testing::fd_gradient;
using metaite::testing::flat_values;
using metaite::testing::from_flat;
using metaite::testing::random_matrix;
using metaite::testing::relative_error;

namespace {

ObservationalDataset toy_data(Index n, int k, Index p, TaskKind kind, std::uint64_t seed) {
  RngStream rng(seed);
  ObservationalDataset d;
  d.k = k;
  d.kind = kind;
  d.x = random_matrix(rng, n, p);
  d.y_factual = Vector(n);
  d.y_all = Matrix(n, k);
  for (Index i = 0; i < n; ++i) {
    d.t.push_back(static_cast<int>(i % k));
    for (int t = 0; t < k; ++t) {
      const double mean = d.x(i, 0) + 0.5 * t * d.x(i, p - 1);
      (*d.y_all)(i, t) = kind == TaskKind::classification ? (mean > 0.0 ? 1.0 : 0.0) : mean;
    }
    d.y_factual(i) = (*d.y_all)(i, d.t.back());
  }
  return d;
}

MetaConfig tiny_config() {
  MetaConfig c;
  c.alpha = 0.1;
  c.beta = 1e-2;
  c.inner_steps = 2;
  c.per_task_k = 4;
  c.meta_batch = 2;
  c.extractor = {5};
  c.head = {5, 4};
  c.weight_decay = 0.01;
  return c;
}

std::vector<EpisodeBatch> episodes_for(const ObservationalDataset& d, int count, int k, std::uint64_t seed) {
  RngStream rng(seed);
  std::vector<EpisodeBatch> out;
  for (int i = 0; i < count; ++i) out.push_back(sample_episode(d, 1, k, rng));
  return out;
}

std::vector<Matrix> objective_gradient(const ParamSet& p, std::span<const EpisodeBatch> eps, TaskKind kind,
                                       const MetaConfig& c) {
  ad::Tape tape;
  const ParamVars v = attach(tape, p);
  const ObjectiveTerms terms = meta_objective(tape, v, eps, kind, c);
  std::vector<Matrix> out;
  for (const auto& g : tape.grad(terms.objective, v.flatten())) out.push_back(g.value());
  return out;
}

double objective_value(const ParamSet& p, std::span<const EpisodeBatch> eps, TaskKind kind, const MetaConfig& c) {
  ad::Tape tape;
  const ParamVars v = attach(tape, p);
  return meta_objective(tape, v, eps, kind, c).objective.scalar();
}

}  // namespace

TEST_CASE("config validation") {
  MetaConfig c;
  CHECK_NOTHROW(c.validate());
  c.alpha = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MetaConfig{};
  c.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MetaConfig{};
  c.head = {64, 1};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = MetaConfig{};
  c.inner_steps = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("episode sampling") {
  const ObservationalDataset d = toy_data(40, 2, 3, TaskKind::regression, 1);
  RngStream rng(2);
  for (int i = 0; i < 50; ++i) {
    const EpisodeBatch e = sample_episode(d, 1, 8, rng);
    CHECK(e.source_id == 0);
    CHECK(e.support_x.rows() == 8);
    CHECK(e.query_x.rows() == 8);
  }

  ObservationalDataset small = d.subset(std::vector<Index>{0, 1, 2, 3, 5});
  const EpisodeBatch e = sample_episode(small, 1, 8, rng);
  CHECK(e.query_x.rows() == 8);
  for (Index r = 0; r < 8; ++r) {
    bool from_target = false;
    for (Index i : std::vector<Index>{1, 3, 5}) from_target = from_target || d.x.row(i) == e.query_x.row(r);
    CHECK(from_target);
  }

  const std::vector<Index> rows{10, 11, 12, 13, 14, 15};
  const auto picked = draw_rows(rows, 6, rng);
  CHECK(std::set<Index>(picked.begin(), picked.end()).size() == 6);

  const ObservationalDataset four = toy_data(400, 4, 3, TaskKind::regression, 3);
  std::vector<int> counts(4, 0);
  const int draws = 3000;
  for (int i = 0; i < draws; ++i) ++counts[static_cast<std::size_t>(sample_episode(four, 3, 2, rng).source_id)];
  CHECK(counts[3] == 0);
  const double sd = std::sqrt(draws * (1.0 / 3.0) * (2.0 / 3.0));
  for (int s = 0; s < 3; ++s) CHECK(std::abs(counts[static_cast<std::size_t>(s)] - draws / 3.0) < 3.0 * sd);

  ObservationalDataset no_target = d.subset(std::vector<Index>{0, 2, 4});
  CHECK_THROWS_AS(sample_episode(no_target, 1, 4, rng), std::invalid_argument);
}

TEST_CASE("inner adaptation") {
  RngStream rng(4);
  ParamSet p = init_params(Architecture{1, {1}, {1}}, rng);
  p.extractor[0].weight(0, 0) = 1.0;
  p.extractor[0].bias(0) = 0.0;
  p.head[0].weight(0, 0) = 0.0;
  p.head[0].bias(0) = 0.0;
  Matrix x(1, 1);
  x << 1.0;
  Vector y(1);
  y << 3.0;
  MetaConfig c;
  c.alpha = 0.1;
  c.inner_steps = 1;
  const ParamSet a = inner_adapt(p, x, y, TaskKind::regression, c);
  CHECK(a.head[0].weight(0, 0) == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(a.extractor[0].weight(0, 0) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(p.head[0].weight(0, 0) == 0.0);

  c.alpha = 0.0;
  const ParamSet same = inner_adapt(p, x, y, TaskKind::regression, c);
  CHECK(same.head[0].weight == p.head[0].weight);
  CHECK(same.extractor[0].weight == p.extractor[0].weight);

  const ObservationalDataset d = toy_data(40, 2, 3, TaskKind::regression, 5);
  const ParamSet q = init_params(Architecture{3, {6}, {6, 4}}, rng);
  MetaConfig small;
  small.alpha = 0.01;
  small.inner_steps = 3;
  const Matrix xs = d.x.topRows(8);
  const Vector ys = d.y_factual.head(8);
  const double before = inference_loss(TaskKind::regression, ys, predict(q, xs, TaskKind::regression));
  const ParamSet after = inner_adapt(q, xs, ys, TaskKind::regression, small);
  CHECK(inference_loss(TaskKind::regression, ys, predict(after, xs, TaskKind::regression)) < before);
}

TEST_CASE("second-order meta-gradient matches finite differences") {
  for (TaskKind kind : {TaskKind::regression, TaskKind::classification}) {
    for (int steps : {1, 2}) {
      const ObservationalDataset d = toy_data(60, 2, 3, kind, 6);
      MetaConfig c = tiny_config();
      c.inner_steps = steps;
      c.mu = 1.0;
      c.epsilon = 0.5;
      c.gamma = 0.0;
      RngStream rng(7);
      const ParamSet p = init_params(c.architecture(3), rng);
      const auto eps = episodes_for(d, 2, 4, 8);
      const auto analytic = objective_gradient(p, eps, kind, c);
      const auto fd = fd_gradient([&](const std::vector<Matrix>& at) { return objective_value(from_flat(p, at), eps, kind, c); },
                                  flat_values(p));
      CHECK(relative_error(analytic, fd) < 1e-5);

      MetaConfig fo = c;
      fo.first_order = true;
      CHECK(relative_error(objective_gradient(p, eps, kind, fo), analytic) > 1e-8);
    }
  }
}

TEST_CASE("discrepancy gradient treats the bandwidth as a constant") {
  const ObservationalDataset d = toy_data(60, 2, 3, TaskKind::regression, 9);
  MetaConfig c = tiny_config();
  c.mu = 0.0;
  c.epsilon = 0.0;
  c.gamma = 1.0;
  c.weight_decay = 0.0;
  RngStream rng(10);
  const ParamSet p = init_params(c.architecture(3), rng);
  const auto eps = episodes_for(d, 2, 5, 11);
  std::vector<double> bws;
  for (const auto& e : eps)
    bws.push_back(median_bandwidth(extract(p.extractor, e.support_x), extract(p.extractor, e.query_x)));
  const auto analytic = objective_gradient(p, eps, TaskKind::regression, c);
  const auto fd = fd_gradient(
      [&](const std::vector<Matrix>& at) {
        const ParamSet q = from_flat(p, at);
        double total = 0.0;
        for (std::size_t i = 0; i < eps.size(); ++i)
          total += metaite::testing::naive_mmd2(extract(q.extractor, eps[i].support_x), extract(q.extractor, eps[i].query_x),
                                                bws[i]);
        return total / static_cast<double>(eps.size());
      },
      flat_values(p));
  CHECK(relative_error(analytic, fd) < 1e-6);
  for (std::size_t i = 2; i < analytic.size(); ++i) CHECK(analytic[i].isZero());
}

TEST_CASE("first-order gradient equals the query gradient at adapted parameters") {
  const ObservationalDataset d = toy_data(60, 2, 3, TaskKind::regression, 12);
  MetaConfig c = tiny_config();
  c.first_order = true;
  c.mu = 1.0;
  c.epsilon = 0.0;
  c.gamma = 0.0;
  c.weight_decay = 0.0;
  RngStream rng(13);
  const ParamSet p = init_params(c.architecture(3), rng);
  const auto eps = episodes_for(d, 1, 4, 14);
  const ParamSet adapted = inner_adapt(p, eps[0].support_x, eps[0].support_y, TaskKind::regression, c);
  ad::Tape t;
  const ParamVars v = attach(t, adapted);
  const ad::Var q = loss_from_output(TaskKind::regression, t.constant(Matrix(eps[0].query_y)),
                                     head_output(v.head, extract(v.extractor, t.constant(eps[0].query_x))));
  std::vector<Matrix> oracle;
  for (const auto& g : t.grad(q, v.flatten())) oracle.push_back(g.value());
  CHECK(relative_error(objective_gradient(p, eps, TaskKind::regression, c), oracle) < 1e-12);
}

TEST_CASE("objective gradient is linear in the loss weights") {
  const ObservationalDataset d = toy_data(60, 2, 3, TaskKind::classification, 15);
  MetaConfig c = tiny_config();
  c.weight_decay = 0.0;
  RngStream rng(16);
  const ParamSet p = init_params(c.architecture(3), rng);
  const auto eps = episodes_for(d, 2, 4, 17);
  auto with = [&](double mu, double epsilon, double gamma) {
    MetaConfig w = c;
    w.mu = mu;
    w.epsilon = epsilon;
    w.gamma = gamma;
    return objective_gradient(p, eps, TaskKind::classification, w);
  };
  const auto a = with(1, 0, 0), b = with(0, 1, 0), g = with(0, 0, 1), all = with(1, 1, 1);
  std::vector<Matrix> sum;
  for (std::size_t i = 0; i < a.size(); ++i) sum.push_back(a[i] + b[i] + g[i]);
  CHECK(relative_error(sum, all) < 1e-10);
}

TEST_CASE("outer step") {
  const ObservationalDataset d = toy_data(60, 2, 3, TaskKind::regression, 18);
  MetaConfig c = tiny_config();
  RngStream rng(19);
  const ParamSet p = init_params(c.architecture(3), rng);
  const auto eps = episodes_for(d, 2, 4, 20);

  MetaConfig off = c;
  off.mu = 0.0;
  off.epsilon = 0.0;
  off.gamma = 0.0;
  off.weight_decay = 0.0;
  AdamState idle;
  const OuterStepResult unchanged = outer_step(p, eps, TaskKind::regression, off, idle);
  for (std::size_t i = 0; i < p.head.size(); ++i) CHECK(unchanged.params.head[i].weight == p.head[i].weight);
  CHECK(unchanged.record.query > 0.0);
  CHECK(unchanged.record.source_ids == std::vector<int>{0, 0});

  AdamState adam;
  const OuterStepResult r = outer_step(p, eps, TaskKind::regression, c, adam);
  CHECK(adam.step == 1);
  const auto before = flat_values(p), after = flat_values(r.params);
  for (std::size_t i = 0; i < before.size(); ++i)
    for (Index j = 0; j < before[i].size(); ++j) {
      const double g = r.gradient[i].data()[j];
      const double step = before[i].data()[j] - after[i].data()[j];
      if (std::abs(g) > 1e-4) CHECK(step == doctest::Approx(c.beta * (g > 0 ? 1.0 : -1.0)).epsilon(1e-3));
    }
  CHECK(r.record.objective == doctest::Approx(c.mu * r.record.query + c.epsilon * r.record.support +
                                              c.gamma * r.record.disc + l2_penalty(p, c.weight_decay)));
}

TEST_CASE("training") {
  const ObservationalDataset d = toy_data(200, 2, 3, TaskKind::regression, 21);
  MetaConfig c = tiny_config();
  c.max_iters = 0;
  c.seed = 5;
  const TrainResult none = train(d, 1, c);
  CHECK(none.trace.empty());
  RngStream init = RngStream(5).substream("init");
  CHECK(none.params.head.back().weight == init_params(c.architecture(3), init).head.back().weight);

  c.max_iters = 300;
  c.per_task_k = 8;
  long calls = 0;
  const TrainResult a = train(d, 1, c, [&](const TraceRecord&) { ++calls; });
  const TrainResult b = train(d, 1, c);
  CHECK(calls == 300);
  REQUIRE(a.trace.size() == 300);
  CHECK(a.trace.back().iteration == 299);
  CHECK(a.params.head.back().weight == b.params.head.back().weight);
  CHECK(trace_csv(a.trace) == trace_csv(b.trace));
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 50; ++i) {
    first += a.trace[static_cast<std::size_t>(i)].query;
    last += a.trace[static_cast<std::size_t>(299 - i)].query;
  }
  CHECK(last < first);

  CHECK(default_target(d.subset(std::vector<Index>{0, 1, 2, 4})) == 1);
  CHECK_THROWS_AS(train(d, 2, c), std::invalid_argument);
}

TEST_CASE("trace csv layout") {
  TrainTrace t(1);
  t[0].iteration = 3;
  t[0].support = 0.5;
  t[0].query = 0.25;
  t[0].disc = 0.125;
  t[0].objective = 1.0;
  t[0].source_ids = {0, 2};
  CHECK(trace_csv(t) == "iteration,L_Sup,L_Que,L_disc,L_obj,source_id\n3,0.5,0.25,0.125,1,0;2\n");
}

TEST_CASE("estimation") {
  const ObservationalDataset d = toy_data(100, 3, 3, TaskKind::regression, 22);
  MetaConfig c = tiny_config();
  RngStream rng(23);
  const ParamSet p = init_params(c.architecture(3), rng);
  const Matrix x_test = random_matrix(rng, 12, 3);

  RngStream e1(24);
  const Matrix y = estimate_all(p, d, x_test, TaskKind::regression, c, e1);
  CHECK(y.rows() == 12);
  CHECK(y.cols() == 3);
  CHECK(y.allFinite());

  std::vector<Index> perm(12);
  for (Index i = 0; i < 12; ++i) perm[static_cast<std::size_t>(i)] = 11 - i;
  Matrix x_perm(12, 3);
  for (Index i = 0; i < 12; ++i) x_perm.row(i) = x_test.row(perm[static_cast<std::size_t>(i)]);
  RngStream e2(24);
  const Matrix y_perm = estimate_all(p, d, x_perm, TaskKind::regression, c, e2);
  for (Index i = 0; i < 12; ++i) CHECK((y_perm.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff() < 1e-12);

  MetaConfig frozen = c;
  frozen.alpha = 0.0;
  const Matrix flat = estimate_all(p, d, x_test, TaskKind::regression, frozen);
  CHECK(flat.col(0) == flat.col(1));
  CHECK(flat.col(1) == flat.col(2));

  MetaConfig ens = c;
  ens.ensemble_draws = 3;
  RngStream e3(24), e4(24);
  const Matrix averaged = estimate_all(p, d, x_test, TaskKind::regression, ens, e3);
  Matrix manual = Matrix::Zero(12, 3);
  const GroupIndex groups(d);
  for (int t = 0; t < 3; ++t)
    for (int r = 0; r < 3; ++r) {
      const auto idx = draw_rows(groups.rows[static_cast<std::size_t>(t)], c.per_task_k, e4);
      const ObservationalDataset s = d.subset(idx);
      manual.col(t) += predict(inner_adapt(p, s.x, s.y_factual, TaskKind::regression, c), x_test, TaskKind::regression).col(0);
    }
  CHECK((averaged - manual / 3.0).cwiseAbs().maxCoeff() < 1e-12);

  CHECK_THROWS_AS(estimate_all(p, d, random_matrix(rng, 2, 4), TaskKind::regression, c), std::invalid_argument);
}
