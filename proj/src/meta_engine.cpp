#include "metaite/meta_engine.hpp"

#include "metaite/io.hpp"
#include "metaite/numkit/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace metaite {

void MetaConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("MetaConfig: " + m); };
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail("alpha must be >= 0");
  if (!(beta > 0.0) || !std::isfinite(beta)) fail("beta must be > 0");
  for (double w : {mu, epsilon, gamma})
    if (!(w >= 0.0 && w <= 1.0)) fail("mu, epsilon and gamma must lie in [0,1]");
  if (inner_steps < 1) fail("inner_steps must be >= 1");
  if (!first_order && inner_steps > 12) fail("second-order adaptation supports at most 12 inner steps");
  if (per_task_k < 1) fail("per_task_k must be >= 1");
  if (meta_batch < 1) fail("meta_batch must be >= 1");
  if (max_iters < 0) fail("max_iters must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (ensemble_draws < 1) fail("ensemble_draws must be >= 1");
  if (extractor.empty() || head.empty()) fail("extractor and head need at least one layer");
  if (head.front() != extractor.back()) fail("head input width must equal the embedding size");
  for (Index w : extractor)
    if (w <= 0) fail("layer widths must be positive");
  for (Index w : head)
    if (w <= 0) fail("layer widths must be positive");
}

Architecture MetaConfig::architecture(Index input_dim) const {
  return Architecture{input_dim, extractor, head, activation};
}

GroupIndex::GroupIndex(const ObservationalDataset& data) : rows(static_cast<std::size_t>(data.k)) {
  for (std::size_t i = 0; i < data.t.size(); ++i) rows.at(static_cast<std::size_t>(data.t[i])).push_back(static_cast<Index>(i));
}

std::vector<Index> draw_rows(std::span<const Index> rows, int k, RngStream& rng) {
  if (k <= 0) throw std::invalid_argument("draw_rows: k must be positive");
  if (rows.empty()) throw std::invalid_argument("draw_rows: empty treatment group");
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(k));
  const std::size_t n = rows.size();
  const auto want = static_cast<std::size_t>(k);
  if (n < want) {
    for (std::size_t i = 0; i < want; ++i) out.push_back(rows[rng.index(n)]);
    return out;
  }
  std::vector<std::size_t> picked;
  picked.reserve(want);
  for (std::size_t j = n - want; j < n; ++j) {
    const std::size_t r = rng.index(j + 1);
    const bool seen = std::find(picked.begin(), picked.end(), r) != picked.end();
    picked.push_back(seen ? j : r);
  }
  for (std::size_t p : picked) out.push_back(rows[p]);
  return out;
}

namespace {

void take_rows(const ObservationalDataset& data, std::span<const Index> idx, Matrix& x, Vector& y) {
  x.resize(static_cast<Index>(idx.size()), data.x.cols());
  y.resize(static_cast<Index>(idx.size()));
  for (std::size_t r = 0; r < idx.size(); ++r) {
    x.row(static_cast<Index>(r)) = data.x.row(idx[r]);
    y(static_cast<Index>(r)) = data.y_factual(idx[r]);
  }
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw DivergenceError(std::string("non-finite ") + what + " (training diverged)");
}

}  // namespace

EpisodeBatch sample_episode(const ObservationalDataset& data, const GroupIndex& groups, int target_id, int k,
                            RngStream& rng) {
  if (k <= 0) throw std::invalid_argument("sample_episode: k must be positive");
  if (data.k < 2) throw std::invalid_argument("sample_episode: need at least two treatment groups");
  if (target_id < 0 || target_id >= data.k) throw std::invalid_argument("sample_episode: target out of range");
  const auto& target_rows = groups.rows[static_cast<std::size_t>(target_id)];
  if (target_rows.empty()) throw std::invalid_argument("sample_episode: empty target treatment group");

  int source = static_cast<int>(rng.index(static_cast<std::size_t>(data.k - 1)));
  if (source >= target_id) ++source;
  const auto& source_rows = groups.rows[static_cast<std::size_t>(source)];
  if (source_rows.empty())
    throw std::invalid_argument("sample_episode: empty treatment group " + std::to_string(source));

  EpisodeBatch e;
  e.source_id = source;
  const auto sup = draw_rows(source_rows, k, rng);
  const auto que = draw_rows(target_rows, k, rng);
  take_rows(data, sup, e.support_x, e.support_y);
  take_rows(data, que, e.query_x, e.query_y);
  return e;
}

EpisodeBatch sample_episode(const ObservationalDataset& data, int target_id, int k, RngStream& rng) {
  return sample_episode(data, GroupIndex(data), target_id, k, rng);
}

namespace {

ad::Var support_loss(const ParamVars& p, const ad::Var& x, const ad::Var& y, TaskKind kind, Activation act) {
  return loss_from_output(kind, y, head_output(p.head, extract(p.extractor, x, act), act));
}

}  // namespace

ParamVars inner_adapt(ad::Tape& tape, const ParamVars& params, const ad::Var& support_x, const ad::Var& support_y,
                      TaskKind kind, const MetaConfig& config, ad::Var first_loss) {
  if (support_x.rows() == 0) throw std::invalid_argument("inner_adapt: empty support set");
  ParamVars current = params;
  for (int step = 0; step < config.inner_steps; ++step) {
    const ad::Var loss = (step == 0 && first_loss.valid())
                             ? first_loss
                             : support_loss(current, support_x, support_y, kind, config.activation);
    check_finite(loss.scalar(), "support loss during adaptation");
    if (config.alpha == 0.0) break;
    const auto flat = current.flatten();
    const auto grads = tape.grad(loss, flat, !config.first_order && tape.recording());
    std::vector<ad::Var> next;
    next.reserve(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) next.push_back(flat[i] - config.alpha * grads[i]);
    current = ParamVars::unflatten(current, next);
  }
  return current;
}

ParamSet inner_adapt(const ParamSet& params, const Matrix& support_x, const Vector& support_y, TaskKind kind,
                     const MetaConfig& config) {
  ad::Tape tape;
  MetaConfig cfg = config;
  cfg.first_order = true;
  const ParamVars p = attach(tape, params);
  const auto adapted = inner_adapt(tape, p, tape.constant(support_x), tape.constant(Matrix(support_y)), kind, cfg);
  return adapted.values();
}

ObjectiveTerms meta_objective(ad::Tape& tape, const ParamVars& params, std::span<const EpisodeBatch> episodes,
                              TaskKind kind, const MetaConfig& config) {
  if (episodes.empty()) throw std::invalid_argument("meta_objective: need at least one episode");
  const Activation act = config.activation;
  const double inv = 1.0 / static_cast<double>(episodes.size());
  ad::Var query_sum, support_sum, disc_sum;
  auto add = [](ad::Var& acc, const ad::Var& v) { acc = acc.valid() ? acc + v : v; };

  for (const auto& e : episodes) {
    const ad::Var xs = tape.constant(e.support_x);
    const ad::Var ys = tape.constant(Matrix(e.support_y));
    const ad::Var xq = tape.constant(e.query_x);
    const ad::Var yq = tape.constant(Matrix(e.query_y));

    const ad::Var zs = extract(params.extractor, xs, act);
    const ad::Var sup = loss_from_output(kind, ys, head_output(params.head, zs, act));
    add(support_sum, sup);

    {
      std::optional<ad::NoGradGuard> off;
      if (config.gamma == 0.0) off.emplace(tape);
      const ad::Var zq = extract(params.extractor, xq, act);
      const double bw = median_bandwidth(zs.value(), zq.value());
      add(disc_sum, ad::mmd2(zs, zq, bw));
    }

    if (config.mu == 0.0) {
      const ParamSet adapted = inner_adapt(params.values(), e.support_x, e.support_y, kind, config);
      ad::Tape scratch;
      const double q = loss_from_output(kind, scratch.constant(Matrix(e.query_y)),
                                        scratch.constant(head_output(adapted.head, extract(adapted.extractor, e.query_x, act), act)))
                           .scalar();
      add(query_sum, tape.constant(Matrix::Constant(1, 1, q)));
    } else {
      const ParamVars adapted = inner_adapt(tape, params, xs, ys, kind, config, sup);
      add(query_sum, support_loss(adapted, xq, yq, kind, act));
    }
  }

  ObjectiveTerms t;
  t.query = inv * query_sum;
  t.support = inv * support_sum;
  t.disc = inv * disc_sum;
  t.penalty = l2_penalty(params, config.weight_decay);
  t.objective = config.mu * t.query + config.epsilon * t.support + config.gamma * t.disc + t.penalty;
  return t;
}

void AdamState::apply(ParamSet& params, std::span<const Matrix> grads, double lr) {
  const std::size_t n = 2 * (params.extractor.size() + params.head.size());
  if (grads.size() != n) throw std::invalid_argument("AdamState::apply: gradient count mismatch");
  if (m.empty()) {
    for (const auto& g : grads) {
      m.push_back(Matrix::Zero(g.rows(), g.cols()));
      v.push_back(Matrix::Zero(g.rows(), g.cols()));
    }
  }
  ++step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  std::size_t i = 0;
  auto update = [&](auto& tensor) {
    const Matrix& g = grads[i];
    if (g.size() != tensor.size()) throw std::invalid_argument("AdamState::apply: gradient shape mismatch");
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
    const Matrix delta = ((m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps)).matrix();
    tensor.reshaped() -= lr * delta.reshaped();
    ++i;
  };
  for (auto* group : {&params.extractor, &params.head}) {
    for (auto& l : *group) {
      update(l.weight);
      update(l.bias);
    }
  }
}

OuterStepResult outer_step(const ParamSet& params, std::span<const EpisodeBatch> episodes, TaskKind kind,
                           const MetaConfig& config, AdamState& opt) {
  ad::Tape tape;
  const ParamVars p = attach(tape, params);
  const ObjectiveTerms terms = meta_objective(tape, p, episodes, kind, config);

  OuterStepResult out;
  out.record.query = terms.query.scalar();
  out.record.support = terms.support.scalar();
  out.record.disc = terms.disc.scalar();
  out.record.objective = terms.objective.scalar();
  for (const auto& e : episodes) out.record.source_ids.push_back(e.source_id);
  check_finite(out.record.objective, "meta-objective");

  const auto flat = p.flatten();
  const auto grads = tape.grad(terms.objective, flat);
  out.gradient.reserve(grads.size());
  for (const auto& g : grads) {
    if (!g.value().allFinite()) throw DivergenceError("non-finite meta-gradient (training diverged)");
    out.gradient.push_back(g.value());
  }
  out.params = params;
  opt.apply(out.params, out.gradient, config.beta);
  return out;
}

int default_target(const ObservationalDataset& data) {
  const auto sizes = data.group_sizes();
  int best = -1;
  for (int g = 0; g < data.k; ++g) {
    const Index s = sizes[static_cast<std::size_t>(g)];
    if (s > 0 && (best < 0 || s < sizes[static_cast<std::size_t>(best)])) best = g;
  }
  if (best < 0) throw std::invalid_argument("default_target: dataset has no rows");
  return best;
}

TrainResult train(const ObservationalDataset& data, int target_id, const MetaConfig& config,
                  const StepCallback& on_step) {
  config.validate();
  if (target_id < 0 || target_id >= data.k) throw std::invalid_argument("train: target out of range");
  const GroupIndex groups(data);
  if (groups.rows[static_cast<std::size_t>(target_id)].empty())
    throw std::invalid_argument("train: target treatment group is empty");

  const RngStream root(config.seed);
  RngStream init_rng = root.substream("init");
  RngStream episode_rng = root.substream("episodes");

  TrainResult result;
  result.params = init_params(config.architecture(data.dim()), init_rng);
  result.trace.reserve(static_cast<std::size_t>(config.max_iters));
  AdamState adam;
  std::vector<EpisodeBatch> batch(static_cast<std::size_t>(config.meta_batch));
  for (long it = 0; it < config.max_iters; ++it) {
    for (auto& e : batch) e = sample_episode(data, groups, target_id, config.per_task_k, episode_rng);
    OuterStepResult step = [&] {
      try {
        return outer_step(result.params, batch, data.kind, config, adam);
      } catch (const DivergenceError& e) {
        throw DivergenceError(std::string(e.what()) + " at iteration " + std::to_string(it));
      }
    }();
    step.record.iteration = it;
    result.params = std::move(step.params);
    if (on_step) on_step(step.record);
    result.trace.push_back(std::move(step.record));
  }
  return result;
}

Matrix estimate_all(const ParamSet& params, const ObservationalDataset& train_data, const Matrix& x_test,
                    TaskKind kind, const MetaConfig& config, RngStream& rng) {
  if (x_test.cols() != params.input_dim())
    throw std::invalid_argument("estimate_all: test covariates have the wrong width");
  const GroupIndex groups(train_data);
  Matrix out = Matrix::Zero(x_test.rows(), train_data.k);
  for (int t = 0; t < train_data.k; ++t) {
    const auto& rows = groups.rows[static_cast<std::size_t>(t)];
    if (rows.empty()) throw std::invalid_argument("estimate_all: missing treatment group " + std::to_string(t));
    for (int r = 0; r < config.ensemble_draws; ++r) {
      const auto idx = draw_rows(rows, config.per_task_k, rng);
      Matrix xs;
      Vector ys;
      take_rows(train_data, idx, xs, ys);
      const ParamSet adapted = inner_adapt(params, xs, ys, kind, config);
      out.col(t) += predict(adapted, x_test, kind, config.activation).col(0);
    }
  }
  out /= static_cast<double>(config.ensemble_draws);
  return out;
}

Matrix estimate_all(const ParamSet& params, const ObservationalDataset& train_data, const Matrix& x_test,
                    TaskKind kind, const MetaConfig& config) {
  RngStream rng = RngStream(config.seed).substream("estimate");
  return estimate_all(params, train_data, x_test, kind, config, rng);
}

std::string trace_csv(const TrainTrace& trace) {
  std::ostringstream out;
  out << "iteration,L_Sup,L_Que,L_disc,L_obj,source_id\n";
  for (const auto& r : trace) {
    out << r.iteration << ',' << format_double(r.support) << ',' << format_double(r.query) << ','
        << format_double(r.disc) << ',' << format_double(r.objective) << ',';
    for (std::size_t i = 0; i < r.source_ids.size(); ++i) out << (i ? ";" : "") << r.source_ids[i];
    out << "\n";
  }
  return out.str();
}

}  // namespace metaite
