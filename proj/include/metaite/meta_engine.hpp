#pragma once

#include "metaite/datagen.hpp"
#include "metaite/nets.hpp"
#include "metaite/numkit/rng.hpp"
#include "metaite/numkit/tape.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace metaite {

struct MetaConfig {
  double alpha = 1e-3;  // inner (adaptation) learning rate
  double beta = 1e-3;   // meta learning rate
  double mu = 1.0;      // weight of the query loss
  double epsilon = 0.0; // weight of the pre-adaptation support loss
  double gamma = 1.0;   // weight of the discrepancy loss
  int inner_steps = 4;
  int per_task_k = 8;
  int meta_batch = 5;
  long max_iters = 15000;
  bool first_order = false;
  double weight_decay = 0.05;
  std::vector<Index> extractor{256, 128};
  std::vector<Index> head{128, 128, 64, 64};
  Activation activation = Activation::elu;
  /// Independent support draws averaged per treatment at estimation time.
  int ensemble_draws = 1;
  std::uint64_t seed = 0;

  void validate() const;
  Architecture architecture(Index input_dim) const;
};

/// Row indices of every treatment group, computed once per dataset.
struct GroupIndex {
  std::vector<std::vector<Index>> rows;
  explicit GroupIndex(const ObservationalDataset& data);
};

struct EpisodeBatch {
  Matrix support_x;
  Vector support_y;
  Matrix query_x;
  Vector query_y;
  int source_id = -1;
};

/// `k` rows from `rows`: without replacement when possible, else with replacement.
std::vector<Index> draw_rows(std::span<const Index> rows, int k, RngStream& rng);

EpisodeBatch sample_episode(const ObservationalDataset& data, int target_id, int k, RngStream& rng);
EpisodeBatch sample_episode(const ObservationalDataset& data, const GroupIndex& groups, int target_id, int k,
                            RngStream& rng);

/// `inner_steps` SGD steps of size alpha on the support loss. Records the
/// steps on `tape` with a differentiable graph unless `first_order`.
ParamVars inner_adapt(ad::Tape& tape, const ParamVars& params, const ad::Var& support_x, const ad::Var& support_y,
                      TaskKind kind, const MetaConfig& config, ad::Var first_loss = {});
/// Value-level adaptation; `params` is left untouched.
ParamSet inner_adapt(const ParamSet& params, const Matrix& support_x, const Vector& support_y, TaskKind kind,
                     const MetaConfig& config);

/// Per-batch means of each term of the meta-objective, as tape nodes.
struct ObjectiveTerms {
  ad::Var query;     // L_Que at adapted parameters
  ad::Var support;   // L_Sup at pre-adaptation parameters
  ad::Var disc;      // squared MMD between support and query embeddings
  ad::Var penalty;   // weight decay term
  ad::Var objective; // mu*query + epsilon*support + gamma*disc + penalty
};

ObjectiveTerms meta_objective(ad::Tape& tape, const ParamVars& params, std::span<const EpisodeBatch> episodes,
                              TaskKind kind, const MetaConfig& config);

/// Adam with bias correction.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  /// `grads` follows ParamVars::flatten order.
  void apply(ParamSet& params, std::span<const Matrix> grads, double lr);
};

struct TraceRecord {
  long iteration = 0;
  double support = 0.0;
  double query = 0.0;
  double disc = 0.0;
  double objective = 0.0;
  std::vector<int> source_ids;
};

using TrainTrace = std::vector<TraceRecord>;

struct OuterStepResult {
  ParamSet params;
  TraceRecord record;
  std::vector<Matrix> gradient;
};

OuterStepResult outer_step(const ParamSet& params, std::span<const EpisodeBatch> episodes, TaskKind kind,
                           const MetaConfig& config, AdamState& opt);

struct TrainResult {
  ParamSet params;
  TrainTrace trace;
};

using StepCallback = std::function<void(const TraceRecord&)>;

/// Episodic meta-training toward `target_id`. Covariates are used as given.
TrainResult train(const ObservationalDataset& data, int target_id, const MetaConfig& config,
                  const StepCallback& on_step = {});

/// Column t holds predictions for every test row after adapting the trained
/// parameters on a support set drawn from training group t.
Matrix estimate_all(const ParamSet& params, const ObservationalDataset& train_data, const Matrix& x_test,
                    TaskKind kind, const MetaConfig& config, RngStream& rng);
Matrix estimate_all(const ParamSet& params, const ObservationalDataset& train_data, const Matrix& x_test,
                    TaskKind kind, const MetaConfig& config);

/// Smallest non-empty treatment group (lowest index on ties).
int default_target(const ObservationalDataset& data);

std::string trace_csv(const TrainTrace& trace);

}  // namespace metaite
