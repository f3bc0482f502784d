#pragma once

#include "metaite/numkit/rng.hpp"
#include "metaite/numkit/tape.hpp"
#include "metaite/numkit/types.hpp"

#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace metaite {

enum class TaskKind { classification, regression };
enum class Activation { elu, tanh };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(const std::string& s);
std::string to_string(Activation act);
Activation activation_from_string(const std::string& s);

/// Fully connected layer computing `X * weight + bias` (weight is in x out).
struct Layer {
  Matrix weight;
  RowVector bias;
};

/// Trainable weights of f = h(g(X; psi); theta).
struct ParamSet {
  std::vector<Layer> extractor;  // psi
  std::vector<Layer> head;       // theta

  Index input_dim() const;
  Index embedding_dim() const;
  std::size_t parameter_count() const;
  /// Throws if consecutive layer shapes do not chain from input to a width-1 output.
  void validate() const;
};

/// Layer widths. `extractor` lists the output width of every extractor layer, so
/// the embedding size is its last entry. `head` lists the input width of every
/// head layer; its first entry must equal the embedding size and the last head
/// layer maps to a single output.
struct Architecture {
  Index input_dim = 0;
  std::vector<Index> extractor{256, 128};
  std::vector<Index> head{128, 128, 64, 64};
  Activation activation = Activation::elu;
};

ParamSet init_params(const Architecture& arch, RngStream& rng);

// Value-level forward passes.
Matrix extract(std::span<const Layer> psi, const Matrix& x, Activation act = Activation::elu);
/// Pre-activation output of the head (logit for classification).
Matrix head_output(std::span<const Layer> theta, const Matrix& z, Activation act = Activation::elu);
Matrix infer(std::span<const Layer> theta, const Matrix& z, TaskKind kind, Activation act = Activation::elu);
Matrix predict(const ParamSet& params, const Matrix& x, TaskKind kind, Activation act = Activation::elu);

/// Mean negative log-likelihood (classification) or mean squared error (regression).
double inference_loss(TaskKind kind, const Vector& y, const Vector& yhat);

/// decay * sum of squared weights over every layer; biases excluded.
double l2_penalty(const ParamSet& params, double decay);

// Tape-level mirror of ParamSet.
struct LayerVars {
  ad::Var weight;
  ad::Var bias;
};

struct ParamVars {
  std::vector<LayerVars> extractor;
  std::vector<LayerVars> head;

  /// Extractor weights/biases followed by head weights/biases.
  std::vector<ad::Var> flatten() const;
  /// Rebuilds a ParamVars with the same layout as `layout` from a flat list.
  static ParamVars unflatten(const ParamVars& layout, std::span<const ad::Var> flat);
  ParamSet values() const;
};

ParamVars attach(ad::Tape& tape, const ParamSet& params);

ad::Var extract(std::span<const LayerVars> psi, const ad::Var& x, Activation act = Activation::elu);
ad::Var head_output(std::span<const LayerVars> theta, const ad::Var& z, Activation act = Activation::elu);
ad::Var infer(std::span<const LayerVars> theta, const ad::Var& z, TaskKind kind, Activation act = Activation::elu);

/// Inference loss computed from the head's pre-activation output. For
/// classification this is the logistic NLL written as mean(softplus(l) - y*l),
/// equal to `inference_loss` on sigmoid(l) but stable for saturated logits.
ad::Var loss_from_output(TaskKind kind, const ad::Var& y, const ad::Var& output);
ad::Var l2_penalty(const ParamVars& params, double decay);

/// Binary checkpoint layout (little-endian):
///   "MITEPRM1", u32 n_extractor, u32 n_head,
///   per layer: u64 rows, u64 cols, rows*cols f64 weight (row-major), cols f64 bias.
void write_params(std::ostream& out, const ParamSet& params);
ParamSet read_params(std::istream& in);

}  // namespace metaite
