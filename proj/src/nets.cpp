#include "metaite/nets.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace metaite {

std::string to_string(TaskKind kind) { return kind == TaskKind::classification ? "classification" : "regression"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::classification;
  if (s == "regression") return TaskKind::regression;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

std::string to_string(Activation act) { return act == Activation::elu ? "elu" : "tanh"; }

Activation activation_from_string(const std::string& s) {
  if (s == "elu") return Activation::elu;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

Index ParamSet::input_dim() const { return extractor.empty() ? 0 : extractor.front().weight.rows(); }

Index ParamSet::embedding_dim() const { return extractor.empty() ? 0 : extractor.back().weight.cols(); }

std::size_t ParamSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto* group : {&extractor, &head})
    for (const auto& l : *group) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

void ParamSet::validate() const {
  if (extractor.empty() || head.empty()) throw std::invalid_argument("ParamSet: extractor and head must be non-empty");
  Index width = extractor.front().weight.rows();
  for (const auto* group : {&extractor, &head}) {
    for (const auto& l : *group) {
      if (l.weight.rows() != width || l.bias.size() != l.weight.cols() || l.weight.cols() == 0)
        throw std::invalid_argument("ParamSet: layer shapes do not chain");
      width = l.weight.cols();
    }
  }
  if (width != 1) throw std::invalid_argument("ParamSet: head must end in a single output");
}

ParamSet init_params(const Architecture& arch, RngStream& rng) {
  if (arch.input_dim <= 0) throw std::invalid_argument("init_params: input dimension must be positive");
  if (arch.extractor.empty() || arch.head.empty()) throw std::invalid_argument("init_params: empty layer list");
  for (Index w : arch.extractor)
    if (w <= 0) throw std::invalid_argument("init_params: zero-sized extractor layer");
  for (Index w : arch.head)
    if (w <= 0) throw std::invalid_argument("init_params: zero-sized head layer");
  if (arch.head.front() != arch.extractor.back())
    throw std::invalid_argument("init_params: head input width must equal the embedding size");

  auto make = [&rng](Index fan_in, Index fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Layer l{Matrix(fan_in, fan_out), RowVector::Zero(fan_out)};
    for (Index j = 0; j < fan_out; ++j)
      for (Index i = 0; i < fan_in; ++i) l.weight(i, j) = rng.uniform(-bound, bound);
    return l;
  };

  ParamSet p;
  Index width = arch.input_dim;
  for (Index w : arch.extractor) {
    p.extractor.push_back(make(width, w));
    width = w;
  }
  for (std::size_t i = 0; i < arch.head.size(); ++i) {
    const Index out = i + 1 < arch.head.size() ? arch.head[i + 1] : 1;
    p.head.push_back(make(arch.head[i], out));
  }
  return p;
}

namespace {

void activate_inplace(Matrix& m, Activation act) {
  if (act == Activation::elu) {
    m = m.unaryExpr([](double x) { return x > 0 ? x : std::expm1(x); });
  } else {
    m = m.array().tanh().matrix();
  }
}

Matrix dense(const Layer& l, const Matrix& x) {
  if (x.cols() != l.weight.rows())
    throw std::invalid_argument("dense layer: expected " + std::to_string(l.weight.rows()) + " input columns, got " +
                                std::to_string(x.cols()));
  Matrix out(x.rows(), l.weight.cols());
  out.noalias() = x * l.weight;
  out.rowwise() += l.bias;
  return out;
}

ad::Var dense(const LayerVars& l, const ad::Var& x) {
  if (x.cols() != l.weight.rows())
    throw std::invalid_argument("dense layer: expected " + std::to_string(l.weight.rows()) + " input columns, got " +
                                std::to_string(x.cols()));
  return ad::matmul(x, l.weight) + ad::broadcast_rows(l.bias, x.rows());
}

ad::Var activate(const ad::Var& v, Activation act) { return act == Activation::elu ? ad::elu(v) : ad::tanh(v); }

}  // namespace

Matrix extract(std::span<const Layer> psi, const Matrix& x, Activation act) {
  Matrix h = x;
  for (const auto& l : psi) {
    h = dense(l, h);
    activate_inplace(h, act);
  }
  return h;
}

Matrix head_output(std::span<const Layer> theta, const Matrix& z, Activation act) {
  Matrix h = z;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    h = dense(theta[i], h);
    if (i + 1 < theta.size()) activate_inplace(h, act);
  }
  return h;
}

Matrix infer(std::span<const Layer> theta, const Matrix& z, TaskKind kind, Activation act) {
  Matrix out = head_output(theta, z, act);
  if (kind == TaskKind::classification)
    out = out.unaryExpr([](double x) { return ad::detail::sigmoid_value(x); });
  return out;
}

Matrix predict(const ParamSet& params, const Matrix& x, TaskKind kind, Activation act) {
  return infer(params.head, extract(params.extractor, x, act), kind, act);
}

double inference_loss(TaskKind kind, const Vector& y, const Vector& yhat) {
  if (y.size() == 0) throw std::invalid_argument("inference_loss: empty batch");
  if (y.size() != yhat.size()) throw std::invalid_argument("inference_loss: size mismatch");
  const double n = static_cast<double>(y.size());
  if (kind == TaskKind::regression) return (y - yhat).squaredNorm() / n;
  double total = 0.0;
  for (Index i = 0; i < y.size(); ++i) {
    const double p = yhat(i);
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("inference_loss: classification prediction outside (0,1)");
    total += y(i) * std::log(p) + (1.0 - y(i)) * std::log1p(-p);
  }
  return -total / n;
}

double l2_penalty(const ParamSet& params, double decay) {
  double s = 0.0;
  for (const auto* group : {&params.extractor, &params.head})
    for (const auto& l : *group) s += l.weight.squaredNorm();
  return decay * s;
}

std::vector<ad::Var> ParamVars::flatten() const {
  std::vector<ad::Var> out;
  out.reserve(2 * (extractor.size() + head.size()));
  for (const auto* group : {&extractor, &head}) {
    for (const auto& l : *group) {
      out.push_back(l.weight);
      out.push_back(l.bias);
    }
  }
  return out;
}

ParamVars ParamVars::unflatten(const ParamVars& layout, std::span<const ad::Var> flat) {
  if (flat.size() != 2 * (layout.extractor.size() + layout.head.size()))
    throw std::invalid_argument("ParamVars::unflatten: wrong number of tensors");
  ParamVars out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < layout.extractor.size(); ++i, k += 2) out.extractor.push_back({flat[k], flat[k + 1]});
  for (std::size_t i = 0; i < layout.head.size(); ++i, k += 2) out.head.push_back({flat[k], flat[k + 1]});
  return out;
}

ParamSet ParamVars::values() const {
  ParamSet p;
  for (const auto& l : extractor) p.extractor.push_back({l.weight.value(), l.bias.value()});
  for (const auto& l : head) p.head.push_back({l.weight.value(), l.bias.value()});
  return p;
}

ParamVars attach(ad::Tape& tape, const ParamSet& params) {
  ParamVars v;
  for (const auto& l : params.extractor) v.extractor.push_back({tape.variable(l.weight), tape.variable(l.bias)});
  for (const auto& l : params.head) v.head.push_back({tape.variable(l.weight), tape.variable(l.bias)});
  return v;
}

ad::Var extract(std::span<const LayerVars> psi, const ad::Var& x, Activation act) {
  ad::Var h = x;
  for (const auto& l : psi) h = activate(dense(l, h), act);
  return h;
}

ad::Var head_output(std::span<const LayerVars> theta, const ad::Var& z, Activation act) {
  ad::Var h = z;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    h = dense(theta[i], h);
    if (i + 1 < theta.size()) h = activate(h, act);
  }
  return h;
}

ad::Var infer(std::span<const LayerVars> theta, const ad::Var& z, TaskKind kind, Activation act) {
  ad::Var out = head_output(theta, z, act);
  return kind == TaskKind::classification ? ad::sigmoid(out) : out;
}

ad::Var loss_from_output(TaskKind kind, const ad::Var& y, const ad::Var& output) {
  if (y.rows() == 0) throw std::invalid_argument("loss: empty batch");
  if (kind == TaskKind::regression) return ad::mean(ad::square(y - output));
  return ad::mean(ad::softplus(output) - ad::hadamard(y, output));
}

ad::Var l2_penalty(const ParamVars& params, double decay) {
  ad::Var total;
  for (const auto* group : {&params.extractor, &params.head}) {
    for (const auto& l : *group) {
      const ad::Var s = ad::sum(ad::square(l.weight));
      total = total.valid() ? total + s : s;
    }
  }
  return decay * total;
}

namespace {

constexpr char kParamMagic[8] = {'M', 'I', 'T', 'E', 'P', 'R', 'M', '1'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated parameter block");
  return v;
}

}  // namespace

void write_params(std::ostream& out, const ParamSet& params) {
  out.write(kParamMagic, sizeof kParamMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.extractor.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.head.size()));
  for (const auto* group : {&params.extractor, &params.head}) {
    for (const auto& l : *group) {
      put<std::uint64_t>(out, static_cast<std::uint64_t>(l.weight.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(l.weight.cols()));
      for (Index i = 0; i < l.weight.rows(); ++i)
        for (Index j = 0; j < l.weight.cols(); ++j) put<double>(out, l.weight(i, j));
      for (Index j = 0; j < l.bias.size(); ++j) put<double>(out, l.bias(j));
    }
  }
}

ParamSet read_params(std::istream& in) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kParamMagic, sizeof magic) != 0)
    throw std::runtime_error("checkpoint: bad parameter magic");
  const auto n_ext = get<std::uint32_t>(in);
  const auto n_head = get<std::uint32_t>(in);
  ParamSet p;
  auto read_layer = [&in]() {
    const auto rows = static_cast<Index>(get<std::uint64_t>(in));
    const auto cols = static_cast<Index>(get<std::uint64_t>(in));
    if (rows <= 0 || cols <= 0 || rows > (1 << 24) || cols > (1 << 24))
      throw std::runtime_error("checkpoint: implausible layer shape");
    Layer l{Matrix(rows, cols), RowVector(cols)};
    for (Index i = 0; i < rows; ++i)
      for (Index j = 0; j < cols; ++j) l.weight(i, j) = get<double>(in);
    for (Index j = 0; j < cols; ++j) l.bias(j) = get<double>(in);
    return l;
  };
  for (std::uint32_t i = 0; i < n_ext; ++i) p.extractor.push_back(read_layer());
  for (std::uint32_t i = 0; i < n_head; ++i) p.head.push_back(read_layer());
  p.validate();
  return p;
}

}  // namespace metaite
