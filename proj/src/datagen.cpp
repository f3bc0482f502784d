#include "metaite/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace metaite {

const std::vector<std::string> kTwinsFourLabels{"lower/female", "lower/male", "higher/female", "higher/male"};

std::vector<Index> ObservationalDataset::group(int treatment) const {
  std::vector<Index> rows;
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] == treatment) rows.push_back(static_cast<Index>(i));
  return rows;
}

std::vector<Index> ObservationalDataset::group_sizes() const {
  std::vector<Index> sizes(static_cast<std::size_t>(k), 0);
  for (int v : t) ++sizes.at(static_cast<std::size_t>(v));
  return sizes;
}

ObservationalDataset ObservationalDataset::subset(std::span<const Index> rows) const {
  ObservationalDataset out;
  out.kind = kind;
  out.k = k;
  out.x.resize(static_cast<Index>(rows.size()), x.cols());
  out.y_factual.resize(static_cast<Index>(rows.size()));
  out.t.reserve(rows.size());
  if (y_all) out.y_all = Matrix(static_cast<Index>(rows.size()), y_all->cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Index i = rows[r];
    const auto ri = static_cast<Index>(r);
    out.x.row(ri) = x.row(i);
    out.y_factual(ri) = y_factual(i);
    out.t.push_back(t[static_cast<std::size_t>(i)]);
    if (y_all) out.y_all->row(ri) = y_all->row(i);
  }
  return out;
}

void ObservationalDataset::validate() const {
  if (k < 2) throw std::invalid_argument("dataset: need at least two treatments");
  if (static_cast<Index>(t.size()) != x.rows() || y_factual.size() != x.rows())
    throw std::invalid_argument("dataset: inconsistent row counts");
  if (!x.allFinite() || !y_factual.allFinite()) throw std::invalid_argument("dataset: non-finite entries");
  for (int v : t)
    if (v < 0 || v >= k) throw std::invalid_argument("dataset: treatment index out of range");
  if (y_all) {
    if (y_all->rows() != x.rows() || y_all->cols() != k)
      throw std::invalid_argument("dataset: potential-outcome matrix has wrong shape");
    if (!y_all->allFinite()) throw std::invalid_argument("dataset: non-finite potential outcomes");
    for (Index i = 0; i < x.rows(); ++i)
      if ((*y_all)(i, t[static_cast<std::size_t>(i)]) != y_factual(i))
        throw std::invalid_argument("dataset: factual outcome disagrees with potential outcomes at row " +
                                    std::to_string(i));
  }
}

namespace {

double sigmoid(double x) { return ad::detail::sigmoid_value(x); }

/// Mixed continuous/binary covariates, continuous columns first.
Matrix draw_covariates(Index n, Index n_cont, Index n_bin, RngStream& rng) {
  Matrix x(n, n_cont + n_bin);
  std::vector<double> prevalence(static_cast<std::size_t>(n_bin));
  for (auto& p : prevalence) p = rng.uniform(0.2, 0.8);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n_cont; ++j) x(i, j) = rng.normal();
    for (Index j = 0; j < n_bin; ++j) x(i, n_cont + j) = rng.bernoulli(prevalence[static_cast<std::size_t>(j)]) ? 1.0 : 0.0;
  }
  return x;
}

/// 1 for the round(rate * n) largest latent scores, 0 elsewhere. Ties broken by index.
Vector threshold_top(const Vector& latent, double rate) {
  const Index n = latent.size();
  const auto m = static_cast<Index>(std::llround(rate * static_cast<double>(n)));
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return latent(a) > latent(b); });
  Vector y = Vector::Zero(n);
  for (Index r = 0; r < m; ++r) y(order[static_cast<std::size_t>(r)]) = 1.0;
  return y;
}

/// Shared mortality risk for twins: a covariate score plus a pair-level shock.
Vector twin_risk(const Matrix& x, RngStream& rng) {
  const Standardizer st = Standardizer::fit(x);
  const Matrix xs = st.apply(x);
  Vector v(x.cols());
  for (Index j = 0; j < v.size(); ++j) v(j) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(x.cols())));
  Vector risk = xs * v;
  for (Index i = 0; i < risk.size(); ++i) risk(i) += rng.normal();
  return risk;
}

int draw_categorical(const Vector& logits, RngStream& rng) {
  const double top = logits.maxCoeff();
  const Vector w = (logits.array() - top).exp().matrix();
  const double u = rng.uniform() * w.sum();
  double acc = 0.0;
  for (Index j = 0; j < w.size(); ++j) {
    acc += w(j);
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(w.size() - 1);
}

}  // namespace

double twins_assignment_probability(const Vector& x, const Vector& w, double noise) {
  if (x.size() != w.size()) throw std::invalid_argument("twins_assignment_probability: dimension mismatch");
  return sigmoid(w.dot(x) + noise);
}

double news_potential_outcome(const Vector& z, const Vector& z_j, const Vector& z_m, double ytilde, double scale) {
  return scale * (ytilde * (z - z_j).norm() + (z - z_m).norm());
}

ObservationalDataset gen_twins_binary(Index n_pairs, RngStream& rng, const TwinsOptions& opt) {
  if (n_pairs < 1) throw std::invalid_argument("gen_twins_binary: n_pairs must be >= 1");
  constexpr Index p = 30;
  ObservationalDataset d;
  d.kind = TaskKind::classification;
  d.k = 2;
  d.x = draw_covariates(n_pairs, 10, p - 10, rng);

  Vector w(p);
  for (Index j = 0; j < p; ++j) w(j) = rng.uniform(-opt.weight_bound, opt.weight_bound);

  const Vector risk = twin_risk(d.x, rng);
  Vector lighter = risk, heavier = risk;
  for (Index i = 0; i < n_pairs; ++i) {
    lighter(i) += rng.normal(0.0, opt.idiosyncratic_sd);
    heavier(i) += rng.normal(0.0, opt.idiosyncratic_sd);
  }
  d.y_all = Matrix(n_pairs, 2);
  d.y_all->col(0) = threshold_top(lighter, opt.rate_lighter);
  d.y_all->col(1) = threshold_top(heavier, opt.rate_heavier);

  d.t.resize(static_cast<std::size_t>(n_pairs));
  d.y_factual.resize(n_pairs);
  for (Index i = 0; i < n_pairs; ++i) {
    const double noise = rng.normal(0.0, opt.noise_sd);
    const double prob = twins_assignment_probability(d.x.row(i).transpose(), w, noise);
    const int ti = rng.bernoulli(prob) ? 1 : 0;
    d.t[static_cast<std::size_t>(i)] = ti;
    d.y_factual(i) = (*d.y_all)(i, ti);
  }
  return d;
}

ObservationalDataset gen_twins_four(Index n, RngStream& rng, const TwinsFourOptions& opt) {
  if (n < 4) throw std::invalid_argument("gen_twins_four: n must be >= 4");
  if (opt.rates.size() != 4) throw std::invalid_argument("gen_twins_four: need four mortality rates");
  constexpr Index p = 50;
  constexpr int k = 4;
  ObservationalDataset d;
  d.kind = TaskKind::classification;
  d.k = k;
  d.x = draw_covariates(n, 15, p - 15, rng);

  Matrix w(k, p);
  for (Index r = 0; r < k; ++r)
    for (Index j = 0; j < p; ++j) w(r, j) = rng.uniform(-opt.weight_bound, opt.weight_bound);

  const Vector risk = twin_risk(d.x, rng);
  d.y_all = Matrix(n, k);
  for (int c = 0; c < k; ++c) {
    Vector latent = risk;
    for (Index i = 0; i < n; ++i) latent(i) += rng.normal(0.0, opt.idiosyncratic_sd);
    d.y_all->col(c) = threshold_top(latent, opt.rates[static_cast<std::size_t>(c)]);
  }

  d.t.resize(static_cast<std::size_t>(n));
  d.y_factual.resize(n);
  Vector scores(k);
  for (Index i = 0; i < n; ++i) {
    for (Index r = 0; r < k; ++r) scores(r) = opt.bias_weight * (w.row(r).dot(d.x.row(i)) + rng.normal(0.0, opt.noise_sd));
    const int ti = draw_categorical(scores, rng);
    d.t[static_cast<std::size_t>(i)] = ti;
    d.y_factual(i) = (*d.y_all)(i, ti);
  }
  return d;
}

ObservationalDataset gen_news(Index n, int k, Index topics, double scale, double kappa, RngStream& rng,
                              const NewsOptions& opt) {
  if (n < 1) throw std::invalid_argument("gen_news: n must be >= 1");
  if (k < 2) throw std::invalid_argument("gen_news: need at least two treatments");
  if (topics < k) throw std::invalid_argument("gen_news: number of treatments exceeds number of topics");

  ObservationalDataset d;
  d.kind = TaskKind::regression;
  d.k = k;
  d.x.resize(n, topics);
  for (Index i = 0; i < n; ++i) {
    double total = 0.0;
    while (!(total > 0.0)) {
      for (Index j = 0; j < topics; ++j) d.x(i, j) = rng.gamma(opt.dirichlet_alpha);
      total = d.x.row(i).sum();
    }
    d.x.row(i) /= total;
  }

  const auto centre_rows = rng.sample_without_replacement(static_cast<std::size_t>(n), std::min<std::size_t>(static_cast<std::size_t>(k), static_cast<std::size_t>(n)));
  std::vector<Vector> centroids;
  for (int j = 0; j < k; ++j)
    centroids.push_back(d.x.row(static_cast<Index>(centre_rows[static_cast<std::size_t>(j) % centre_rows.size()])).transpose());
  const Vector mean_topic = d.x.colwise().mean().transpose();

  std::vector<double> mu(static_cast<std::size_t>(k)), sigma(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    mu[static_cast<std::size_t>(j)] = rng.normal(0.45, 0.15);
    sigma[static_cast<std::size_t>(j)] = std::max(rng.normal(0.1, 0.05), 1e-3);
  }

  d.y_all = Matrix(n, k);
  d.t.resize(static_cast<std::size_t>(n));
  d.y_factual.resize(n);
  for (Index i = 0; i < n; ++i) {
    const Vector z = d.x.row(i).transpose();
    for (int j = 0; j < k; ++j) {
      const double ytilde =
          rng.normal(mu[static_cast<std::size_t>(j)], sigma[static_cast<std::size_t>(j)]) + rng.normal(0.0, opt.outcome_noise_sd);
      (*d.y_all)(i, j) = news_potential_outcome(z, centroids[static_cast<std::size_t>(j)], mean_topic, ytilde, scale);
    }
    const int ti = draw_categorical(kappa * d.y_all->row(i).transpose(), rng);
    d.t[static_cast<std::size_t>(i)] = ti;
    d.y_factual(i) = (*d.y_all)(i, ti);
  }
  return d;
}

ObservationalDataset apply_imbalance(const ObservationalDataset& data, const ImbalanceSpec& spec, RngStream& rng) {
  const auto k = static_cast<std::size_t>(data.k);
  const bool by_count = !spec.keep_count.empty();
  if (by_count ? spec.keep_count.size() != k : spec.keep_fraction.size() != k)
    throw std::invalid_argument("apply_imbalance: need one entry per treatment group");
  std::vector<Index> keep;
  for (int g = 0; g < data.k; ++g) {
    const auto rows = data.group(g);
    const auto size = static_cast<Index>(rows.size());
    Index count = 0;
    if (by_count) {
      count = spec.keep_count[static_cast<std::size_t>(g)];
      if (count < 0) count = size;
    } else {
      const double f = spec.keep_fraction[static_cast<std::size_t>(g)];
      if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("apply_imbalance: keep_fraction must lie in (0,1]");
      count = static_cast<Index>(std::llround(f * static_cast<double>(size)));
    }
    if (count < 1) throw std::invalid_argument("apply_imbalance: group " + std::to_string(g) + " would become empty");
    if (count > size)
      throw std::invalid_argument("apply_imbalance: group " + std::to_string(g) + " has only " + std::to_string(size) +
                                  " rows, cannot keep " + std::to_string(count));
    if (count == size) {
      keep.insert(keep.end(), rows.begin(), rows.end());
      continue;
    }
    for (std::size_t pick : rng.sample_without_replacement(rows.size(), static_cast<std::size_t>(count)))
      keep.push_back(rows[pick]);
  }
  std::sort(keep.begin(), keep.end());
  return data.subset(keep);
}

SplitIndices split_indices(const ObservationalDataset& data, double train_fraction, RngStream& rng) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw std::invalid_argument("split: train_fraction must lie in (0,1)");
  SplitIndices out;
  for (int g = 0; g < data.k; ++g) {
    const auto rows = data.group(g);
    if (rows.empty()) continue;
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rows.size())));
    if (n_train == 0 || n_train == rows.size())
      throw std::invalid_argument("split: treatment group " + std::to_string(g) + " with " +
                                  std::to_string(rows.size()) + " rows is too small to split");
    const auto order = rng.sample_without_replacement(rows.size(), rows.size());
    for (std::size_t r = 0; r < order.size(); ++r) (r < n_train ? out.train : out.test).push_back(rows[order[r]]);
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

std::pair<ObservationalDataset, ObservationalDataset> split(const ObservationalDataset& data, double train_fraction,
                                                            RngStream& rng) {
  const auto idx = split_indices(data, train_fraction, rng);
  return {data.subset(idx.train), data.subset(idx.test)};
}

Standardizer Standardizer::fit(const Matrix& x) {
  if (x.rows() == 0) throw std::invalid_argument("Standardizer: no rows");
  Standardizer s;
  s.mean = x.colwise().mean();
  s.scale = ((x.rowwise() - s.mean).array().square().colwise().mean()).sqrt().matrix();
  for (Index j = 0; j < s.scale.size(); ++j)
    if (!(s.scale(j) > 1e-12)) s.scale(j) = 1.0;
  return s;
}

Matrix Standardizer::apply(const Matrix& x) const {
  if (x.cols() != mean.size()) throw std::invalid_argument("Standardizer: column count mismatch");
  return ((x.rowwise() - mean).array().rowwise() / scale.array()).matrix();
}

}  // namespace metaite
