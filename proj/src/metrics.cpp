#include "protofed/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protofed/errors.hpp"
#include "protofed/rng.hpp"

namespace protofed {

namespace {

std::size_t count_correct(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> data) {
  constexpr std::size_t chunk = 2048;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto part = data.subspan(start, std::min(chunk, data.size() - start));
    const Matrix logits = forward_logits(params, spec, stack_inputs(part));
    for (std::size_t i = 0; i < part.size(); ++i) {
      Eigen::Index arg = 0;
      logits.row(static_cast<Eigen::Index>(i)).maxCoeff(&arg);
      if (arg == part[i].label) ++correct;
    }
  }
  return correct;
}

Matrix embed(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> data) {
  return forward_embeddings(params, spec, stack_inputs(data));
}

// Random subset of at most `cap` samples, kept in original order.
std::vector<Sample> subsample(std::span<const Sample> data, std::size_t cap, std::uint64_t seed) {
  if (data.size() <= cap) return {data.begin(), data.end()};
  std::vector<Sample> out;
  out.reserve(cap);
  Rng rng(seed);
  std::sample(data.begin(), data.end(), std::back_inserter(out), cap, rng);
  return out;
}

Matrix squared_distances(const Matrix& a, const Matrix& b) {
  const Vector na = a.rowwise().squaredNorm();
  const Vector nb = b.rowwise().squaredNorm();
  Matrix d = -2.0 * (a * b.transpose());
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}

double median_pairwise_distance(const Matrix& pooled) {
  const Matrix d2 = squared_distances(pooled, pooled);
  const auto n = pooled.rows();
  std::vector<double> dist;
  dist.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) dist.push_back(d2(i, j));
  const std::size_t mid = dist.size() / 2;
  std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid), dist.end());
  const double upper = std::sqrt(dist[mid]);
  if (dist.size() % 2 == 1) return upper;
  const double lower = std::sqrt(*std::max_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(mid)));
  return 0.5 * (lower + upper);
}

// Sum of kernel values, optionally skipping the diagonal.
double kernel_sum(const Matrix& a, const Matrix& b, double h, bool skip_diagonal) {
  const Matrix d2 = squared_distances(a, b);
  const double scale = -1.0 / (2.0 * h * h);
  double s = 0.0;
  for (Eigen::Index i = 0; i < d2.rows(); ++i)
    for (Eigen::Index j = 0; j < d2.cols(); ++j)
      if (!(skip_diagonal && i == j)) s += std::exp(scale * d2(i, j));
  return s;
}

}  // namespace

double accuracy(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset) {
  std::size_t correct = 0, total = 0;
  for (const auto& c : dataset.clients) {
    correct += count_correct(params, spec, c.test);
    total += c.test.size();
  }
  if (total == 0) throw UsageError("accuracy: no test samples");
  return static_cast<double>(correct) / static_cast<double>(total);
}

GradientStats gradient_stats(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset) {
  std::vector<Gradient> grads;
  std::vector<double> weights;
  double total = 0.0, loss = 0.0;
  for (const auto& c : dataset.clients) {
    if (c.train.empty()) continue;
    auto lg = loss_and_grad(params, spec, c.train);
    const double n = static_cast<double>(c.train.size());
    loss += n * lg.loss;
    total += n;
    grads.push_back(std::move(lg.grad));
    weights.push_back(n);
  }
  if (grads.empty()) throw UsageError("gradient_stats: no training samples");
  Gradient mean(spec);
  for (std::size_t k = 0; k < grads.size(); ++k) mean.axpy(weights[k] / total, grads[k]);
  double dis = 0.0;
  for (const auto& g : grads) dis += (g - mean).squared_norm();
  return {loss / total, dis / static_cast<double>(grads.size())};
}

double grad_dissimilarity(const ParamSet& params, const ModelSpec& spec, const FederatedDataset& dataset) {
  return gradient_stats(params, spec, dataset).dissimilarity;
}

double amm(const PrototypeSet& protos) {
  if (protos.classes.size() < 2) return 0.0;
  double total = 0.0;
  for (const auto& [c, p] : protos.classes) {
    double d_minus = 0.0;
    for (const auto& [c2, p2] : protos.classes)
      if (c2 != c) d_minus += euclidean(p.mean, p2.mean);
    total += d_minus / static_cast<double>(protos.classes.size() - 1);
  }
  return total / static_cast<double>(protos.classes.size());
}

double amm_literal(const PrototypeSet& protos) {
  const auto m = spm(protos, protos);
  if (m.empty()) return 0.0;
  return m.sum() / static_cast<double>(m.margins.size());
}

double mmd(const FeatureSample& p, const FeatureSample& q, MmdEstimator est) {
  if (p.rows() < 2 || q.rows() < 2) throw UsageError("mmd: each sample needs at least two points");
  if (p.cols() != q.cols()) throw ShapeError("mmd: feature dimension mismatch");
  Matrix pooled(p.rows() + q.rows(), p.cols());
  pooled << p, q;
  const double h = std::max(median_pairwise_distance(pooled), 1e-12);
  const double n = static_cast<double>(p.rows()), m = static_cast<double>(q.rows());
  const bool unbiased = est == MmdEstimator::unbiased;
  const double kxx = kernel_sum(p, p, h, unbiased) / (unbiased ? n * (n - 1) : n * n);
  const double kyy = kernel_sum(q, q, h, unbiased) / (unbiased ? m * (m - 1) : m * m);
  const double kxy = kernel_sum(p, q, h, false) / (n * m);
  return kxx + kyy - 2.0 * kxy;
}

double federated_mmd(const ParamSet& global, const ParamSet& centralized, const ModelSpec& spec,
                     const FederatedDataset& dataset, std::span<const ClientId> round_clients, std::uint64_t seed) {
  if (round_clients.empty()) throw UsageError("federated_mmd: no clients");
  const auto pooled = dataset.pooled_test();
  const Matrix q = embed(centralized, spec, subsample(pooled, kMmdMaxSamples, derive_seed(seed, {kStreamMmd})));
  double total = 0.0;
  for (ClientId k : round_clients) {
    const auto& test = dataset.clients.at(k).test;
    const Matrix p = embed(global, spec, subsample(test, kMmdMaxSamples, derive_seed(seed, {kStreamMmd, k + 1})));
    total += mmd(p, q);
  }
  return std::max(0.0, total / static_cast<double>(round_clients.size()));
}

double ffd(double mmd_a, double mmd_b) {
  if (!(mmd_b > 0.0)) throw UsageError("ffd: baseline MMD must be positive");
  return (mmd_b - mmd_a) / mmd_b * 100.0;
}

std::vector<double> moving_average(std::span<const double> series, double window_frac) {
  const std::size_t n = series.size();
  const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(window_frac * static_cast<double>(n))));
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t first = i + 1 >= w ? i + 1 - w : 0;
    double sum = 0.0;
    for (std::size_t j = first; j <= i; ++j) sum += series[j];
    out[i] = sum / static_cast<double>(i + 1 - first);
  }
  return out;
}

double attention_entropy(const AttentionVector& a) {
  double h = 0.0;
  for (const auto& [k, w] : a.weights)
    if (w > 0.0) h -= w * std::log(w);
  return h;
}

}  // namespace protofed
