#include "protofed/proto.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "protofed/errors.hpp"

namespace protofed {

NormalizedPrototypeSet::NormalizedPrototypeSet(PrototypeSet p) : set_(std::move(p)) {
  for (const auto& [c, proto] : set_.classes) {
    if (proto.count == 0) throw UsageError("prototype for class " + std::to_string(c) + " has zero support");
    if (proto.mean.size() != set_.dim) throw ShapeError("prototype dimension mismatch");
    for (double v : proto.mean)
      if (!(v >= 0.0 && v <= 1.0)) throw UsageError("normalized prototype entry outside [0,1]");
  }
}

double MarginVector::sum() const {
  double s = 0.0;
  for (const auto& [c, m] : margins) s += m;
  return s;
}

double euclidean(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("euclidean: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

PrototypeSet extract_prototypes(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> data) {
  if (data.empty()) throw UsageError("extract_prototypes: no samples");
  PrototypeSet out;
  out.dim = spec.embedding_dim();
  constexpr std::size_t chunk = 1024;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const auto part = data.subspan(start, std::min(chunk, data.size() - start));
    const Matrix emb = forward_embeddings(params, spec, stack_inputs(part));
    for (std::size_t i = 0; i < part.size(); ++i) {
      auto& proto = out.classes[static_cast<std::size_t>(part[i].label)];
      if (proto.mean.empty()) proto.mean.assign(out.dim, 0.0);
      for (std::size_t d = 0; d < out.dim; ++d) proto.mean[d] += emb(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d));
      proto.count += 1;
    }
  }
  for (auto& [c, proto] : out.classes)
    for (auto& v : proto.mean) v /= static_cast<double>(proto.count);
  return out;
}

NormalizedPrototypeSet minmax_normalize(const PrototypeSet& p) {
  PrototypeSet out = p;
  for (auto& [c, proto] : out.classes) {
    auto& v = proto.mean;
    if (v.empty()) continue;
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double mn = *lo, range = *hi - *lo;
    for (auto& x : v) x = range > 0.0 ? std::clamp((x - mn) / range, 0.0, 1.0) : 0.0;
  }
  return NormalizedPrototypeSet(std::move(out));
}

MarginVector spm(const PrototypeSet& p_i, const PrototypeSet& p_j) {
  std::vector<std::size_t> shared;
  for (const auto& [c, proto] : p_i.classes)
    if (proto.count > 0 && p_j.has(c) && p_j.classes.at(c).count > 0) shared.push_back(c);

  MarginVector out;
  for (std::size_t c : shared) {
    if (shared.size() < 2) {
      out.margins[c] = 0.0;
      continue;
    }
    const auto& pc = p_i[c];
    const double d_plus = euclidean(pc, p_j[c]);
    double d_minus = 0.0;
    for (std::size_t other : shared)
      if (other != c) d_minus += euclidean(pc, p_j[other]);
    d_minus /= static_cast<double>(shared.size() - 1);
    const double denom = d_minus + d_plus;
    out.margins[c] = denom > 0.0 ? (d_minus - d_plus) / denom : 0.0;
  }
  return out;
}

MarginVector spm(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j) {
  return spm(p_i.set(), p_j.set());
}

MarginVector lpm(const NormalizedPrototypeSet& before, const NormalizedPrototypeSet& after) {
  return spm(before, after);
}

MarginVector apm(const NormalizedPrototypeSet& local, const NormalizedPrototypeSet& aggregate) {
  return spm(local, aggregate);
}

double dplus_sum(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j) {
  double s = 0.0;
  for (const auto& [c, proto] : p_i.set().classes)
    if (p_j.set().has(c)) s += euclidean(proto.mean, p_j.set()[c]);
  return s;
}

NormalizedPrototypeSet aggregate_prototypes(std::span<const NormalizedPrototypeSet> locals) {
  if (locals.empty()) throw UsageError("aggregate_prototypes: no client prototypes");
  PrototypeSet out;
  out.dim = locals.front().dim();
  for (const auto& l : locals) {
    if (l.empty()) continue;
    if (l.dim() != out.dim) throw ShapeError("aggregate_prototypes: dimension mismatch");
    for (const auto& [c, proto] : l.set().classes) {
      auto& acc = out.classes[c];
      if (acc.mean.empty()) acc.mean.assign(out.dim, 0.0);
      const auto n = static_cast<double>(proto.count);
      for (std::size_t d = 0; d < out.dim; ++d) acc.mean[d] += n * proto.mean[d];
      acc.count += proto.count;
    }
  }
  for (auto& [c, acc] : out.classes)
    for (auto& v : acc.mean) v = std::min(1.0, v / static_cast<double>(acc.count));
  return NormalizedPrototypeSet(std::move(out));
}

void to_json(nlohmann::json& j, const PrototypeSet& p) {
  j = nlohmann::json{{"dim", p.dim}, {"classes", nlohmann::json::object()}};
  for (const auto& [c, proto] : p.classes)
    j["classes"][std::to_string(c)] = nlohmann::json{{"mean", proto.mean}, {"count", proto.count}};
}

void from_json(const nlohmann::json& j, PrototypeSet& p) {
  p = PrototypeSet{};
  p.dim = j.at("dim").get<std::size_t>();
  for (const auto& [key, val] : j.at("classes").items()) {
    ClassPrototype proto{val.at("mean").get<std::vector<double>>(), val.at("count").get<std::size_t>()};
    if (proto.mean.size() != p.dim) throw ShapeError("prototype JSON: dimension mismatch");
    p.classes.emplace(std::stoul(key), std::move(proto));
  }
}

}  // namespace protofed
