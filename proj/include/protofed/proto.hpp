#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include "json.hpp"
#include "protofed/nn.hpp"
#include "protofed/sample.hpp"

namespace protofed {

/// Mean embedding of one class and the number of samples behind it.
struct ClassPrototype {
  std::vector<double> mean;
  std::size_t count = 0;

  friend bool operator==(const ClassPrototype&, const ClassPrototype&) = default;
};

/// Per-class prototypes. Classes without samples are absent, so every stored
/// entry has count >= 1.
struct PrototypeSet {
  std::size_t dim = 0;
  std::map<std::size_t, ClassPrototype> classes;

  bool empty() const { return classes.empty(); }
  bool has(std::size_t c) const { return classes.contains(c); }
  const std::vector<double>& operator[](std::size_t c) const { return classes.at(c).mean; }

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;
};

/// A PrototypeSet whose entries all lie in [0,1].
class NormalizedPrototypeSet {
 public:
  NormalizedPrototypeSet() = default;
  /// Throws UsageError if any entry falls outside [0,1] or a count is zero.
  explicit NormalizedPrototypeSet(PrototypeSet p);

  const PrototypeSet& set() const { return set_; }
  bool empty() const { return set_.empty(); }
  std::size_t dim() const { return set_.dim; }

  friend bool operator==(const NormalizedPrototypeSet&, const NormalizedPrototypeSet&) = default;

 private:
  PrototypeSet set_;
};

/// Per-class semantic prototype margins, each in [-1, 1].
struct MarginVector {
  std::map<std::size_t, double> margins;

  double sum() const;
  bool empty() const { return margins.empty(); }

  friend bool operator==(const MarginVector&, const MarginVector&) = default;
};

double euclidean(std::span<const double> a, std::span<const double> b);

/// Class means of the encoder output over `data`.
PrototypeSet extract_prototypes(const ParamSet& params, const ModelSpec& spec, std::span<const Sample> data);

/// Per-vector min-max scaling to [0,1]; constant vectors map to zeros.
NormalizedPrototypeSet minmax_normalize(const PrototypeSet& p);

/// Semantic prototype margin of every class shared by both sets:
/// (d- - d+) / (d- + d+), where d+ is the distance between same-class
/// prototypes and d- the mean distance from p_i[c] to p_j's other classes.
/// Degenerate cases (fewer than two shared classes, or d- + d+ = 0) give 0.
MarginVector spm(const PrototypeSet& p_i, const PrototypeSet& p_j);
MarginVector spm(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j);

/// Local margin: prototypes before local training against those after.
MarginVector lpm(const NormalizedPrototypeSet& before, const NormalizedPrototypeSet& after);
/// Aggregate margin: a client's prototypes against the server's aggregate.
MarginVector apm(const NormalizedPrototypeSet& local, const NormalizedPrototypeSet& aggregate);

/// Sum over shared classes of d+ only.
double dplus_sum(const NormalizedPrototypeSet& p_i, const NormalizedPrototypeSet& p_j);

/// Count-weighted mean of the clients' normalized prototypes, class by class.
NormalizedPrototypeSet aggregate_prototypes(std::span<const NormalizedPrototypeSet> locals);

void to_json(nlohmann::json& j, const PrototypeSet& p);
void from_json(const nlohmann::json& j, PrototypeSet& p);

}  // namespace protofed
