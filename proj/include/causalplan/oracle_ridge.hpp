#pragma once

// Synthetic structural causal models with known parent sets, closed-form ridge regression
// over a degree-2 feature map, and graph-recovery metrics.

#include <Eigen/Dense>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/core.hpp"
#include "causalplan/sca_model.hpp"

namespace causalplan {

using EdgeMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic>;  // parent x child, 0/1

struct SyntheticSpec {
  std::size_t parent_dim = 10;
  std::size_t child_dim = 4;  // the last child_dim parents are the previous-action block
  double density = 0.3;
  std::size_t samples = 5000;
  std::uint64_t seed = 0;
  double noise_scale = 0.1;
  double interaction_rate = 0.25;  // chance that a pair of true parents also interacts

  std::size_t state_dim() const { return parent_dim - child_dim; }

  void validate() const {
    if (child_dim == 0) throw ConfigError("synthetic spec needs at least one child");
    if (parent_dim < child_dim) throw ConfigError("parent_dim must include the previous-action block");
    if (!(density > 0.0 && density <= 1.0)) throw ConfigError("density must lie in (0, 1]");
    if (samples == 0) throw ConfigError("synthetic spec needs at least one sample");
    if (!(noise_scale >= 0.0)) throw ConfigError("noise_scale must be nonnegative");
    if (!(interaction_rate >= 0.0 && interaction_rate <= 1.0)) throw ConfigError("interaction_rate must lie in [0, 1]");
  }

  bool is_self_edge(std::size_t parent, std::size_t child) const { return parent == state_dim() + child; }
};

/// Child i fires when  sum_j w_ij s_j + sum_{j<k} v_ijk s_j s_k + noise > 0  with s = 2x - 1.
/// Only true parents carry weight.
struct SyntheticScm {
  SyntheticSpec spec;
  EdgeMatrix true_edges;                                  // parent x child
  Eigen::MatrixXd linear;                                 // parent x child
  std::vector<std::vector<std::pair<std::pair<std::size_t, std::size_t>, double>>> interactions;  // per child

  double logit(const Eigen::VectorXd& x, std::size_t child) const {
    double z = 0.0;
    for (Eigen::Index j = 0; j < x.size(); ++j) z += linear(j, static_cast<Eigen::Index>(child)) * (2.0 * x(j) - 1.0);
    for (const auto& [jk, v] : interactions[child])
      z += v * (2.0 * x(static_cast<Eigen::Index>(jk.first)) - 1.0) * (2.0 * x(static_cast<Eigen::Index>(jk.second)) - 1.0);
    return z;
  }

  nlohmann::json to_json() const {
    std::vector<std::vector<int>> edges(static_cast<std::size_t>(true_edges.rows()));
    std::vector<std::vector<double>> w(static_cast<std::size_t>(linear.rows()));
    for (Eigen::Index r = 0; r < true_edges.rows(); ++r)
      for (Eigen::Index c = 0; c < true_edges.cols(); ++c) {
        edges[static_cast<std::size_t>(r)].push_back(true_edges(r, c));
        w[static_cast<std::size_t>(r)].push_back(linear(r, c));
      }
    nlohmann::json inter = nlohmann::json::array();
    for (const auto& per_child : interactions) {
      nlohmann::json arr = nlohmann::json::array();
      for (const auto& [jk, v] : per_child) arr.push_back({jk.first, jk.second, v});
      inter.push_back(arr);
    }
    return {{"parent_dim", spec.parent_dim}, {"child_dim", spec.child_dim}, {"density", spec.density},
            {"samples", spec.samples},       {"seed", spec.seed},           {"noise_scale", spec.noise_scale},
            {"true_edges", edges},           {"linear", w},                 {"interactions", inter}};
  }
};

struct SyntheticData {
  CausalDataset dataset;
  SyntheticScm scm;
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, 0x5c3));
  const auto p = static_cast<Eigen::Index>(spec.parent_dim);
  const auto a = static_cast<Eigen::Index>(spec.child_dim);

  SyntheticScm scm;
  scm.spec = spec;
  scm.true_edges = EdgeMatrix::Zero(p, a);
  scm.linear = Eigen::MatrixXd::Zero(p, a);
  scm.interactions.resize(spec.child_dim);
  for (Eigen::Index i = 0; i < a; ++i) {
    std::vector<std::size_t> parents;
    for (Eigen::Index j = 0; j < p; ++j) {
      if (spec.is_self_edge(static_cast<std::size_t>(j), static_cast<std::size_t>(i))) continue;
      if (rng.uniform() < spec.density) {
        scm.true_edges(j, i) = 1;
        const double mag = rng.uniform(1.0, 2.0);
        scm.linear(j, i) = rng.bernoulli(0.5) ? mag : -mag;
        parents.push_back(static_cast<std::size_t>(j));
      }
    }
    for (std::size_t u = 0; u < parents.size(); ++u)
      for (std::size_t v = u + 1; v < parents.size(); ++v)
        if (rng.uniform() < spec.interaction_rate) {
          const double mag = rng.uniform(0.5, 1.0);
          scm.interactions[static_cast<std::size_t>(i)].push_back({{parents[u], parents[v]}, rng.bernoulli(0.5) ? mag : -mag});
        }
  }

  SyntheticData out;
  out.dataset.state_dim = spec.state_dim();
  out.dataset.action_dim = spec.child_dim;
  const auto n = static_cast<Eigen::Index>(spec.samples);
  out.dataset.parents.resize(p, n);
  out.dataset.children.resize(a, n);
  Eigen::VectorXd x(p);
  for (Eigen::Index k = 0; k < n; ++k) {
    for (Eigen::Index j = 0; j < p; ++j) x(j) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    out.dataset.parents.col(k) = x;
    for (Eigen::Index i = 0; i < a; ++i) {
      const double z = scm.logit(x, static_cast<std::size_t>(i)) + spec.noise_scale * rng.normal();
      out.dataset.children(i, k) = z > 0.0 ? 1.0 : 0.0;
    }
  }
  out.scm = std::move(scm);
  return out;
}

// ---------------------------------------------------------------------------------------
// Feature map and ridge regression

/// phi(x) = [1, c(x_1), ..., c(x_P), c(x_j) c(x_k) for j < k], with c(x) = x - 1/2 when
/// centered and c(x) = x otherwise. Both codings span the same function space; the centered
/// one makes the coefficients orthogonal contrasts on balanced binary data.
struct FeatureMap {
  std::size_t input_dim = 0;
  bool pairwise = true;
  bool centered = true;

  std::string id() const {
    return std::string(pairwise ? "degree2" : "linear") + (centered ? "-centered" : "-raw");
  }

  std::size_t output_dim() const { return 1 + input_dim + (pairwise ? input_dim * (input_dim - 1) / 2 : 0); }

  /// Input features that feature `f` is built from (empty for the intercept).
  std::vector<std::size_t> constituents(std::size_t f) const {
    if (f == 0) return {};
    if (f <= input_dim) return {f - 1};
    std::size_t k = f - 1 - input_dim;
    for (std::size_t j = 0; j < input_dim; ++j)
      for (std::size_t m = j + 1; m < input_dim; ++m)
        if (k-- == 0) return {j, m};
    throw ConfigError("feature index out of range");
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& inputs) const {  // inputs: input_dim x N -> N x output_dim
    if (static_cast<std::size_t>(inputs.rows()) != input_dim) throw SchemaMismatch("feature map input dimension mismatch");
    const double shift = centered ? 0.5 : 0.0;
    Eigen::MatrixXd phi(inputs.cols(), static_cast<Eigen::Index>(output_dim()));
    for (Eigen::Index n = 0; n < inputs.cols(); ++n) {
      Eigen::Index f = 0;
      phi(n, f++) = 1.0;
      for (std::size_t j = 0; j < input_dim; ++j) phi(n, f++) = inputs(static_cast<Eigen::Index>(j), n) - shift;
      if (pairwise)
        for (std::size_t j = 0; j < input_dim; ++j)
          for (std::size_t m = j + 1; m < input_dim; ++m)
            phi(n, f++) = (inputs(static_cast<Eigen::Index>(j), n) - shift) * (inputs(static_cast<Eigen::Index>(m), n) - shift);
    }
    return phi;
  }
};

/// W = (Phi^T Phi + lambda I)^{-1} Phi^T Y, computed with a Cholesky solve.
inline Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& phi, const Eigen::MatrixXd& targets, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("ridge lambda must be positive");
  if (phi.rows() == 0) throw ConfigError("ridge fit on an empty dataset");
  if (phi.rows() != targets.rows()) throw SchemaMismatch("design and target row counts differ");
  if (!phi.allFinite() || !targets.allFinite()) throw ConfigError("non-finite features or targets");
  Eigen::MatrixXd gram = phi.transpose() * phi;
  gram.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(gram);
  if (llt.info() != Eigen::Success) throw ConfigError("regularized Gram matrix is not positive definite");
  return llt.solve(phi.transpose() * targets);
}

struct RidgeFit {
  Eigen::MatrixXd weights;  // feature x child
  double lambda = 0;
  FeatureMap map;

  nlohmann::json to_json() const {
    std::vector<std::vector<double>> w(static_cast<std::size_t>(weights.rows()));
    for (Eigen::Index r = 0; r < weights.rows(); ++r)
      for (Eigen::Index c = 0; c < weights.cols(); ++c) w[static_cast<std::size_t>(r)].push_back(weights(r, c));
    return {{"feature_map", map.id()}, {"input_dim", map.input_dim}, {"lambda", lambda}, {"weights", w}};
  }
};

inline RidgeFit ridge_fit(const CausalDataset& data, const FeatureMap& map, double lambda) {
  if (data.size() == 0) throw ConfigError("ridge fit on an empty dataset");
  RidgeFit fit;
  fit.map = map;
  fit.map.input_dim = data.parent_dim();
  fit.lambda = lambda;
  fit.weights = ridge_solve(fit.map.apply(data.parents), data.children.transpose(), lambda);
  return fit;
}

/// Edge (j, i) iff some non-intercept feature built from parent j has |W_i| > threshold.
/// Entries in `excluded` (nonzero) are never reported.
inline EdgeMatrix recover_structure(const RidgeFit& fit, double threshold, const EdgeMatrix* excluded = nullptr) {
  if (!(threshold > 0.0)) throw ConfigError("recovery threshold must be positive");
  EdgeMatrix edges = EdgeMatrix::Zero(static_cast<Eigen::Index>(fit.map.input_dim), fit.weights.cols());
  for (Eigen::Index f = 0; f < fit.weights.rows(); ++f)
    for (Eigen::Index i = 0; i < fit.weights.cols(); ++i) {
      if (!(std::abs(fit.weights(f, i)) > threshold)) continue;
      for (std::size_t j : fit.map.constituents(static_cast<std::size_t>(f))) edges(static_cast<Eigen::Index>(j), i) = 1;
    }
  if (excluded) edges = edges.cwiseProduct((excluded->array() == 0).cast<int>().matrix());
  return edges;
}

/// SCA gates thresholded at `threshold` (strictly above).
inline EdgeMatrix threshold_gates(const Eigen::MatrixXd& gates, double threshold = 0.5) {
  return (gates.array() > threshold).cast<int>().matrix();
}

/// Self-edge positions (previous action i -> child i) for a spec.
inline EdgeMatrix self_edge_mask(std::size_t parent_dim, std::size_t child_dim) {
  EdgeMatrix m = EdgeMatrix::Zero(static_cast<Eigen::Index>(parent_dim), static_cast<Eigen::Index>(child_dim));
  for (std::size_t i = 0; i < child_dim; ++i) m(static_cast<Eigen::Index>(parent_dim - child_dim + i), static_cast<Eigen::Index>(i)) = 1;
  return m;
}

struct StructuralMetrics {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
  std::size_t shd = 0;
  std::size_t true_positives = 0, false_positives = 0, false_negatives = 0;
};

/// Precision is 1 with no predicted edges, recall is 1 with no true edges; SHD counts
/// entries that differ.
inline StructuralMetrics structural_metrics(const EdgeMatrix& predicted, const EdgeMatrix& truth) {
  if (predicted.rows() != truth.rows() || predicted.cols() != truth.cols())
    throw SchemaMismatch("edge matrices have different shapes");
  StructuralMetrics m;
  for (Eigen::Index r = 0; r < truth.rows(); ++r)
    for (Eigen::Index c = 0; c < truth.cols(); ++c) {
      const bool p = predicted(r, c) != 0, t = truth(r, c) != 0;
      if (p && t) ++m.true_positives;
      else if (p) ++m.false_positives;
      else if (t) ++m.false_negatives;
    }
  m.shd = m.false_positives + m.false_negatives;
  const auto tp = static_cast<double>(m.true_positives);
  if (m.true_positives + m.false_positives > 0) m.precision = tp / static_cast<double>(m.true_positives + m.false_positives);
  if (m.true_positives + m.false_negatives > 0) m.recall = tp / static_cast<double>(m.true_positives + m.false_negatives);
  m.f1 = (m.precision + m.recall) > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

/// Fraction of entries on which two edge matrices agree.
inline double edge_agreement(const EdgeMatrix& a, const EdgeMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw SchemaMismatch("edge matrices have different shapes");
  if (a.size() == 0) return 1.0;
  return static_cast<double>((a.array() == b.array()).count()) / static_cast<double>(a.size());
}

}  // namespace causalplan
