#pragma once

// Structural Causal Action model.
//
// Child i (one per action feature) is predicted by its own MLP f_i from the parent vector
// x = [state ‖ previous action], soft-masked by column i of the gate matrix:
//
//   P(a_i = 1 | x) = sigmoid(f_i(x ⊙ g_i)),   g_ji = sigmoid(eta_ji),  g_(S+i),i ≡ 0.
//
// Training alternates one Adam step on the network weights (gates fixed) with one Adam step
// on the gate logits (weights fixed) using the same mini-batch. The gate step adds the
// negative-log-prior edge penalty  -lambda * sum_ji g_ji * log P(e = 1).
//
// Everything is templated on the floating-point type so that gradients can be checked in
// double precision while long training runs use float.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/trajectory_store.hpp"

namespace causalplan {

inline constexpr double kProbabilityClip = 1e-7;

/// Parent/child sample matrix, one column per sample.
struct CausalDataset {
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  Eigen::MatrixXd parents;   // (state_dim + action_dim) x N
  Eigen::MatrixXd children;  // action_dim x N

  std::size_t parent_dim() const { return state_dim + action_dim; }
  std::size_t child_dim() const { return action_dim; }
  std::size_t size() const { return static_cast<std::size_t>(parents.cols()); }
};

inline CausalDataset dataset_from_buffer(const Buffer& buf) {
  CausalDataset d;
  d.state_dim = buf.meta.state_dim;
  d.action_dim = buf.meta.action_dim;
  const auto n = static_cast<Eigen::Index>(buf.records.size());
  d.parents.resize(static_cast<Eigen::Index>(d.parent_dim()), n);
  d.children.resize(static_cast<Eigen::Index>(d.child_dim()), n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const auto& r = buf.records[static_cast<std::size_t>(k)];
    if (r.state.bits.size() != d.state_dim || r.prev_action.bits.size() != d.action_dim ||
        r.action.bits.size() != d.action_dim)
      throw SchemaMismatch("buffer record " + std::to_string(k) + " has inconsistent dimensions");
    Eigen::Index row = 0;
    for (auto b : r.state.bits) d.parents(row++, k) = b;
    for (auto b : r.prev_action.bits) d.parents(row++, k) = b;
    for (std::size_t i = 0; i < d.action_dim; ++i) d.children(static_cast<Eigen::Index>(i), k) = r.action.bits[i];
  }
  return d;
}

/// Gate values g_ji in [0, 1] (parent j -> child i), shape parent_dim x child_dim.
struct StructuralGates {
  Eigen::MatrixXd values;
  std::size_t state_dim = 0;
  std::string schema_fingerprint;
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Flat parameter storage. Eigen's allocator keeps the base address aligned to the SIMD
/// width, so vectorized reductions over mapped layers split the same way on every run.
template <typename Scalar>
using ParamVector = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

template <typename Scalar>
class ScaModel {
 public:
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using WeightMap = Eigen::Map<RowMatrix>;
  using ConstWeightMap = Eigen::Map<const RowMatrix>;
  using BiasMap = Eigen::Map<Vector>;
  using ConstBiasMap = Eigen::Map<const Vector>;

  struct LayerShape {
    std::size_t in = 0, out = 0;
    std::size_t weight_offset = 0, bias_offset = 0;  // relative to the net's first parameter
  };

  ScaModel() = default;

  ScaModel(std::size_t state_dim, std::size_t action_dim, std::vector<std::size_t> hidden)
      : state_dim_(state_dim), action_dim_(action_dim), hidden_(std::move(hidden)) {
    if (state_dim_ + action_dim_ == 0 || action_dim_ == 0) throw ConfigError("SCA model needs parents and children");
    std::size_t in = parent_dim();
    std::size_t offset = 0;
    std::vector<std::size_t> widths = hidden_;
    widths.push_back(1);
    for (std::size_t out : widths) {
      if (out == 0) throw ConfigError("hidden layer widths must be positive");
      LayerShape l{in, out, offset, offset + in * out};
      offset += in * out + out;
      layers_.push_back(l);
      in = out;
    }
    params_per_net_ = offset;
    params_.assign(params_per_net_ * action_dim_, Scalar(0));
    gate_logits_ = Matrix::Zero(static_cast<Eigen::Index>(parent_dim()), static_cast<Eigen::Index>(action_dim_));
  }

  std::size_t state_dim() const { return state_dim_; }
  std::size_t action_dim() const { return action_dim_; }
  std::size_t parent_dim() const { return state_dim_ + action_dim_; }
  std::size_t child_dim() const { return action_dim_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  const std::vector<LayerShape>& layers() const { return layers_; }
  std::size_t params_per_net() const { return params_per_net_; }

  ParamVector<Scalar>& params() { return params_; }
  const ParamVector<Scalar>& params() const { return params_; }
  Matrix& gate_logits() { return gate_logits_; }
  const Matrix& gate_logits() const { return gate_logits_; }

  const std::string& schema_fingerprint() const { return schema_fingerprint_; }
  void set_schema_fingerprint(std::string f) { schema_fingerprint_ = std::move(f); }

  /// True for the (previous action i -> next action i) entries, which are never edges.
  bool is_self_edge(std::size_t parent, std::size_t child) const { return parent == state_dim_ + child; }

  WeightMap weight(std::size_t net, std::size_t layer) {
    const auto& l = layers_[layer];
    return WeightMap(params_.data() + net * params_per_net_ + l.weight_offset, static_cast<Eigen::Index>(l.out),
                     static_cast<Eigen::Index>(l.in));
  }
  ConstWeightMap weight(std::size_t net, std::size_t layer) const {
    const auto& l = layers_[layer];
    return ConstWeightMap(params_.data() + net * params_per_net_ + l.weight_offset, static_cast<Eigen::Index>(l.out),
                          static_cast<Eigen::Index>(l.in));
  }
  BiasMap bias(std::size_t net, std::size_t layer) {
    const auto& l = layers_[layer];
    return BiasMap(params_.data() + net * params_per_net_ + l.bias_offset, static_cast<Eigen::Index>(l.out));
  }
  ConstBiasMap bias(std::size_t net, std::size_t layer) const {
    const auto& l = layers_[layer];
    return ConstBiasMap(params_.data() + net * params_per_net_ + l.bias_offset, static_cast<Eigen::Index>(l.out));
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; constant gate logits.
  void initialize(std::uint64_t seed, double gate_logit) {
    Rng rng(seed);
    for (std::size_t net = 0; net < action_dim_; ++net)
      for (std::size_t layer = 0; layer < layers_.size(); ++layer) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(layers_[layer].in));
        auto w = weight(net, layer);
        for (Eigen::Index r = 0; r < w.rows(); ++r)
          for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<Scalar>(rng.uniform(-bound, bound));
        auto b = bias(net, layer);
        for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = static_cast<Scalar>(rng.uniform(-bound, bound));
      }
    gate_logits_.setConstant(static_cast<Scalar>(gate_logit));
    clamp_self_edges();
  }

  /// Self-edge logits are pinned to zero (their gate is forced to 0 regardless).
  void clamp_self_edges() {
    for (std::size_t i = 0; i < action_dim_; ++i)
      gate_logits_(static_cast<Eigen::Index>(state_dim_ + i), static_cast<Eigen::Index>(i)) = Scalar(0);
  }

  /// Gates in the model's precision: sigmoid of the logits, self edges zeroed.
  Matrix gates() const {
    Matrix g(gate_logits_.rows(), gate_logits_.cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c)
      for (Eigen::Index r = 0; r < g.rows(); ++r)
        g(r, c) = is_self_edge(static_cast<std::size_t>(r), static_cast<std::size_t>(c))
                      ? Scalar(0)
                      : static_cast<Scalar>(sigmoid(static_cast<double>(gate_logits_(r, c))));
    return g;
  }

  /// Gates evaluated in double precision from the stored logits.
  StructuralGates structural_gates() const {
    StructuralGates out;
    out.values = gates().template cast<double>();
    for (Eigen::Index c = 0; c < out.values.cols(); ++c)
      for (Eigen::Index r = 0; r < out.values.rows(); ++r)
        out.values(r, c) = is_self_edge(static_cast<std::size_t>(r), static_cast<std::size_t>(c))
                               ? 0.0
                               : sigmoid(static_cast<double>(gate_logits_(r, c)));
    out.state_dim = state_dim_;
    out.schema_fingerprint = schema_fingerprint_;
    return out;
  }

  /// Pre-sigmoid outputs of net `i` for a batch of (already gated) inputs, one per column.
  Eigen::Matrix<Scalar, 1, Eigen::Dynamic> net_logits(std::size_t i, const Matrix& gated) const {
    Matrix act = gated;
    for (std::size_t layer = 0; layer < layers_.size(); ++layer) {
      Matrix z = weight(i, layer) * act;
      z.colwise() += bias(i, layer);
      if (layer + 1 < layers_.size()) act = z.cwiseMax(Scalar(0));
      else return z;
    }
    return {};
  }

  /// Child probabilities for a batch of parent vectors (parent_dim x B) -> (child_dim x B).
  Eigen::MatrixXd forward_batch(const Eigen::MatrixXd& parents) const {
    if (static_cast<std::size_t>(parents.rows()) != parent_dim())
      throw SchemaMismatch("forward: parent vector has " + std::to_string(parents.rows()) + " rows, expected " +
                           std::to_string(parent_dim()));
    const Matrix g = gates();
    const Matrix x = parents.cast<Scalar>();
    Eigen::MatrixXd out(static_cast<Eigen::Index>(action_dim_), parents.cols());
    for (std::size_t i = 0; i < action_dim_; ++i) {
      Matrix gated = x.array().colwise() * g.col(static_cast<Eigen::Index>(i)).array();
      auto z = net_logits(i, gated);
      for (Eigen::Index k = 0; k < z.cols(); ++k)
        out(static_cast<Eigen::Index>(i), k) = sigmoid(static_cast<double>(z(0, k)));
    }
    return out;
  }

  /// P(a_i = 1 | state, prev_action) for every child i.
  Eigen::VectorXd forward(const StateVector& state, const ActionVector& prev_action) const {
    if (state.bits.size() != state_dim_ || prev_action.bits.size() != action_dim_)
      throw SchemaMismatch("forward: state/action dimensions do not match the model");
    Eigen::MatrixXd x(static_cast<Eigen::Index>(parent_dim()), 1);
    Eigen::Index r = 0;
    for (auto b : state.bits) x(r++, 0) = b;
    for (auto b : prev_action.bits) x(r++, 0) = b;
    return forward_batch(x).col(0);
  }

 private:
  std::size_t state_dim_ = 0;
  std::size_t action_dim_ = 0;
  std::vector<std::size_t> hidden_;
  std::vector<LayerShape> layers_;
  std::size_t params_per_net_ = 0;
  ParamVector<Scalar> params_;
  Matrix gate_logits_;
  std::string schema_fingerprint_;
};

// ---------------------------------------------------------------------------------------
// Losses and gradients

/// A mini-batch with identical parent vectors collapsed: each unique input keeps its
/// multiplicity and the per-child sum of observed bits. Losses are unchanged by the
/// collapse; only the work per distinct input is shared.
template <typename Scalar>
struct CompactBatch {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> inputs;  // parent_dim x U
  Eigen::VectorXd counts;                                        // U
  Eigen::MatrixXd target_sums;                                   // child_dim x U
  double total = 0;                                              // number of samples B
};

template <typename Scalar>
CompactBatch<Scalar> compact_batch(const Eigen::MatrixXd& parents, const Eigen::MatrixXd& children) {
  if (parents.cols() != children.cols()) throw ConfigError("batch parent/child sample counts differ");
  if (parents.cols() == 0) throw ConfigError("empty batch");
  const Eigen::Index p = parents.rows();
  std::unordered_map<std::string, Eigen::Index> slot;
  std::vector<Eigen::Index> first;
  std::vector<Eigen::Index> assign(static_cast<std::size_t>(parents.cols()));
  std::string key(static_cast<std::size_t>(p) * sizeof(double), '\0');
  for (Eigen::Index k = 0; k < parents.cols(); ++k) {
    std::memcpy(key.data(), parents.col(k).data(), key.size());
    auto [it, inserted] = slot.emplace(key, static_cast<Eigen::Index>(first.size()));
    if (inserted) first.push_back(k);
    assign[static_cast<std::size_t>(k)] = it->second;
  }
  CompactBatch<Scalar> b;
  const auto u = static_cast<Eigen::Index>(first.size());
  b.inputs.resize(p, u);
  for (Eigen::Index j = 0; j < u; ++j) b.inputs.col(j) = parents.col(first[static_cast<std::size_t>(j)]).cast<Scalar>();
  b.counts = Eigen::VectorXd::Zero(u);
  b.target_sums = Eigen::MatrixXd::Zero(children.rows(), u);
  for (Eigen::Index k = 0; k < parents.cols(); ++k) {
    const Eigen::Index j = assign[static_cast<std::size_t>(k)];
    b.counts(j) += 1.0;
    b.target_sums.col(j) += children.col(k);
  }
  b.total = static_cast<double>(parents.cols());
  return b;
}

/// Mask applied to the parent vector of each child, with its derivative with respect to the
/// gate logits. The deterministic mask is the gate matrix itself; the relaxed-Bernoulli
/// mask draws  m = sigmoid((eta + log u - log(1 - u)) / tau)  with u ~ U(0, 1).
template <typename Scalar>
struct GateSample {
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> values;  // parent x child
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> slope;   // d values / d logits
};

template <typename Scalar>
GateSample<Scalar> soft_mask(const ScaModel<Scalar>& model) {
  GateSample<Scalar> m;
  m.values = model.gates();
  m.slope = (m.values.array() * (Scalar(1) - m.values.array())).matrix();
  return m;
}

template <typename Scalar>
GateSample<Scalar> relaxed_mask(const ScaModel<Scalar>& model, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ConfigError("mask temperature must be positive");
  const auto& logits = model.gate_logits();
  GateSample<Scalar> m;
  m.values.resize(logits.rows(), logits.cols());
  m.slope.resize(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c)
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
      double u = rng.uniform();
      while (u <= 0.0) u = rng.uniform();
      const double v = sigmoid((static_cast<double>(logits(r, c)) + std::log(u) - std::log1p(-u)) / temperature);
      const bool self = model.is_self_edge(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
      m.values(r, c) = self ? Scalar(0) : static_cast<Scalar>(v);
      m.slope(r, c) = self ? Scalar(0) : static_cast<Scalar>(v * (1.0 - v) / temperature);
    }
  return m;
}

template <typename Scalar>
struct CausalGradients {
  double loss = 0;                                                   // mean over batch of summed child NLL
  ParamVector<Scalar> params;                                        // d loss / d network parameters
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> gate_logits;  // d loss / d gate logits
  std::size_t clipped = 0;                                           // probabilities clipped before log
};

/// Causal loss  E_batch[ -sum_i log P(a_i | s, a_prev) ]  with Bernoulli likelihoods, and
/// optionally its analytic gradients. Probabilities are clipped to [1e-7, 1 - 1e-7]; a
/// clipped probability contributes no gradient.
///
/// Several mini-batch groups, each with its own mask draw, may be passed at once. Their
/// losses and gradients add up; every net then runs once over the columns of all groups.
template <typename Scalar>
CausalGradients<Scalar> causal_gradients(const ScaModel<Scalar>& model, std::span<const CompactBatch<Scalar>> batches,
                                         std::span<const GateSample<Scalar>> masks, bool want_params,
                                         bool want_gates) {
  using Matrix = typename ScaModel<Scalar>::Matrix;
  if (batches.empty() || batches.size() != masks.size()) throw ConfigError("need one mask per batch group");
  std::vector<Eigen::Index> offset(batches.size() + 1, 0);
  for (std::size_t q = 0; q < batches.size(); ++q) {
    const auto& b = batches[q];
    if (static_cast<std::size_t>(b.inputs.rows()) != model.parent_dim() ||
        static_cast<std::size_t>(b.target_sums.rows()) != model.child_dim())
      throw SchemaMismatch("batch dimensions do not match the model");
    if (masks[q].values.rows() != model.gate_logits().rows() || masks[q].values.cols() != model.gate_logits().cols())
      throw SchemaMismatch("gate sample shape does not match the model");
    offset[q + 1] = offset[q] + b.inputs.cols();
  }

  CausalGradients<Scalar> out;
  if (want_params) out.params.assign(model.params().size(), Scalar(0));
  if (want_gates) out.gate_logits = Matrix::Zero(model.gate_logits().rows(), model.gate_logits().cols());

  const auto& layers = model.layers();
  const std::size_t n_layers = layers.size();
  const Eigen::Index u = offset.back();
  const auto p = static_cast<Eigen::Index>(model.parent_dim());

  std::vector<Matrix> acts(n_layers);
  std::vector<Matrix> pre(n_layers);
  for (std::size_t i = 0; i < model.child_dim(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    acts[0].resize(p, u);
    for (std::size_t q = 0; q < batches.size(); ++q)
      acts[0].middleCols(offset[q], batches[q].inputs.cols()) =
          batches[q].inputs.array().colwise() * masks[q].values.col(col).array();
    for (std::size_t l = 0; l < n_layers; ++l) {
      pre[l].noalias() = model.weight(i, l) * acts[l];
      pre[l].colwise() += model.bias(i, l);
      if (l + 1 < n_layers) acts[l + 1] = pre[l].cwiseMax(Scalar(0));
    }

    Matrix delta(1, u);
    for (std::size_t q = 0; q < batches.size(); ++q) {
      const auto& batch = batches[q];
      for (Eigen::Index k = 0; k < batch.inputs.cols(); ++k) {
        const double pr = sigmoid(static_cast<double>(pre[n_layers - 1](0, offset[q] + k)));
        const double c = batch.counts(k);
        const double y = batch.target_sums(col, k);
        double pc = pr;
        bool clipped = false;
        if (pc < kProbabilityClip) {
          pc = kProbabilityClip;
          clipped = true;
        } else if (pc > 1.0 - kProbabilityClip) {
          pc = 1.0 - kProbabilityClip;
          clipped = true;
        }
        if (clipped) out.clipped += static_cast<std::size_t>(c);
        out.loss += (-y * std::log(pc) - (c - y) * std::log1p(-pc)) / batch.total;
        delta(0, offset[q] + k) = clipped ? Scalar(0) : static_cast<Scalar>((c * pr - y) / batch.total);
      }
    }
    if (!want_params && !want_gates) continue;

    for (std::size_t l = n_layers; l-- > 0;) {
      if (want_params) {
        const auto& shape = layers[l];
        Scalar* base = out.params.data() + i * model.params_per_net();
        typename ScaModel<Scalar>::WeightMap dw(base + shape.weight_offset, static_cast<Eigen::Index>(shape.out),
                                                static_cast<Eigen::Index>(shape.in));
        typename ScaModel<Scalar>::BiasMap db(base + shape.bias_offset, static_cast<Eigen::Index>(shape.out));
        dw.noalias() = delta * acts[l].transpose();
        db = delta.rowwise().sum();
      }
      if (l > 0) {
        Matrix back = model.weight(i, l).transpose() * delta;
        delta = back.array() * (pre[l - 1].array() > Scalar(0)).template cast<Scalar>();
      } else if (want_gates) {
        const Matrix dx = model.weight(i, 0).transpose() * delta;  // d loss / d gated input
        for (Eigen::Index j = 0; j < dx.rows(); ++j) {
          if (model.is_self_edge(static_cast<std::size_t>(j), i)) continue;
          for (std::size_t q = 0; q < batches.size(); ++q) {
            const auto& in = batches[q].inputs;
            const Scalar s = (dx.row(j).segment(offset[q], in.cols()).array() * in.row(j).array()).sum();
            out.gate_logits(j, col) += s * masks[q].slope(j, col);
          }
        }
      }
    }
  }
  return out;
}

template <typename Scalar>
CausalGradients<Scalar> causal_gradients(const ScaModel<Scalar>& model, const CompactBatch<Scalar>& batch,
                                         const GateSample<Scalar>& mask, bool want_params, bool want_gates) {
  return causal_gradients(model, std::span<const CompactBatch<Scalar>>(&batch, 1),
                          std::span<const GateSample<Scalar>>(&mask, 1), want_params, want_gates);
}

template <typename Scalar>
double causal_loss(const ScaModel<Scalar>& model, const CompactBatch<Scalar>& batch, std::size_t* clipped = nullptr) {
  auto r = causal_gradients(model, batch, soft_mask(model), false, false);
  if (clipped) *clipped = r.clipped;
  return r.loss;
}

/// Convenience overload on raw (parents, children) sample matrices.
template <typename Scalar>
double causal_loss(const ScaModel<Scalar>& model, const Eigen::MatrixXd& parents, const Eigen::MatrixXd& children,
                   std::size_t* clipped = nullptr) {
  return causal_loss(model, compact_batch<Scalar>(parents, children), clipped);
}

inline void check_edge_prior(double lambda_reg, double edge_prior) {
  if (!(edge_prior > 0.0 && edge_prior < 1.0)) throw ConfigError("edge prior must lie strictly between 0 and 1");
  if (!(lambda_reg >= 0.0)) throw ConfigError("regularization weight must be nonnegative");
}

/// -lambda * sum_ji g_ji * log P(e_ji = 1).
template <typename Derived>
double reg_loss(const Eigen::MatrixBase<Derived>& gates, double lambda_reg, double edge_prior) {
  check_edge_prior(lambda_reg, edge_prior);
  return -lambda_reg * std::log(edge_prior) * static_cast<double>(gates.template cast<double>().sum());
}

/// Gradient of reg_loss with respect to the gate logits.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> reg_gradient(const ScaModel<Scalar>& model, double lambda_reg,
                                                                    double edge_prior) {
  check_edge_prior(lambda_reg, edge_prior);
  const auto g = model.gates();
  const Scalar scale = static_cast<Scalar>(-lambda_reg * std::log(edge_prior));
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> grad = scale * (g.array() * (Scalar(1) - g.array())).matrix();
  for (std::size_t i = 0; i < model.child_dim(); ++i)
    grad(static_cast<Eigen::Index>(model.state_dim() + i), static_cast<Eigen::Index>(i)) = Scalar(0);
  return grad;
}

// ---------------------------------------------------------------------------------------
// Optimization

template <typename Scalar>
class Adam {
 public:
  Adam(std::size_t n, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

  void step(Scalar* params, const Scalar* grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < m_.size(); ++k) {
      const double gk = static_cast<double>(grads[k]);
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * gk;
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * gk * gk;
      const double mh = m_[k] / c1;
      const double vh = v_[k] / c2;
      params[k] = static_cast<Scalar>(static_cast<double>(params[k]) - lr_ * mh / (std::sqrt(vh) + eps_));
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  double lr = 3e-4;
  double gate_lr = 3e-3;
  double lambda_reg = 1e-7;
  double edge_prior = 0.1;
  std::size_t iterations = 20000;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  std::vector<std::size_t> hidden = {64, 256, 256, 64};
  double gate_init_logit = -2.0;
  std::size_t trace_interval = 100;
  std::string precision = "float32";
  std::string mask = "relaxed";        // "relaxed" (sampled logistic noise) or "soft"
  double mask_temperature = 0.5;
  std::size_t mask_groups = 8;         // independent mask draws per mini-batch

  void validate() const {
    if (!(lr > 0.0) || !(gate_lr > 0.0)) throw ConfigError("learning rates must be positive");
    check_edge_prior(lambda_reg, edge_prior);
    if (batch_size == 0) throw ConfigError("batch size must be positive");
    if (trace_interval == 0) throw ConfigError("trace interval must be positive");
    if (precision != "float32" && precision != "float64") throw ConfigError("precision must be float32 or float64");
    if (mask != "relaxed" && mask != "soft") throw ConfigError("mask must be relaxed or soft");
    if (!(mask_temperature > 0.0)) throw ConfigError("mask temperature must be positive");
    if (mask_groups == 0) throw ConfigError("mask_groups must be positive");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr},
            {"gate_lr", gate_lr},
            {"lambda_reg", lambda_reg},
            {"edge_prior", edge_prior},
            {"iterations", iterations},
            {"batch_size", batch_size},
            {"seed", seed},
            {"hidden", hidden},
            {"gate_init_logit", gate_init_logit},
            {"trace_interval", trace_interval},
            {"precision", precision},
            {"mask", mask},
            {"mask_temperature", mask_temperature},
            {"mask_groups", mask_groups}};
  }

  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.gate_lr = j.value("gate_lr", c.gate_lr);
    c.lambda_reg = j.value("lambda_reg", c.lambda_reg);
    c.edge_prior = j.value("edge_prior", c.edge_prior);
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.hidden = j.value("hidden", c.hidden);
    c.gate_init_logit = j.value("gate_init_logit", c.gate_init_logit);
    c.trace_interval = j.value("trace_interval", c.trace_interval);
    c.precision = j.value("precision", c.precision);
    c.mask = j.value("mask", c.mask);
    c.mask_temperature = j.value("mask_temperature", c.mask_temperature);
    c.mask_groups = j.value("mask_groups", c.mask_groups);
    return c;
  }
};

struct TraceEntry {
  std::size_t iteration = 0;
  double causal = 0;
  double reg = 0;
  bool operator==(const TraceEntry&) const = default;
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t iteration, const std::string& what)
      : Error("training aborted at iteration " + std::to_string(iteration) + ": " + what), iteration_(iteration) {}
  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

template <typename Scalar>
struct TrainResult {
  ScaModel<Scalar> model;
  std::vector<TraceEntry> trace;
  std::size_t clipped = 0;
  TrainConfig config;
};

/// Fresh model with the configured architecture and deterministic initialization.
template <typename Scalar>
ScaModel<Scalar> make_model(std::size_t state_dim, std::size_t action_dim, const TrainConfig& config) {
  ScaModel<Scalar> model(state_dim, action_dim, config.hidden);
  model.initialize(derive_seed(config.seed, 0x1417), config.gate_init_logit);
  return model;
}

/// Alternating optimization: per iteration sample one mini-batch (with replacement), take an
/// Adam step on the network weights under the causal loss, then an Adam step on the gate
/// logits under causal loss plus edge penalty.
template <typename Scalar>
TrainResult<Scalar> train(const CausalDataset& data, const TrainConfig& config,
                          const std::function<void(std::size_t, double)>& progress = {}) {
  config.validate();
  if (data.size() == 0) throw ConfigError("cannot train on an empty dataset");
  if (static_cast<std::size_t>(data.children.rows()) != data.child_dim() ||
      static_cast<std::size_t>(data.parents.rows()) != data.parent_dim())
    throw SchemaMismatch("dataset dimensions are inconsistent");

  TrainResult<Scalar> result;
  result.config = config;
  result.model = make_model<Scalar>(data.state_dim, data.action_dim, config);
  ScaModel<Scalar>& model = result.model;

  Adam<Scalar> opt_nets(model.params().size(), config.lr);
  Adam<Scalar> opt_gates(static_cast<std::size_t>(model.gate_logits().size()), config.gate_lr);
  Rng rng(derive_seed(config.seed, 0xba7c));

  const std::size_t groups = std::min(config.mask_groups, config.batch_size);
  const bool relaxed = config.mask == "relaxed";
  std::vector<Eigen::MatrixXd> gp(groups), gc(groups);
  for (std::size_t q = 0; q < groups; ++q) {
    const auto cols = static_cast<Eigen::Index>(config.batch_size / groups + (q < config.batch_size % groups ? 1 : 0));
    gp[q].resize(data.parents.rows(), cols);
    gc[q].resize(data.children.rows(), cols);
  }
  std::vector<CompactBatch<Scalar>> batches(groups);
  std::vector<GateSample<Scalar>> masks(groups);
  using Matrix = typename ScaModel<Scalar>::Matrix;

  for (std::size_t it = 0; it < config.iterations; ++it) {
    for (std::size_t q = 0; q < groups; ++q) {
      for (Eigen::Index k = 0; k < gp[q].cols(); ++k) {
        const auto idx = static_cast<Eigen::Index>(rng.uniform_index(data.size()));
        gp[q].col(k) = data.parents.col(idx);
        gc[q].col(k) = data.children.col(idx);
      }
      batches[q] = compact_batch<Scalar>(gp[q], gc[q]);
      batches[q].total = static_cast<double>(config.batch_size);
      masks[q] = relaxed ? relaxed_mask(model, config.mask_temperature, rng) : soft_mask(model);
    }

    // Network step, gates held fixed.
    const std::span<const CompactBatch<Scalar>> batch_span(batches);
    const std::span<const GateSample<Scalar>> mask_span(masks);
    auto gn = causal_gradients(model, batch_span, mask_span, true, false);
    const double causal = gn.loss;
    result.clipped += gn.clipped;
    if (!std::isfinite(causal)) throw TrainingError(it, "non-finite causal loss");
    opt_nets.step(model.params().data(), gn.params.data());

    // Gate step on the same batch and noise, networks held fixed. The logits have not moved
    // since the masks were drawn, so the stored slopes still apply.
    auto gg = causal_gradients(model, batch_span, mask_span, false, true);
    const double causal_after = gg.loss;
    Matrix grad_gates = reg_gradient(model, config.lambda_reg, config.edge_prior) + gg.gate_logits;
    if (!std::isfinite(causal_after)) throw TrainingError(it, "non-finite causal loss");
    const double reg = reg_loss(model.gates(), config.lambda_reg, config.edge_prior);
    if (!std::isfinite(reg)) throw TrainingError(it, "non-finite regularization loss");
    opt_gates.step(model.gate_logits().data(), grad_gates.data());
    model.clamp_self_edges();

    if (it % config.trace_interval == 0 || it + 1 == config.iterations) {
      result.trace.push_back({it, causal, reg});
      if (progress) progress(it, causal + reg);
    }
  }
  return result;
}

// ---------------------------------------------------------------------------------------
// Checkpoints

inline constexpr std::string_view kCheckpointFormat = "causalplan-sca-checkpoint/1";

template <typename Scalar>
nlohmann::json checkpoint_to_json(const ScaModel<Scalar>& model, const TrainConfig& config,
                                  const std::vector<TraceEntry>& trace, std::size_t clipped = 0) {
  using nlohmann::json;
  json nets = json::array();
  for (std::size_t i = 0; i < model.child_dim(); ++i) {
    json layers = json::array();
    for (std::size_t l = 0; l < model.layers().size(); ++l) {
      const auto w = model.weight(i, l);
      const auto b = model.bias(i, l);
      std::vector<double> wd(static_cast<std::size_t>(w.size()));
      for (Eigen::Index r = 0, k = 0; r < w.rows(); ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) wd[static_cast<std::size_t>(k++)] = static_cast<double>(w(r, c));
      std::vector<double> bd(static_cast<std::size_t>(b.size()));
      for (Eigen::Index r = 0; r < b.size(); ++r) bd[static_cast<std::size_t>(r)] = static_cast<double>(b(r));
      layers.push_back({{"weight", {{"shape", {w.rows(), w.cols()}}, {"data", wd}}}, {"bias", bd}});
    }
    nets.push_back({{"layers", layers}});
  }
  std::vector<double> logits;
  for (Eigen::Index r = 0; r < model.gate_logits().rows(); ++r)
    for (Eigen::Index c = 0; c < model.gate_logits().cols(); ++c)
      logits.push_back(static_cast<double>(model.gate_logits()(r, c)));
  json tr = json::array();
  for (const auto& e : trace) tr.push_back({{"iteration", e.iteration}, {"causal", e.causal}, {"reg", e.reg}});
  return {{"format", kCheckpointFormat},
          {"schema_fingerprint", model.schema_fingerprint()},
          {"state_dim", model.state_dim()},
          {"action_dim", model.action_dim()},
          {"hidden", model.hidden()},
          {"precision", sizeof(Scalar) == 4 ? "float32" : "float64"},
          {"generating_nets", nets},
          {"gate_logits", {{"shape", {model.gate_logits().rows(), model.gate_logits().cols()}}, {"data", logits}}},
          {"config", config.to_json()},
          {"loss_trace", tr},
          {"clipped", clipped}};
}

template <typename Scalar>
struct Checkpoint {
  ScaModel<Scalar> model;
  TrainConfig config;
  std::vector<TraceEntry> trace;
  std::size_t clipped = 0;
};

template <typename Scalar>
Checkpoint<Scalar> checkpoint_from_json(const nlohmann::json& j) {
  Checkpoint<Scalar> ck;
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) throw ConfigError("unsupported checkpoint format");
    ck.model = ScaModel<Scalar>(j.at("state_dim").get<std::size_t>(), j.at("action_dim").get<std::size_t>(),
                                j.at("hidden").get<std::vector<std::size_t>>());
    ck.model.set_schema_fingerprint(j.value("schema_fingerprint", ""));
    const auto& nets = j.at("generating_nets");
    if (nets.size() != ck.model.child_dim()) throw ConfigError("checkpoint net count does not match action_dim");
    for (std::size_t i = 0; i < ck.model.child_dim(); ++i) {
      const auto& layers = nets[i].at("layers");
      if (layers.size() != ck.model.layers().size()) throw ConfigError("checkpoint layer count mismatch");
      for (std::size_t l = 0; l < layers.size(); ++l) {
        auto w = ck.model.weight(i, l);
        auto b = ck.model.bias(i, l);
        const auto shape = layers[l].at("weight").at("shape").get<std::vector<Eigen::Index>>();
        const auto wd = layers[l].at("weight").at("data").get<std::vector<double>>();
        const auto bd = layers[l].at("bias").get<std::vector<double>>();
        if (shape.size() != 2 || shape[0] != w.rows() || shape[1] != w.cols() ||
            wd.size() != static_cast<std::size_t>(w.size()) || bd.size() != static_cast<std::size_t>(b.size()))
          throw ConfigError("checkpoint tensor shape mismatch");
        for (Eigen::Index r = 0, k = 0; r < w.rows(); ++r)
          for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = static_cast<Scalar>(wd[static_cast<std::size_t>(k++)]);
        for (Eigen::Index r = 0; r < b.size(); ++r) b(r) = static_cast<Scalar>(bd[static_cast<std::size_t>(r)]);
      }
    }
    const auto& gl = j.at("gate_logits");
    const auto shape = gl.at("shape").get<std::vector<Eigen::Index>>();
    const auto data = gl.at("data").get<std::vector<double>>();
    auto& logits = ck.model.gate_logits();
    if (shape.size() != 2 || shape[0] != logits.rows() || shape[1] != logits.cols() ||
        data.size() != static_cast<std::size_t>(logits.size()))
      throw ConfigError("checkpoint gate matrix shape mismatch");
    for (Eigen::Index r = 0, k = 0; r < logits.rows(); ++r)
      for (Eigen::Index c = 0; c < logits.cols(); ++c) logits(r, c) = static_cast<Scalar>(data[static_cast<std::size_t>(k++)]);
    if (j.contains("config")) ck.config = TrainConfig::from_json(j.at("config"));
    for (const auto& e : j.value("loss_trace", nlohmann::json::array()))
      ck.trace.push_back({e.at("iteration").get<std::size_t>(), e.at("causal").get<double>(), e.at("reg").get<double>()});
    ck.clipped = j.value("clipped", std::size_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  return ck;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j, int indent = -1) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << j.dump(indent) << '\n';
}

template <typename Scalar>
void save_checkpoint(const std::string& path, const ScaModel<Scalar>& model, const TrainConfig& config,
                     const std::vector<TraceEntry>& trace, std::size_t clipped = 0) {
  write_json_file(path, checkpoint_to_json(model, config, trace, clipped));
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::string& path) {
  return checkpoint_from_json<Scalar>(read_json_file(path));
}

/// Structural gates of a stored checkpoint, whatever precision it was trained in.
inline StructuralGates load_checkpoint_gates(const std::string& path) {
  return load_checkpoint<double>(path).model.structural_gates();
}

}  // namespace causalplan
