#pragma once

// Causal-aware action selection: mixes proposer probabilities with matrix scores, normalizes
// with a softmax, merges duplicate proposals and samples. Falls back to the matrix argmax
// when no proposal names an instructed action.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/causal_matrix.hpp"
#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/kitchen_sim.hpp"

namespace causalplan {

struct Proposal {
  std::string raw_text;
  std::optional<MacroAction> canonical;
  double p_a = 0.0;
  bool operator==(const Proposal&) const = default;
};

struct ProposalSet {
  std::vector<Proposal> proposals;
  StateVector state;
  ActionVector prev_action;
  bool transport_failure = false;
  bool operator==(const ProposalSet&) const = default;
};

struct PlannerConfig {
  double gamma = 0.5;
  std::uint64_t seed = 0;
  double temperature = 1.0;

  void validate() const {
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (temperature != 1.0) throw ConfigError("softmax temperature is fixed at 1");
  }
};

enum class PlanPath : std::uint8_t { Reweighted, Backup };

inline std::string_view path_name(PlanPath p) { return p == PlanPath::Reweighted ? "reweighted" : "backup"; }

struct CandidateTrace {
  std::string raw_text;
  MacroAction action = MacroAction::PickupOnion;
  double p_a = 0, p_c = 0, p_f = 0, normalized = 0;
};

struct PlanDecision {
  MacroAction chosen = MacroAction::PickupOnion;
  PlanPath path = PlanPath::Backup;
  std::vector<MacroAction> candidates;  // merged, first-occurrence order (singleton on backup)
  std::vector<double> distribution;     // aligned with candidates
  std::vector<CandidateTrace> trace;    // per recognized proposal, before merging
  std::vector<double> backup_scores;    // all-action scores, backup path only
  std::size_t unrecognized = 0;
  bool uninformed = false;
  bool transport_failure = false;

  nlohmann::json to_json() const {
    nlohmann::json cands = nlohmann::json::array();
    for (std::size_t k = 0; k < candidates.size(); ++k)
      cands.push_back({{"action", action_name(candidates[k])}, {"p", distribution[k]}});
    nlohmann::json tr = nlohmann::json::array();
    for (const auto& c : trace)
      tr.push_back({{"raw", c.raw_text},
                    {"action", action_name(c.action)},
                    {"p_a", c.p_a},
                    {"p_c", c.p_c},
                    {"p_f", c.p_f},
                    {"softmax", c.normalized}});
    nlohmann::json j = {{"chosen", action_name(chosen)},
                        {"path", path_name(path)},
                        {"distribution", cands},
                        {"proposals", tr},
                        {"unrecognized", unrecognized},
                        {"uninformed", uninformed},
                        {"transport_failure", transport_failure}};
    if (!backup_scores.empty()) j["backup_scores"] = backup_scores;
    return j;
  }
};

// ---------------------------------------------------------------------------------------
// Arithmetic

inline double reweight(double p_a, double p_c, double gamma) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(p_a >= 0.0 && p_a <= 1.0)) throw ConfigError("proposer probability must lie in [0, 1]");
  if (!(p_c >= 0.0)) throw ConfigError("causal score must be nonnegative");
  return gamma * p_a + (1.0 - gamma) * p_c;
}

/// Plain softmax, computed after subtracting the maximum.
inline std::vector<double> normalize(const std::vector<double>& values) {
  if (values.empty()) throw ConfigError("softmax of an empty list");
  for (double v : values)
    if (!std::isfinite(v)) throw ConfigError("softmax input is not finite");
  const double mx = *std::max_element(values.begin(), values.end());
  std::vector<double> out(values.size());
  double z = 0.0;
  for (std::size_t k = 0; k < values.size(); ++k) z += out[k] = std::exp(values[k] - mx);
  for (double& v : out) v /= z;
  return out;
}

struct MergedEntry {
  MacroAction action;
  double probability;
  bool operator==(const MergedEntry&) const = default;
};

/// Sums probabilities of entries sharing an action; order is first occurrence. Sums are
/// accumulated in extended precision and rounded once.
inline std::vector<MergedEntry> merge_redundant(const std::vector<MergedEntry>& entries) {
  std::vector<MergedEntry> out;
  std::vector<long double> sums;
  for (const auto& e : entries) {
    auto it = std::find_if(out.begin(), out.end(), [&](const MergedEntry& m) { return m.action == e.action; });
    if (it == out.end()) {
      out.push_back(e);
      sums.push_back(e.probability);
    } else {
      sums[static_cast<std::size_t>(it - out.begin())] += e.probability;
    }
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k].probability = static_cast<double>(sums[k]);
  return out;
}

/// Categorical draw by inverse CDF on one uniform variate.
inline std::size_t sample_action(const std::vector<double>& distribution, Rng& rng) {
  if (distribution.empty()) throw ConfigError("cannot sample from an empty distribution");
  double total = 0.0;
  for (double p : distribution) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ConfigError("distribution has a negative or non-finite entry");
    total += p;
  }
  if (total == 0.0) throw ConfigError("cannot sample from an all-zero distribution");
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("distribution does not sum to 1");
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t k = 0; k < distribution.size(); ++k) {
    if (distribution[k] <= 0.0) continue;
    last_positive = k;
    cum += distribution[k];
    if (u < cum) return k;
  }
  return last_positive;
}

// ---------------------------------------------------------------------------------------
// Canonicalization

namespace detail {

inline std::string squash(std::string_view text) {
  std::string out;
  for (unsigned char c : text)
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  return out;
}

}  // namespace detail

/// Lowercases, drops everything but letters and digits, then looks for an instructed action
/// name in the result. When several names occur the earliest one wins.
inline std::optional<MacroAction> canonicalize(std::string_view text) {
  const std::string s = detail::squash(text);
  std::optional<MacroAction> best;
  std::size_t best_pos = std::string::npos;
  for (MacroAction a : kAllActions) {
    const auto pos = s.find(detail::squash(action_name(a)));
    if (pos != std::string::npos && (best_pos == std::string::npos || pos < best_pos)) {
      best = a;
      best_pos = pos;
    }
  }
  return best;
}

inline Proposal make_proposal(std::string raw_text, double p_a) {
  Proposal p;
  p.canonical = canonicalize(raw_text);
  p.raw_text = std::move(raw_text);
  p.p_a = p_a;
  return p;
}

// ---------------------------------------------------------------------------------------
// Planning

/// Greedy choice over every instructed action; ties go to the lowest schema row. A null
/// matrix behaves like an all-zero one.
inline PlanDecision backup_action(const CausalActionMatrix* matrix, const StateVector& state,
                                  const ActionVector& prev_action) {
  PlanDecision d;
  d.path = PlanPath::Backup;
  std::vector<double> scores(kNumActions, 0.0);
  if (matrix) {
    scores = query_all(*matrix, state, prev_action);
  }
  std::size_t best = 0;
  for (std::size_t r = 1; r < scores.size(); ++r)
    if (scores[r] > scores[best]) best = r;
  d.uninformed = scores[best] <= 0.0;
  d.chosen = matrix ? *action_from_name(matrix->action_names[best]) : kAllActions[best];
  d.candidates = {d.chosen};
  d.distribution = {1.0};
  d.backup_scores = std::move(scores);
  return d;
}

inline PlanDecision plan(const ProposalSet& set, const CausalActionMatrix* matrix, const PlannerConfig& config,
                         Rng& rng) {
  config.validate();
  if (matrix && (set.state.bits.size() != matrix->state_dim || set.prev_action.bits.size() != matrix->action_dim()))
    throw SchemaMismatch("scenario dimensions do not match the causal matrix");

  std::vector<CandidateTrace> trace;
  std::size_t unrecognized = 0;
  std::optional<ActiveSet> active;
  if (matrix) active = active_indices(set.state, set.prev_action);
  for (const auto& p : set.proposals) {
    if (!p.canonical) {
      ++unrecognized;
      continue;
    }
    CandidateTrace c;
    c.raw_text = p.raw_text;
    c.action = *p.canonical;
    c.p_a = p.p_a;
    if (matrix) {
      const auto row = matrix->row_of(action_name(c.action));
      if (!row) throw SchemaMismatch("matrix has no row for " + std::string(action_name(c.action)));
      c.p_c = query_score(*matrix, *active, *row);
    }
    c.p_f = reweight(c.p_a, c.p_c, config.gamma);
    trace.push_back(std::move(c));
  }

  if (trace.empty()) {
    PlanDecision d = backup_action(matrix, set.state, set.prev_action);
    d.unrecognized = unrecognized;
    d.transport_failure = set.transport_failure;
    return d;
  }

  std::vector<double> pf(trace.size());
  for (std::size_t k = 0; k < trace.size(); ++k) pf[k] = trace[k].p_f;
  const auto soft = normalize(pf);
  std::vector<MergedEntry> entries;
  for (std::size_t k = 0; k < trace.size(); ++k) {
    trace[k].normalized = soft[k];
    entries.push_back({trace[k].action, soft[k]});
  }
  const auto merged = merge_redundant(entries);

  PlanDecision d;
  d.path = PlanPath::Reweighted;
  for (const auto& m : merged) {
    d.candidates.push_back(m.action);
    d.distribution.push_back(m.probability);
  }
  d.chosen = d.candidates[sample_action(d.distribution, rng)];
  d.trace = std::move(trace);
  d.unrecognized = unrecognized;
  d.transport_failure = set.transport_failure;
  return d;
}

/// A planner bound to a shared read-only matrix and its own random stream.
class CausalPlanner {
 public:
  CausalPlanner(const CausalActionMatrix* matrix, PlannerConfig config)
      : matrix_(matrix), config_(config), rng_(config.seed) {
    config_.validate();
  }

  PlanDecision plan(const ProposalSet& set) { return causalplan::plan(set, matrix_, config_, rng_); }
  const PlannerConfig& config() const { return config_; }

 private:
  const CausalActionMatrix* matrix_;
  PlannerConfig config_;
  Rng rng_;
};

}  // namespace causalplan
