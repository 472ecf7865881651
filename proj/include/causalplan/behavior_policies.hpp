#pragma once

// Scripted policies used to collect training buffers and to drive the partner agent.

#include <array>
#include <optional>
#include <string>

#include "causalplan/core.hpp"
#include "causalplan/kitchen_sim.hpp"

namespace causalplan {

enum class PolicyKind : std::uint8_t { GreedyChef, RandomLegal };

struct PolicySpec {
  PolicyKind kind = PolicyKind::GreedyChef;
  double epsilon = 0.1;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("policy epsilon must lie in [0, 1]");
  }
  std::string name() const { return kind == PolicyKind::GreedyChef ? "greedy_chef" : "random_legal"; }
};

inline PolicyKind policy_kind_from_name(const std::string& name) {
  if (name == "greedy_chef") return PolicyKind::GreedyChef;
  if (name == "random_legal") return PolicyKind::RandomLegal;
  throw ConfigError("unknown policy '" + name + "' (expected greedy_chef or random_legal)");
}

/// Deterministic soup workflow: deliver, fill, fetch a dish for a finished pot, add an
/// onion, fetch an onion. If none of those apply the agent sets down whatever it holds,
/// then falls back to the first legal action. Returns nullopt only when nothing is legal.
inline std::optional<MacroAction> greedy_choice(const KitchenState& s, int agent, const KitchenLayout& layout) {
  const ActionMask legal = legal_actions(s, agent, layout);
  if (legal.none()) return std::nullopt;
  auto ok = [&](MacroAction a) { return legal.test(index_of(a)); };

  if (ok(MacroAction::DeliverSoup)) return MacroAction::DeliverSoup;
  if (ok(MacroAction::FillDishWithSoup)) return MacroAction::FillDishWithSoup;
  if (ok(MacroAction::PickupDish) && detail::any_finished(s)) return MacroAction::PickupDish;
  if (ok(MacroAction::PutOnionInPot)) return MacroAction::PutOnionInPot;
  if (ok(MacroAction::PickupOnion)) return MacroAction::PickupOnion;
  if (ok(MacroAction::PlaceOnionOnCounter)) return MacroAction::PlaceOnionOnCounter;
  if (ok(MacroAction::PlaceDishOnCounter)) return MacroAction::PlaceDishOnCounter;
  for (MacroAction a : kAllActions)
    if (ok(a)) return a;
  return std::nullopt;
}

/// Per-action probabilities of `policy_act` in this state (all zero when nothing is legal).
inline std::array<double, kNumActions> policy_distribution(const PolicySpec& spec, const KitchenState& s, int agent,
                                                           const KitchenLayout& layout) {
  std::array<double, kNumActions> dist{};
  const ActionMask legal = legal_actions(s, agent, layout);
  if (legal.none()) return dist;
  const double uniform_mass = spec.kind == PolicyKind::RandomLegal ? 1.0 : spec.epsilon;
  for (MacroAction a : kAllActions)
    if (legal.test(index_of(a))) dist[index_of(a)] += uniform_mass / static_cast<double>(legal.count());
  if (spec.kind == PolicyKind::GreedyChef) dist[index_of(*greedy_choice(s, agent, layout))] += 1.0 - spec.epsilon;
  return dist;
}

namespace detail {

inline MacroAction uniform_legal(const ActionMask& legal, Rng& rng) {
  std::size_t pick = rng.uniform_index(legal.count());
  for (MacroAction a : kAllActions) {
    if (!legal.test(index_of(a))) continue;
    if (pick-- == 0) return a;
  }
  return kAllActions[0];
}

}  // namespace detail

/// Samples one action. nullopt is the no-op sentinel, returned only when no action is legal.
inline std::optional<MacroAction> policy_act(const PolicySpec& spec, const KitchenState& s, int agent,
                                             const KitchenLayout& layout, Rng& rng) {
  const ActionMask legal = legal_actions(s, agent, layout);
  if (legal.none()) return std::nullopt;
  if (spec.kind == PolicyKind::RandomLegal) return detail::uniform_legal(legal, rng);
  if (spec.epsilon > 0.0 && rng.uniform() < spec.epsilon) return detail::uniform_legal(legal, rng);
  return greedy_choice(s, agent, layout);
}

/// A policy bound to its own random stream.
class BehaviorPolicy {
 public:
  BehaviorPolicy(PolicySpec spec, std::uint64_t seed) : spec_(spec), rng_(seed) { spec_.validate(); }

  std::optional<MacroAction> act(const KitchenState& s, int agent, const KitchenLayout& layout) {
    return policy_act(spec_, s, agent, layout, rng_);
  }
  const PolicySpec& spec() const { return spec_; }

 private:
  PolicySpec spec_;
  Rng rng_;
};

}  // namespace causalplan
