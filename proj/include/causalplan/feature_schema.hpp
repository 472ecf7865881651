#pragma once

// Binary factorization of kitchen states and macro actions. State features are encoded
// relative to a controlling agent: the "...1" hand features describe that agent and the
// "...2" features describe its partner.

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/core.hpp"
#include "causalplan/kitchen_sim.hpp"

namespace causalplan {

using Bits = std::vector<std::uint8_t>;

struct StateVector {
  Bits bits;
  bool operator==(const StateVector&) const = default;
};

struct ActionVector {
  Bits bits;

  /// All-zero "no previous action" sentinel.
  static ActionVector none(std::size_t action_dim) { return {Bits(action_dim, 0)}; }
  bool is_none() const { return std::none_of(bits.begin(), bits.end(), [](auto b) { return b != 0; }); }
  /// Index of the set bit, if any.
  std::optional<std::size_t> index() const {
    for (std::size_t i = 0; i < bits.size(); ++i)
      if (bits[i]) return i;
    return std::nullopt;
  }
  bool operator==(const ActionVector&) const = default;
};

struct ActiveSet {
  std::vector<std::size_t> indices;
  bool operator==(const ActiveSet&) const = default;
};

/// Pot fill level as seen by the features: 0..3 onions, or finished.
enum class PotLevel : std::uint8_t { Empty = 0, One, Two, Three, Finished };

/// The part of a kitchen state that the features observe.
struct ObservedState {
  std::array<Hand, 2> hands{Hand::Empty, Hand::Empty};  // [controlling, partner]
  std::vector<PotLevel> pots;
  bool delivered = false;
  bool operator==(const ObservedState&) const = default;
};

inline PotLevel pot_level(const Pot& p) {
  if (p.finished) return PotLevel::Finished;
  return static_cast<PotLevel>(std::clamp(p.onions, 0, 3));
}

inline ObservedState observe(const KitchenState& s, int controlling_agent) {
  ObservedState o;
  o.hands = {s.hands[static_cast<std::size_t>(controlling_agent)],
             s.hands[static_cast<std::size_t>(1 - controlling_agent)]};
  for (const Pot& p : s.pots) o.pots.push_back(pot_level(p));
  o.delivered = s.deliveries > 0;
  return o;
}

class FeatureSchema {
 public:
  FeatureSchema(std::vector<std::string> state_features, std::vector<std::string> action_features)
      : state_features_(std::move(state_features)), action_features_(std::move(action_features)) {
    index_features();
  }

  /// Default schema for a layout with `num_pots` pots. One pot uses the single-pot names
  /// (pot0..pot3, pot_finished); two pots use the suffixed names (pot0_0, ..., pot_finished_1).
  static FeatureSchema for_pots(int num_pots) {
    if (num_pots < 1 || num_pots > 2) throw ConfigError("feature schema supports one or two pots");
    std::vector<std::string> state = {"empty_hand1", "hold_onion1", "hold_dish1", "dish_with_soup1"};
    for (int p = 0; p < num_pots; ++p) {
      const std::string suffix = num_pots == 1 ? "" : "_" + std::to_string(p);
      for (int level = 0; level < 4; ++level) state.push_back("pot" + std::to_string(level) + suffix);
      state.push_back("pot_finished" + suffix);
    }
    state.push_back("goal_delivered");
    for (const char* h : {"empty_hand2", "hold_onion2", "hold_dish2", "dish_with_soup2"}) state.emplace_back(h);
    std::vector<std::string> actions(kActionNames.begin(), kActionNames.end());
    return FeatureSchema(std::move(state), std::move(actions));
  }

  static FeatureSchema cramped_room() { return for_pots(1); }

  std::size_t state_dim() const { return state_features_.size(); }
  std::size_t action_dim() const { return action_features_.size(); }
  std::size_t parent_dim() const { return state_dim() + action_dim(); }
  std::size_t child_dim() const { return action_dim(); }
  int num_pots() const { return static_cast<int>(pot_index_.size()); }

  const std::vector<std::string>& state_features() const { return state_features_; }
  const std::vector<std::string>& action_features() const { return action_features_; }

  /// Parent feature names: state features followed by previous-action features.
  std::vector<std::string> parent_features() const {
    std::vector<std::string> out = state_features_;
    out.insert(out.end(), action_features_.begin(), action_features_.end());
    return out;
  }

  std::optional<std::size_t> state_index(std::string_view name) const { return lookup(state_lookup_, name); }
  std::optional<std::size_t> action_index(std::string_view name) const { return lookup(action_lookup_, name); }

  std::size_t action_index(MacroAction a) const { return action_row_[index_of(a)]; }
  MacroAction action_at(std::size_t row) const { return row_action_.at(row); }

  std::size_t hand_index(int who, Hand h) const { return hand_index_[who][static_cast<std::size_t>(h)]; }
  std::size_t pot_index(int pot, PotLevel level) const {
    return pot_index_.at(static_cast<std::size_t>(pot))[static_cast<std::size_t>(level)];
  }
  std::size_t goal_index() const { return goal_index_; }

  /// Stable identifier of the ordered feature lists.
  std::string fingerprint() const {
    std::string joined;
    for (const auto& f : state_features_) joined += f + ',';
    joined += '|';
    for (const auto& f : action_features_) joined += f + ',';
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(joined)));
    return buf;
  }

  nlohmann::json to_json() const {
    return {{"state_features", state_features_}, {"action_features", action_features_}};
  }

  static FeatureSchema from_json(const nlohmann::json& j) {
    try {
      return FeatureSchema(j.at("state_features").get<std::vector<std::string>>(),
                           j.at("action_features").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed schema document: ") + e.what());
    }
  }

  static FeatureSchema load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open schema file: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("malformed schema file " + path + ": " + e.what());
    }
    return from_json(j);
  }

  bool operator==(const FeatureSchema& o) const {
    return state_features_ == o.state_features_ && action_features_ == o.action_features_;
  }

 private:
  static std::optional<std::size_t> lookup(const std::unordered_map<std::string, std::size_t>& m,
                                           std::string_view name) {
    auto it = m.find(std::string(name));
    if (it == m.end()) return std::nullopt;
    return it->second;
  }

  void index_features() {
    for (std::size_t i = 0; i < state_features_.size(); ++i)
      if (!state_lookup_.emplace(state_features_[i], i).second)
        throw ConfigError("duplicate state feature '" + state_features_[i] + "'");
    for (std::size_t i = 0; i < action_features_.size(); ++i)
      if (!action_lookup_.emplace(action_features_[i], i).second)
        throw ConfigError("duplicate action feature '" + action_features_[i] + "'");

    if (action_features_.size() != kNumActions)
      throw ConfigError("schema must list exactly " + std::to_string(kNumActions) + " action features");
    for (std::size_t row = 0; row < kNumActions; ++row) {
      auto a = action_from_name(action_features_[row]);
      if (!a) throw ConfigError("unknown action feature '" + action_features_[row] + "'");
      action_row_[index_of(*a)] = row;
      row_action_[row] = *a;
    }

    constexpr std::array<const char*, 4> hand_stems = {"empty_hand", "hold_onion", "hold_dish", "dish_with_soup"};
    for (int who = 0; who < 2; ++who)
      for (std::size_t h = 0; h < 4; ++h) {
        const std::string name = std::string(hand_stems[h]) + std::to_string(who + 1);
        auto idx = state_index(name);
        if (!idx) throw ConfigError("schema is missing state feature '" + name + "'");
        hand_index_[who][h] = *idx;
      }
    auto goal = state_index("goal_delivered");
    if (!goal) throw ConfigError("schema is missing state feature 'goal_delivered'");
    goal_index_ = *goal;

    auto level_name = [](int level, const std::string& suffix) {
      return level < 4 ? "pot" + std::to_string(level) + suffix : "pot_finished" + suffix;
    };
    if (state_index("pot0")) {
      std::array<std::size_t, 5> levels{};
      for (int level = 0; level < 5; ++level) {
        auto idx = state_index(level_name(level, ""));
        if (!idx) throw ConfigError("schema is missing state feature '" + level_name(level, "") + "'");
        levels[static_cast<std::size_t>(level)] = *idx;
      }
      pot_index_.push_back(levels);
    } else {
      for (int p = 0; state_index("pot0_" + std::to_string(p)); ++p) {
        std::array<std::size_t, 5> levels{};
        for (int level = 0; level < 5; ++level) {
          const std::string name = level_name(level, "_" + std::to_string(p));
          auto idx = state_index(name);
          if (!idx) throw ConfigError("schema is missing state feature '" + name + "'");
          levels[static_cast<std::size_t>(level)] = *idx;
        }
        pot_index_.push_back(levels);
      }
    }
    if (pot_index_.empty()) throw ConfigError("schema defines no pot features");

    const std::size_t expected = 4 + 4 + 1 + 5 * pot_index_.size();
    if (state_features_.size() != expected)
      throw ConfigError("schema has " + std::to_string(state_features_.size()) + " state features, expected " +
                        std::to_string(expected));
  }

  std::vector<std::string> state_features_;
  std::vector<std::string> action_features_;
  std::unordered_map<std::string, std::size_t> state_lookup_;
  std::unordered_map<std::string, std::size_t> action_lookup_;
  std::array<std::size_t, kNumActions> action_row_{};
  std::array<MacroAction, kNumActions> row_action_{};
  std::array<std::array<std::size_t, 4>, 2> hand_index_{};
  std::vector<std::array<std::size_t, 5>> pot_index_;
  std::size_t goal_index_ = 0;
};

inline StateVector encode_observed(const ObservedState& o, const FeatureSchema& schema) {
  if (static_cast<int>(o.pots.size()) != schema.num_pots())
    throw SchemaMismatch("state has " + std::to_string(o.pots.size()) + " pots but schema expects " +
                         std::to_string(schema.num_pots()));
  StateVector v{Bits(schema.state_dim(), 0)};
  v.bits[schema.hand_index(0, o.hands[0])] = 1;
  v.bits[schema.hand_index(1, o.hands[1])] = 1;
  for (std::size_t p = 0; p < o.pots.size(); ++p) v.bits[schema.pot_index(static_cast<int>(p), o.pots[p])] = 1;
  if (o.delivered) v.bits[schema.goal_index()] = 1;
  return v;
}

inline StateVector encode_state(const KitchenState& s, const FeatureSchema& schema, int controlling_agent = 0) {
  return encode_observed(observe(s, controlling_agent), schema);
}

/// Inverse of encode_observed; throws if any exclusive group is not one-hot.
inline ObservedState decode_state(const StateVector& v, const FeatureSchema& schema) {
  if (v.bits.size() != schema.state_dim()) throw SchemaMismatch("state vector length does not match schema");
  ObservedState o;
  auto one_hot = [&](auto index_of_level, std::size_t n, const char* group) {
    std::optional<std::size_t> hit;
    for (std::size_t k = 0; k < n; ++k) {
      if (!v.bits[index_of_level(k)]) continue;
      if (hit) throw SchemaMismatch(std::string("exclusive group '") + group + "' has several bits set");
      hit = k;
    }
    if (!hit) throw SchemaMismatch(std::string("exclusive group '") + group + "' has no bit set");
    return *hit;
  };
  for (int who = 0; who < 2; ++who)
    o.hands[who] = static_cast<Hand>(
        one_hot([&](std::size_t k) { return schema.hand_index(who, static_cast<Hand>(k)); }, 4, "hand"));
  for (int p = 0; p < schema.num_pots(); ++p)
    o.pots.push_back(static_cast<PotLevel>(
        one_hot([&](std::size_t k) { return schema.pot_index(p, static_cast<PotLevel>(k)); }, 5, "pot")));
  o.delivered = v.bits[schema.goal_index()] != 0;
  return o;
}

inline ActionVector encode_action(MacroAction a, const FeatureSchema& schema) {
  ActionVector v = ActionVector::none(schema.action_dim());
  v.bits[schema.action_index(a)] = 1;
  return v;
}

inline ActionVector encode_action(std::string_view name, const FeatureSchema& schema) {
  auto idx = schema.action_index(name);
  if (!idx) throw ConfigError("unknown action '" + std::string(name) + "'");
  ActionVector v = ActionVector::none(schema.action_dim());
  v.bits[*idx] = 1;
  return v;
}

inline ActionVector encode_action(std::optional<MacroAction> a, const FeatureSchema& schema) {
  return a ? encode_action(*a, schema) : ActionVector::none(schema.action_dim());
}

/// Positions of the set bits of [state ‖ prev_action].
inline ActiveSet active_indices(const StateVector& state, const ActionVector& prev_action) {
  ActiveSet out;
  for (std::size_t i = 0; i < state.bits.size(); ++i)
    if (state.bits[i]) out.indices.push_back(i);
  for (std::size_t i = 0; i < prev_action.bits.size(); ++i)
    if (prev_action.bits[i]) out.indices.push_back(state.bits.size() + i);
  return out;
}

inline void check_dims(const StateVector& s, const ActionVector& a, const FeatureSchema& schema) {
  if (s.bits.size() != schema.state_dim() || a.bits.size() != schema.action_dim())
    throw SchemaMismatch("vector dimensions do not match schema (S=" + std::to_string(schema.state_dim()) +
                         ", A=" + std::to_string(schema.action_dim()) + ")");
}

}  // namespace causalplan
