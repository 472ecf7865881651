#pragma once

// Two-agent macro-action kitchen MDP. Movement is abstracted away: every action is a
// high-level cooking step whose preconditions are checked against the joint state.

#include <algorithm>
#include <array>
#include <bitset>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/core.hpp"

namespace causalplan {

// Order matches the action rows of the feature schema.
enum class MacroAction : std::uint8_t {
  PickupOnion = 0,
  PutOnionInPot,
  PickupDish,
  FillDishWithSoup,
  DeliverSoup,
  PlaceOnionOnCounter,
  PlaceDishOnCounter,
};

inline constexpr std::size_t kNumActions = 7;
inline constexpr int kDeliveryReward = 20;

inline constexpr std::array<MacroAction, kNumActions> kAllActions = {
    MacroAction::PickupOnion,      MacroAction::PutOnionInPot,       MacroAction::PickupDish,
    MacroAction::FillDishWithSoup, MacroAction::DeliverSoup,         MacroAction::PlaceOnionOnCounter,
    MacroAction::PlaceDishOnCounter};

inline constexpr std::array<std::string_view, kNumActions> kActionNames = {
    "pickup_onion",  "put_onion_in_pot",       "pickup_dish",           "fill_dish_with_soup",
    "deliver_soup",  "place_onion_on_counter", "place_dish_on_counter"};

inline constexpr std::size_t index_of(MacroAction a) { return static_cast<std::size_t>(a); }
inline std::string_view action_name(MacroAction a) { return kActionNames[index_of(a)]; }

inline std::optional<MacroAction> action_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumActions; ++i)
    if (kActionNames[i] == name) return kAllActions[i];
  return std::nullopt;
}

using ActionMask = std::bitset<kNumActions>;

enum class Hand : std::uint8_t { Empty = 0, Onion, Dish, SoupDish };
enum class ItemSource : std::uint8_t { Dispenser, Counter };

inline std::string_view hand_name(Hand h) {
  switch (h) {
    case Hand::Empty: return "empty";
    case Hand::Onion: return "onion";
    case Hand::Dish: return "dish";
    case Hand::SoupDish: return "soup_dish";
  }
  return "?";
}

struct KitchenLayout {
  std::string name = "cramped_room";
  int num_pots = 1;
  int cook_time = 20;
  std::array<ActionMask, 2> capabilities{ActionMask{}.set(), ActionMask{}.set()};
  std::array<ItemSource, 2> onion_source{ItemSource::Dispenser, ItemSource::Dispenser};
  std::array<ItemSource, 2> dish_source{ItemSource::Dispenser, ItemSource::Dispenser};

  void validate() const {
    if (num_pots <= 0) throw ConfigError("layout '" + name + "': num_pots must be positive");
    if (num_pots > 2) throw ConfigError("layout '" + name + "': at most two pots are supported");
    if (cook_time <= 0) throw ConfigError("layout '" + name + "': cook_time must be positive");
    for (int a = 0; a < 2; ++a)
      if (capabilities[a].none())
        throw ConfigError("layout '" + name + "': agent " + std::to_string(a) + " has an empty capability mask");
  }
};

struct Pot {
  int onions = 0;
  std::optional<int> cooking_remaining;
  bool finished = false;

  bool open() const { return onions < 3 && !cooking_remaining && !finished; }
  bool cooking() const { return cooking_remaining.has_value(); }
  bool operator==(const Pot&) const = default;
};

struct KitchenState {
  std::array<Hand, 2> hands{Hand::Empty, Hand::Empty};
  std::vector<Pot> pots;
  int counter_onions = 0;
  int counter_dishes = 0;
  int deliveries = 0;
  int t = 0;

  bool operator==(const KitchenState&) const = default;
};

/// Stable content hash of a state, used to check that invalid actions leave state untouched.
inline std::uint64_t state_hash(const KitchenState& s) {
  std::string bytes;
  bytes.push_back(static_cast<char>(s.hands[0]));
  bytes.push_back(static_cast<char>(s.hands[1]));
  for (const Pot& p : s.pots) {
    bytes += std::to_string(p.onions) + ':' + (p.cooking_remaining ? std::to_string(*p.cooking_remaining) : "-") +
             ':' + (p.finished ? '1' : '0') + ';';
  }
  bytes += std::to_string(s.counter_onions) + ',' + std::to_string(s.counter_dishes) + ',' +
           std::to_string(s.deliveries) + ',' + std::to_string(s.t);
  return fnv1a64(bytes);
}

struct StepOutcome {
  KitchenState next_state;
  int reward = 0;
  std::array<bool, 2> executed{false, false};
  std::array<bool, 2> invalid{false, false};
};

/// One agent's command for a joint step: a macro action, a wait, or an unrecognized name.
struct AgentCommand {
  enum class Kind : std::uint8_t { Act, Wait, Unknown };
  Kind kind = Kind::Wait;
  MacroAction action = MacroAction::PickupOnion;

  static AgentCommand act(MacroAction a) { return {Kind::Act, a}; }
  static AgentCommand wait() { return {Kind::Wait, MacroAction::PickupOnion}; }
  static AgentCommand unknown() { return {Kind::Unknown, MacroAction::PickupOnion}; }
  static AgentCommand from(std::optional<MacroAction> a) { return a ? act(*a) : wait(); }

  /// "" / "wait" / "noop" map to a wait; any other name outside the action set is unknown.
  static AgentCommand from_name(std::string_view name) {
    if (name.empty() || name == "wait" || name == "noop") return wait();
    if (auto a = action_from_name(name)) return act(*a);
    return unknown();
  }
};

inline KitchenState reset(const KitchenLayout& layout, std::uint64_t /*seed*/ = 0) {
  layout.validate();
  KitchenState s;
  s.pots.assign(static_cast<std::size_t>(layout.num_pots), Pot{});
  return s;
}

namespace detail {

inline bool any_pot(const KitchenState& s, bool (Pot::*pred)() const) {
  return std::any_of(s.pots.begin(), s.pots.end(), [&](const Pot& p) { return (p.*pred)(); });
}

inline bool any_finished(const KitchenState& s) {
  return std::any_of(s.pots.begin(), s.pots.end(), [](const Pot& p) { return p.finished; });
}

// Open pot with the most onions; ties go to the lowest index.
inline std::optional<std::size_t> target_open_pot(const KitchenState& s) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < s.pots.size(); ++i) {
    if (!s.pots[i].open()) continue;
    if (!best || s.pots[i].onions > s.pots[*best].onions) best = i;
  }
  return best;
}

inline std::optional<std::size_t> first_finished_pot(const KitchenState& s) {
  for (std::size_t i = 0; i < s.pots.size(); ++i)
    if (s.pots[i].finished) return i;
  return std::nullopt;
}

// Precondition check ignoring capability masks.
inline bool precondition_holds(const KitchenState& s, int agent, MacroAction a, const KitchenLayout& layout) {
  const Hand hand = s.hands[static_cast<std::size_t>(agent)];
  switch (a) {
    case MacroAction::PickupOnion:
      return hand == Hand::Empty &&
             (layout.onion_source[agent] == ItemSource::Dispenser || s.counter_onions > 0);
    case MacroAction::PutOnionInPot:
      return hand == Hand::Onion && target_open_pot(s).has_value();
    case MacroAction::PickupDish:
      return hand == Hand::Empty &&
             (layout.dish_source[agent] == ItemSource::Dispenser || s.counter_dishes > 0);
    case MacroAction::FillDishWithSoup:
      return hand == Hand::Dish && any_finished(s);
    case MacroAction::DeliverSoup:
      return hand == Hand::SoupDish;
    case MacroAction::PlaceOnionOnCounter:
      return hand == Hand::Onion;
    case MacroAction::PlaceDishOnCounter:
      return hand == Hand::Dish;
  }
  return false;
}

}  // namespace detail

inline bool is_legal(const KitchenState& s, int agent, MacroAction a, const KitchenLayout& layout) {
  return layout.capabilities[static_cast<std::size_t>(agent)].test(index_of(a)) &&
         detail::precondition_holds(s, agent, a, layout);
}

inline ActionMask legal_actions(const KitchenState& s, int agent, const KitchenLayout& layout) {
  if (agent < 0 || agent > 1) throw ConfigError("legal_actions: agent index must be 0 or 1");
  ActionMask mask;
  for (MacroAction a : kAllActions)
    if (is_legal(s, agent, a, layout)) mask.set(index_of(a));
  return mask;
}

namespace detail {

// Applies a legal action in place. Returns deliveries made.
inline int apply(KitchenState& s, int agent, MacroAction a, const KitchenLayout& layout, int cook_time) {
  Hand& hand = s.hands[static_cast<std::size_t>(agent)];
  switch (a) {
    case MacroAction::PickupOnion:
      if (layout.onion_source[agent] == ItemSource::Counter) --s.counter_onions;
      hand = Hand::Onion;
      return 0;
    case MacroAction::PutOnionInPot: {
      Pot& pot = s.pots[*target_open_pot(s)];
      ++pot.onions;
      if (pot.onions == 3) pot.cooking_remaining = cook_time;
      hand = Hand::Empty;
      return 0;
    }
    case MacroAction::PickupDish:
      if (layout.dish_source[agent] == ItemSource::Counter) --s.counter_dishes;
      hand = Hand::Dish;
      return 0;
    case MacroAction::FillDishWithSoup: {
      Pot& pot = s.pots[*first_finished_pot(s)];
      pot = Pot{};
      hand = Hand::SoupDish;
      return 0;
    }
    case MacroAction::DeliverSoup:
      hand = Hand::Empty;
      ++s.deliveries;
      return 1;
    case MacroAction::PlaceOnionOnCounter:
      ++s.counter_onions;
      hand = Hand::Empty;
      return 0;
    case MacroAction::PlaceDishOnCounter:
      ++s.counter_dishes;
      hand = Hand::Empty;
      return 0;
  }
  return 0;
}

}  // namespace detail

/// Joint transition. Agent 0 resolves before agent 1; an action whose preconditions fail
/// (or an unknown name) is flagged invalid and has no effect. Pots that were cooking at the
/// start of the step advance their timers after both agents act.
inline StepOutcome step(const KitchenState& state, const std::array<AgentCommand, 2>& commands,
                        const KitchenLayout& layout) {
  StepOutcome out;
  out.next_state = state;
  KitchenState& s = out.next_state;

  std::vector<bool> was_cooking(s.pots.size());
  for (std::size_t i = 0; i < s.pots.size(); ++i) was_cooking[i] = s.pots[i].cooking();

  int delivered = 0;
  for (int agent = 0; agent < 2; ++agent) {
    const AgentCommand& cmd = commands[static_cast<std::size_t>(agent)];
    switch (cmd.kind) {
      case AgentCommand::Kind::Wait:
        break;
      case AgentCommand::Kind::Unknown:
        out.invalid[agent] = true;
        break;
      case AgentCommand::Kind::Act:
        if (is_legal(s, agent, cmd.action, layout)) {
          delivered += detail::apply(s, agent, cmd.action, layout, layout.cook_time);
          out.executed[agent] = true;
        } else {
          out.invalid[agent] = true;
        }
        break;
    }
  }

  for (std::size_t i = 0; i < s.pots.size(); ++i) {
    Pot& pot = s.pots[i];
    if (!was_cooking[i] || !pot.cooking_remaining) continue;
    if (--*pot.cooking_remaining <= 0) {
      pot.cooking_remaining.reset();
      pot.finished = true;
    }
  }

  out.reward = kDeliveryReward * delivered;
  ++s.t;
  return out;
}

inline StepOutcome step(const KitchenState& state, const std::array<std::optional<MacroAction>, 2>& actions,
                        const KitchenLayout& layout) {
  return step(state, {AgentCommand::from(actions[0]), AgentCommand::from(actions[1])}, layout);
}

// ---------------------------------------------------------------------------------------
// Layout documents

namespace detail {

inline ItemSource parse_source(const nlohmann::json& j) {
  const auto s = j.get<std::string>();
  if (s == "dispenser") return ItemSource::Dispenser;
  if (s == "counter") return ItemSource::Counter;
  throw ConfigError("unknown item source '" + s + "' (expected dispenser or counter)");
}

inline std::array<ItemSource, 2> parse_sources(const nlohmann::json& j) {
  if (j.is_string()) {
    const ItemSource s = parse_source(j);
    return {s, s};
  }
  if (!j.is_array() || j.size() != 2) throw ConfigError("item source must be a string or a two-element array");
  return {parse_source(j[0]), parse_source(j[1])};
}

inline std::string_view source_name(ItemSource s) { return s == ItemSource::Dispenser ? "dispenser" : "counter"; }

}  // namespace detail

inline KitchenLayout layout_from_json(const nlohmann::json& j) {
  KitchenLayout layout;
  try {
    layout.name = j.at("name").get<std::string>();
    layout.num_pots = j.at("num_pots").get<int>();
    layout.cook_time = j.value("cook_time", 20);
    if (j.contains("capabilities")) {
      const auto& caps = j.at("capabilities");
      if (!caps.is_array() || caps.size() != 2) throw ConfigError("capabilities must list two agents");
      for (std::size_t a = 0; a < 2; ++a) {
        ActionMask mask;
        for (const auto& n : caps[a]) {
          const auto name = n.get<std::string>();
          auto action = action_from_name(name);
          if (!action) throw ConfigError("unknown action '" + name + "' in capabilities");
          mask.set(index_of(*action));
        }
        layout.capabilities[a] = mask;
      }
    }
    if (j.contains("onion_source")) layout.onion_source = detail::parse_sources(j.at("onion_source"));
    if (j.contains("dish_source")) layout.dish_source = detail::parse_sources(j.at("dish_source"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed layout document: ") + e.what());
  }
  layout.validate();
  return layout;
}

inline nlohmann::json layout_to_json(const KitchenLayout& layout) {
  nlohmann::json caps = nlohmann::json::array();
  for (std::size_t a = 0; a < 2; ++a) {
    nlohmann::json names = nlohmann::json::array();
    for (MacroAction act : kAllActions)
      if (layout.capabilities[a].test(index_of(act))) names.push_back(action_name(act));
    caps.push_back(names);
  }
  return {{"name", layout.name},
          {"num_pots", layout.num_pots},
          {"cook_time", layout.cook_time},
          {"capabilities", caps},
          {"onion_source", {detail::source_name(layout.onion_source[0]), detail::source_name(layout.onion_source[1])}},
          {"dish_source", {detail::source_name(layout.dish_source[0]), detail::source_name(layout.dish_source[1])}}};
}

inline KitchenLayout load_layout(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open layout file: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed layout file " + path + ": " + e.what());
  }
  return layout_from_json(j);
}

/// One-pot layout with both agents fully capable.
inline KitchenLayout cramped_room_layout() { return KitchenLayout{}; }

}  // namespace causalplan
