#pragma once

// Training buffer: collection under a behavior policy, movement relabeling and JSONL
// persistence. A record holds (state_t, previous action, action_t) for one seat.

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/behavior_policies.hpp"
#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/kitchen_sim.hpp"

namespace causalplan {

struct TimestepRecord {
  int episode = 0;
  int seat = 0;
  int t = 0;
  StateVector state;
  ActionVector prev_action;
  ActionVector action;
  bool operator==(const TimestepRecord&) const = default;
};

struct BufferMeta {
  std::size_t N = 0;  // environment timesteps (episodes x horizon)
  int T = 0;
  int episodes = 0;
  std::string policy_name;
  std::uint64_t seed = 0;
  std::vector<int> seats;
  std::string layout_name;
  std::string schema_fingerprint;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::size_t dropped = 0;  // leading low-level steps without a preceding high-level action
  bool operator==(const BufferMeta&) const = default;
};

struct Buffer {
  BufferMeta meta;
  std::vector<TimestepRecord> records;
  bool operator==(const Buffer&) const = default;
};

/// One raw observation/action pair. A missing action is a low-level step (movement, wait,
/// or an attempt that did not execute).
struct RawStep {
  StateVector state;
  std::optional<MacroAction> action;
};

struct RelabelResult {
  std::vector<TimestepRecord> records;
  std::size_t dropped = 0;
};

/// Replaces each low-level step by the most recent preceding high-level action while keeping
/// the observed state. Steps before the first high-level action are dropped and counted.
/// The previous-action field chains the relabeled actions, starting from the all-zero sentinel.
inline RelabelResult relabel_movement(std::span<const RawStep> raw, const FeatureSchema& schema, int episode = 0,
                                      int seat = 0, int first_t = 0) {
  RelabelResult out;
  std::optional<MacroAction> current;
  ActionVector prev = ActionVector::none(schema.action_dim());
  for (std::size_t k = 0; k < raw.size(); ++k) {
    if (raw[k].action) current = raw[k].action;
    if (!current) {
      ++out.dropped;
      continue;
    }
    if (raw[k].state.bits.size() != schema.state_dim()) throw SchemaMismatch("raw state length does not match schema");
    TimestepRecord r;
    r.episode = episode;
    r.seat = seat;
    r.t = first_t + static_cast<int>(k);
    r.state = raw[k].state;
    r.prev_action = prev;
    r.action = encode_action(*current, schema);
    prev = r.action;
    out.records.push_back(std::move(r));
  }
  return out;
}

/// Parses action names from an external log: schema action names are high-level, any other
/// token is treated as low-level movement.
inline std::optional<MacroAction> classify_logged_action(std::string_view name) { return action_from_name(name); }

class EpisodeAbort : public Error {
 public:
  EpisodeAbort(int episode, const std::string& what)
      : Error("collection aborted in episode " + std::to_string(episode) + ": " + what), episode_(episode) {}
  int episode() const noexcept { return episode_; }

 private:
  int episode_;
};

struct CollectOptions {
  int episodes = 500;
  int horizon = 400;
  std::uint64_t seed = 0;
  std::vector<int> seats = {0, 1};
};

/// Runs `episodes` episodes with both agents driven by `policy` and returns the relabeled
/// records of the requested seats, in (episode, seat, t) order.
inline Buffer collect_buffer(const KitchenLayout& layout, const FeatureSchema& schema, const PolicySpec& policy,
                             const CollectOptions& opt) {
  if (opt.horizon <= 0) throw ConfigError("collect_buffer: horizon must be positive");
  if (opt.episodes < 0) throw ConfigError("collect_buffer: episode count must be nonnegative");
  if (opt.seats.empty()) throw ConfigError("collect_buffer: no seats selected");
  for (int seat : opt.seats)
    if (seat != 0 && seat != 1) throw ConfigError("collect_buffer: seats must be 0 or 1");
  policy.validate();
  if (layout.num_pots != schema.num_pots()) throw SchemaMismatch("layout pot count does not match schema");

  Buffer buf;
  buf.meta.N = static_cast<std::size_t>(opt.episodes) * static_cast<std::size_t>(opt.horizon);
  buf.meta.T = opt.horizon;
  buf.meta.episodes = opt.episodes;
  buf.meta.policy_name = policy.name();
  buf.meta.seed = opt.seed;
  buf.meta.seats = opt.seats;
  buf.meta.layout_name = layout.name;
  buf.meta.schema_fingerprint = schema.fingerprint();
  buf.meta.state_dim = schema.state_dim();
  buf.meta.action_dim = schema.action_dim();
  buf.records.reserve(buf.meta.N * opt.seats.size());

  for (int ep = 0; ep < opt.episodes; ++ep) {
    std::array<std::vector<RawStep>, 2> raw;
    try {
      const std::uint64_t ep_seed = derive_seed(opt.seed, static_cast<std::uint64_t>(ep));
      std::array<BehaviorPolicy, 2> agents{BehaviorPolicy(policy, derive_seed(ep_seed, 1)),
                                           BehaviorPolicy(policy, derive_seed(ep_seed, 2))};
      KitchenState s = reset(layout, ep_seed);
      for (int t = 0; t < opt.horizon; ++t) {
        std::array<std::optional<MacroAction>, 2> acts{agents[0].act(s, 0, layout), agents[1].act(s, 1, layout)};
        StepOutcome out = step(s, acts, layout);
        for (int seat : opt.seats) {
          RawStep r{encode_state(s, schema, seat), std::nullopt};
          if (out.executed[seat]) r.action = acts[seat];
          raw[seat].push_back(std::move(r));
        }
        s = std::move(out.next_state);
      }
    } catch (const EpisodeAbort&) {
      throw;
    } catch (const std::exception& e) {
      throw EpisodeAbort(ep, e.what());
    }
    for (int seat : opt.seats) {
      RelabelResult rel = relabel_movement(raw[seat], schema, ep, seat);
      buf.meta.dropped += rel.dropped;
      for (auto& r : rel.records) buf.records.push_back(std::move(r));
    }
  }
  return buf;
}

// ---------------------------------------------------------------------------------------
// JSONL persistence: "#META {...}" header line followed by one record per line.

namespace detail {

inline void append_bits(std::string& out, const Bits& bits) {
  out.push_back('[');
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (i) out.push_back(',');
    out.push_back(bits[i] ? '1' : '0');
  }
  out.push_back(']');
}

inline nlohmann::json meta_to_json(const BufferMeta& m) {
  return {{"N", m.N},
          {"T", m.T},
          {"episodes", m.episodes},
          {"policy_name", m.policy_name},
          {"seed", m.seed},
          {"seats", m.seats},
          {"layout", m.layout_name},
          {"schema_fingerprint", m.schema_fingerprint},
          {"state_dim", m.state_dim},
          {"action_dim", m.action_dim},
          {"dropped", m.dropped}};
}

inline BufferMeta meta_from_json(const nlohmann::json& j) {
  BufferMeta m;
  m.N = j.at("N").get<std::size_t>();
  m.T = j.at("T").get<int>();
  m.episodes = j.value("episodes", 0);
  m.policy_name = j.value("policy_name", "");
  m.seed = j.value("seed", std::uint64_t{0});
  m.seats = j.value("seats", std::vector<int>{0});
  m.layout_name = j.value("layout", "");
  m.schema_fingerprint = j.value("schema_fingerprint", "");
  m.state_dim = j.at("state_dim").get<std::size_t>();
  m.action_dim = j.at("action_dim").get<std::size_t>();
  m.dropped = j.value("dropped", std::size_t{0});
  return m;
}

inline Bits parse_bits(const nlohmann::json& j, std::size_t expected, const char* field) {
  if (!j.is_array()) throw std::invalid_argument(std::string(field) + " is not an array");
  if (j.size() != expected)
    throw std::invalid_argument(std::string(field) + " has length " + std::to_string(j.size()) + ", expected " +
                                std::to_string(expected));
  Bits out(expected);
  for (std::size_t i = 0; i < expected; ++i) {
    const int v = j[i].get<int>();
    if (v != 0 && v != 1) throw std::invalid_argument(std::string(field) + " contains a non-binary value");
    out[i] = static_cast<std::uint8_t>(v);
  }
  return out;
}

}  // namespace detail

inline std::string record_to_jsonl(const TimestepRecord& r) {
  std::string line = "{\"episode\":" + std::to_string(r.episode) + ",\"seat\":" + std::to_string(r.seat) +
                     ",\"t\":" + std::to_string(r.t) + ",\"state\":";
  detail::append_bits(line, r.state.bits);
  line += ",\"prev_action\":";
  detail::append_bits(line, r.prev_action.bits);
  line += ",\"action\":";
  detail::append_bits(line, r.action.bits);
  line.push_back('}');
  return line;
}

inline void save_buffer(const Buffer& buf, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write buffer file: " + path);
  out << "#META " << detail::meta_to_json(buf.meta).dump() << '\n';
  std::string chunk;
  chunk.reserve(1 << 20);
  for (const auto& r : buf.records) {
    chunk += record_to_jsonl(r);
    chunk.push_back('\n');
    if (chunk.size() > (1u << 20)) {
      out << chunk;
      chunk.clear();
    }
  }
  out << chunk;
  if (!out) throw ConfigError("failed writing buffer file: " + path);
}

/// Loads a buffer; if `schema` is given the stored dimensions must match it.
inline Buffer load_buffer(const std::string& path, const FeatureSchema* schema = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open buffer file: " + path);
  Buffer buf;
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("empty buffer file " + path, 1);
  ++line_no;
  if (line.rfind("#META ", 0) != 0) throw ParseError("missing #META header", line_no);
  try {
    buf.meta = detail::meta_from_json(nlohmann::json::parse(line.substr(6)));
  } catch (const std::exception& e) {
    throw ParseError(std::string("malformed #META header: ") + e.what(), line_no);
  }
  if (schema && (buf.meta.state_dim != schema->state_dim() || buf.meta.action_dim != schema->action_dim()))
    throw SchemaMismatch("buffer dimensions (S=" + std::to_string(buf.meta.state_dim) +
                         ", A=" + std::to_string(buf.meta.action_dim) + ") do not match schema");

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TimestepRecord r;
      r.episode = j.at("episode").get<int>();
      r.seat = j.value("seat", 0);
      r.t = j.at("t").get<int>();
      r.state.bits = detail::parse_bits(j.at("state"), buf.meta.state_dim, "state");
      r.prev_action.bits = detail::parse_bits(j.at("prev_action"), buf.meta.action_dim, "prev_action");
      r.action.bits = detail::parse_bits(j.at("action"), buf.meta.action_dim, "action");
      buf.records.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed buffer record: ") + e.what(), line_no);
    }
  }
  return buf;
}

/// Number of records whose previous action does not match the preceding record of the same
/// (episode, seat) stream. Zero for a well-formed buffer.
inline std::size_t count_chain_violations(const Buffer& buf) {
  std::size_t bad = 0;
  const TimestepRecord* prev = nullptr;
  for (const auto& r : buf.records) {
    const bool same_stream = prev && prev->episode == r.episode && prev->seat == r.seat;
    if (same_stream) {
      if (r.prev_action != prev->action) ++bad;
    } else if (!r.prev_action.is_none()) {
      ++bad;
    }
    prev = &r;
  }
  return bad;
}

}  // namespace causalplan
