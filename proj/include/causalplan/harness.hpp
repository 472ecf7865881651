#pragma once

// Experiment orchestration: configuration, per-seed episodes with JSONL decision logs,
// invalid-action accounting and run summaries.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "causalplan/behavior_policies.hpp"
#include "causalplan/causal_matrix.hpp"
#include "causalplan/causal_planner.hpp"
#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/kitchen_sim.hpp"
#include "causalplan/proposers.hpp"

namespace causalplan {

enum class ProposerKind : std::uint8_t { Scripted, Replay, Remote };

struct ExperimentConfig {
  std::string layout_path;                  // empty: built-in one-pot layout
  std::string schema_path;                  // empty: derived from the layout's pot count
  std::string matrix_path;                  // required when gamma < 1
  ProposerKind proposer = ProposerKind::Scripted;
  HallucinationProfile profile;
  std::string endpoint_path;                // remote proposer
  std::string replay_dir;                   // replay proposer: directory of seed_<n>.jsonl logs
  PolicySpec partner;
  int controlled_seat = 0;
  double gamma = 0.5;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  int horizon = 400;
  std::string output_dir = "runs/eval";
  int workers = 1;

  void validate() const {
    if (horizon <= 0) throw ConfigError("horizon must be positive");
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (gamma < 1.0 && matrix_path.empty()) throw ConfigError("a causal matrix is required when gamma < 1");
    if (controlled_seat != 0 && controlled_seat != 1) throw ConfigError("controlled_seat must be 0 or 1");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    if (proposer == ProposerKind::Remote && endpoint_path.empty()) throw ConfigError("remote proposer needs an endpoint");
    if (proposer == ProposerKind::Replay && replay_dir.empty()) throw ConfigError("replay proposer needs replay_dir");
    profile.validate();
    partner.validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json prop = {{"kind", proposer == ProposerKind::Scripted ? "scripted"
                                    : proposer == ProposerKind::Replay ? "replay"
                                                                       : "remote"}};
    if (proposer == ProposerKind::Scripted) prop["profile"] = profile.to_json();
    if (proposer == ProposerKind::Remote) prop["endpoint"] = endpoint_path;
    if (proposer == ProposerKind::Replay) prop["replay_dir"] = replay_dir;
    return {{"layout", layout_path},
            {"schema", schema_path},
            {"matrix", matrix_path},
            {"proposer", prop},
            {"partner", {{"policy", partner.name()}, {"epsilon", partner.epsilon}}},
            {"controlled_seat", controlled_seat},
            {"gamma", gamma},
            {"seeds", seeds},
            {"horizon", horizon},
            {"output_dir", output_dir},
            {"workers", workers}};
  }

  static ExperimentConfig from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    try {
      c.layout_path = j.value("layout", c.layout_path);
      c.schema_path = j.value("schema", c.schema_path);
      c.matrix_path = j.value("matrix", c.matrix_path);
      if (j.contains("proposer")) {
        const auto& p = j.at("proposer");
        const auto kind = p.value("kind", std::string("scripted"));
        if (kind == "scripted") c.proposer = ProposerKind::Scripted;
        else if (kind == "replay") c.proposer = ProposerKind::Replay;
        else if (kind == "remote") c.proposer = ProposerKind::Remote;
        else throw ConfigError("unknown proposer kind '" + kind + "'");
        if (p.contains("profile")) c.profile = HallucinationProfile::from_json(p.at("profile"));
        c.endpoint_path = p.value("endpoint", c.endpoint_path);
        c.replay_dir = p.value("replay_dir", c.replay_dir);
      }
      if (j.contains("partner")) {
        const auto& p = j.at("partner");
        c.partner.kind = policy_kind_from_name(p.value("policy", std::string("greedy_chef")));
        c.partner.epsilon = p.value("epsilon", c.partner.epsilon);
      }
      c.controlled_seat = j.value("controlled_seat", c.controlled_seat);
      c.gamma = j.value("gamma", c.gamma);
      c.seeds = j.value("seeds", c.seeds);
      c.horizon = j.value("horizon", c.horizon);
      c.output_dir = j.value("output_dir", c.output_dir);
      c.workers = j.value("workers", c.workers);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed experiment config: ") + e.what());
    }
    return c;
  }
};

/// Artifacts shared read-only by all episodes of a run.
struct ExperimentResources {
  KitchenLayout layout;
  FeatureSchema schema = FeatureSchema::cramped_room();
  std::optional<CausalActionMatrix> matrix;
  std::optional<EndpointConfig> endpoint;

  static ExperimentResources load(const ExperimentConfig& c) {
    ExperimentResources r;
    r.layout = c.layout_path.empty() ? cramped_room_layout() : load_layout(c.layout_path);
    r.schema = c.schema_path.empty() ? FeatureSchema::for_pots(r.layout.num_pots) : FeatureSchema::load(c.schema_path);
    if (r.schema.num_pots() != r.layout.num_pots) throw SchemaMismatch("schema pot count does not match the layout");
    if (!c.matrix_path.empty()) r.matrix = import_matrix(c.matrix_path, r.schema);
    if (c.proposer == ProposerKind::Remote) {
      const auto dir = std::filesystem::path(c.endpoint_path).parent_path().string();
      r.endpoint = EndpointConfig::from_json(read_json_file(c.endpoint_path), dir);
    }
    return r;
  }
};

struct EpisodeReport {
  std::uint64_t seed = 0;
  int steps = 0;
  int total_reward = 0;
  int deliveries = 0;
  std::size_t proposals_emitted = 0;
  std::size_t invalid_proposals = 0;
  std::size_t invalid_executions = 0;
  std::size_t backup_invocations = 0;
  std::size_t uninformed_backups = 0;
  std::size_t transport_failures = 0;
  std::string log_path;

  nlohmann::json to_json() const {
    return {{"seed", seed},
            {"steps", steps},
            {"total_reward", total_reward},
            {"deliveries", deliveries},
            {"proposals_emitted", proposals_emitted},
            {"invalid_proposals", invalid_proposals},
            {"invalid_executions", invalid_executions},
            {"backup_invocations", backup_invocations},
            {"uninformed_backups", uninformed_backups},
            {"transport_failures", transport_failures},
            {"log", log_path}};
  }
};

inline std::unique_ptr<Proposer> make_proposer(const ExperimentConfig& c, const ExperimentResources& r,
                                               std::uint64_t seed) {
  switch (c.proposer) {
    case ProposerKind::Scripted:
      return std::make_unique<ScriptedProposer>(c.profile, derive_seed(seed, 2));
    case ProposerKind::Replay:
      return std::make_unique<ReplayProposer>(
          load_proposal_log((std::filesystem::path(c.replay_dir) / ("seed_" + std::to_string(seed) + ".jsonl")).string()));
    case ProposerKind::Remote:
      return std::make_unique<RemoteProposer>(*r.endpoint);
  }
  throw ConfigError("unknown proposer kind");
}

namespace detail {

inline nlohmann::json optional_action(std::optional<MacroAction> a) {
  return a ? nlohmann::json(action_name(*a)) : nlohmann::json(nullptr);
}

}  // namespace detail

/// Plays one episode; writes one JSON line per step to `log_path` (if nonempty).
inline EpisodeReport run_episode(const ExperimentConfig& c, const ExperimentResources& r, std::uint64_t seed,
                                 const std::string& log_path, Proposer* proposer_override = nullptr) {
  c.validate();
  const int seat = c.controlled_seat;
  const int partner_seat = 1 - seat;

  std::unique_ptr<Proposer> owned;
  Proposer* proposer = proposer_override;
  if (!proposer) {
    owned = make_proposer(c, r, seed);
    proposer = owned.get();
  }
  PlannerConfig pc;
  pc.gamma = c.gamma;
  pc.seed = derive_seed(seed, 1);
  CausalPlanner planner(r.matrix ? &*r.matrix : nullptr, pc);
  BehaviorPolicy partner(c.partner, derive_seed(seed, 3));

  std::ofstream log;
  if (!log_path.empty()) {
    log.open(log_path, std::ios::binary);
    if (!log) throw ConfigError("cannot write episode log: " + log_path);
  }

  EpisodeReport rep;
  rep.seed = seed;
  rep.log_path = log_path;
  KitchenState s = reset(r.layout, seed);
  std::optional<MacroAction> prev;
  for (int t = 0; t < c.horizon; ++t) {
    ProposerContext ctx;
    ctx.state = &s;
    ctx.layout = &r.layout;
    ctx.agent = seat;
    ctx.t = t;
    ctx.state_vec = encode_state(s, r.schema, seat);
    ctx.prev_action = encode_action(prev, r.schema);

    const ProposalSet set = proposer->propose(ctx);
    const PlanDecision d = planner.plan(set);
    const auto partner_action = partner.act(s, partner_seat, r.layout);

    std::array<AgentCommand, 2> cmds;
    cmds[static_cast<std::size_t>(seat)] = AgentCommand::act(d.chosen);
    cmds[static_cast<std::size_t>(partner_seat)] = AgentCommand::from(partner_action);
    StepOutcome out = step(s, cmds, r.layout);

    const bool executed = out.executed[static_cast<std::size_t>(seat)];
    const bool invalid = out.invalid[static_cast<std::size_t>(seat)];
    rep.proposals_emitted += set.proposals.size();
    rep.invalid_proposals += d.unrecognized;
    rep.invalid_executions += invalid ? 1 : 0;
    if (d.path == PlanPath::Backup) {
      ++rep.backup_invocations;
      if (d.uninformed) ++rep.uninformed_backups;
    }
    if (set.transport_failure) ++rep.transport_failures;
    rep.total_reward += out.reward;
    rep.deliveries = out.next_state.deliveries;

    if (log.is_open()) {
      nlohmann::json line = {
          {"t", t},
          {"state", ctx.state_vec.bits},
          {"prev_action", detail::optional_action(prev)},
          {"proposer", {{"proposals", proposals_to_json(set.proposals)}, {"transport_failure", set.transport_failure}}},
          {"decision", d.to_json()},
          {"partner_action", detail::optional_action(partner_action)},
          {"executed", executed},
          {"invalid_execution", invalid},
          {"reward", out.reward},
          {"deliveries", out.next_state.deliveries}};
      log << line.dump() << '\n';
    }
    if (executed) prev = d.chosen;
    s = std::move(out.next_state);
    ++rep.steps;
  }
  return rep;
}

struct InvalidCounts {
  std::size_t proposals_emitted = 0;
  std::size_t invalid_proposals = 0;
  std::size_t invalid_executions = 0;
  std::size_t backup_invocations = 0;
  int total_reward = 0;
  bool operator==(const InvalidCounts&) const = default;
};

/// Recounts invalid proposals (texts that do not canonicalize) and invalid executions from
/// an episode log.
inline InvalidCounts count_invalid(const std::string& log_path) {
  std::ifstream in(log_path, std::ios::binary);
  if (!in) throw ConfigError("cannot open episode log: " + log_path);
  InvalidCounts c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      for (const auto& p : j.at("proposer").at("proposals")) {
        ++c.proposals_emitted;
        if (!canonicalize(p.at("raw").get<std::string>())) ++c.invalid_proposals;
      }
      if (j.at("invalid_execution").get<bool>()) ++c.invalid_executions;
      if (j.at("decision").at("path").get<std::string>() == "backup") ++c.backup_invocations;
      c.total_reward += j.at("reward").get<int>();
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed episode log line: ") + e.what(), line_no);
    }
  }
  return c;
}

struct Statistic {
  double mean = 0;
  double std = 0;  // population standard deviation
};

inline Statistic mean_std(const std::vector<double>& xs) {
  Statistic s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(ss / static_cast<double>(xs.size()));
  return s;
}

struct RunSummary {
  std::vector<EpisodeReport> reports;
  nlohmann::json config;
  std::string version = std::string(kVersion);
  std::string error;  // set when a seed failed; reports then hold the completed seeds

  std::vector<std::pair<std::string, Statistic>> statistics() const {
    auto col = [&](auto f) {
      std::vector<double> v;
      for (const auto& r : reports) v.push_back(static_cast<double>(f(r)));
      return mean_std(v);
    };
    return {{"total_reward", col([](const EpisodeReport& r) { return r.total_reward; })},
            {"deliveries", col([](const EpisodeReport& r) { return r.deliveries; })},
            {"invalid_proposals", col([](const EpisodeReport& r) { return r.invalid_proposals; })},
            {"invalid_executions", col([](const EpisodeReport& r) { return r.invalid_executions; })},
            {"backup_invocations", col([](const EpisodeReport& r) { return r.backup_invocations; })}};
  }

  nlohmann::json to_json() const {
    nlohmann::json reps = nlohmann::json::array();
    for (const auto& r : reports) reps.push_back(r.to_json());
    nlohmann::json stats = nlohmann::json::object();
    for (const auto& [name, st] : statistics()) stats[name] = {{"mean", st.mean}, {"std", st.std}};
    nlohmann::json j = {{"version", version}, {"config", config}, {"reports", reps}, {"statistics", stats}};
    if (!error.empty()) j["error"] = error;
    return j;
  }

  std::string table() const {
    std::ostringstream o;
    o << std::left << std::setw(8) << "seed" << std::right << std::setw(8) << "reward" << std::setw(12) << "deliveries"
      << std::setw(14) << "invalid_prop" << std::setw(14) << "invalid_exec" << std::setw(10) << "backups" << '\n';
    for (const auto& r : reports)
      o << std::left << std::setw(8) << r.seed << std::right << std::setw(8) << r.total_reward << std::setw(12)
        << r.deliveries << std::setw(14) << r.invalid_proposals << std::setw(14) << r.invalid_executions
        << std::setw(10) << r.backup_invocations << '\n';
    o << std::fixed << std::setprecision(3);
    for (const auto& [name, st] : statistics())
      o << std::left << std::setw(20) << name << std::right << std::setw(12) << st.mean << " +/- " << st.std << '\n';
    if (!error.empty()) o << "error: " << error << '\n';
    return o.str();
  }
};

/// Runs every seed (in parallel up to `workers`), then writes config.json, seed_<n>.jsonl,
/// summary.json and summary.txt into the output directory. A failing seed aborts the run
/// after the summary of the completed seeds has been written.
inline RunSummary evaluate(const ExperimentConfig& c) {
  c.validate();
  const ExperimentResources res = ExperimentResources::load(c);
  std::filesystem::create_directories(c.output_dir);
  const std::filesystem::path out_dir(c.output_dir);
  write_json_file((out_dir / "config.json").string(), c.to_json(), 2);

  const std::size_t n = c.seeds.size();
  std::vector<std::optional<EpisodeReport>> slots(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n; k = next++) {
      try {
        const auto log = (out_dir / ("seed_" + std::to_string(c.seeds[k]) + ".jsonl")).string();
        slots[k] = run_episode(c, res, c.seeds[k], log);
        slots[k]->log_path = std::filesystem::path(log).filename().string();
      } catch (const std::exception& e) {
        errors[k] = e.what();
      }
    }
  };
  const std::size_t threads = std::min<std::size_t>(static_cast<std::size_t>(c.workers), n);
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  RunSummary summary;
  summary.config = c.to_json();
  summary.config.erase("output_dir");  // keeps summaries of identical runs byte-identical
  for (std::size_t k = 0; k < n; ++k) {
    if (slots[k]) summary.reports.push_back(*slots[k]);
    if (!errors[k].empty() && summary.error.empty())
      summary.error = "seed " + std::to_string(c.seeds[k]) + ": " + errors[k];
  }
  write_json_file((out_dir / "summary.json").string(), summary.to_json(), 2);
  {
    std::ofstream txt(out_dir / "summary.txt", std::ios::binary);
    txt << summary.table();
  }
  if (!summary.error.empty()) throw Error("evaluation failed (" + summary.error + "); partial summary written");
  return summary;
}

}  // namespace causalplan
