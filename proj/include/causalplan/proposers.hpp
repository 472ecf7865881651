#pragma once

// Sources of candidate actions for the planner: a scripted proposer that mimics a
// hallucinating language model, a replay proposer over recorded proposal streams, and an
// HTTP client that runs the analysis/planning two-prompt exchange against a chat endpoint.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>  // before httplib: <resolv.h> defines a _res macro that clashes with Eigen
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "causalplan/behavior_policies.hpp"
#include "causalplan/causal_planner.hpp"
#include "causalplan/core.hpp"
#include "causalplan/feature_schema.hpp"
#include "causalplan/kitchen_sim.hpp"

namespace causalplan {

/// Everything a proposer may look at when asked for candidates at one step.
struct ProposerContext {
  const KitchenState* state = nullptr;
  const KitchenLayout* layout = nullptr;
  int agent = 0;
  int t = 0;
  StateVector state_vec;
  ActionVector prev_action;
};

class Proposer {
 public:
  virtual ~Proposer() = default;
  virtual ProposalSet propose(const ProposerContext& ctx) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------------------
// Scripted proposer

struct HallucinationProfile {
  double invalid_rate = 0.0;
  double empty_rate = 0.0;
  int k = 3;
  double noise = 0.5;

  void validate() const {
    if (!(invalid_rate >= 0.0 && invalid_rate <= 1.0)) throw ConfigError("invalid_rate must lie in [0, 1]");
    if (!(empty_rate >= 0.0 && empty_rate <= 1.0)) throw ConfigError("empty_rate must lie in [0, 1]");
    if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("noise must lie in [0, 1]");
    if (k < 1) throw ConfigError("k must be at least 1");
  }

  nlohmann::json to_json() const {
    return {{"invalid_rate", invalid_rate}, {"empty_rate", empty_rate}, {"k", k}, {"noise", noise}};
  }
  static HallucinationProfile from_json(const nlohmann::json& j) {
    HallucinationProfile p;
    p.invalid_rate = j.value("invalid_rate", p.invalid_rate);
    p.empty_rate = j.value("empty_rate", p.empty_rate);
    p.k = j.value("k", p.k);
    p.noise = j.value("noise", p.noise);
    p.validate();
    return p;
  }
};

/// Texts that never canonicalize to an instructed action.
inline constexpr std::array<std::string_view, 6> kHallucinatedActions = {
    "chop_tomato()", "wash_plate()", "stir_the_pot()", "serve_salad()", "grab_lettuce()", "open_fridge()"};

/// One step of the scripted proposer. The clean candidate distribution mixes the greedy
/// chef's choice with a flat Dirichlet draw over all instructed actions:
///   q = (1 - noise) * greedy + noise * Dirichlet(1, ..., 1).
/// k candidates are drawn from q; each is then swapped for an out-of-vocabulary string with
/// probability invalid_rate. p_a is q renormalized over the emitted candidates.
inline ProposalSet scripted_propose(const KitchenState& s, int agent, const KitchenLayout& layout,
                                    const HallucinationProfile& profile, Rng& rng) {
  profile.validate();
  ProposalSet set;
  if (rng.uniform() < profile.empty_rate) return set;

  std::array<double, kNumActions> q{};
  const auto greedy = greedy_choice(s, agent, layout);
  std::array<double, kNumActions> dir{};
  double dsum = 0.0;
  for (auto& d : dir) dsum += d = rng.gamma(1.0);
  for (std::size_t a = 0; a < kNumActions; ++a) {
    q[a] = profile.noise * (dsum > 0 ? dir[a] / dsum : 1.0 / kNumActions);
    if (greedy && index_of(*greedy) == a) q[a] += 1.0 - profile.noise;
  }
  if (!greedy) {
    // Nothing legal: spread the greedy mass uniformly.
    for (auto& v : q) v += (1.0 - profile.noise) / kNumActions;
  }

  std::vector<std::size_t> picks;
  for (int m = 0; m < profile.k; ++m) {
    double u = rng.uniform();
    std::size_t a = kNumActions - 1;
    for (std::size_t i = 0; i < kNumActions; ++i) {
      if (u < q[i]) {
        a = i;
        break;
      }
      u -= q[i];
    }
    picks.push_back(a);
  }
  double z = 0.0;
  for (auto a : picks) z += q[a];
  for (auto a : picks) {
    Proposal p;
    p.p_a = z > 0 ? q[a] / z : 1.0 / static_cast<double>(picks.size());
    if (rng.uniform() < profile.invalid_rate) {
      p.raw_text = std::string(kHallucinatedActions[rng.uniform_index(kHallucinatedActions.size())]);
    } else {
      p.raw_text = std::string(action_name(kAllActions[a])) + "()";
    }
    p.canonical = canonicalize(p.raw_text);
    set.proposals.push_back(std::move(p));
  }
  return set;
}

class ScriptedProposer : public Proposer {
 public:
  ScriptedProposer(HallucinationProfile profile, std::uint64_t seed) : profile_(profile), rng_(seed) {
    profile_.validate();
  }

  ProposalSet propose(const ProposerContext& ctx) override {
    if (!ctx.state || !ctx.layout) throw ConfigError("scripted proposer needs the simulator state");
    ProposalSet set = scripted_propose(*ctx.state, ctx.agent, *ctx.layout, profile_, rng_);
    set.state = ctx.state_vec;
    set.prev_action = ctx.prev_action;
    return set;
  }
  std::string name() const override { return "scripted"; }

 private:
  HallucinationProfile profile_;
  Rng rng_;
};

// ---------------------------------------------------------------------------------------
// Replay proposer

/// Recorded proposal stream of one episode, indexed by timestep.
struct ProposalLog {
  std::vector<std::vector<Proposal>> steps;
};

inline nlohmann::json proposals_to_json(const std::vector<Proposal>& ps) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& p : ps) arr.push_back({{"raw", p.raw_text}, {"p_a", p.p_a}});
  return arr;
}

inline std::vector<Proposal> proposals_from_json(const nlohmann::json& arr) {
  std::vector<Proposal> out;
  for (const auto& e : arr) out.push_back(make_proposal(e.at("raw").get<std::string>(), e.at("p_a").get<double>()));
  return out;
}

/// Reads the "proposals" field of each step line of an episode log (lines without a "t"
/// field, such as the trailing report, are skipped).
inline ProposalLog load_proposal_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open episode log: " + path);
  ProposalLog log;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.contains("t")) continue;
      const auto t = j.at("t").get<std::size_t>();
      if (t != log.steps.size()) throw ConfigError("episode log steps are not consecutive");
      log.steps.push_back(proposals_from_json(j.at("proposer").at("proposals")));
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed episode log line: ") + e.what(), line_no);
    }
  }
  return log;
}

inline ProposalSet replay_propose(const ProposalLog& log, int t) {
  if (t < 0 || static_cast<std::size_t>(t) >= log.steps.size())
    throw ConfigError("replay log has no entry for timestep " + std::to_string(t));
  ProposalSet set;
  set.proposals = log.steps[static_cast<std::size_t>(t)];
  return set;
}

class ReplayProposer : public Proposer {
 public:
  explicit ReplayProposer(ProposalLog log) : log_(std::move(log)) {}

  ProposalSet propose(const ProposerContext& ctx) override {
    ProposalSet set = replay_propose(log_, ctx.t);
    set.state = ctx.state_vec;
    set.prev_action = ctx.prev_action;
    return set;
  }
  std::string name() const override { return "replay"; }

 private:
  ProposalLog log_;
};

// ---------------------------------------------------------------------------------------
// Observation grounding

inline std::string describe_hand(Hand h) {
  switch (h) {
    case Hand::Empty: return "nothing";
    case Hand::Onion: return "one onion";
    case Hand::Dish: return "one dish";
    case Hand::SoupDish: return "one dish with soup";
  }
  return "?";
}

/// Short textual scene description for the controlled agent.
inline std::string ground_observation(const KitchenState& s, int agent, const KitchenLayout& layout) {
  std::ostringstream o;
  const int partner = 1 - agent;
  o << "Scene " << s.t << ": I am Player " << agent << " and hold " << describe_hand(s.hands[agent]) << ". ";
  o << "My teammate Player " << partner << " holds " << describe_hand(s.hands[partner]) << ". ";
  for (std::size_t p = 0; p < s.pots.size(); ++p) {
    const Pot& pot = s.pots[p];
    o << "Pot " << p << " ";
    if (pot.finished) o << "has finished cooking soup. ";
    else if (pot.cooking()) o << "is cooking, " << *pot.cooking_remaining << " steps remaining. ";
    else if (pot.onions == 0) o << "is empty. ";
    else o << "has " << pot.onions << " onion" << (pot.onions > 1 ? "s" : "") << ". ";
  }
  o << "Kitchen counter has " << s.counter_onions << " onion(s) and " << s.counter_dishes << " dish(es). ";
  o << "Available actions: ";
  bool first = true;
  for (MacroAction a : kAllActions) {
    if (!layout.capabilities[static_cast<std::size_t>(agent)].test(index_of(a))) continue;
    o << (first ? "" : ", ") << action_name(a) << "()";
    first = false;
  }
  o << '.';
  return o.str();
}

/// Frequency estimate over K sampled completions: each distinct text gets count / K.
inline std::vector<Proposal> proposals_from_completions(const std::vector<std::string>& completions, std::size_t k) {
  if (k == 0) throw ConfigError("sample count must be positive");
  std::vector<std::pair<std::string, std::size_t>> counts;
  for (const auto& raw : completions) {
    auto it = std::find_if(counts.begin(), counts.end(), [&](const auto& c) { return c.first == raw; });
    if (it == counts.end()) counts.emplace_back(raw, 1);
    else ++it->second;
  }
  std::vector<Proposal> out;
  for (auto& [raw, n] : counts)
    out.push_back(make_proposal(raw, static_cast<double>(n) / static_cast<double>(k)));
  return out;
}

// ---------------------------------------------------------------------------------------
// Remote proposer

struct EndpointConfig {
  std::string base_url;                      // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string credential_env;                // name of the environment variable holding the token
  std::string model;
  double temperature = 1.0;
  int max_new_tokens = 256;
  int top_k = 50;
  double top_p = 0.9;
  int samples_per_step = 10;
  double timeout_s = 30.0;
  int retries = 2;
  nlohmann::json request_template;           // string leaves like "{prompt}" are substituted
  std::string text_pointer = "/choices/0/message/content";
  std::string likelihood_pointer;            // optional
  std::string analysis_template = "{observation}\nAnalyze the scene and the teammate's intention.";
  std::string planning_template = "{observation}\nAnalysis: {analysis}\nAnswer with exactly one action.";
  std::string system_prompt = "You are a chef cooperating in a kitchen.";

  void validate() const {
    if (base_url.empty()) throw ConfigError("endpoint base_url is empty");
    if (base_url.rfind("https://", 0) == 0) throw ConfigError("https endpoints are not supported; use an http URL");
    if (samples_per_step < 1) throw ConfigError("samples_per_step must be at least 1");
    if (!(timeout_s > 0.0)) throw ConfigError("endpoint timeout must be positive");
    if (retries < 0) throw ConfigError("retries must be nonnegative");
  }

  static nlohmann::json default_request_template() {
    return {{"model", "{model}"},
            {"messages", {{{"role", "system"}, {"content", "{system}"}}, {{"role", "user"}, {"content", "{prompt}"}}}},
            {"temperature", "{temperature}"},
            {"max_tokens", "{max_new_tokens}"},
            {"top_k", "{top_k}"},
            {"top_p", "{top_p}"}};
  }

  static EndpointConfig from_json(const nlohmann::json& j, const std::string& base_dir = "") {
    EndpointConfig c;
    c.base_url = j.value("base_url", c.base_url);
    c.path = j.value("path", c.path);
    c.credential_env = j.value("credential_env", c.credential_env);
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    c.max_new_tokens = j.value("max_new_tokens", c.max_new_tokens);
    c.top_k = j.value("top_k", c.top_k);
    c.top_p = j.value("top_p", c.top_p);
    c.samples_per_step = j.value("samples_per_step", c.samples_per_step);
    c.timeout_s = j.value("timeout_s", c.timeout_s);
    c.retries = j.value("retries", c.retries);
    c.request_template = j.contains("request_template") ? j.at("request_template") : default_request_template();
    c.text_pointer = j.value("text_pointer", c.text_pointer);
    c.likelihood_pointer = j.value("likelihood_pointer", c.likelihood_pointer);
    c.system_prompt = j.value("system_prompt", c.system_prompt);
    auto read_text = [&](const char* key, std::string& dst) {
      if (!j.contains(key)) return;
      std::string p = j.at(key).get<std::string>();
      if (!base_dir.empty() && !p.empty() && p[0] != '/') p = base_dir + "/" + p;
      std::ifstream in(p, std::ios::binary);
      if (!in) throw ConfigError("cannot open prompt template: " + p);
      std::ostringstream ss;
      ss << in.rdbuf();
      dst = ss.str();
    };
    read_text("analysis_template_file", c.analysis_template);
    read_text("planning_template_file", c.planning_template);
    c.validate();
    return c;
  }
};

inline std::string fill_template(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    const std::string token = "{" + key + "}";
    for (std::size_t pos = text.find(token); pos != std::string::npos; pos = text.find(token, pos + value.size()))
      text.replace(pos, token.size(), value);
  }
  return text;
}

namespace detail {

inline nlohmann::json substitute(const nlohmann::json& node, const std::map<std::string, nlohmann::json>& vars) {
  if (node.is_string()) {
    const auto& s = node.get_ref<const std::string&>();
    if (s.size() > 2 && s.front() == '{' && s.back() == '}') {
      auto it = vars.find(s.substr(1, s.size() - 2));
      if (it != vars.end()) return it->second;
    }
    return node;
  }
  if (node.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& e : node) out.push_back(substitute(e, vars));
    return out;
  }
  if (node.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = node.begin(); it != node.end(); ++it) out[it.key()] = substitute(it.value(), vars);
    return out;
  }
  return node;
}

}  // namespace detail

/// Result of one completion request.
struct Completion {
  std::string text;
  std::optional<double> likelihood;
};

class RemoteProposer : public Proposer {
 public:
  explicit RemoteProposer(EndpointConfig config) : config_(std::move(config)) {
    config_.validate();
    if (!config_.credential_env.empty()) {
      const char* v = std::getenv(config_.credential_env.c_str());
      if (!v) throw ConfigError("credential variable " + config_.credential_env + " is not set");
      token_ = v;
    }
  }

  std::string name() const override { return "remote"; }

  /// Analysis prompt, then K planning samples. The whole step shares one deadline of
  /// timeout * (retries + 1); a failure to get the analysis or any planning sample yields an
  /// empty set flagged as a transport failure.
  ProposalSet propose(const ProposerContext& ctx) override {
    if (!ctx.state || !ctx.layout) throw ConfigError("remote proposer needs the simulator state");
    ProposalSet set;
    set.state = ctx.state_vec;
    set.prev_action = ctx.prev_action;
    const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(
                                             config_.timeout_s * (config_.retries + 1)));
    const std::string obs = ground_observation(*ctx.state, ctx.agent, *ctx.layout);
    last_analysis_.clear();
    last_completions_.clear();

    auto analysis = request(fill_template(config_.analysis_template, {{"observation", obs}}), deadline);
    if (!analysis) {
      set.transport_failure = true;
      return set;
    }
    last_analysis_ = analysis->text;
    const std::string prompt =
        fill_template(config_.planning_template, {{"observation", obs}, {"analysis", analysis->text}});

    std::vector<Completion> samples;
    for (int k = 0; k < config_.samples_per_step; ++k) {
      auto c = request(prompt, deadline);
      if (!c) break;
      samples.push_back(std::move(*c));
    }
    if (samples.empty()) {
      set.transport_failure = true;
      return set;
    }
    for (const auto& c : samples) last_completions_.push_back(c.text);

    const bool have_likelihoods =
        std::all_of(samples.begin(), samples.end(), [](const Completion& c) { return c.likelihood.has_value(); });
    if (!have_likelihoods) {
      set.proposals = proposals_from_completions(last_completions_, static_cast<std::size_t>(config_.samples_per_step));
      return set;
    }
    // Server-reported likelihoods: one value per distinct text, rescaled if they exceed 1.
    std::vector<std::pair<std::string, double>> distinct;
    for (const auto& c : samples)
      if (std::none_of(distinct.begin(), distinct.end(), [&](const auto& d) { return d.first == c.text; }))
        distinct.emplace_back(c.text, std::clamp(*c.likelihood, 0.0, 1.0));
    double total = 0.0;
    for (const auto& d : distinct) total += d.second;
    for (const auto& [text, l] : distinct) set.proposals.push_back(make_proposal(text, total > 1.0 ? l / total : l));
    return set;
  }

  const std::string& last_analysis() const { return last_analysis_; }
  const std::vector<std::string>& last_completions() const { return last_completions_; }

 private:
  using Clock = std::chrono::steady_clock;

  std::optional<Completion> request(const std::string& prompt, Clock::time_point deadline) {
    const std::map<std::string, nlohmann::json> vars = {{"system", config_.system_prompt},
                                                        {"prompt", prompt},
                                                        {"model", config_.model},
                                                        {"temperature", config_.temperature},
                                                        {"max_new_tokens", config_.max_new_tokens},
                                                        {"top_k", config_.top_k},
                                                        {"top_p", config_.top_p}};
    const std::string body = detail::substitute(config_.request_template, vars).dump();
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
      const auto left = std::chrono::duration<double>(deadline - Clock::now()).count();
      if (left <= 0.0) return std::nullopt;
      const double budget = std::min(left, config_.timeout_s);
      const auto usec = std::max<long long>(1000, static_cast<long long>(budget * 1e6));
      httplib::Client cli(config_.base_url);
      cli.set_connection_timeout(static_cast<time_t>(usec / 1000000), static_cast<time_t>(usec % 1000000));
      cli.set_read_timeout(static_cast<time_t>(usec / 1000000), static_cast<time_t>(usec % 1000000));
      cli.set_write_timeout(static_cast<time_t>(usec / 1000000), static_cast<time_t>(usec % 1000000));
      if (!token_.empty()) cli.set_bearer_token_auth(token_);
      auto res = cli.Post(config_.path, body, "application/json");
      if (!res || res->status != 200) continue;
      try {
        const auto j = nlohmann::json::parse(res->body);
        Completion c;
        c.text = j.at(nlohmann::json::json_pointer(config_.text_pointer)).get<std::string>();
        if (!config_.likelihood_pointer.empty()) {
          const nlohmann::json::json_pointer ptr(config_.likelihood_pointer);
          if (j.contains(ptr) && j.at(ptr).is_number()) c.likelihood = j.at(ptr).get<double>();
        }
        return c;
      } catch (const std::exception&) {
        continue;
      }
    }
    return std::nullopt;
  }

  EndpointConfig config_;
  std::string token_;
  std::string last_analysis_;
  std::vector<std::string> last_completions_;
};

}  // namespace causalplan
