#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include "causalplan/proposers.hpp"

using namespace causalplan;

namespace {

const std::string kFixtures = CAUSALPLAN_FIXTURE_DIR;

ProposerContext context_for(const KitchenState& s, const KitchenLayout& layout, const FeatureSchema& schema, int t = 0) {
  ProposerContext ctx;
  ctx.state = &s;
  ctx.layout = &layout;
  ctx.agent = 0;
  ctx.t = t;
  ctx.state_vec = encode_state(s, schema);
  ctx.prev_action = ActionVector::none(schema.action_dim());
  return ctx;
}

nlohmann::json chat_response(const std::string& text) {
  return {{"choices", {{{"message", {{"role", "assistant"}, {"content", text}}}}}}};
}

// Local chat endpoint replaying a fixed transcript.
class MockEndpoint {
 public:
  explicit MockEndpoint(nlohmann::json transcript, int delay_ms = 0) : transcript_(std::move(transcript)) {
    server_.Post("/v1/chat/completions", [this, delay_ms](const httplib::Request& req, httplib::Response& res) {
      if (delay_ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(delay_ms));
      auth_header_ = req.get_header_value("Authorization");
      const auto body = nlohmann::json::parse(req.body);
      const std::string prompt = body.at("messages").at(1).at("content").get<std::string>();
      prompts_.push_back(prompt);
      std::string text;
      if (prompt.find("Analysis:") == std::string::npos) {
        text = transcript_.at("analysis").get<std::string>();
        ++analysis_calls_;
      } else {
        const auto& plans = transcript_.at("planning");
        text = plans.at(planning_calls_ % plans.size()).get<std::string>();
        ++planning_calls_;
      }
      res.set_content(chat_response(text).dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockEndpoint() {
    server_.stop();
    thread_.join();
  }

  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int analysis_calls() const { return analysis_calls_; }
  int planning_calls() const { return planning_calls_; }
  const std::vector<std::string>& prompts() const { return prompts_; }
  const std::string& auth_header() const { return auth_header_; }

 private:
  nlohmann::json transcript_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> analysis_calls_{0}, planning_calls_{0};
  std::vector<std::string> prompts_;
  std::string auth_header_;
};

nlohmann::json read_fixture(const std::string& name) {
  std::ifstream in(kFixtures + "/" + name);
  return nlohmann::json::parse(in);
}

EndpointConfig config_for(const std::string& url) {
  nlohmann::json j = {{"base_url", url}, {"samples_per_step", 10}, {"timeout_s", 2.0}, {"retries", 1}};
  return EndpointConfig::from_json(j);
}

}  // namespace

TEST(ScriptedProposer, CleanProfileIsAlwaysRecognized) {
  const KitchenLayout cr = cramped_room_layout();
  Rng rng(1);
  BehaviorPolicy walker({PolicyKind::RandomLegal, 0.0}, 9);
  KitchenState s = reset(cr);
  for (int t = 0; t < 2000; ++t) {
    const ProposalSet set = scripted_propose(s, 0, cr, {0.0, 0.0, 3, 0.5}, rng);
    ASSERT_EQ(set.proposals.size(), 3u);
    double total = 0;
    for (const auto& p : set.proposals) {
      ASSERT_TRUE(p.canonical.has_value()) << p.raw_text;
      ASSERT_GE(p.p_a, 0.0);
      total += p.p_a;
    }
    ASSERT_LE(total, 1.0 + 1e-9);
    s = step(s, {walker.act(s, 0, cr), walker.act(s, 1, cr)}, cr).next_state;
  }
}

TEST(ScriptedProposer, EmptyRateOneAlwaysEmpty) {
  const KitchenLayout cr = cramped_room_layout();
  const KitchenState s = reset(cr);
  Rng rng(2);
  for (int t = 0; t < 500; ++t) EXPECT_TRUE(scripted_propose(s, 0, cr, {0.0, 1.0, 3, 0.5}, rng).proposals.empty());
}

TEST(ScriptedProposer, InvalidRateFrequency) {
  const KitchenLayout cr = cramped_room_layout();
  KitchenState s = reset(cr);
  s.hands[0] = Hand::Onion;
  Rng rng(3);
  std::size_t total = 0, unrecognized = 0;
  for (int t = 0; t < 10000; ++t) {
    const ProposalSet set = scripted_propose(s, 0, cr, {0.3, 0.0, 3, 0.5}, rng);
    for (const auto& p : set.proposals) {
      ++total;
      unrecognized += !p.canonical.has_value();
    }
  }
  EXPECT_NEAR(double(unrecognized) / double(total), 0.30, 0.01);
}

TEST(ScriptedProposer, ZeroNoiseProposesGreedyAction) {
  const KitchenLayout cr = cramped_room_layout();
  KitchenState s = reset(cr);
  s.hands[0] = Hand::SoupDish;
  Rng rng(4);
  const ProposalSet set = scripted_propose(s, 0, cr, {0.0, 0.0, 4, 0.0}, rng);
  for (const auto& p : set.proposals) {
    EXPECT_EQ(p.canonical, MacroAction::DeliverSoup);
    EXPECT_NEAR(p.p_a, 0.25, 1e-15);
  }
}

TEST(ScriptedProposer, ProfileValidationAndJson) {
  EXPECT_THROW(ScriptedProposer(HallucinationProfile{1.2, 0.0, 3, 0.5}, 0), ConfigError);
  EXPECT_THROW(ScriptedProposer(HallucinationProfile{0.1, 0.0, 0, 0.5}, 0), ConfigError);
  const HallucinationProfile p{0.3, 0.05, 5, 0.25};
  EXPECT_EQ(HallucinationProfile::from_json(p.to_json()).to_json(), p.to_json());
  for (auto text : kHallucinatedActions) EXPECT_FALSE(canonicalize(text).has_value()) << text;
}

TEST(ReplayProposer, ReplayReproducesDecisions) {
  const KitchenLayout cr = cramped_room_layout();
  const FeatureSchema schema = FeatureSchema::cramped_room();
  Rng mrng(5);
  CausalActionMatrix m = empty_matrix(schema);
  for (Eigen::Index k = 0; k < m.entries.size(); ++k) m.entries(k) = mrng.uniform();

  ScriptedProposer live({0.3, 0.1, 3, 0.5}, 11);
  CausalPlanner planner_live(&m, {0.5, 99, 1.0});
  ProposalLog log;
  std::vector<MacroAction> live_choices;
  std::size_t live_invalid = 0;
  KitchenState s = reset(cr);
  std::vector<KitchenState> states;
  for (int t = 0; t < 100; ++t) {
    states.push_back(s);
    const ProposalSet set = live.propose(context_for(s, cr, schema, t));
    log.steps.push_back(proposals_from_json(nlohmann::json::parse(proposals_to_json(set.proposals).dump())));
    for (const auto& p : set.proposals) live_invalid += !p.canonical;
    const PlanDecision d = planner_live.plan(set);
    live_choices.push_back(d.chosen);
    s = step(s, {d.chosen, std::nullopt}, cr).next_state;
  }

  ReplayProposer replay(log);
  CausalPlanner planner_replay(&m, {0.5, 99, 1.0});
  std::size_t replay_invalid = 0;
  for (int t = 0; t < 100; ++t) {
    const ProposalSet set = replay.propose(context_for(states[t], cr, schema, t));
    for (const auto& p : set.proposals) replay_invalid += !p.canonical;
    ASSERT_EQ(planner_replay.plan(set).chosen, live_choices[static_cast<std::size_t>(t)]) << "t=" << t;
  }
  EXPECT_EQ(replay_invalid, live_invalid);
  EXPECT_THROW(replay_propose(log, 100), ConfigError);
  EXPECT_THROW(replay_propose(log, -1), ConfigError);
}

TEST(ReplayProposer, LoadsEpisodeLogLines) {
  const std::string path = ::testing::TempDir() + "causalplan_replay.jsonl";
  {
    std::ofstream out(path);
    out << R"j({"t":0,"proposer":{"proposals":[{"raw":"pickup_onion()","p_a":0.5},{"raw":"chop_tomato()","p_a":0.5}]}})j" << '\n';
    out << R"({"t":1,"proposer":{"proposals":[]}})" << '\n';
    out << R"({"report":{"seed":0}})" << '\n';
  }
  const ProposalLog log = load_proposal_log(path);
  ASSERT_EQ(log.steps.size(), 2u);
  EXPECT_EQ(log.steps[0][0].canonical, MacroAction::PickupOnion);
  EXPECT_FALSE(log.steps[0][1].canonical.has_value());
  EXPECT_TRUE(log.steps[1].empty());

  std::ofstream(path) << R"({"t":3,"proposer":{"proposals":[]}})" << '\n';
  EXPECT_THROW(load_proposal_log(path), ParseError);
}

TEST(RemoteProposer, FrequencyEstimate) {
  std::vector<std::string> texts(6, "pickup_onion()");
  texts.insert(texts.end(), {"pickup_dish()", "pickup_dish()", "deliver_soup()", "???"});
  const auto ps = proposals_from_completions(texts, 10);
  ASSERT_EQ(ps.size(), 4u);
  EXPECT_EQ(ps[0].canonical, MacroAction::PickupOnion);
  EXPECT_EQ(ps[0].p_a, 0.6);
  double total = 0;
  for (const auto& p : ps) total += p.p_a;
  EXPECT_LE(total, 1.0 + 1e-9);
  EXPECT_THROW(proposals_from_completions(texts, 0), ConfigError);
}

TEST(RemoteProposer, TemplateSubstitution) {
  EXPECT_EQ(fill_template("{observation}\nAnalysis: {analysis}", {{"observation", "obs"}, {"analysis", "a {b}"}}),
            "obs\nAnalysis: a {b}");
  const auto body = detail::substitute(EndpointConfig::default_request_template(),
                                       {{"prompt", "hi"}, {"temperature", 1.0}, {"model", "m"}});
  EXPECT_EQ(body["messages"][1]["content"], "hi");
  EXPECT_EQ(body["temperature"], 1.0);
  EXPECT_EQ(body["top_k"], "{top_k}");
}

TEST(RemoteProposer, EndpointDownGivesTransportFailure) {
  const KitchenLayout cr = cramped_room_layout();
  const FeatureSchema schema = FeatureSchema::cramped_room();
  const KitchenState s = reset(cr);
  EndpointConfig c = config_for("http://127.0.0.1:1");
  c.timeout_s = 0.5;
  RemoteProposer remote(c);
  const auto start = std::chrono::steady_clock::now();
  const ProposalSet set = remote.propose(context_for(s, cr, schema));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(set.proposals.empty());
  EXPECT_TRUE(set.transport_failure);
  EXPECT_LE(seconds, c.timeout_s * (c.retries + 1) + 0.5);
}

TEST(RemoteProposer, TwoPromptFlowMatchesGoldenFile) {
  const nlohmann::json transcript = read_fixture("remote_transcript.json");
  const nlohmann::json golden = read_fixture("remote_transcript.golden.json");
  MockEndpoint server(transcript);
  ::setenv("CAUSALPLAN_TEST_TOKEN", "secret-token", 1);
  EndpointConfig c = config_for(server.url());
  c.credential_env = "CAUSALPLAN_TEST_TOKEN";
  RemoteProposer remote(c);

  const KitchenLayout cr = cramped_room_layout();
  const FeatureSchema schema = FeatureSchema::cramped_room();
  KitchenState s = reset(cr);
  s.hands[1] = Hand::Onion;
  s.pots[0].onions = 2;
  const ProposalSet set = remote.propose(context_for(s, cr, schema));
  EXPECT_FALSE(set.transport_failure);
  EXPECT_EQ(server.analysis_calls(), 1);
  EXPECT_EQ(server.planning_calls(), 10);
  EXPECT_EQ(server.auth_header(), "Bearer secret-token");
  EXPECT_EQ(remote.last_analysis(), transcript.at("analysis").get<std::string>());
  ASSERT_EQ(server.prompts().size(), 11u);
  EXPECT_NE(server.prompts()[1].find(transcript.at("analysis").get<std::string>()), std::string::npos);
  EXPECT_NE(server.prompts()[0].find("has 2 onions"), std::string::npos);

  const auto& expected = golden.at("proposals");
  ASSERT_EQ(set.proposals.size(), expected.size());
  for (std::size_t k = 0; k < expected.size(); ++k) {
    EXPECT_EQ(set.proposals[k].raw_text, expected[k].at("raw").get<std::string>());
    const auto& canon = expected[k].at("canonical");
    if (canon.is_null()) EXPECT_FALSE(set.proposals[k].canonical.has_value());
    else EXPECT_EQ(action_name(*set.proposals[k].canonical), canon.get<std::string>());
    EXPECT_NEAR(set.proposals[k].p_a, expected[k].at("p_a").get<double>(), 1e-15);
  }

  Rng rng(0);
  const PlanDecision d = plan(set, nullptr, {1.0, 0, 1.0}, rng);
  EXPECT_EQ(d.unrecognized, 2u);
  std::map<std::string, double> pa;
  for (const auto& t : d.trace) pa[std::string(action_name(t.action))] += t.p_a;
  for (const auto& [name, value] : golden.at("chosen_distribution").items()) EXPECT_NEAR(pa[name], value.get<double>(), 1e-12);
  ::unsetenv("CAUSALPLAN_TEST_TOKEN");
}

TEST(RemoteProposer, SlowEndpointIsBoundedByDeadline) {
  MockEndpoint server(read_fixture("remote_transcript.json"), 800);
  EndpointConfig c = config_for(server.url());
  c.timeout_s = 0.2;
  c.retries = 1;
  RemoteProposer remote(c);
  const KitchenLayout cr = cramped_room_layout();
  const FeatureSchema schema = FeatureSchema::cramped_room();
  const KitchenState s = reset(cr);
  const auto start = std::chrono::steady_clock::now();
  const ProposalSet set = remote.propose(context_for(s, cr, schema));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_TRUE(set.transport_failure);
  EXPECT_TRUE(set.proposals.empty());
  EXPECT_LE(seconds, 0.2 * 2 + 0.3);
}

TEST(RemoteProposer, MissingCredentialIsAConfigError) {
  EndpointConfig c = config_for("http://127.0.0.1:1");
  c.credential_env = "CAUSALPLAN_SURELY_UNSET_VARIABLE";
  EXPECT_THROW(RemoteProposer{c}, ConfigError);
  EXPECT_THROW(EndpointConfig::from_json({{"base_url", ""}}), ConfigError);
  EXPECT_THROW(EndpointConfig::from_json({{"base_url", "https://example.com"}}), ConfigError);
}

TEST(RemoteProposer, ObservationGrounding) {
  const KitchenLayout fc = load_layout(std::string(CAUSALPLAN_DATA_DIR) + "/layouts/forced_coordination.json");
  KitchenState s = reset(fc);
  s.hands[0] = Hand::Dish;
  s.pots[1] = Pot{3, 7, false};
  const std::string text = ground_observation(s, 0, fc);
  EXPECT_NE(text.find("hold one dish"), std::string::npos);
  EXPECT_NE(text.find("Pot 1 is cooking, 7 steps remaining"), std::string::npos);
  EXPECT_EQ(text.find("deliver_soup"), std::string::npos);
  EXPECT_NE(text.find("place_dish_on_counter()"), std::string::npos);
}
