#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "causalplan/harness.hpp"

using namespace causalplan;
namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::path(::testing::TempDir()) / ("causalplan_harness_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ExperimentConfig scripted_config(const std::string& out, double gamma = 1.0) {
  ExperimentConfig c;
  c.gamma = gamma;
  c.profile = {0.2, 0.1, 3, 0.5};
  c.seeds = {0, 1};
  c.horizon = 150;
  c.output_dir = out;
  return c;
}

std::string write_random_matrix(const std::string& dir) {
  fs::create_directories(dir);
  const FeatureSchema schema = FeatureSchema::cramped_room();
  CausalActionMatrix m = empty_matrix(schema);
  Rng rng(17);
  for (Eigen::Index k = 0; k < m.entries.size(); ++k) m.entries(k) = rng.uniform();
  const std::string path = (fs::path(dir) / "matrix.csv").string();
  export_matrix(m, path);
  return path;
}

}  // namespace

TEST(Harness, EmptyProposerAlwaysFallsBack) {
  const std::string out = fresh_dir("empty");
  ExperimentConfig c = scripted_config(out, 0.5);
  c.matrix_path = write_random_matrix(out + "_matrix");
  c.profile.empty_rate = 1.0;
  const RunSummary s = evaluate(c);
  for (const auto& r : s.reports) {
    EXPECT_EQ(r.backup_invocations, static_cast<std::size_t>(c.horizon));
    EXPECT_EQ(r.proposals_emitted, 0u);
    EXPECT_EQ(r.steps, c.horizon);
  }
}

TEST(Harness, GammaOneRunsWithoutMatrix) {
  const std::string out = fresh_dir("gamma_one");
  ExperimentConfig c = scripted_config(out);
  c.profile.invalid_rate = 1.0;
  const RunSummary s = evaluate(c);
  ASSERT_EQ(s.reports.size(), 2u);
  for (const auto& r : s.reports) {
    EXPECT_EQ(r.backup_invocations, static_cast<std::size_t>(c.horizon));
    EXPECT_EQ(r.uninformed_backups, r.backup_invocations);
    EXPECT_EQ(r.invalid_proposals, r.proposals_emitted);
  }
}

TEST(Harness, IdenticalRunsWriteIdenticalFiles) {
  const std::string a = fresh_dir("same_a"), b = fresh_dir("same_b");
  const std::string matrix = write_random_matrix(fresh_dir("same_matrix"));
  ExperimentConfig ca = scripted_config(a, 0.5), cb = scripted_config(b, 0.5);
  ca.matrix_path = cb.matrix_path = matrix;
  evaluate(ca);
  evaluate(cb);
  for (const char* f : {"seed_0.jsonl", "seed_1.jsonl", "summary.json", "summary.txt"}) {
    const std::string x = slurp(fs::path(a) / f);
    EXPECT_FALSE(x.empty()) << f;
    EXPECT_EQ(x, slurp(fs::path(b) / f)) << f;
  }
  ExperimentConfig parallel = scripted_config(fresh_dir("same_parallel"), 0.5);
  parallel.matrix_path = matrix;
  parallel.workers = 2;
  evaluate(parallel);
  for (const char* f : {"seed_0.jsonl", "seed_1.jsonl", "summary.txt"})
    EXPECT_EQ(slurp(fs::path(a) / f), slurp(fs::path(parallel.output_dir) / f)) << f;

  ExperimentConfig other = scripted_config(fresh_dir("same_c"), 0.5);
  other.matrix_path = matrix;
  other.seeds = {0, 2};
  evaluate(other);
  EXPECT_NE(slurp(fs::path(a) / "seed_1.jsonl"), slurp(fs::path(other.output_dir) / "seed_2.jsonl"));
}

TEST(Harness, LogRecountMatchesReports) {
  const std::string out = fresh_dir("recount");
  ExperimentConfig c = scripted_config(out, 0.5);
  c.matrix_path = write_random_matrix(out + "_matrix");
  c.profile = {0.3, 0.2, 3, 0.5};
  c.partner = {PolicyKind::RandomLegal, 0.0};
  const RunSummary s = evaluate(c);
  for (const auto& r : s.reports) {
    const InvalidCounts n = count_invalid((fs::path(out) / r.log_path).string());
    EXPECT_EQ(n.proposals_emitted, r.proposals_emitted);
    EXPECT_EQ(n.invalid_proposals, r.invalid_proposals);
    EXPECT_EQ(n.invalid_executions, r.invalid_executions);
    EXPECT_EQ(n.backup_invocations, r.backup_invocations);
    EXPECT_EQ(n.total_reward, r.total_reward);
    EXPECT_EQ(r.total_reward, 20 * r.deliveries);
    EXPECT_GT(r.invalid_proposals, 0u);
  }
}

TEST(Harness, ReplayReproducesRecordedRun) {
  const std::string live = fresh_dir("replay_live"), again = fresh_dir("replay_again");
  const std::string matrix = write_random_matrix(fresh_dir("replay_matrix"));
  ExperimentConfig c = scripted_config(live, 0.5);
  c.matrix_path = matrix;
  const RunSummary first = evaluate(c);

  ExperimentConfig r = c;
  r.output_dir = again;
  r.proposer = ProposerKind::Replay;
  r.replay_dir = live;
  const RunSummary second = evaluate(r);
  ASSERT_EQ(first.reports.size(), second.reports.size());
  for (std::size_t k = 0; k < first.reports.size(); ++k) {
    EXPECT_EQ(first.reports[k].invalid_proposals, second.reports[k].invalid_proposals);
    EXPECT_EQ(first.reports[k].total_reward, second.reports[k].total_reward);
    const auto f = "seed_" + std::to_string(c.seeds[k]) + ".jsonl";
    EXPECT_EQ(slurp(fs::path(live) / f), slurp(fs::path(again) / f));
  }
}

TEST(Harness, PartialResultsSurviveAFailingSeed) {
  const std::string src = fresh_dir("partial_src"), out = fresh_dir("partial_out");
  ExperimentConfig rec = scripted_config(src);
  rec.seeds = {0};
  evaluate(rec);

  ExperimentConfig c = scripted_config(out);
  c.proposer = ProposerKind::Replay;
  c.replay_dir = src;
  c.seeds = {0, 1};
  EXPECT_THROW(evaluate(c), Error);
  const auto summary = read_json_file((fs::path(out) / "summary.json").string());
  ASSERT_EQ(summary.at("reports").size(), 1u);
  EXPECT_EQ(summary.at("reports")[0].at("seed"), 0);
  EXPECT_NE(summary.at("error").get<std::string>().find("seed 1"), std::string::npos);
  EXPECT_TRUE(fs::exists(fs::path(out) / "summary.txt"));
}

TEST(Summary, MeanAndPopulationStd) {
  const Statistic s = mean_std({2, 4, 4, 4, 5, 5, 7, 9});
  EXPECT_DOUBLE_EQ(s.mean, 5.0);
  EXPECT_DOUBLE_EQ(s.std, 2.0);
  const Statistic one = mean_std({3.5});
  EXPECT_EQ(one.mean, 3.5);
  EXPECT_EQ(one.std, 0.0);

  RunSummary rs;
  EpisodeReport r;
  r.total_reward = 40;
  r.deliveries = 2;
  rs.reports.push_back(r);
  const auto j = rs.to_json();
  EXPECT_EQ(j.at("statistics").at("total_reward").at("mean"), 40.0);
  EXPECT_EQ(j.at("statistics").at("total_reward").at("std"), 0.0);
  EXPECT_NE(rs.table().find("40"), std::string::npos);
}

TEST(Config, ValidationAndRoundTrip) {
  ExperimentConfig c;
  EXPECT_THROW(c.validate(), ConfigError);  // gamma 0.5 without a matrix
  c.gamma = 1.0;
  EXPECT_NO_THROW(c.validate());
  ExperimentConfig bad = c;
  bad.horizon = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.seeds.clear();
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.controlled_seat = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.proposer = ProposerKind::Remote;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.profile.invalid_rate = 2.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"proposer", {{"kind", "oracle"}}}}), ConfigError);
  EXPECT_THROW(ExperimentConfig::from_json({{"horizon", "long"}}), ConfigError);

  c.seeds = {4, 9};
  c.profile = {0.25, 0.05, 4, 0.3};
  c.partner = {PolicyKind::RandomLegal, 0.0};
  c.controlled_seat = 1;
  EXPECT_EQ(ExperimentConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Config, SchemaMustMatchLayout) {
  ExperimentConfig c;
  c.gamma = 1.0;
  c.layout_path = std::string(CAUSALPLAN_DATA_DIR) + "/layouts/forced_coordination.json";
  c.schema_path = std::string(CAUSALPLAN_DATA_DIR) + "/schemas/cramped_room.json";
  EXPECT_THROW(ExperimentResources::load(c), SchemaMismatch);
  c.schema_path.clear();
  EXPECT_EQ(ExperimentResources::load(c).schema.num_pots(), 2u);
}

TEST(Episode, SecondSeatAndTwoPotLayout) {
  ExperimentConfig c;
  c.gamma = 1.0;
  c.controlled_seat = 1;
  c.horizon = 300;
  c.profile = {0.0, 0.0, 3, 0.0};
  c.layout_path = std::string(CAUSALPLAN_DATA_DIR) + "/layouts/forced_coordination.json";
  const ExperimentResources res = ExperimentResources::load(c);
  const EpisodeReport r = run_episode(c, res, 3, "");
  EXPECT_EQ(r.steps, 300);
  EXPECT_EQ(r.invalid_proposals, 0u);
  EXPECT_GT(r.deliveries, 0);
}
