// Command-line front end: collect, train, matrix, eval, oracle.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "causalplan/causalplan.hpp"

namespace cp = causalplan;
using nlohmann::json;

namespace {

// The --config file may hold one section per subcommand or a flat object.
json section(const std::string& path, const std::string& name) {
  if (path.empty()) return json::object();
  json j = cp::read_json_file(path);
  if (j.contains(name) && j.at(name).is_object()) return j.at(name);
  return j;
}

template <typename T>
void override_if(CLI::Option* opt, json& cfg, const char* key, const T& value) {
  if (opt->count() > 0) cfg[key] = value;
}

cp::FeatureSchema load_schema(const json& cfg, const cp::KitchenLayout& layout) {
  const auto path = cfg.value("schema", std::string());
  return path.empty() ? cp::FeatureSchema::for_pots(layout.num_pots) : cp::FeatureSchema::load(path);
}

cp::KitchenLayout load_layout_or_default(const json& cfg) {
  const auto path = cfg.value("layout", std::string());
  return path.empty() ? cp::cramped_room_layout() : cp::load_layout(path);
}

int run_collect(const json& cfg) {
  const auto layout = load_layout_or_default(cfg);
  const auto schema = load_schema(cfg, layout);
  cp::PolicySpec policy;
  policy.kind = cp::policy_kind_from_name(cfg.value("policy", std::string("greedy_chef")));
  policy.epsilon = cfg.value("epsilon", policy.epsilon);
  cp::CollectOptions opt;
  opt.episodes = cfg.value("episodes", opt.episodes);
  opt.horizon = cfg.value("horizon", opt.horizon);
  opt.seed = cfg.value("seed", opt.seed);
  opt.seats = cfg.value("seats", opt.seats);
  const auto out = cfg.value("out", std::string("buffer.jsonl"));
  const auto buf = cp::collect_buffer(layout, schema, policy, opt);
  cp::save_buffer(buf, out);
  std::cout << "collected " << buf.records.size() << " records (" << buf.meta.N << " timesteps, " << buf.meta.dropped
            << " dropped) -> " << out << '\n';
  return 0;
}

int run_train(const json& cfg) {
  const auto buffer_path = cfg.value("buffer", std::string());
  if (buffer_path.empty()) throw cp::ConfigError("train: --buffer is required");
  const auto layout = load_layout_or_default(cfg);
  const auto schema = load_schema(cfg, layout);
  const auto buf = cp::load_buffer(buffer_path, &schema);
  if (!buf.meta.schema_fingerprint.empty() && buf.meta.schema_fingerprint != schema.fingerprint())
    throw cp::SchemaMismatch("buffer was collected with a different feature schema");
  const auto tc = cp::TrainConfig::from_json(cfg);
  const auto data = cp::dataset_from_buffer(buf);
  const auto out = cfg.value("out", std::string("sca_checkpoint.json"));
  const bool quiet = cfg.value("quiet", false);
  auto progress = [&](std::size_t it, double loss) {
    if (!quiet && it % (tc.trace_interval * 10) == 0) std::cerr << "iteration " << it << " loss " << loss << '\n';
  };
  const auto t0 = std::chrono::steady_clock::now();
  auto finish = [&](auto result) {
    result.model.set_schema_fingerprint(schema.fingerprint());
    cp::save_checkpoint(out, result.model, tc, result.trace, result.clipped);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "trained " << tc.iterations << " iterations in " << secs << " s; final causal loss "
              << (result.trace.empty() ? 0.0 : result.trace.back().causal) << "; clipped " << result.clipped << " -> "
              << out << '\n';
  };
  if (tc.precision == "float64") finish(cp::train<double>(data, tc, progress));
  else finish(cp::train<float>(data, tc, progress));
  return 0;
}

int run_matrix(const json& cfg) {
  const auto ckpt = cfg.value("checkpoint", std::string());
  if (ckpt.empty()) throw cp::ConfigError("matrix: --checkpoint is required");
  const auto layout = load_layout_or_default(cfg);
  const auto schema = load_schema(cfg, layout);
  auto m = cp::build_matrix(cp::load_checkpoint_gates(ckpt), schema);
  m.provenance = ckpt;
  const auto out = cfg.value("out", std::string("matrix.csv"));
  cp::export_matrix(m, out);
  std::optional<double> threshold;
  if (cfg.contains("threshold") && !cfg.at("threshold").is_null()) threshold = cfg.at("threshold").get<double>();
  const auto heatmap = cfg.value("heatmap", std::string());
  if (!heatmap.empty()) cp::export_heatmap(m, heatmap, threshold);
  std::cout << "matrix " << m.action_dim() << " x " << m.parent_dim() << " -> " << out << '\n';
  return 0;
}

int run_eval(const json& cfg) {
  const auto c = cp::ExperimentConfig::from_json(cfg);
  const auto summary = cp::evaluate(c);
  std::cout << summary.table();
  return 0;
}

int run_oracle(const json& cfg) {
  cp::SyntheticSpec spec;
  spec.parent_dim = cfg.value("parent_dim", spec.parent_dim);
  spec.child_dim = cfg.value("child_dim", spec.child_dim);
  spec.density = cfg.value("density", spec.density);
  spec.samples = cfg.value("samples", spec.samples);
  spec.noise_scale = cfg.value("noise_scale", spec.noise_scale);
  spec.interaction_rate = cfg.value("interaction_rate", spec.interaction_rate);
  const auto seeds = cfg.value("seeds", std::vector<std::uint64_t>{0});
  const double lambda = cfg.value("ridge_lambda", 1e-3);
  const double threshold = cfg.value("ridge_threshold", 0.1);
  const bool with_sca = cfg.value("sca", false);
  const auto tc = cp::TrainConfig::from_json(cfg.value("train", json::object()));
  const auto out_dir = cfg.value("out", std::string());
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);

  json rows = json::array();
  for (auto seed : seeds) {
    spec.seed = seed;
    const auto data = cp::generate_synthetic(spec);
    const auto mask = cp::self_edge_mask(spec.parent_dim, spec.child_dim);
    const auto fit = cp::ridge_fit(data.dataset, cp::FeatureMap{}, lambda);
    const auto ridge_edges = cp::recover_structure(fit, threshold, &mask);
    const auto mr = cp::structural_metrics(ridge_edges, data.scm.true_edges);
    json row = {{"seed", seed}, {"ridge", {{"precision", mr.precision}, {"recall", mr.recall}, {"f1", mr.f1}, {"shd", mr.shd}}}};
    std::cout << "seed " << seed << ": ridge F1 " << mr.f1 << " SHD " << mr.shd;
    if (with_sca) {
      auto cfg_seed = tc;
      cfg_seed.seed = seed;
      const auto res = cp::train<float>(data.dataset, cfg_seed);
      const auto sca_edges = cp::threshold_gates(res.model.structural_gates().values, 0.5);
      const auto ms = cp::structural_metrics(sca_edges, data.scm.true_edges);
      const double agree = cp::edge_agreement(sca_edges, ridge_edges);
      row["sca"] = {{"precision", ms.precision}, {"recall", ms.recall}, {"f1", ms.f1}, {"shd", ms.shd}};
      row["agreement"] = agree;
      std::cout << "; SCA F1 " << ms.f1 << " SHD " << ms.shd << "; agreement " << agree;
    }
    std::cout << '\n';
    if (!out_dir.empty()) {
      const auto base = std::filesystem::path(out_dir);
      cp::write_json_file((base / ("scm_" + std::to_string(seed) + ".json")).string(), data.scm.to_json());
      cp::write_json_file((base / ("ridge_" + std::to_string(seed) + ".json")).string(), fit.to_json());
    }
    rows.push_back(row);
  }
  if (!out_dir.empty()) cp::write_json_file((std::filesystem::path(out_dir) / "oracle_summary.json").string(), rows, 2);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Causal action planning toolkit"};
  app.set_version_flag("--version", std::string(cp::kVersion));
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON configuration (flat or with one section per subcommand)")
      ->check(CLI::ExistingFile);

  // collect
  auto* collect = app.add_subcommand("collect", "Collect a relabeled training buffer with a scripted policy");
  std::string c_layout, c_schema, c_policy, c_out;
  double c_eps = 0;
  int c_episodes = 0, c_horizon = 0;
  std::vector<std::uint64_t> c_seed;
  std::vector<int> c_seats;
  auto* o_c_layout = collect->add_option("--layout", c_layout, "Layout JSON");
  auto* o_c_schema = collect->add_option("--schema", c_schema, "Feature schema JSON");
  auto* o_c_policy = collect->add_option("--policy", c_policy, "greedy_chef or random_legal");
  auto* o_c_eps = collect->add_option("--epsilon", c_eps, "Exploration rate of greedy_chef");
  auto* o_c_episodes = collect->add_option("--episodes", c_episodes, "Episode count");
  auto* o_c_horizon = collect->add_option("--horizon", c_horizon, "Steps per episode");
  auto* o_c_seed = collect->add_option("--seed", c_seed, "Seed");
  auto* o_c_seats = collect->add_option("--seats", c_seats, "Seats to record (0 and/or 1)");
  auto* o_c_out = collect->add_option("--out", c_out, "Output buffer path");

  // train
  auto* train = app.add_subcommand("train", "Fit the structural causal action model on a buffer");
  std::string t_buffer, t_layout, t_schema, t_out, t_precision;
  std::size_t t_iters = 0, t_batch = 0;
  double t_lr = 0, t_lambda = 0, t_prior = 0;
  std::vector<std::uint64_t> t_seed;
  bool t_quiet = false;
  auto* o_t_buffer = train->add_option("--buffer", t_buffer, "Buffer JSONL");
  auto* o_t_layout = train->add_option("--layout", t_layout, "Layout JSON (selects the default schema)");
  auto* o_t_schema = train->add_option("--schema", t_schema, "Feature schema JSON");
  auto* o_t_iters = train->add_option("--iterations", t_iters, "Training iterations");
  auto* o_t_batch = train->add_option("--batch-size", t_batch, "Mini-batch size");
  auto* o_t_lr = train->add_option("--lr", t_lr, "Learning rate");
  auto* o_t_lambda = train->add_option("--lambda", t_lambda, "Edge penalty weight");
  auto* o_t_prior = train->add_option("--edge-prior", t_prior, "Prior edge probability");
  auto* o_t_precision = train->add_option("--precision", t_precision, "float32 or float64");
  auto* o_t_seed = train->add_option("--seed", t_seed, "Seed");
  auto* o_t_out = train->add_option("--out", t_out, "Checkpoint path");
  auto* o_t_quiet = train->add_flag("--quiet", t_quiet, "Suppress progress output");

  // matrix
  auto* matrix = app.add_subcommand("matrix", "Build and export the causal action matrix from a checkpoint");
  std::string m_ckpt, m_layout, m_schema, m_out, m_heatmap;
  double m_threshold = 0;
  auto* o_m_ckpt = matrix->add_option("--checkpoint", m_ckpt, "Checkpoint JSON");
  auto* o_m_layout = matrix->add_option("--layout", m_layout, "Layout JSON (selects the default schema)");
  auto* o_m_schema = matrix->add_option("--schema", m_schema, "Feature schema JSON");
  auto* o_m_out = matrix->add_option("--out", m_out, "Matrix CSV path");
  auto* o_m_heatmap = matrix->add_option("--heatmap", m_heatmap, "Optional (parent, child, weight) CSV");
  auto* o_m_threshold = matrix->add_option("--threshold", m_threshold, "Zero heatmap entries below this value");

  // eval
  auto* eval = app.add_subcommand("eval", "Run planning episodes and summarize");
  std::vector<std::uint64_t> e_seeds;
  double e_gamma = 0;
  std::string e_out, e_matrix;
  int e_workers = 1, e_horizon = 0;
  auto* o_e_seed = eval->add_option("--seed", e_seeds, "Seed (repeatable)");
  auto* o_e_gamma = eval->add_option("--gamma", e_gamma, "Mixing weight in [0, 1]");
  auto* o_e_out = eval->add_option("--out", e_out, "Output directory");
  auto* o_e_workers = eval->add_option("--workers", e_workers, "Parallel seeds");
  auto* o_e_matrix = eval->add_option("--matrix", e_matrix, "Causal matrix CSV");
  auto* o_e_horizon = eval->add_option("--horizon", e_horizon, "Steps per episode");

  // oracle
  auto* oracle = app.add_subcommand("oracle", "Synthetic structure-recovery study");
  std::vector<std::uint64_t> r_seeds;
  std::size_t r_samples = 0;
  double r_density = 0;
  bool r_sca = false;
  std::string r_out;
  auto* o_r_seed = oracle->add_option("--seed", r_seeds, "Seed (repeatable)");
  auto* o_r_samples = oracle->add_option("--samples", r_samples, "Samples per dataset");
  auto* o_r_density = oracle->add_option("--density", r_density, "Edge density");
  auto* o_r_sca = oracle->add_flag("--sca", r_sca, "Also train the SCA model and compare");
  auto* o_r_out = oracle->add_option("--out", r_out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*collect) {
      json cfg = section(config_path, "collect");
      override_if(o_c_layout, cfg, "layout", c_layout);
      override_if(o_c_schema, cfg, "schema", c_schema);
      override_if(o_c_policy, cfg, "policy", c_policy);
      override_if(o_c_eps, cfg, "epsilon", c_eps);
      override_if(o_c_episodes, cfg, "episodes", c_episodes);
      override_if(o_c_horizon, cfg, "horizon", c_horizon);
      if (o_c_seed->count() > 0) cfg["seed"] = c_seed.back();
      override_if(o_c_seats, cfg, "seats", c_seats);
      override_if(o_c_out, cfg, "out", c_out);
      return run_collect(cfg);
    }
    if (*train) {
      json cfg = section(config_path, "train");
      override_if(o_t_buffer, cfg, "buffer", t_buffer);
      override_if(o_t_layout, cfg, "layout", t_layout);
      override_if(o_t_schema, cfg, "schema", t_schema);
      override_if(o_t_iters, cfg, "iterations", t_iters);
      override_if(o_t_batch, cfg, "batch_size", t_batch);
      override_if(o_t_lr, cfg, "lr", t_lr);
      override_if(o_t_lambda, cfg, "lambda_reg", t_lambda);
      override_if(o_t_prior, cfg, "edge_prior", t_prior);
      override_if(o_t_precision, cfg, "precision", t_precision);
      if (o_t_seed->count() > 0) cfg["seed"] = t_seed.back();
      override_if(o_t_out, cfg, "out", t_out);
      override_if(o_t_quiet, cfg, "quiet", t_quiet);
      return run_train(cfg);
    }
    if (*matrix) {
      json cfg = section(config_path, "matrix");
      override_if(o_m_ckpt, cfg, "checkpoint", m_ckpt);
      override_if(o_m_layout, cfg, "layout", m_layout);
      override_if(o_m_schema, cfg, "schema", m_schema);
      override_if(o_m_out, cfg, "out", m_out);
      override_if(o_m_heatmap, cfg, "heatmap", m_heatmap);
      override_if(o_m_threshold, cfg, "threshold", m_threshold);
      return run_matrix(cfg);
    }
    if (*eval) {
      json cfg = section(config_path, "eval");
      override_if(o_e_seed, cfg, "seeds", e_seeds);
      override_if(o_e_gamma, cfg, "gamma", e_gamma);
      override_if(o_e_out, cfg, "output_dir", e_out);
      override_if(o_e_workers, cfg, "workers", e_workers);
      override_if(o_e_matrix, cfg, "matrix", e_matrix);
      override_if(o_e_horizon, cfg, "horizon", e_horizon);
      return run_eval(cfg);
    }
    if (*oracle) {
      json cfg = section(config_path, "oracle");
      override_if(o_r_seed, cfg, "seeds", r_seeds);
      override_if(o_r_samples, cfg, "samples", r_samples);
      override_if(o_r_density, cfg, "density", r_density);
      override_if(o_r_sca, cfg, "sca", r_sca);
      override_if(o_r_out, cfg, "out", r_out);
      return run_oracle(cfg);
    }
  } catch (const cp::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 3;
  } catch (const cp::SchemaMismatch& e) {
    std::cerr << "schema mismatch: " << e.what() << '\n';
    return 4;
  } catch (const cp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
