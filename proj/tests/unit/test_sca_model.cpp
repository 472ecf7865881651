#include <gtest/gtest.h>

#include <cmath>
#include <span>

#include "causalplan/sca_model.hpp"

using namespace causalplan;

namespace {

using ModelD = ScaModel<double>;

ModelD random_model(std::size_t s, std::size_t a, std::vector<std::size_t> hidden, std::uint64_t seed) {
  ModelD m(s, a, std::move(hidden));
  m.initialize(seed, 0.0);
  Rng rng(seed ^ 0x55);
  for (Eigen::Index c = 0; c < m.gate_logits().cols(); ++c)
    for (Eigen::Index r = 0; r < m.gate_logits().rows(); ++r) m.gate_logits()(r, c) = rng.uniform(-2.0, 2.0);
  m.clamp_self_edges();
  return m;
}

void random_batch(std::size_t p, std::size_t a, std::size_t n, Rng& rng, Eigen::MatrixXd& parents,
                  Eigen::MatrixXd& children) {
  parents.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
  children.resize(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(n));
  for (Eigen::Index k = 0; k < parents.cols(); ++k) {
    for (Eigen::Index r = 0; r < parents.rows(); ++r) parents(r, k) = rng.bernoulli(0.5);
    for (Eigen::Index r = 0; r < children.rows(); ++r) children(r, k) = rng.bernoulli(0.4);
  }
}

// Bernoulli negative log-likelihood written directly from per-sample probabilities.
double naive_nll(const ModelD& m, const Eigen::MatrixXd& parents, const Eigen::MatrixXd& children) {
  double total = 0;
  for (Eigen::Index k = 0; k < parents.cols(); ++k) {
    const Eigen::VectorXd p = m.forward_batch(parents.col(k));
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double q = std::clamp(p(i), 1e-7, 1 - 1e-7);
      total -= children(i, k) > 0.5 ? std::log(q) : std::log(1 - q);
    }
  }
  return total / static_cast<double>(parents.cols());
}

double norm_relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

// Zeroes the output layer so every net predicts sigmoid(bias).
void constant_output(ModelD& m, double bias) {
  const std::size_t last = m.layers().size() - 1;
  for (std::size_t i = 0; i < m.child_dim(); ++i) {
    m.weight(i, last).setZero();
    m.bias(i, last).setConstant(bias);
  }
}

}  // namespace

TEST(ScaModel, FullyMaskedOutputIsConstant) {
  ModelD m = random_model(4, 3, {8, 8}, 1);
  m.gate_logits().setConstant(-1000.0);
  Rng rng(2);
  Eigen::MatrixXd parents, children;
  random_batch(7, 3, 50, rng, parents, children);
  const Eigen::MatrixXd out = m.forward_batch(parents);
  for (Eigen::Index k = 1; k < out.cols(); ++k) ASSERT_EQ(out.col(k), out.col(0));
}

TEST(ScaModel, SingleOpenGateOnlySeesItsFeature) {
  ModelD m = random_model(4, 3, {8, 8}, 3);
  m.gate_logits().setConstant(-1000.0);
  m.gate_logits()(2, 1) = 1000.0;
  ASSERT_EQ(m.gates()(2, 1), 1.0);
  Rng rng(4);
  Eigen::MatrixXd parents, children;
  random_batch(7, 3, 200, rng, parents, children);
  const Eigen::MatrixXd base = m.forward_batch(parents);
  Eigen::MatrixXd perturbed = parents;
  for (Eigen::Index r = 0; r < perturbed.rows(); ++r)
    if (r != 2) perturbed.row(r) = (1.0 - perturbed.row(r).array()).matrix();
  const Eigen::MatrixXd moved = m.forward_batch(perturbed);
  EXPECT_LE((moved.row(1) - base.row(1)).cwiseAbs().maxCoeff(), 1e-12);

  Eigen::MatrixXd flip = parents;
  flip.row(2) = (1.0 - flip.row(2).array()).matrix();
  EXPECT_GT((m.forward_batch(flip).row(1) - base.row(1)).cwiseAbs().maxCoeff(), 0.0);
}

TEST(ScaModel, MaskingSoundnessForEveryClosedGate) {
  ModelD m = random_model(5, 3, {6, 6}, 5);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const auto j = static_cast<Eigen::Index>(rng.uniform_index(m.parent_dim()));
    const auto i = static_cast<Eigen::Index>(rng.uniform_index(m.child_dim()));
    ModelD closed = m;
    closed.gate_logits()(j, i) = -1e4;
    Eigen::MatrixXd parents, children;
    random_batch(8, 3, 30, rng, parents, children);
    Eigen::MatrixXd flipped = parents;
    flipped.row(j) = (1.0 - flipped.row(j).array()).matrix();
    ASSERT_EQ(closed.forward_batch(parents).row(i), closed.forward_batch(flipped).row(i));
  }
}

TEST(ScaModel, OutputsAreProbabilities) {
  const ModelD m = random_model(14, 7, {16, 16}, 7);
  Rng rng(8);
  Eigen::MatrixXd parents, children;
  random_batch(21, 7, 100, rng, parents, children);
  const Eigen::MatrixXd out = m.forward_batch(parents);
  EXPECT_GT(out.minCoeff(), 0.0);
  EXPECT_LT(out.maxCoeff(), 1.0);
  EXPECT_THROW(m.forward_batch(Eigen::MatrixXd::Zero(20, 1)), SchemaMismatch);
  EXPECT_THROW(m.forward(StateVector{Bits(13)}, ActionVector::none(7)), SchemaMismatch);
}

TEST(ScaModel, SelfEdgesAreAlwaysClosed) {
  ModelD m(3, 4, {4});
  m.initialize(0, 3.0);
  const auto g = m.gates();
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(m.is_self_edge(3 + i, i));
    EXPECT_EQ(g(static_cast<Eigen::Index>(3 + i), static_cast<Eigen::Index>(i)), 0.0);
  }
  EXPECT_NEAR(g(0, 0), sigmoid(3.0), 1e-15);
}

TEST(CausalLoss, HalfProbabilityGivesLn2) {
  ModelD m(1, 1, {4});
  m.initialize(0, 0.0);
  constant_output(m, 0.0);
  for (double bit : {0.0, 1.0}) {
    Eigen::MatrixXd parents(2, 1), children(1, 1);
    parents << 1.0, 0.0;
    children << bit;
    EXPECT_NEAR(causal_loss(m, parents, children), std::log(2.0), 1e-10);
  }
}

TEST(CausalLoss, PerfectPredictionIsZero) {
  ModelD m(2, 2, {4});
  m.initialize(0, 0.0);
  const std::size_t last = m.layers().size() - 1;
  m.weight(0, last).setZero();
  m.bias(0, last).setConstant(60.0);
  m.weight(1, last).setZero();
  m.bias(1, last).setConstant(-60.0);
  Eigen::MatrixXd parents = Eigen::MatrixXd::Ones(4, 5), children(2, 5);
  children.row(0).setOnes();
  children.row(1).setZero();
  std::size_t clipped = 0;
  EXPECT_NEAR(causal_loss(m, parents, children, &clipped), 0.0, 1e-6);
  EXPECT_EQ(clipped, 10u);
}

TEST(CausalLoss, MatchesNaiveNll) {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    const ModelD m = random_model(5, 3, {8, 12, 8}, 100 + trial);
    Eigen::MatrixXd parents, children;
    random_batch(8, 3, 64, rng, parents, children);
    EXPECT_NEAR(causal_loss(m, parents, children), naive_nll(m, parents, children), 1e-10);
  }
}

TEST(CausalLoss, CompactionPreservesLoss) {
  const ModelD m = random_model(2, 2, {5}, 9);
  Eigen::MatrixXd parents(4, 6), children(2, 6);
  parents << 1, 1, 0, 1, 0, 1,
             0, 0, 1, 0, 1, 0,
             1, 1, 1, 1, 1, 1,
             0, 0, 0, 0, 0, 0;
  children << 1, 0, 1, 1, 0, 0,
              0, 1, 1, 0, 0, 1;
  const auto batch = compact_batch<double>(parents, children);
  EXPECT_EQ(batch.inputs.cols(), 2);
  EXPECT_EQ(batch.counts.sum(), 6.0);
  EXPECT_NEAR(causal_loss(m, batch), naive_nll(m, parents, children), 1e-12);
}

TEST(RegLoss, Examples) {
  EXPECT_EQ(reg_loss(Eigen::MatrixXd::Zero(3, 2), 1.0, 0.1), 0.0);
  EXPECT_NEAR(reg_loss(Eigen::MatrixXd::Ones(1, 1), 1.0, 0.5), std::log(2.0), 1e-12);
  Rng rng(1);
  Eigen::MatrixXd g(5, 4);
  for (Eigen::Index k = 0; k < g.size(); ++k) g(k) = rng.uniform();
  const double one = reg_loss(g, 3e-3, 0.1), two = reg_loss(g, 6e-3, 0.1);
  EXPECT_NEAR(two / one, 2.0, 1e-12);
  EXPECT_GT(one, 0.0);
  EXPECT_THROW(reg_loss(g, 1.0, 0.0), ConfigError);
  EXPECT_THROW(reg_loss(g, 1.0, 1.0), ConfigError);
  EXPECT_THROW(reg_loss(g, -1.0, 0.5), ConfigError);
}

TEST(Gradients, MatchFiniteDifferencesWithSoftMask) {
  Rng rng(77);
  const double h = 1e-6;  // small enough that no ReLU crosses its kink
  for (int trial = 0; trial < 20; ++trial) {
    ModelD m = random_model(3 + rng.uniform_index(3), 2 + rng.uniform_index(2), {6, 5}, 500 + trial);
    Eigen::MatrixXd parents, children;
    random_batch(m.parent_dim(), m.child_dim(), 24, rng, parents, children);
    const auto batch = compact_batch<double>(parents, children);
    const double lambda = 0.05, prior = 0.1;

    const auto g = causal_gradients(m, batch, soft_mask(m), true, true);
    std::vector<double> numeric(m.params().size());
    for (std::size_t k = 0; k < m.params().size(); ++k) {
      ModelD plus = m, minus = m;
      plus.params()[k] += h;
      minus.params()[k] -= h;
      numeric[k] = (causal_loss(plus, batch) - causal_loss(minus, batch)) / (2 * h);
    }
    EXPECT_LE(norm_relative_error(g.params, numeric), 1e-4) << "trial " << trial;

    const Eigen::MatrixXd analytic_gates = g.gate_logits + reg_gradient(m, lambda, prior);
    std::vector<double> an, nu;
    for (Eigen::Index c = 0; c < m.gate_logits().cols(); ++c)
      for (Eigen::Index r = 0; r < m.gate_logits().rows(); ++r) {
        if (m.is_self_edge(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) continue;
        ModelD plus = m, minus = m;
        plus.gate_logits()(r, c) += h;
        minus.gate_logits()(r, c) -= h;
        const double fp = causal_loss(plus, batch) + reg_loss(plus.gates(), lambda, prior);
        const double fm = causal_loss(minus, batch) + reg_loss(minus.gates(), lambda, prior);
        nu.push_back((fp - fm) / (2 * h));
        an.push_back(analytic_gates(r, c));
      }
    EXPECT_LE(norm_relative_error(an, nu), 1e-4) << "trial " << trial;
  }
}

TEST(Gradients, MatchFiniteDifferencesWithRelaxedMask) {
  Rng rng(78);
  const double h = 1e-6, tau = 0.5;
  for (int trial = 0; trial < 10; ++trial) {
    ModelD m = random_model(4, 2, {6, 5}, 900 + trial);
    Eigen::MatrixXd parents, children;
    random_batch(m.parent_dim(), m.child_dim(), 24, rng, parents, children);
    const auto batch = compact_batch<double>(parents, children);
    const std::uint64_t noise_seed = 4242 + static_cast<std::uint64_t>(trial);
    auto loss_with_noise = [&](const ModelD& model) {
      Rng noise(noise_seed);
      return causal_gradients(model, batch, relaxed_mask(model, tau, noise), false, false).loss;
    };
    Rng noise(noise_seed);
    const auto g = causal_gradients(m, batch, relaxed_mask(m, tau, noise), true, true);
    std::vector<double> an, nu;
    for (Eigen::Index c = 0; c < m.gate_logits().cols(); ++c)
      for (Eigen::Index r = 0; r < m.gate_logits().rows(); ++r) {
        if (m.is_self_edge(static_cast<std::size_t>(r), static_cast<std::size_t>(c))) continue;
        ModelD plus = m, minus = m;
        plus.gate_logits()(r, c) += h;
        minus.gate_logits()(r, c) -= h;
        nu.push_back((loss_with_noise(plus) - loss_with_noise(minus)) / (2 * h));
        an.push_back(g.gate_logits(r, c));
      }
    EXPECT_LE(norm_relative_error(an, nu), 1e-4) << "trial " << trial;
  }
}

TEST(Gradients, SelfEdgeGradientIsZero) {
  const ModelD m = random_model(2, 3, {4}, 12);
  Rng rng(1);
  Eigen::MatrixXd parents, children;
  random_batch(5, 3, 16, rng, parents, children);
  const auto g = causal_gradients(m, compact_batch<double>(parents, children), soft_mask(m), false, true);
  const auto r = reg_gradient(m, 1.0, 0.1);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(g.gate_logits(static_cast<Eigen::Index>(2 + i), static_cast<Eigen::Index>(i)), 0.0);
    EXPECT_EQ(r(static_cast<Eigen::Index>(2 + i), static_cast<Eigen::Index>(i)), 0.0);
  }
}

namespace {

// Three state parents, two children; prev-action parents are independent noise.
// child0 = x0 OR x1, child1 = x2, each flipped with probability 0.05.
CausalDataset small_scm(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  CausalDataset d;
  d.state_dim = 3;
  d.action_dim = 2;
  d.parents.resize(5, static_cast<Eigen::Index>(n));
  d.children.resize(2, static_cast<Eigen::Index>(n));
  for (Eigen::Index k = 0; k < d.parents.cols(); ++k) {
    for (Eigen::Index r = 0; r < 5; ++r) d.parents(r, k) = rng.bernoulli(0.5);
    const bool c0 = d.parents(0, k) > 0.5 || d.parents(1, k) > 0.5;
    const bool c1 = d.parents(2, k) > 0.5;
    d.children(0, k) = c0 != rng.bernoulli(0.05);
    d.children(1, k) = c1 != rng.bernoulli(0.05);
  }
  return d;
}

TrainConfig small_config() {
  TrainConfig c;
  c.hidden = {16, 16};
  c.batch_size = 64;
  c.iterations = 3000;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Training, RecoversSmallScm) {
  const CausalDataset data = small_scm(5000, 1);
  TrainConfig c = small_config();
  c.iterations = 20000;
  const auto result = train<float>(data, c);
  const Eigen::MatrixXd g = result.model.structural_gates().values;
  const bool truth[5][2] = {{true, false}, {true, false}, {false, true}, {false, false}, {false, false}};
  for (Eigen::Index j = 0; j < 5; ++j)
    for (Eigen::Index i = 0; i < 2; ++i) {
      if (truth[j][i]) EXPECT_GT(g(j, i), 0.5) << j << "->" << i;
      else EXPECT_LT(g(j, i), 0.5) << j << "->" << i;
    }
  ASSERT_FALSE(result.trace.empty());
  EXPECT_LT(result.trace.back().causal, result.trace.front().causal);
}

TEST(Training, ZeroIterationsReturnsInitialModel) {
  const CausalDataset data = small_scm(100, 2);
  TrainConfig c = small_config();
  c.iterations = 0;
  const auto result = train<double>(data, c);
  const ModelD fresh = make_model<double>(3, 2, c);
  EXPECT_EQ(result.model.params(), fresh.params());
  EXPECT_EQ(result.model.gate_logits(), fresh.gate_logits());
  EXPECT_TRUE(result.trace.empty());
}

TEST(Training, IsDeterministic) {
  const CausalDataset data = small_scm(500, 4);
  TrainConfig c = small_config();
  c.iterations = 200;
  for (const char* mask : {"relaxed", "soft"}) {
    c.mask = mask;
    const auto a = train<float>(data, c);
    const auto b = train<float>(data, c);
    EXPECT_EQ(a.model.params(), b.model.params());
    EXPECT_EQ(a.model.gate_logits(), b.model.gate_logits());
    EXPECT_EQ(a.trace, b.trace);
  }
}

TEST(Training, DoesNotDependOnHeapLayout) {
  const CausalDataset data = small_scm(500, 4);
  TrainConfig c = small_config();
  c.hidden = {16, 64, 64, 16};
  c.iterations = 50;
  const auto reference = train<float>(data, c);
  std::vector<std::vector<char>> padding;
  for (std::size_t shift : {8u, 16u, 24u, 40u}) {
    padding.emplace_back(shift);  // moves the next heap allocations
    const auto again = train<float>(data, c);
    EXPECT_EQ(again.model.params(), reference.model.params()) << "after a " << shift << "-byte allocation";
    EXPECT_EQ(again.model.gate_logits(), reference.model.gate_logits());
  }
}

TEST(Training, LargePenaltyShrinksGatesMonotonically) {
  const CausalDataset data = small_scm(2000, 5);
  TrainConfig c = small_config();
  c.iterations = 2000;
  c.gate_init_logit = 0.0;
  double previous = 2.0;
  for (double lambda : {0.0, 0.01, 0.1, 1.0}) {
    c.lambda_reg = lambda;
    const Eigen::MatrixXd g = train<float>(data, c).model.structural_gates().values;
    const double mean = g.sum() / static_cast<double>(g.size());
    EXPECT_LE(mean, previous) << "lambda " << lambda;
    previous = mean;
    if (lambda == 1.0) EXPECT_LT(g.maxCoeff(), 0.5);
  }
}

TEST(Training, SelfEdgesStayClosedDuringTraining) {
  const CausalDataset data = small_scm(500, 6);
  TrainConfig c = small_config();
  c.iterations = 300;
  c.gate_init_logit = 4.0;
  const auto result = train<double>(data, c);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(result.model.gate_logits()(static_cast<Eigen::Index>(3 + i), static_cast<Eigen::Index>(i)), 0.0);
    EXPECT_EQ(result.model.gates()(static_cast<Eigen::Index>(3 + i), static_cast<Eigen::Index>(i)), 0.0);
  }
}

TEST(Training, NonFiniteLossAbortsWithIteration) {
  CausalDataset data = small_scm(50, 7);
  data.parents(0, 0) = std::numeric_limits<double>::quiet_NaN();
  data.parents.row(0).setConstant(std::numeric_limits<double>::quiet_NaN());
  TrainConfig c = small_config();
  c.iterations = 10;
  try {
    train<double>(data, c);
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    EXPECT_EQ(e.iteration(), 0u);
  }
}

TEST(Training, ConfigValidation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.edge_prior = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.precision = "float16";
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.lambda_reg = 0.2;
  c.hidden = {3, 4};
  EXPECT_EQ(TrainConfig::from_json(c.to_json()).to_json(), c.to_json());
}

TEST(Checkpoint, ExactRoundTrip) {
  const CausalDataset data = small_scm(300, 8);
  TrainConfig c = small_config();
  c.iterations = 50;
  c.trace_interval = 10;
  const auto trained = train<float>(data, c);
  const std::string path = ::testing::TempDir() + "causalplan_ck.json";
  save_checkpoint(path, trained.model, trained.config, trained.trace, trained.clipped);
  const auto back = load_checkpoint<float>(path);
  EXPECT_EQ(back.model.params(), trained.model.params());
  EXPECT_EQ(back.model.gate_logits(), trained.model.gate_logits());
  EXPECT_EQ(back.trace, trained.trace);
  EXPECT_EQ(back.config.to_json(), trained.config.to_json());

  ModelD dm = random_model(3, 2, {5, 7}, 10);
  dm.set_schema_fingerprint("abc");
  save_checkpoint(path, dm, TrainConfig{}, {});
  const auto dback = load_checkpoint<double>(path);
  EXPECT_EQ(dback.model.params(), dm.params());
  EXPECT_EQ(dback.model.gate_logits(), dm.gate_logits());
  EXPECT_EQ(dback.model.schema_fingerprint(), "abc");
  EXPECT_EQ(load_checkpoint_gates(path).values, dm.structural_gates().values);

  auto j = checkpoint_to_json(dm, TrainConfig{}, {});
  j["format"] = "other";
  EXPECT_THROW(checkpoint_from_json<double>(j), ConfigError);
}
