#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <set>

#include "flatmin/errors.hpp"
#include "flatmin/shiftbench.hpp"
#include "flatmin/training.hpp"

using namespace flatmin;

namespace {

MultiDomainDataset small_domains(int n_domains = 3, std::uint64_t seed = 1) {
  DomainSpec spec;
  spec.n_domains = n_domains;
  spec.per_domain_n = 60;
  return generate_domains(spec, seed);
}

ProtocolConfig tiny_protocol() {
  ProtocolConfig p;
  p.n_hparam_trials = 2;
  p.seeds_per_trial = 2;
  p.iterations = 40;
  p.search_space.lr_log10 = {-2.0, -1.0};
  p.flatness.budget.n_random = 2;
  p.flatness.budget.n_ascent_steps = 5;
  p.flatness.n_probes = 4;
  p.flatness.power.max_iter = 50;
  p.seed = 3;
  return p;
}

OptimizerConfig method(Method m) {
  OptimizerConfig c;
  c.method = m;
  return c;
}

}  // namespace

TEST(Generate, RotatedDomainsShareTheClassRule) {
  DomainSpec spec;
  spec.num_classes = 2;
  spec.per_domain_n = 400;
  spec.cluster_std = 0.3;
  const auto md = generate_domains(spec, 5);
  ASSERT_EQ(md.domains.size(), 3u);
  for (int d = 0; d < 3; ++d) {
    EXPECT_DOUBLE_EQ(md.domain_params[d].rotation_deg, 30.0 * d);
    const double a = -md.domain_params[d].rotation_deg * std::numbers::pi / 180.0;
    const auto& data = md.domains[d];
    // undoing the rotation recovers the canonical class means (+-2, 0)
    Eigen::Vector2d sums[2] = {Eigen::Vector2d::Zero(), Eigen::Vector2d::Zero()};
    int counts[2] = {0, 0};
    for (std::size_t i = 0; i < data.size(); ++i) {
      const Eigen::Vector2d x(data.inputs(i, 0), data.inputs(i, 1));
      const Eigen::Vector2d back(std::cos(a) * x[0] - std::sin(a) * x[1], std::sin(a) * x[0] + std::cos(a) * x[1]);
      sums[data.labels[i]] += back;
      ++counts[data.labels[i]];
    }
    EXPECT_NEAR(sums[0][0] / counts[0], 2.0, 0.1);
    EXPECT_NEAR(sums[1][0] / counts[1], -2.0, 0.1);
    EXPECT_NEAR(sums[0][1] / counts[0], 0.0, 0.1);
  }
}

TEST(Generate, SameSeedBitwiseIdentical) {
  const auto a = small_domains(3, 9);
  const auto b = small_domains(3, 9);
  for (std::size_t d = 0; d < 3; ++d) {
    EXPECT_EQ(a.domains[d].inputs, b.domains[d].inputs);
    EXPECT_EQ(a.domains[d].labels, b.domains[d].labels);
  }
  EXPECT_NE(a.domains[0].inputs, small_domains(3, 10).domains[0].inputs);
}

TEST(Generate, BadSpecRejected) {
  DomainSpec spec;
  spec.n_domains = 2;
  EXPECT_THROW(generate_domains(spec, 0), ConfigError);
  spec = {};
  spec.transform = DomainTransform::translation;
  EXPECT_THROW(generate_domains(spec, 0), ConfigError);
}

TEST(Generate, IdentityTransformHasNoGeneralizationGap) {
  DomainSpec spec;
  spec.transform = DomainTransform::identity;
  spec.per_domain_n = 300;
  double gap = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto md = generate_domains(spec, seed);
    const auto pool = pool_domains(md, {0, 1});
    auto data = std::make_shared<const Dataset>(pool.data);
    const MlpObjective obj({2, 8, 3}, data);
    OptimizerConfig c;
    c.method = Method::adam;
    c.eta0 = 0.05;
    TrainingOptions o;
    o.iterations = 300;
    o.seed = seed;
    const auto r = run_training(obj, obj.init_params(seed), c, o);
    gap += obj.accuracy(r.theta, *data) - obj.accuracy(r.theta, md.domains[2]);
  }
  EXPECT_LT(std::abs(gap / 5), 0.03);
}

TEST(Splits, LeaveOneOut) {
  EXPECT_EQ(leave_one_out_splits(small_domains(3)).size(), 3u);
  const auto four = leave_one_out_splits(small_domains(4));
  ASSERT_EQ(four.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(four[i].test_domain, i);
    EXPECT_EQ(four[i].train_domains.size(), 3u);
    EXPECT_EQ(std::count(four[i].train_domains.begin(), four[i].train_domains.end(), i), 0);
  }
}

TEST(Splits, StratifiedAndDisjoint) {
  const auto md = small_domains(3);
  const auto pool = pool_domains(md, {0, 2});
  const auto s = stratified_split(pool.data, 0.2, 4);
  std::set<std::size_t> train(s.train.begin(), s.train.end());
  for (auto i : s.val) EXPECT_EQ(train.count(i), 0u);
  EXPECT_EQ(s.train.size() + s.val.size(), pool.data.size());
  // 20 samples per (domain, class) group, 4 held out from each
  EXPECT_EQ(s.val.size(), 6u * 4u);
  for (auto i : s.val) EXPECT_NE(pool.refs[i].domain, 1);
  EXPECT_EQ(s.val, stratified_split(pool.data, 0.2, 4).val);
}

TEST(Search, TrialsStayInRangeAndShareDraws) {
  SearchSpace space;
  auto r1 = make_rng(5, {1});
  auto r2 = make_rng(5, {1});
  for (int i = 0; i < 200; ++i) {
    const auto fad = sample_trial(method(Method::fad), space, r1);
    const auto sgd = sample_trial(method(Method::sgd), space, r2);
    EXPECT_GE(fad.batch_size, 8u);
    EXPECT_LE(fad.batch_size, 45u);
    EXPECT_GE(fad.optimizer.eta0, 1e-5);
    EXPECT_LE(fad.optimizer.eta0, std::pow(10.0, -3.5));
    EXPECT_GE(fad.optimizer.weight_decay, 1e-6);
    EXPECT_LE(fad.optimizer.weight_decay, 1e-3);
    EXPECT_NE(std::find(space.fad_rho.begin(), space.fad_rho.end(), fad.optimizer.rho0), space.fad_rho.end());
    EXPECT_NE(std::find(space.fad_alpha.begin(), space.fad_alpha.end(), fad.optimizer.alpha), space.fad_alpha.end());
    EXPECT_NE(std::find(space.fad_beta.begin(), space.fad_beta.end(), fad.optimizer.beta), space.fad_beta.end());
    EXPECT_EQ(fad.batch_size, sgd.batch_size);
    EXPECT_EQ(fad.optimizer.eta0, sgd.optimizer.eta0);
  }
}

TEST(Search, MomentumOnlyForMomentumSgd) {
  SearchSpace space;
  auto rng = make_rng(1);
  const auto t = sample_trial(method(Method::momentum_sgd), space, rng);
  EXPECT_GE(t.optimizer.momentum, 0.1);
  EXPECT_LE(t.optimizer.momentum, 0.999);
  auto rng2 = make_rng(1);
  EXPECT_EQ(sample_trial(method(Method::adam), space, rng2).optimizer.momentum, OptimizerConfig{}.momentum);
}

TEST(Selection, LowestIndexWinsTies) {
  EXPECT_EQ(select_trial({0.5, 0.9, 0.9, std::nullopt}), 1u);
  EXPECT_EQ(select_trial({std::nullopt, 0.1}), 1u);
  EXPECT_THROW(select_trial({std::nullopt, std::nullopt}), ProtocolError);
}

TEST(Protocol, SingleTrialSingleSeed) {
  auto p = tiny_protocol();
  p.n_hparam_trials = 1;
  p.seeds_per_trial = 1;
  const auto r = run_protocol(small_domains(), {method(Method::sgd)}, p, {});
  EXPECT_EQ(r.methods, std::vector<std::string>{"sgd"});
  ASSERT_EQ(r.cells.size(), 3u);
  for (const auto& c : r.cells) {
    EXPECT_EQ(c.trials.size(), 1u);
    EXPECT_EQ(c.test_accuracy.size(), 1u);
    EXPECT_EQ(c.std_accuracy, 0.0);
  }
  const auto csv = bench_table_csv(r);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "test_domain,sgd,sgd_lambda_max");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);
}

TEST(Protocol, AuditAndDeterminism) {
  const auto md = small_domains();
  const auto p = tiny_protocol();
  const std::vector<OptimizerConfig> methods{method(Method::adam), method(Method::fad)};
  const auto a = run_protocol(md, methods, p, {});
  const auto b = run_protocol(md, methods, p, {});
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(bench_table_csv(a), bench_table_csv(b));
  EXPECT_EQ(a.audit.disjointness_checks, 2u * 3u * 2u);
  EXPECT_EQ(a.audit.selection_calls, 6u);
  EXPECT_EQ(a.audit.test_reads_before_selection, 0u);
  EXPECT_EQ(a.audit.test_reads, 6u * 2u);
  for (const auto& c : a.cells) {
    for (double acc : c.test_accuracy) {
      EXPECT_GE(acc, 0.0);
      EXPECT_LE(acc, 1.0);
    }
    EXPECT_EQ(c.flatness.size(), 2u);
  }
  EXPECT_EQ(a.cell(1, 2).method, Method::fad);
}

TEST(Protocol, AllTrialsDivergingIsProtocolError) {
  auto p = tiny_protocol();
  p.search_space.lr_log10 = {300.0, 301.0};
  EXPECT_THROW(run_protocol(small_domains(), {method(Method::sgd)}, p, {}), ProtocolError);
}
