#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "criteria.hpp"
#include "sortsim/eval.hpp"
#include "sortsim/learn.hpp"
#include "support.hpp"

using namespace sortsim;
using namespace testing;

namespace {

std::vector<ShiftLog> small_corpus(int n, std::uint64_t seed, int episode = 30) {
  SimConfig c = SimConfig::defaults(2);
  c.episode_length = episode;
  CorpusParams p;
  p.n_shifts = n;
  p.seed = seed;
  p.scenario.n_workers = 14;
  return generate_corpus(c, p);
}

SimConfig small_config(int episode = 30) {
  SimConfig c = SimConfig::defaults(2);
  c.episode_length = episode;
  return c;
}

}  // namespace

TEST_SUITE("learn") {

TEST_CASE("destination probabilities match the loop oracle and sum to one") {
  Rng rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const SimConfig c = random_config(rng);
    const PositionFeatures f = extract_features(random_state(c, rng), c);
    FactorizedPolicy p = FactorizedPolicy::random(rng.next(), uniform(rng, 0.01, 2.0), uniform_int(rng, 1, 8));
    p.temperature = uniform(rng, 0.3, 3.0);
    for (std::size_t i = 0; i < f.workers.size(); ++i) {
      const Eigen::VectorXd probs = destination_probs(p, f, static_cast<int>(i));
      const auto oracle = oracle_probs(p, f, static_cast<int>(i));
      REQUIRE(static_cast<std::size_t>(probs.size()) == oracle.size());
      for (std::size_t j = 0; j < oracle.size(); ++j) CHECK(std::abs(probs(j) - oracle[j]) <= 1e-12);
      CHECK(std::abs(probs.sum() - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("zero parameters give a uniform distribution") {
  const SimConfig c = SimConfig::defaults();
  const SystemState s = make_initial_state(c, {}, 3);
  const PositionFeatures f = extract_features(s, c);
  const FactorizedPolicy p = FactorizedPolicy::zeros();
  double expected = 0.0;
  for (const auto& w : f.workers) expected += -std::log(static_cast<double>(w.destinations.size()));
  CHECK(action_log_prob(p, f, Action{}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("destination sets list stay first, then free cells") {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng);
    const PositionFeatures f = extract_features(s, c);
    for (const auto& w : f.workers) {
      REQUIRE_FALSE(w.destinations.empty());
      CHECK(w.destinations[0] == w.cell);
      for (std::size_t j = 1; j < w.destinations.size(); ++j) {
        const int d = w.destinations[j];
        CHECK(d != w.cell);
        CHECK(s.assigned(d / kStages, d % kStages) < c.slot_capacity[d % kStages]);
      }
    }
  }
}

TEST_CASE("likelihood of a move into a full cell is undefined") {
  SimConfig c = SimConfig::defaults(1);
  SystemState s = empty_state(c, 3);
  s.assignment = {{0, 0}, {0, 2}, {0, 2}};  // stage 3 holds its 2 slots
  const PositionFeatures f = extract_features(s, c);
  CHECK_THROWS_AS(chosen_destinations(f, Action{{{"w1", 0, 2}}}), DataError);
  CHECK_THROWS_AS(chosen_destinations(f, Action{{{"w1", -1, -1}}}), DataError);
  CHECK(chosen_destinations(f, Action{{{"w1", 0, 1}}}).at(0) > 0);
}

TEST_CASE("gradients match central differences") {
  const criteria::Outcome o = criteria::gradient_fidelity(30, 11);
  INFO(o.detail);
  CHECK(o.pass);
}

TEST_CASE("zero advantages give alpha times the cloning gradient") {
  const auto corpus = small_corpus(3, 4);
  const auto samples = build_samples(corpus, small_config(), TrainConfig{});
  REQUIRE(samples.size() > 10);
  std::vector<const Sample*> batch;
  for (const auto& s : samples) batch.push_back(&s);
  const FactorizedPolicy p = FactorizedPolicy::random(5, 0.3);
  const double alpha = 0.37;
  Eigen::VectorXd g_bc, g_ac;
  const double l_bc = weighted_nll(p, batch, std::vector<double>(batch.size(), 1.0), &g_bc);
  const double l_ac = weighted_nll(p, batch, std::vector<double>(batch.size(), 0.0 + alpha), &g_ac);
  CHECK(l_ac == doctest::Approx(alpha * l_bc).epsilon(1e-12));
  CHECK((g_ac - alpha * g_bc).norm() <= 1e-12 * std::max(1.0, g_bc.norm()));
}

TEST_CASE("conflicting movers: the more confident one takes the last slot") {
  PositionFeatures f;
  f.n_lines = 1;
  f.cell.assign(3, FeatureVec::Zero());
  f.free_slots = {0, 0, 1};
  PositionFeatures::Worker a, b;
  a.worker = 0;
  a.cell = 0;
  a.query = FeatureVec::Zero();
  a.query(0) = 3.0;
  a.destinations = {0, 2};
  b.worker = 1;
  b.cell = 1;
  b.query = FeatureVec::Zero();
  b.query(0) = 5.0;
  b.destinations = {1, 2};
  f.workers = {a, b};
  FactorizedPolicy p = FactorizedPolicy::zeros(1);
  p.w_query(0, 0) = 1.0;
  p.w_key(13, 0) = -1.0;  // staying costs the query's first slot
  const PolicyDecision d = decode_action(p, f);
  REQUIRE(d.per_worker_distribution);
  CHECK((*d.per_worker_distribution)[0].p_stay < 0.1);
  CHECK((*d.per_worker_distribution)[1].p_stay < (*d.per_worker_distribution)[0].p_stay);
  REQUIRE(d.action.moves.size() == 1);
  CHECK(d.action.moves[0] == Move{"w2", 0, 2});

  f.free_slots = {0, 0, 2};
  CHECK(decode_action(p, f).action.moves.size() == 2);
}

TEST_CASE("temperature rescales logits without changing the argmax") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const SimConfig c = random_config(rng);
    const PositionFeatures f = extract_features(random_state(c, rng), c);
    FactorizedPolicy p = FactorizedPolicy::random(rng.next(), 1.0);
    FactorizedPolicy q = p;
    q.temperature = 0.25;
    for (std::size_t i = 0; i < f.workers.size(); ++i) {
      Eigen::Index ap, aq;
      destination_probs(p, f, static_cast<int>(i)).maxCoeff(&ap);
      destination_probs(q, f, static_cast<int>(i)).maxCoeff(&aq);
      CHECK(ap == aq);
    }
  }
}

TEST_CASE("stay threshold holds on fuzzed states") {
  const criteria::Outcome o = criteria::stay_threshold(1000, 12);
  INFO(o.detail);
  CHECK(o.pass);
}

TEST_CASE("sampled decodes are valid") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const SimConfig c = random_config(rng);
    const SystemState s = random_state(c, rng);
    const FactorizedPolicy p = FactorizedPolicy::random(rng.next(), 1.0);
    Rng r(rng.next());
    CHECK(validate_action(s, decode_action(p, extract_features(s, c), DecodeMode::kSample, &r).action, c).empty());
  }
  const SimConfig c = SimConfig::defaults();
  CHECK_THROWS_AS(decode_action(FactorizedPolicy::zeros(), extract_features(make_initial_state(c, {}, 1), c),
                                DecodeMode::kSample),
                  UsageError);
}

TEST_CASE("Monte-Carlo returns and advantages") {
  ShiftLog log;
  const SimConfig c = SimConfig::defaults(1);
  for (double r : {1.0, 1.0, 1.0}) {
    TickRecord t;
    t.state = empty_state(c);
    t.reward = r;
    log.ticks.push_back(t);
  }
  TrainConfig tc;
  auto r = compute_returns(log, ValueModel{}, c, tc);
  CHECK(r.returns == std::vector<double>{3.0, 2.0, 1.0});
  CHECK(r.advantages == r.returns);
  log.ticks.pop_back();
  log.ticks[0].reward = 2.0;
  log.ticks[1].reward = 4.0;
  tc.gamma = 0.5;
  r = compute_returns(log, ValueModel{}, c, tc);
  CHECK(r.returns == std::vector<double>{4.0, 4.0});

  ValueModel v;
  v.b = 1.5;
  r = compute_returns(log, v, c, tc);
  CHECK(r.advantages == std::vector<double>{2.5, 2.5});
}

TEST_CASE("joint standardization") {
  std::vector<double> a{1.0, 2.0, 3.0, 4.0};
  standardize(a);
  double mean = 0.0, var = 0.0;
  for (double v : a) mean += v / 4.0;
  for (double v : a) var += (v - mean) * (v - mean) / 4.0;
  CHECK(std::abs(mean) <= 1e-15);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
  std::vector<double> flat{2.0, 2.0};
  standardize(flat);
  CHECK(std::isfinite(flat[0]));
}

TEST_CASE("value fit recovers an exact linear target") {
  Rng rng(8);
  ValueModel truth;
  for (int i = 0; i < kValueFeatureDim; ++i) truth.w(i) = uniform(rng, -2.0, 2.0);
  truth.b = 3.25;
  std::vector<ValueFeatureVec> phi;
  std::vector<double> y;
  for (int n = 0; n < 200; ++n) {
    ValueFeatureVec v;
    for (int i = 0; i < kValueFeatureDim; ++i) v(i) = uniform(rng, -1.0, 1.0);
    phi.push_back(v);
    y.push_back(truth.predict(v));
  }
  const ValueModel fit = fit_value(phi, y, 0.0);
  CHECK((fit.w - truth.w).norm() <= 1e-8);
  CHECK(fit.b == doctest::Approx(truth.b).epsilon(1e-10));
  CHECK_THROWS_AS(fit_value(phi, std::vector<double>(3, 0.0)), UsageError);
}

TEST_CASE("top fraction selects the highest-reward shifts") {
  std::vector<ShiftLog> corpus(8);
  const double totals[8] = {5, 1, 7, 3, 8, 2, 6, 4};
  for (int i = 0; i < 8; ++i) {
    TickRecord t;
    t.reward = totals[i];
    corpus[i].ticks.push_back(t);
  }
  CHECK(top_fraction(corpus, 0.25) == std::vector<std::size_t>{4, 2});
  CHECK(top_fraction(corpus, 1.0).size() == 8);
  CHECK(top_fraction(corpus, 0.1) == std::vector<std::size_t>{4});
}

TEST_CASE("checkpoint round trip") {
  const FactorizedPolicy p = FactorizedPolicy::random(9, 0.5, 5);
  ValueModel v;
  v.w.setLinSpaced(kValueFeatureDim, -1.0, 1.0);
  v.b = 0.125;
  const json j = json::parse(checkpoint_to_json(p, &v, {{"method", "ac"}}).dump());
  const FactorizedPolicy back = policy_from_checkpoint(j);
  CHECK(back.key_dim() == 5);
  CHECK(back.flat() == p.flat());
  CHECK(back.temperature == p.temperature);
  const auto vb = value_from_checkpoint(j);
  REQUIRE(vb);
  CHECK(vb->w == v.w);
  CHECK(vb->b == v.b);
  CHECK_FALSE(value_from_checkpoint(checkpoint_to_json(p, nullptr)));
  CHECK_THROWS_AS(policy_from_checkpoint(json::object()), DataError);
}

TEST_CASE("train config validation and JSON") {
  TrainConfig tc;
  tc.alpha = 0.7;
  tc.adam = false;
  tc.early_stopping = TrainConfig::Stopping::kLoss;
  const TrainConfig back = train_config_from_json(to_json(tc));
  CHECK(to_json(back) == to_json(tc));
  tc.batch_size = 0;
  CHECK_FALSE(validate_train_config(tc).empty());
  CHECK(parse_method("bcft") == TrainMethod::kBCFT);
  CHECK_FALSE(parse_method("ppo"));
}

TEST_CASE("cloning an all-stay demonstrator learns to stay") {
  const SimConfig c = small_config();
  std::vector<ShiftLog> corpus;
  for (int i = 0; i < 12; ++i) {
    ScenarioParams sp;
    sp.n_workers = 14;
    corpus.push_back(run_episode(make_initial_state(c, sp, 100 + i),
                                 [](const SystemState& s) { return no_reallocation(s).action; }, c, 100 + i));
  }
  TrainConfig tc;
  tc.epochs = 15;
  tc.early_stopping = TrainConfig::Stopping::kLoss;
  const TrainResult r = train_bc(corpus, c, tc);
  int empty = 0, total = 0;
  for (const auto& log : corpus)
    for (const auto& t : log.ticks) {
      ++total;
      empty += policy_decide(r.policy, t.state, c).action.empty();
    }
  CHECK(empty >= 0.99 * total);
}

TEST_CASE("cloning raises held-out likelihood and is deterministic") {
  const SimConfig c = small_config();
  const auto train_set = small_corpus(20, 21);
  const auto test_set = build_samples(small_corpus(5, 22), c, TrainConfig{});
  TrainConfig tc;
  tc.epochs = 8;
  tc.early_stopping = TrainConfig::Stopping::kLoss;
  const TrainResult a = train_bc(train_set, c, tc);
  const TrainResult b = train_bc(train_set, c, tc);
  CHECK(a.policy.flat() == b.policy.flat());
  const FactorizedPolicy init = FactorizedPolicy::random(tc.seed, tc.init_scale, tc.key_dim);
  CHECK(mean_log_likelihood(a.policy, test_set) > mean_log_likelihood(init, test_set));
  CHECK_FALSE(a.metrics.empty());
  CHECK(metrics_csv(a.metrics).rfind("epoch,", 0) == 0);
}

TEST_CASE("large alpha makes the actor-critic fit match cloning") {
  const SimConfig c = small_config();
  const auto corpus = small_corpus(12, 31);
  TrainConfig tc;
  tc.epochs = 6;
  tc.patience = 0;
  const FactorizedPolicy bc = train_bc(corpus, c, tc).policy;
  tc.alpha = 1e6;
  const TrainResult ac = train_offline_ac(corpus, c, tc);
  CHECK(ac.value.has_value());
  CHECK((ac.policy.flat() - bc.flat()).norm() <= 1e-3 * bc.flat().norm());
}

TEST_CASE("all three methods run and report metrics") {
  const SimConfig c = small_config();
  const auto corpus = small_corpus(16, 41);
  TrainConfig tc;
  tc.epochs = 3;
  tc.finetune_epochs = 2;
  for (TrainMethod m : {TrainMethod::kBC, TrainMethod::kBCFT, TrainMethod::kAC}) {
    const TrainResult r = train(m, corpus, c, tc);
    CHECK(r.policy.flat().allFinite());
    CHECK(r.n_train_shifts + r.n_heldout_shifts == corpus.size());
    CHECK_FALSE(r.metrics.empty());
  }
  TrainConfig bad = tc;
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(train_bc(corpus, c, bad), UsageError);
}

}  // TEST_SUITE
