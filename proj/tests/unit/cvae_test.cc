#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.h"
#include "gradcheck.h"
#include "impinj/cvae.h"
#include "impinj/synthetic.h"

namespace impinj {
namespace {

using nn::Tape;
using nn::Var;

CvaeConfig tiny_config() {
  CvaeConfig c;
  c.latent_dim = 3;
  c.class_embed_dim = 2;
  c.enc_hidden1 = 8;
  c.enc_hidden2 = 6;
  c.dec_hidden1 = 6;
  c.dec_hidden2 = 6;
  c.dec_hidden3 = 8;
  return c;
}

ProxyModel tiny_proxy(Eigen::Index n, int classes, std::uint64_t seed) {
  DistillConfig d;
  d.hidden1 = 8;
  d.hidden2 = 6;
  d.hidden3 = 4;
  Rng rng(seed);
  ProxyModel p(n, classes, d, rng);
  p.freeze();
  return p;
}

TEST(KlLoss, FrozenValuesAndScalarOracle) {
  struct Case {
    oracle::Vec mu;
    oracle::Vec lv;
    double expect;
  };
  for (const Case& c : {Case{{1}, {0}, 0.5}, Case{{0.5, -1}, {0.2, -0.3}, 0.656110489420944},
                        Case{{2, 0, -0.5}, {1, -2, 0}, 3.05180855584783}}) {
    Tape t(false);
    const double got = loss_kl(t.constant(testing::to_matrix({c.mu})), t.constant(testing::to_matrix({c.lv}))).scalar();
    EXPECT_NEAR(got, c.expect, 1e-13);
    EXPECT_NEAR(got, oracle::kl({c.mu}, {c.lv}), 1e-13);
  }
  Rng rng(1);
  const Matrix mu = testing::random_matrix(4, 3, rng);
  const Matrix lv = testing::random_matrix(4, 3, rng);
  Tape t(false);
  EXPECT_NEAR(loss_kl(t.constant(mu), t.constant(lv)).scalar(), oracle::kl(testing::to_rows(mu), testing::to_rows(lv)),
              1e-13);
  EXPECT_NEAR(loss_kl(t.constant(Matrix::Zero(2, 3)), t.constant(Matrix::Zero(2, 3))).scalar(), 0.0, 1e-15);
}

TEST(ReconstructionLoss, FrozenValuesAndScalarOracle) {
  struct Case {
    oracle::Rows xt;
    oracle::Rows x;
    oracle::Rows ref;
    double expect;
  };
  const std::vector<Case> cases{
      {{{1, 0.5}}, {{1, 0}}, {{1, 1}}, 0.693147180559945},
      {{{1, 0.9, 0.4}}, {{1, 0, 0}}, {{0, 1, 0}}, 0.308093069711909},
      {{{0.2, 0.7, 1, 0.3}}, {{0, 0, 1, 0}}, {{1, 0, 1, 0}}, 1.05669522023292},
  };
  for (const auto& c : cases) {
    Tape t(false);
    const double got =
        loss_reconstruction(t.constant(testing::to_matrix(c.xt)), testing::to_matrix(c.x), testing::to_matrix(c.ref))
            .scalar();
    EXPECT_NEAR(got, c.expect, 1e-13);
    EXPECT_NEAR(got, oracle::reconstruction(c.xt, c.x, c.ref), 1e-13);
  }
}

TEST(ReconstructionLoss, FullRowsAddZeroAndAreFlagged) {
  Tape t(false);
  bool all_present = false;
  const Matrix x = (Matrix(2, 2) << 1, 1, 0, 1).finished();
  const Matrix xt = (Matrix(2, 2) << 1, 1, 0.25, 1).finished();
  const Matrix ref = (Matrix(2, 2) << 0, 0, 1, 0).finished();
  const double got = loss_reconstruction(t.constant(xt), x, ref, &all_present).scalar();
  EXPECT_TRUE(all_present);
  EXPECT_NEAR(got, -std::log(0.25) / 2, 1e-13);
}

TEST(SparsityLoss, MatchesScalarOracle) {
  Rng rng(2);
  const Matrix x = testing::random_binary(3, 5, 0.4, rng);
  const Matrix xt = x + (1.0 - x.array()).matrix().cwiseProduct(testing::random_matrix(3, 5, rng, 0, 1));
  Tape t(false);
  EXPECT_NEAR(loss_sparsity(t.constant(xt), x).scalar(), oracle::sparsity(testing::to_rows(xt), testing::to_rows(x)),
              1e-13);
}

TEST(CvaeLosses, ContinuousTermsMatchFiniteDifferences) {
  const CvaeConfig cfg = tiny_config();
  Rng rng(3);
  CvaeModel model(7, 5, cfg, rng);
  const Matrix x = testing::random_binary(5, 7, 0.4, rng);
  const Matrix ref = testing::random_binary(5, 7, 0.5, rng);
  const Matrix eps = testing::random_matrix(5, 3, rng);
  const std::vector<ClassId> targets{1, 3, 5, 2, 3};
  const double err = testing::check_param_gradients(
      [&](Tape& t) {
        Var xv = t.constant(x);
        Encoded enc = encode(t, model, xv, targets);
        Var z = reparameterize(enc.mu, enc.logvar, &eps);
        Decoded dec = decode_additive(t, model, xv, z, targets);
        Var total = nn::scale(loss_reconstruction(dec.relaxed, x, ref), 1.3);
        total = nn::add(total, nn::scale(loss_kl(enc.mu, enc.logvar), 0.7));
        return nn::add(total, nn::scale(loss_sparsity(dec.relaxed, x), 0.2));
      },
      model.parameters());
  EXPECT_LT(err, 1e-4);
}

TEST(CvaeLosses, KlAndReconstructionLeafGradients) {
  Rng rng(4);
  const Matrix mu = testing::random_matrix(3, 4, rng);
  const Matrix lv = testing::random_matrix(3, 4, rng);
  EXPECT_LT(testing::check_leaf_gradients([](Tape&, const std::vector<Var>& v) { return loss_kl(v[0], v[1]); }, {mu, lv}),
            1e-4);
  const Matrix x = testing::random_binary(3, 6, 0.3, rng);
  const Matrix ref = testing::random_binary(3, 6, 0.5, rng);
  const Matrix xt = testing::random_matrix(3, 6, rng, 0.1, 0.9);
  EXPECT_LT(testing::check_leaf_gradients(
                [&](Tape&, const std::vector<Var>& v) { return loss_reconstruction(v[0], x, ref); }, {xt}),
            1e-4);
}

TEST(ClassificationLoss, StraightThroughPassesProxyGradient) {
  Rng rng(5);
  ProxyModel proxy = tiny_proxy(6, 3, 5);
  const Matrix xt = testing::random_matrix(4, 6, rng, 0.05, 0.95);
  const std::vector<int> y{0, 2, 1, 2};
  Tape t;
  Var leaf = t.leaf(xt);
  t.backward(loss_classification(leaf, y, proxy));
  const Matrix through = t.grad(leaf);
  // Gradient of the proxy loss at the rounded point, taken directly.
  const Matrix rounded = (xt.array() >= 0.5).cast<double>();
  Tape u;
  Var b = u.leaf(rounded);
  u.backward(nn::cross_entropy(proxy.forward(u, b, nn::Mode::kEval, nullptr), y));
  EXPECT_LT((through - u.grad(b)).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_GT(through.cwiseAbs().maxCoeff(), 0.0);
}

TEST(ClassificationLoss, RequiresFrozenProxy) {
  DistillConfig d;
  d.hidden1 = d.hidden2 = d.hidden3 = 4;
  Rng rng(6);
  ProxyModel live(3, 2, d, rng);
  Tape t;
  const std::vector<int> y{0};
  EXPECT_THROW(loss_classification(t.constant(Matrix::Zero(1, 3)), y, live), ConfigError);
}

TEST(Decoder, AdditiveConstraintHolds) {
  const CvaeConfig cfg = tiny_config();
  Rng rng(7);
  CvaeModel model(12, 5, cfg, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix x = testing::random_binary(6, 12, 0.4, rng);
    const Matrix eps = testing::random_matrix(6, 3, rng, -3, 3);
    const std::vector<ClassId> targets{1, 2, 3, 4, 5, 1};
    Tape t(false);
    Var xv = t.constant(x);
    Encoded enc = encode(t, model, xv, targets);
    Decoded dec = decode_additive(t, model, xv, reparameterize(enc.mu, enc.logvar, &eps), targets);
    const Matrix& s = dec.scores.value();
    const Matrix& xt = dec.relaxed.value();
    EXPECT_GE(s.minCoeff(), 0.0);
    EXPECT_LE(s.maxCoeff(), 1.0);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      EXPECT_GE(xt.data()[i], x.data()[i]);
      if (x.data()[i] == 1.0) EXPECT_EQ(xt.data()[i], 1.0);
    }
  }
}

TEST(Decoder, RejectsUnknownTargets) {
  Rng rng(8);
  CvaeModel model(5, 5, tiny_config(), rng);
  const std::vector<ClassId> bad{6};
  Tape t;
  EXPECT_THROW(encode(t, model, t.constant(Matrix::Zero(1, 5)), bad), DataError);
  EXPECT_THROW(cvae_scores(model, Matrix::Zero(2, 5), bad), ShapeError);
}

struct Fixture {
  LabeledDataset ds;
  Matrix malware;
  std::vector<ClassId> targets;
  ProxyModel proxy;
};

Fixture make_fixture() {
  SyntheticSpec spec;
  spec.class_sizes = {8, 8, 8, 8, 8, 12};
  spec.features = 40;
  spec.seed = 3;
  Fixture f;
  f.ds = make_synthetic_dataset(spec);
  const auto rows = f.ds.indices_of_class(kMalwareClass);
  f.malware = gather(f.ds.features, rows);
  for (std::size_t i = 0; i < rows.size(); ++i) f.targets.push_back(static_cast<ClassId>(1 + i % 5));
  f.proxy = tiny_proxy(40, 6, 9);
  return f;
}

CvaeTrainingSet training_set(const Fixture& f) {
  CvaeTrainingSet data;
  data.malware = &f.malware;
  data.targets = f.targets;
  data.references = &f.ds.features;
  data.reference_labels = f.ds.labels;
  data.proxy_column = [](ClassId c) { return c - 1; };
  return data;
}

TEST(TrainCvae, LossFallsAndRunIsDeterministic) {
  Fixture f = make_fixture();
  const auto data = training_set(f);
  CvaeConfig cfg = tiny_config();
  cfg.epochs = 12;
  cfg.batch_size = 4;
  cfg.seed = 5;
  CvaeTrainResult a = train_cvae(data, f.proxy, cfg, {});
  EXPECT_EQ(a.epochs_run, 12);
  EXPECT_EQ(a.best_epoch, 12);
  EXPECT_LT(a.epoch_loss.back(), a.epoch_loss.front());
  CvaeTrainResult b = train_cvae(data, f.proxy, cfg, {});
  EXPECT_EQ(cvae_scores(a.model, f.malware, f.targets), cvae_scores(b.model, f.malware, f.targets));
}

TEST(TrainCvae, EarlyStopKeepsBestEpoch) {
  Fixture f = make_fixture();
  const auto data = training_set(f);
  CvaeConfig cfg = tiny_config();
  cfg.epochs = 30;
  cfg.patience = 3;
  // Objective peaks at the third evaluation and then declines.
  int calls = 0;
  std::vector<Matrix> snapshots;
  CvaeObjective objective = [&](CvaeModel& m) {
    ++calls;
    snapshots.push_back(cvae_scores(m, f.malware, f.targets));
    return ObjectiveReport{calls == 3 ? 1.0 : 0.1 * (calls < 3 ? calls : 0), {{"call", double(calls)}}};
  };
  CvaeTrainResult r = train_cvae(data, f.proxy, cfg, objective);
  EXPECT_EQ(r.best_epoch, 3);
  EXPECT_EQ(r.epochs_run, 6);
  EXPECT_DOUBLE_EQ(r.best_objective, 1.0);
  ASSERT_EQ(r.best_details.size(), 1u);
  EXPECT_EQ(cvae_scores(r.model, f.malware, f.targets), snapshots[2]);
}

TEST(TrainCvae, InputErrors) {
  Fixture f = make_fixture();
  auto data = training_set(f);
  CvaeConfig cfg = tiny_config();
  cfg.epochs = 1;
  std::vector<ClassId> bad = f.targets;
  bad[0] = 6;
  data.targets = bad;
  EXPECT_THROW(train_cvae(data, f.proxy, cfg, {}), DataError);
  data = training_set(f);
  std::vector<ClassId> only_malware(f.ds.size(), kMalwareClass);
  data.reference_labels = only_malware;
  EXPECT_THROW(train_cvae(data, f.proxy, cfg, {}), DataError);
  data = training_set(f);
  data.proxy_column = nullptr;
  EXPECT_THROW(train_cvae(data, f.proxy, cfg, {}), ConfigError);
}

TEST(Tuning, TrialsStayInRangeAndBestIsArgmax) {
  Fixture f = make_fixture();
  const auto data = training_set(f);
  TuneConfig tc;
  tc.trials = 4;
  tc.trial_epochs = 1;
  tc.seed = 8;
  tc.base = tiny_config();
  tc.space.latent_dims = {2, 3};
  tc.space.class_embed_dims = {2};
  int scored = 0;
  const double values[] = {0.2, 0.7, 0.7, 0.1};
  CvaeObjective score = [&](CvaeModel&) { return ObjectiveReport{values[scored++], {}}; };
  const TuneResult r = tune_hyperparameters(data, f.proxy, tc, {}, score);
  ASSERT_EQ(r.trials.size(), 4u);
  EXPECT_EQ(r.best_trial, 1);
  EXPECT_DOUBLE_EQ(r.best_objective, 0.7);
  for (const auto& t : r.trials) {
    const auto& c = t.config;
    EXPECT_GE(c.lambda_r, 0.1);
    EXPECT_LE(c.lambda_r, 10.0);
    EXPECT_GE(c.beta, 1e-4);
    EXPECT_LE(c.beta, 1.0);
    EXPECT_GE(c.lambda_s, 1e-4);
    EXPECT_LE(c.lambda_s, 0.1);
    EXPECT_GE(c.lr, 1e-4);
    EXPECT_LE(c.lr, 3e-3);
    EXPECT_TRUE(c.latent_dim == 2 || c.latent_dim == 3);
    EXPECT_EQ(t.epochs_run, 1);
  }
  // A longer search extends a shorter one.
  TuneConfig longer = tc;
  longer.trials = 10;
  EXPECT_EQ(cvae_config_to_json(sample_trial_config(longer, 2)), cvae_config_to_json(sample_trial_config(tc, 2)));
  const auto line = trial_to_json_line(r.trials[0]);
  EXPECT_EQ(line.back(), '\n');
  EXPECT_NE(line.find("\"objective\""), std::string::npos);

  tc.trials = 0;
  EXPECT_THROW(tune_hyperparameters(data, f.proxy, tc, {}, score), ConfigError);
}

TEST(CvaeIo, ConfigJsonAndWeightsRoundTrip) {
  CvaeConfig c = tiny_config();
  c.lambda_c = 2.5;
  c.seed = 77;
  const CvaeConfig back = cvae_config_from_json(cvae_config_to_json(c));
  EXPECT_EQ(cvae_config_to_json(back), cvae_config_to_json(c));
  EXPECT_THROW(cvae_config_from_json(R"({"beta": -1})"), ConfigError);

  Rng rng(9);
  CvaeModel model(10, 5, c, rng);
  testing::TempDir dir("cvae");
  save_cvae(dir.path() / "cvae.bin", model);
  CvaeModel loaded = load_cvae(dir.path() / "cvae.bin");
  const Matrix x = testing::random_binary(3, 10, 0.3, rng);
  const std::vector<ClassId> t{1, 4, 5};
  EXPECT_EQ(cvae_scores(loaded, x, t), cvae_scores(model, x, t));
}

}  // namespace
}  // namespace impinj
