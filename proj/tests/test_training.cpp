#include <cmath>

#include <gtest/gtest.h>

#include "flowage/flowage.hpp"

using namespace flowage;

namespace {

FlowModel small_flow(std::size_t n_sub, std::size_t n_lay, std::size_t hidden, std::uint64_t seed, double perturb)
{
    FlowConfig cfg;
    cfg.n_sub = n_sub;
    cfg.n_lay = n_lay;
    cfg.hidden = hidden;
    FlowModel m = build_flow(cfg, seed);
    Eigen::VectorXd theta = flatten_parameters(m);
    Rng rng(seed, 7);
    for (Eigen::Index i = 0; i < theta.size(); ++i) theta(i) += perturb * rng.normal();
    assign_parameters(m, theta);
    return m;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed)
{
    Rng rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
    return m;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

// Posterior median of t ~ U(-1, 1) given r = t + N(0, s^2).
double truncated_median(double r, double s)
{
    const double lo = normal_cdf((-1.0 - r) / s), hi = normal_cdf((1.0 - r) / s);
    const double target = 0.5 * (lo + hi);
    double a = -1.0, b = 1.0;
    for (int i = 0; i < 100; ++i) {
        const double m = 0.5 * (a + b);
        (normal_cdf((m - r) / s) < target ? a : b) = m;
    }
    return 0.5 * (a + b);
}

struct LinearCohort {
    Eigen::MatrixXd coords;
    Eigen::VectorXd ages;
};

// Age linearly drives coordinate 0; the remaining coordinates are unit-noise nuisance.
LinearCohort linear_cohort(std::size_t n, std::size_t n_sub, double s, std::uint64_t seed)
{
    LinearCohort c;
    c.coords.resize(static_cast<Eigen::Index>(n_sub), static_cast<Eigen::Index>(n));
    c.ages.resize(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(seed, i);
        const double t = rng.uniform(-1.0, 1.0);
        const auto j = static_cast<Eigen::Index>(i);
        c.ages(j) = 55.0 + 35.0 * t;
        c.coords(0, j) = t + s * rng.normal();
        for (Eigen::Index k = 1; k < c.coords.rows(); ++k) c.coords(k, j) = rng.normal();
    }
    return c;
}

} // namespace

TEST(NllLoss, SpotValues)
{
    EXPECT_EQ(nll_loss(0.3, Eigen::VectorXd::Zero(5), 0.3, 0.14, 0.0), 0.0);
    EXPECT_NEAR(nll_loss(0.14, Eigen::VectorXd::Zero(3), 0.0, 0.14, 0.0), 0.5, 1e-12);
    EXPECT_NEAR(nll_loss(1.0, Eigen::Vector2d(1.0, 1.0), 1.0, 0.14, 1.0), 0.0, 1e-15);
}

TEST(NllLoss, Errors)
{
    EXPECT_THROW(nll_loss(0.0, Eigen::VectorXd::Zero(2), 0.0, 0.0, 0.0), ValidationError);
    EXPECT_THROW(nll_loss(0.0, Eigen::VectorXd::Zero(2), 0.0, 0.14, std::nan("")), NumericalError);
    EXPECT_THROW(nll_loss(0.0, Eigen::VectorXd::Zero(2), 0.0, 0.14, INFINITY), NumericalError);
}

TEST(Gradient, MatchesFiniteDifferencesEveryParameter)
{
    const FlowModel m = small_flow(8, 4, 8, 3, 0.1);
    const Eigen::MatrixXd x = gaussian(8, 12, 4);
    const Eigen::VectorXd t = gaussian(12, 1, 5).col(0);
    EXPECT_LE(gradient_check(m, x, t, 0.5), 1e-4);
}

TEST(Gradient, OddSplitAndEverySecondMixing)
{
    FlowConfig cfg;
    cfg.n_sub = 5;
    cfg.n_lay = 4;
    cfg.hidden = 6;
    cfg.n_hid = 3;
    cfg.mixing = MixingSchedule::every_second;
    FlowModel m = build_flow(cfg, 8);
    Eigen::VectorXd theta = flatten_parameters(m);
    theta += 0.1 * gaussian(theta.size(), 1, 9).col(0);
    assign_parameters(m, theta);
    EXPECT_LE(gradient_check(m, gaussian(5, 7, 10), gaussian(7, 1, 11).col(0), 0.14), 1e-4);
}

TEST(Gradient, ClosedFormAtIdentity)
{
    FlowConfig cfg;
    cfg.n_sub = 4;
    cfg.n_lay = 1;
    const FlowModel m = build_flow(cfg, 1);
    const Eigen::MatrixXd x = gaussian(4, 9, 2);
    const Eigen::VectorXd targets = Eigen::VectorXd::Zero(9);
    const double sigma = 0.5;
    const Eigen::VectorXd g = loss_and_gradient(m, x, targets, sigma).second;

    // Transformed slots are 0 and 1; slot 0 carries the age term.
    const double w0 = 1.0 / (sigma * sigma);
    const Eigen::Vector2d mean_x(w0 * x.row(0).mean(), x.row(1).mean());
    const Eigen::Vector2d mean_sq(w0 * x.row(0).squaredNorm() / 9.0, x.row(1).squaredNorm() / 9.0);

    const Eigen::Index n = g.size();
    const Eigen::VectorXd out_bias = g.tail(4);
    EXPECT_NEAR(out_bias(0), mean_sq(0) - 1.0, 1e-12);
    EXPECT_NEAR(out_bias(1), mean_sq(1) - 1.0, 1e-12);
    EXPECT_NEAR(out_bias(2), mean_x(0), 1e-12);
    EXPECT_NEAR(out_bias(3), mean_x(1), 1e-12);
    // Upstream of a zero output layer nothing moves.
    const auto out_layer = m.parameter_count() - (4 * 32 + 4);
    EXPECT_EQ(g.head(static_cast<Eigen::Index>(out_layer)).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(n, static_cast<Eigen::Index>(m.parameter_count()));
}

TEST(Gradient, NonFiniteNamesParameterPath)
{
    FlowModel m = small_flow(4, 2, 4, 5, 0.1);
    auto& layer = std::get<CouplingLayer>(m.steps.front());
    layer.net.layers.front().weight(0, 0) = 1e300;
    layer.net.layers.back().weight.setConstant(1e300);
    try {
        loss_and_gradient(m, gaussian(4, 3, 1), Eigen::VectorXd::Zero(3), 0.14);
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("coupling"), std::string::npos) << e.what();
    }
}

TEST(Gradient, LossTermsDecompose)
{
    const FlowModel m = small_flow(6, 3, 8, 4, 0.3);
    const Eigen::MatrixXd x = gaussian(6, 20, 6);
    const Eigen::VectorXd t = gaussian(20, 1, 7).col(0);
    const double sigma = 0.14;
    const LossTerms l = loss_and_gradient(m, x, t, sigma).first;
    EXPECT_NEAR(l.loss, 0.5 * l.age_mse / (sigma * sigma) + 0.5 * l.z_norm_mean - l.log_det_mean, 1e-10);
    const LossTerms e = evaluate_loss(m, x, t, sigma);
    EXPECT_EQ(e.loss, l.loss);
}

TEST(AdamWStep, MatchesHandComputation)
{
    AdamW opt(2, 0.1, 0.5, 0.9, 0.999, 1e-8, {true, false});
    Eigen::VectorXd p(2);
    p << 1.0, 1.0;
    opt.step(p, Eigen::Vector2d(2.0, -3.0));
    // First step: m_hat = g, v_hat = g^2, update = lr * sign(g) (up to eps).
    EXPECT_NEAR(p(0), 1.0 * (1.0 - 0.05) - 0.1, 1e-9);
    EXPECT_NEAR(p(1), 1.0 + 0.1, 1e-9);
}

TEST(AdamWStep, DecayMaskSkipsBiases)
{
    const FlowModel m = small_flow(4, 2, 3, 1, 0.0);
    const auto mask = weight_decay_mask(m);
    std::size_t weights = 0;
    visit_parameters(m, [&](const std::string&, const double*, std::size_t n, bool w) { weights += w ? n : 0; });
    EXPECT_EQ(mask.size(), m.parameter_count());
    EXPECT_EQ(static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)), weights);
}

TEST(Train, RecordsEveryKAndDecompose)
{
    const FlowModel m = small_flow(4, 2, 8, 2, 0.0);
    const Eigen::MatrixXd x = gaussian(4, 30, 3);
    const Eigen::VectorXd ages = (50.0 + 10.0 * gaussian(30, 1, 4).array()).matrix().col(0);
    TrainConfig cfg;
    cfg.epochs = 25;
    cfg.learning_rate = 1e-3;
    cfg.record_every = 10;
    std::size_t calls = 0;
    const TrainResult r = train(m, x, ages, cfg, [&](const TrainRecord&, const FlowModel&) { ++calls; });
    ASSERT_EQ(r.records.size(), 3u);
    EXPECT_EQ(calls, 3u);
    EXPECT_EQ(r.records[0].epoch, 10u);
    EXPECT_EQ(r.records[1].epoch, 20u);
    EXPECT_EQ(r.records[2].epoch, 25u);
    for (const auto& rec : r.records) {
        EXPECT_TRUE(std::isfinite(rec.loss));
        EXPECT_NEAR(rec.loss, 0.5 * rec.age_mse / (cfg.sigma * cfg.sigma) + 0.5 * rec.z_norm_mean - rec.log_det_mean,
                    1e-10);
    }
}

TEST(Train, StoresAgeNormalization)
{
    const Eigen::MatrixXd x = gaussian(4, 10, 3);
    Eigen::VectorXd ages(10);
    ages << 20, 30, 40, 50, 60, 70, 80, 90, 25, 35;
    TrainConfig cfg;
    cfg.epochs = 1;
    const FlowModel trained = train(small_flow(4, 1, 4, 1, 0.0), x, ages, cfg).model;
    EXPECT_NEAR(trained.age_norm.mean, ages.mean(), 1e-12);
    const double sd = std::sqrt((ages.array() - ages.mean()).square().sum() / 9.0);
    EXPECT_NEAR(trained.age_norm.std, sd, 1e-12);

    cfg.age_units = AgeUnits::years;
    const FlowModel raw = train(small_flow(4, 1, 4, 1, 0.0), x, ages, cfg).model;
    EXPECT_EQ(raw.age_norm.mean, 0.0);
    EXPECT_EQ(raw.age_norm.std, 1.0);
}

TEST(Train, DeterministicGivenSeed)
{
    const FlowModel m = small_flow(6, 3, 8, 2, 0.0);
    const Eigen::MatrixXd x = gaussian(6, 40, 3);
    const Eigen::VectorXd ages = (50.0 + 10.0 * gaussian(40, 1, 4).array()).matrix().col(0);
    TrainConfig cfg;
    cfg.epochs = 30;
    cfg.batch = 16;
    cfg.learning_rate = 1e-3;
    cfg.seed = 5;
    const TrainResult a = train(m, x, ages, cfg);
    const TrainResult b = train(m, x, ages, cfg);
    EXPECT_EQ(flatten_parameters(a.model), flatten_parameters(b.model));
    EXPECT_EQ(a.records.back().loss, b.records.back().loss);
    cfg.seed = 6;
    EXPECT_NE(flatten_parameters(train(m, x, ages, cfg).model), flatten_parameters(a.model));
}

TEST(Train, DuplicatedSamplesLossDecreasesMonotonically)
{
    const Eigen::VectorXd v = gaussian(6, 1, 3).col(0);
    const Eigen::MatrixXd x = v.replicate(1, 20);
    const Eigen::VectorXd ages = Eigen::VectorXd::LinSpaced(20, 30.0, 80.0);
    TrainConfig cfg;
    cfg.epochs = 100;
    cfg.learning_rate = 1e-4;
    const TrainResult r = train(small_flow(6, 4, 16, 2, 0.0), x, ages, cfg);
    ASSERT_EQ(r.records.size(), 100u);
    for (std::size_t i = 1; i < r.records.size(); ++i) EXPECT_LT(r.records[i].loss, r.records[i - 1].loss) << "epoch " << i + 1;
}

TEST(Train, NanAbortsWithLastGoodEpoch)
{
    FlowModel m = small_flow(4, 2, 4, 2, 0.1);
    Eigen::MatrixXd x = gaussian(4, 10, 3);
    const Eigen::VectorXd ages = Eigen::VectorXd::LinSpaced(10, 30.0, 80.0);
    std::get<CouplingLayer>(m.steps.front()).net.layers.back().bias(2) = std::nan("");
    TrainConfig cfg;
    cfg.epochs = 5;
    try {
        train(m, x, ages, cfg);
        FAIL() << "expected a numerical error";
    } catch (const NumericalError& e) {
        EXPECT_NE(std::string(e.what()).find("last good epoch 0"), std::string::npos) << e.what();
    }
}

TEST(Train, RejectsBadInput)
{
    const FlowModel m = small_flow(4, 1, 4, 1, 0.0);
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(m, gaussian(4, 1, 1), Eigen::VectorXd::Ones(1), cfg), ValidationError);
    EXPECT_THROW(train(m, gaussian(3, 5, 1), Eigen::VectorXd::Ones(5), cfg), ValidationError);
    EXPECT_THROW(train(m, gaussian(4, 5, 1), Eigen::VectorXd::Ones(4), cfg), ValidationError);
    Eigen::VectorXd ages = Eigen::VectorXd::LinSpaced(5, 1.0, 5.0);
    ages(2) = INFINITY;
    EXPECT_THROW(train(m, gaussian(4, 5, 1), ages, cfg), ValidationError);
    TrainConfig bad = cfg;
    bad.sigma = 0.0;
    EXPECT_THROW(train(m, gaussian(4, 5, 1), Eigen::VectorXd::LinSpaced(5, 1.0, 5.0), bad), ValidationError);
}

TEST(Train, GradCheckFlagRunsBeforeTraining)
{
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.grad_check = true;
    EXPECT_NO_THROW(train(small_flow(4, 2, 4, 1, 0.2), gaussian(4, 8, 2), Eigen::VectorXd::LinSpaced(8, 20.0, 90.0), cfg));
}

TEST(Train, InverseSamplingNeedsNoExtraFitting)
{
    const LinearCohort c = linear_cohort(200, 4, 0.1, 3);
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.learning_rate = 1e-3;
    const FlowModel m = train(small_flow(4, 4, 8, 1, 0.0), c.coords, c.ages, cfg).model;
    const auto fwd = flow_forward_batch(m, c.coords);
    const auto back = flow_inverse_batch(m, fwd.values);
    EXPECT_LE((back.values - c.coords).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Train, PaperConfigRecordedVerbatimInCheckpoint)
{
    std::vector<VelocityField> fields;
    const Grid g{{8, 8, 8}, {1.0, 1.0, 1.0}};
    for (std::uint64_t s = 0; s < 12; ++s) {
        const Eigen::VectorXd d = gaussian(static_cast<Eigen::Index>(3 * g.voxel_count()), 1, 100 + s).col(0);
        fields.push_back(VelocityField{g, std::vector<double>(d.data(), d.data() + d.size())});
    }
    AgingModel model;
    model.subspace = fit_subspace(fields, 4);
    model.flow = build_flow(FlowConfig{.n_sub = 4, .n_lay = 2}, 3);

    TrainConfig paper;
    paper.learning_rate = 1e-4;
    paper.weight_decay = 1e-5;
    paper.sigma = 0.14;
    paper.batch = 0;
    paper.epochs = 20000;
    paper.validate();
    model.train_config = paper;

    const std::string bytes = encode_containers(aging_checkpoint(model));
    const AgingModel back = aging_model_from_records(decode_containers(bytes), "<memory>");
    ASSERT_TRUE(back.train_config.has_value());
    EXPECT_EQ(*back.train_config, paper);
    EXPECT_NE(bytes.find("train.learning_rate"), std::string::npos);
}

TEST(Train, LinearOneFactorCohortNearBayes)
{
    const double s = 0.1;
    const LinearCohort tr = linear_cohort(1000, 4, s, 11);
    const LinearCohort te = linear_cohort(2000, 4, s, 12);

    TrainConfig cfg;
    cfg.epochs = 1500;
    cfg.learning_rate = 1e-3;
    cfg.weight_decay = 1e-3;
    cfg.sigma = s * std::sqrt(3.0); // generator noise in normalized age units
    const FlowModel m = train(small_flow(4, 2, 4, 1, 0.0), tr.coords, tr.ages, cfg).model;
    const double nf = (predict_ages(m, te.coords) - te.ages).cwiseAbs().mean();

    double bayes = 0.0;
    for (Eigen::Index j = 0; j < te.ages.size(); ++j)
        bayes += std::abs(55.0 + 35.0 * truncated_median(te.coords(0, j), s) - te.ages(j));
    bayes /= static_cast<double>(te.ages.size());

    RecordProperty("nf_mae", std::to_string(nf));
    RecordProperty("bayes_mae", std::to_string(bayes));
    EXPECT_LE(nf, 1.25 * bayes) << "NF " << nf << " Bayes " << bayes;
}
