#include <doctest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "mdnik/errors.hpp"
#include "mdnik/kinematics.hpp"
#include "mdnik/mdn.hpp"
#include "test_util.hpp"

using namespace mdnik;

namespace {

constexpr double kPi = std::numbers::pi;

MdnConfig small_config(int dof, int components, int width, std::uint64_t seed) {
    MdnConfig c;
    c.hidden_layers = 2;
    c.hidden_width = width;
    c.components = components;
    c.output_dim = dof;
    c.seed = seed;
    return c;
}

// Direct summation, no log-sum-exp; fine for well-scaled values.
double naive_nll(const MixturePrediction& p, const Eigen::VectorXd& q) {
    double total = 0.0;
    for (Eigen::Index k = 0; k < p.weights.size(); ++k) {
        double density = p.weights[k];
        for (Eigen::Index j = 0; j < q.size(); ++j) {
            const double s = p.stds(k, j);
            const double z = (q[j] - p.means(k, j)) / s;
            density *= std::exp(-0.5 * z * z) / (s * std::sqrt(2 * kPi));
        }
        total += density;
    }
    return -std::log(total);
}

MixturePrediction single_gaussian(const Eigen::VectorXd& mean, const Eigen::VectorXd& std) {
    MixturePrediction p;
    p.weights = Eigen::VectorXd::Ones(1);
    p.means = mean.transpose();
    p.stds = std.transpose();
    return p;
}

// Randomizes every parameter so the zero-initialized heads also get exercised.
void scramble(MdnModel& model, std::uint64_t seed, double scale) {
    Rng rng(seed);
    for (auto t : model.params.tensors())
        for (double& v : t) v = rng.uniform(-scale, scale);
}

IkDataset planar_dataset(std::size_t n, std::uint64_t seed) {
    return generate_dataset(load_chain(mdnik::test::chain_path("planar_2link.urdf")), n, seed);
}

}  // namespace

TEST_SUITE("mdn") {

TEST_CASE("single unit gaussian at its mean") {
    const auto p = single_gaussian(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1));
    CHECK(std::abs(nll_loss(p, Eigen::VectorXd::Zero(1)) - 0.5 * std::log(2 * kPi)) < 1e-12);
}

TEST_CASE("identical components collapse to one") {
    Eigen::VectorXd mean(2), sd(2), q(2);
    mean << 0.3, -1.2;
    sd << 0.5, 2.0;
    q << 0.1, 0.4;
    const double one = nll_loss(single_gaussian(mean, sd), q);
    MixturePrediction p;
    p.weights = Eigen::VectorXd(4);
    p.weights << 0.1, 0.2, 0.3, 0.4;
    p.means = mean.transpose().replicate(4, 1);
    p.stds = sd.transpose().replicate(4, 1);
    CHECK(std::abs(nll_loss(p, q) - one) < 1e-12);
}

TEST_CASE("log-sum-exp loss agrees with direct summation") {
    Rng rng(1);
    for (int trial = 0; trial < 200; ++trial) {
        const int k = 1 + static_cast<int>(rng.below(6));
        const int d = 1 + static_cast<int>(rng.below(5));
        MixturePrediction p;
        p.weights = Eigen::VectorXd(k);
        for (int i = 0; i < k; ++i) p.weights[i] = rng.uniform(0.05, 1.0);
        p.weights /= p.weights.sum();
        p.means = Eigen::MatrixXd(k, d);
        p.stds = Eigen::MatrixXd(k, d);
        Eigen::VectorXd q(d);
        for (int j = 0; j < d; ++j) {
            q[j] = rng.uniform(-1, 1);
            for (int i = 0; i < k; ++i) {
                p.means(i, j) = rng.uniform(-1, 1);
                p.stds(i, j) = rng.uniform(0.3, 2.0);
            }
        }
        const double oracle = naive_nll(p, q);
        CHECK(std::abs(nll_loss(p, q) - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
    }
}

TEST_CASE("loss stays finite far from every component") {
    const auto p = single_gaussian(Eigen::VectorXd::Zero(1), Eigen::VectorXd::Constant(1, 1e-3));
    const double v = nll_loss(p, Eigen::VectorXd::Constant(1, 10.0));
    CHECK(std::isfinite(v));
    CHECK(v > 1e7);
}

TEST_CASE("mixture outputs") {
    auto model = init_model(small_config(3, 5, 16, 2));
    SUBCASE("zero logits head gives uniform weights") {
        const auto p = forward(model, Eigen::Vector3d(0.1, 0.2, 0.3));
        for (Eigen::Index k = 0; k < 5; ++k) CHECK(p.weights[k] == doctest::Approx(0.2).epsilon(1e-15));
    }
    SUBCASE("initial deviations are one") {
        const auto p = forward_scaled(model, Eigen::Vector3d(0.5, -0.5, 0.0));
        CHECK((p.stds.array() - 1.0).abs().maxCoeff() < 1e-12);
    }
    SUBCASE("weights sum to one and deviations respect the floor") {
        scramble(model, 3, 4.0);
        model.params.deviations.bias.setConstant(-800.0);  // softplus underflows to 0
        Rng rng(4);
        for (int i = 0; i < 100; ++i) {
            const Eigen::Vector3d x(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3));
            const auto p = forward_scaled(model, x);
            CHECK(std::abs(p.weights.sum() - 1.0) < 1e-12);
            CHECK((p.weights.array() >= 0.0).all());
            CHECK(p.stds.minCoeff() >= kSigmaFloor);
        }
    }
    SUBCASE("non-finite input") {
        CHECK_THROWS_AS(forward(model, Eigen::Vector3d(std::nan(""), 0, 0)), DomainError);
        CHECK_THROWS_AS(predict_config(model, Eigen::Vector3d(0, INFINITY, 0)), DomainError);
    }
}

TEST_CASE("highest mode") {
    Eigen::VectorXd w(4);
    w << 0.3, 0.3, 0.2, 0.2;
    CHECK(highest_mode(w) == 0);
    w << 0.1, 0.2, 0.35, 0.35;
    CHECK(highest_mode(w) == 2);
    Rng rng(6);
    for (int i = 0; i < 100; ++i) {
        Eigen::VectorXd v(5);
        for (int k = 0; k < 5; ++k) v[k] = rng.uniform();
        CHECK(highest_mode(v) == highest_mode(v * rng.uniform(0.01, 100.0)));
    }
}

TEST_CASE("learning-rate schedule") {
    TrainSettings s;
    CHECK(learning_rate(s, 0) == 1e-2);
    CHECK(learning_rate(s, 99) == 1e-2);
    CHECK(learning_rate(s, 100) == doctest::Approx(9e-3).epsilon(1e-14));
    CHECK(learning_rate(s, 199) == doctest::Approx(9e-3).epsilon(1e-14));
    CHECK(learning_rate(s, 500) == doctest::Approx(5.9049e-3).epsilon(1e-12));
}

TEST_CASE("settings validation") {
    TrainSettings s;
    CHECK_NOTHROW(s.validate(1000));
    s.split_fraction = 1.0;  // everything for training, no validation split
    CHECK_NOTHROW(s.validate(1000));
    s.split_fraction = 0.0;
    CHECK_THROWS_AS(s.validate(1000), ValidationError);
    s.split_fraction = 1.5;
    CHECK_THROWS_AS(s.validate(1000), ValidationError);
    s = {};
    s.batch_size = 0;
    CHECK_THROWS_AS(s.validate(1000), ValidationError);
    s = {};
    CHECK_THROWS_AS(s.validate(1), ValidationError);
    MdnConfig c;
    c.output_dim = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("backprop matches central differences") {
    Rng rng(10);
    for (int batch = 0; batch < 10; ++batch) {
        CAPTURE(batch);
        auto model = init_model(small_config(2, 2, 8, 100 + batch));
        scramble(model, 200 + batch, 0.8);
        const Eigen::Index n = 5;
        Eigen::MatrixXd x(3, n), y(2, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            x.col(i) = Eigen::Vector3d(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            y.col(i) = Eigen::Vector2d(rng.uniform(-1, 1), rng.uniform(-1, 1));
        }
        const auto analytic = batch_gradient(model, x, y);
        CHECK(analytic.loss == doctest::Approx(batch_nll(model, x, y)).epsilon(1e-12));

        const auto grads = analytic.grad.tensors();
        auto params = model.params.tensors();
        const double h = 1e-5;
        double worst = 0.0;
        for (std::size_t t = 0; t < params.size(); ++t) {
            for (std::size_t e = 0; e < params[t].size(); ++e) {
                const double keep = params[t][e];
                params[t][e] = keep + h;
                const double up = batch_nll(model, x, y);
                params[t][e] = keep - h;
                const double down = batch_nll(model, x, y);
                params[t][e] = keep;
                const double numeric = (up - down) / (2 * h);
                const double a = grads[t][e];
                // Relative to the larger magnitude, absolute below 1e-6.
                const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
                worst = std::max(worst, rel);
            }
        }
        CHECK(worst < 1e-4);
    }
}

TEST_CASE("duplicated sample has the single-sample gradient") {
    auto model = init_model(small_config(2, 3, 8, 7));
    scramble(model, 8, 0.5);
    Eigen::MatrixXd x(3, 1), y(2, 1);
    x << 0.2, -0.4, 0.9;
    y << 0.3, 0.1;
    const auto one = batch_gradient(model, x, y);
    const auto two = batch_gradient(model, x.replicate(1, 2), y.replicate(1, 2));
    CHECK(two.loss == doctest::Approx(one.loss).epsilon(1e-14));
    const auto a = one.grad.tensors(), b = two.grad.tensors();
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t e = 0; e < a[t].size(); ++e) CHECK(b[t][e] == doctest::Approx(a[t][e]).epsilon(1e-12));
}

TEST_CASE("mean head is pulled toward the target") {
    // One component, one output, sigma = 1 at init: dL/d(mean bias) = mu - y.
    auto model = init_model(small_config(1, 1, 8, 9));
    Eigen::MatrixXd x(3, 1), y(1, 1);
    x << 0.1, 0.2, 0.3;
    y << 2.0;
    const double mu = forward_scaled(model, x.col(0)).means(0, 0);
    const auto g = batch_gradient(model, x, y);
    CHECK(g.grad.means.bias[0] == doctest::Approx(mu - 2.0).epsilon(1e-10));
    model.params.means.bias[0] -= 0.1 * g.grad.means.bias[0];
    CHECK(std::abs(forward_scaled(model, x.col(0)).means(0, 0) - 2.0) < std::abs(mu - 2.0));
}

TEST_CASE("first Adam step moves every parameter by the learning rate") {
    auto model = init_model(small_config(2, 2, 4, 1));
    scramble(model, 2, 1.0);
    auto grad = MdnParameters::zeros_like(model.params);
    Rng rng(3);
    for (auto t : grad.tensors())
        for (double& v : t) v = rng.uniform(0.1, 1.0) * (rng.uniform() < 0.5 ? -1 : 1);
    const auto before = model.params;
    Adam adam(model.params, 0.9, 0.999, 1e-8);
    adam.step(model.params, grad, 1e-3);
    CHECK(adam.steps() == 1);
    const auto b = before.tensors();
    const auto a = model.params.tensors();
    const auto g = grad.tensors();
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t e = 0; e < a[t].size(); ++e)
            CHECK(a[t][e] - b[t][e] == doctest::Approx(g[t][e] > 0 ? -1e-3 : 1e-3).epsilon(1e-6));
}

TEST_CASE("model files") {
    auto model = init_model(small_config(2, 3, 8, 5));
    scramble(model, 6, 1.0);
    model.input_scaler.mean = Eigen::Vector3d(0.1, 0.2, 1.0 / 3.0);
    model.input_scaler.std = Eigen::Vector3d(1.5, 0.7, 2.0);
    model.output_scaler.mean = Eigen::Vector2d(-0.25, 0.1);
    model.output_scaler.std = Eigen::Vector2d(1.1, 0.9);
    model.chain_fingerprint = "0123456789abcdef";
    const std::string text = model_to_json(model);

    SUBCASE("round trip is bit-identical") {
        const auto back = model_from_json(text, 2);
        CHECK(model_to_json(back) == text);
        Rng rng(9);
        for (int i = 0; i < 100; ++i) {
            const Eigen::Vector3d x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
            const auto p = forward(model, x), q = forward(back, x);
            CHECK(p.weights == q.weights);
            CHECK(p.means == q.means);
            CHECK(p.stds == q.stds);
        }
    }
    SUBCASE("truncated") { CHECK_THROWS_AS(model_from_json(text.substr(0, text.size() / 2)), ParseError); }
    SUBCASE("not a model") { CHECK_THROWS_AS(model_from_json("{\"hello\": 1}"), ParseError); }
    SUBCASE("wrong dof") { CHECK_THROWS_AS(model_from_json(text, 5), DimensionError); }
    SUBCASE("unknown version") {
        std::string other = text;
        const auto at = other.find("\"version\": 1");
        REQUIRE(at != std::string::npos);
        other.replace(at, 12, "\"version\": 9");
        CHECK_THROWS_AS(model_from_json(other), ValidationError);
    }
    SUBCASE("missing file") { CHECK_THROWS_AS(load_model("/nonexistent/model.json"), Error); }
}

TEST_CASE("training") {
    const auto ds = planar_dataset(600, 3);
    TrainSettings s;
    s.epochs = 4;
    s.batch_size = 64;
    s.seed = 11;
    const auto arch = small_config(2, 3, 16, 12);

    SUBCASE("same seed, same model") {
        const auto a = train(ds, s, arch), b = train(ds, s, arch);
        CHECK(model_to_json(a.model) == model_to_json(b.model));
        CHECK(report_csv(a.report) == report_csv(b.report));
        s.seed = 12;
        CHECK(model_to_json(train(ds, s, arch).model) != model_to_json(a.model));
    }
    SUBCASE("split sizes and report") {
        const auto r = train(ds, s, arch);
        CHECK(r.report.train_size == 540);
        CHECK(r.report.val_size == 60);
        REQUIRE(r.report.epochs.size() == 4);
        CHECK(!r.report.diverged);
        CHECK(r.model.chain_fingerprint == ds.chain_fingerprint);
        CHECK(report_csv(r.report).rfind("epoch,lr,train_nll,val_nll\n", 0) == 0);
        CHECK(r.report.epochs.back().train_nll < r.report.epochs.front().train_nll);
    }
    SUBCASE("input shift is absorbed by the scaler") {
        IkDataset shifted = ds;
        const Eigen::Vector3d c(5.0, -3.0, 2.0);
        for (auto& sample : shifted.samples) sample.position += c;
        const auto a = train(ds, s, arch), b = train(shifted, s, arch);
        for (std::size_t i = 0; i < 20; ++i) {
            const auto& p = ds.samples[i].position;
            CHECK((predict_config(a.model, p) - predict_config(b.model, p + c)).norm() < 1e-6);
        }
    }
    SUBCASE("non-finite target is reported as divergence") {
        IkDataset bad = ds;
        bad.samples[0].config[0] = std::nan("");
        CHECK_THROWS_AS(gradients(init_model(arch), std::span<const IkSample>(bad.samples.data(), 4)),
                        DivergenceError);
    }
}

}  // TEST_SUITE
