#include "mdnik/mdn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <utility>

#include "mdnik/errors.hpp"

namespace mdnik {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * log(2 pi)

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double silu(double z) { return z * sigmoid(z); }

double silu_grad(double z) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
}

double log_sum_exp(const Eigen::VectorXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

DenseLayer make_layer(int out, int in) {
    return {Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)};
}

void fill_uniform(DenseLayer& layer, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(layer.weight.cols()));
    // Row-major draw order so the stream maps onto the file layout.
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias[r] = rng.uniform(-bound, bound);
}

Eigen::MatrixXd silu(const Eigen::MatrixXd& z) { return z.unaryExpr([](double v) { return silu(v); }); }

}  // namespace

void MdnConfig::validate() const {
    if (input_dim != 3) throw ValidationError("input_dim must be 3");
    if (hidden_layers < 1) throw ValidationError("hidden_layers must be at least 1");
    if (hidden_width < 1) throw ValidationError("hidden_width must be at least 1");
    if (components < 1) throw ValidationError("components must be at least 1");
    if (output_dim < 1) throw ValidationError("output_dim must be at least 1");
}

MdnParameters MdnParameters::zeros_like(const MdnParameters& other) {
    MdnParameters p;
    auto zero = [](const DenseLayer& l) { return make_layer(static_cast<int>(l.weight.rows()), static_cast<int>(l.weight.cols())); };
    for (const auto& l : other.trunk) p.trunk.push_back(zero(l));
    p.logits = zero(other.logits);
    p.means = zero(other.means);
    p.deviations = zero(other.deviations);
    return p;
}

std::vector<std::span<double>> MdnParameters::tensors() {
    std::vector<std::span<double>> out;
    auto add = [&out](DenseLayer& l) {
        out.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
        out.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
    };
    for (auto& l : trunk) add(l);
    add(logits);
    add(means);
    add(deviations);
    return out;
}

std::vector<std::span<const double>> MdnParameters::tensors() const {
    std::vector<std::span<const double>> out;
    for (auto s : const_cast<MdnParameters*>(this)->tensors()) out.emplace_back(s.data(), s.size());
    return out;
}

std::size_t MdnParameters::size() const {
    std::size_t n = 0;
    for (auto s : tensors()) n += s.size();
    return n;
}

Scaler Scaler::identity(int dim) { return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)}; }

Scaler Scaler::fit(const Eigen::MatrixXd& data) {
    if (data.cols() == 0) throw ValidationError("cannot fit a scaler on zero samples");
    Scaler s;
    s.mean = data.rowwise().mean();
    const Eigen::MatrixXd centered = data.colwise() - s.mean;
    s.std = (centered.array().square().rowwise().sum() / static_cast<double>(data.cols())).sqrt();
    for (Eigen::Index i = 0; i < s.std.size(); ++i)
        if (!(s.std[i] > 0.0)) s.std[i] = 1.0;
    return s;
}

MdnModel init_model(const MdnConfig& config) {
    config.validate();
    MdnModel m;
    m.config = config;
    Rng rng(config.seed);
    int in = config.input_dim;
    for (int l = 0; l < config.hidden_layers; ++l) {
        DenseLayer layer = make_layer(config.hidden_width, in);
        fill_uniform(layer, rng);
        m.params.trunk.push_back(std::move(layer));
        in = config.hidden_width;
    }
    const int k = config.components;
    const int d = config.output_dim;
    m.params.logits = make_layer(k, in);
    m.params.means = make_layer(k * d, in);
    fill_uniform(m.params.means, rng);
    m.params.deviations = make_layer(k * d, in);
    // softplus(b) + floor == 1
    m.params.deviations.bias.setConstant(std::log(std::expm1(1.0 - kSigmaFloor)));
    m.input_scaler = Scaler::identity(config.input_dim);
    m.output_scaler = Scaler::identity(d);
    return m;
}

MixturePrediction forward_scaled(const MdnModel& model, const Eigen::Vector3d& x) {
    if (!x.allFinite()) throw DomainError("non-finite input position");
    Eigen::VectorXd h = model.input_scaler.apply(x);
    for (const auto& layer : model.params.trunk) h = silu(Eigen::MatrixXd(layer.weight * h + layer.bias));

    const int k = model.components();
    const int d = model.dof();
    MixturePrediction p;
    const Eigen::VectorXd logits = model.params.logits.weight * h + model.params.logits.bias;
    p.weights = (logits.array() - logits.maxCoeff()).exp();
    p.weights /= p.weights.sum();

    const Eigen::VectorXd mu = model.params.means.weight * h + model.params.means.bias;
    const Eigen::VectorXd s = model.params.deviations.weight * h + model.params.deviations.bias;
    p.means.resize(k, d);
    p.stds.resize(k, d);
    for (int c = 0; c < k; ++c)
        for (int j = 0; j < d; ++j) {
            p.means(c, j) = mu[c * d + j];
            p.stds(c, j) = softplus(s[c * d + j]) + kSigmaFloor;
        }
    return p;
}

MixturePrediction forward(const MdnModel& model, const Eigen::Vector3d& x) {
    MixturePrediction p = forward_scaled(model, x);
    const auto& sc = model.output_scaler;
    for (Eigen::Index c = 0; c < p.means.rows(); ++c) {
        p.means.row(c) = p.means.row(c).cwiseProduct(sc.std.transpose()) + sc.mean.transpose();
        p.stds.row(c) = p.stds.row(c).cwiseProduct(sc.std.transpose());
    }
    return p;
}

double nll_loss(const MixturePrediction& pred, const Eigen::VectorXd& q_true) {
    const Eigen::Index k = pred.weights.size();
    const Eigen::Index d = q_true.size();
    if (pred.means.rows() != k || pred.means.cols() != d || pred.stds.rows() != k || pred.stds.cols() != d)
        throw DimensionError("mixture and target dimensions disagree");
    Eigen::VectorXd log_terms(k);
    for (Eigen::Index c = 0; c < k; ++c) {
        double lp = std::log(pred.weights[c]);
        for (Eigen::Index j = 0; j < d; ++j) {
            const double z = (q_true[j] - pred.means(c, j)) / pred.stds(c, j);
            lp += -kHalfLog2Pi - std::log(pred.stds(c, j)) - 0.5 * z * z;
        }
        log_terms[c] = lp;
    }
    return -log_sum_exp(log_terms);
}

double sample_nll(const MdnModel& model, const Eigen::Vector3d& x, const JointConfig& q_true) {
    if (q_true.size() != model.dof()) throw DimensionError("target length does not match model dof");
    return nll_loss(forward_scaled(model, x), model.output_scaler.apply(q_true));
}

std::size_t highest_mode(const Eigen::VectorXd& weights) {
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < weights.size(); ++i)
        if (weights[i] > weights[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
    return best;
}

JointConfig predict_config(const MdnModel& model, const Eigen::Vector3d& x) {
    const MixturePrediction p = forward(model, x);
    return p.means.row(static_cast<Eigen::Index>(highest_mode(p.weights))).transpose();
}

// ---------------------------------------------------------------------------
// Batched backprop

namespace {

struct ChunkResult {
    MdnParameters grad;
    double loss_sum = 0.0;
};

// Loss and (optionally) gradient for columns [begin, begin + m), each
// per-sample term already divided by `scale`.
void chunk_pass(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets,
                Eigen::Index begin, Eigen::Index m, double scale, ChunkResult& out, bool want_grad) {
    const auto& P = model.params;
    const int k = model.components();
    const int d = model.dof();
    const std::size_t layers = P.trunk.size();

    std::vector<Eigen::MatrixXd> acts(layers + 1);  // acts[0] = input
    std::vector<Eigen::MatrixXd> pre(layers);
    acts[0] = inputs.middleCols(begin, m);
    for (std::size_t l = 0; l < layers; ++l) {
        pre[l] = (P.trunk[l].weight * acts[l]).colwise() + P.trunk[l].bias;
        acts[l + 1] = silu(pre[l]);
    }
    const Eigen::MatrixXd& h = acts[layers];
    const Eigen::MatrixXd logits = (P.logits.weight * h).colwise() + P.logits.bias;
    const Eigen::MatrixXd mu = (P.means.weight * h).colwise() + P.means.bias;
    const Eigen::MatrixXd s = (P.deviations.weight * h).colwise() + P.deviations.bias;

    Eigen::MatrixXd d_logits(k, m), d_mu(k * d, m), d_s(k * d, m);
    Eigen::VectorXd log_pi(k), log_terms(k);
    for (Eigen::Index j = 0; j < m; ++j) {
        const auto y = targets.col(begin + j);
        const double lmax = logits.col(j).maxCoeff();
        const double lnorm = lmax + std::log((logits.col(j).array() - lmax).exp().sum());
        log_pi = logits.col(j).array() - lnorm;
        for (int c = 0; c < k; ++c) {
            double lp = log_pi[c];
            for (int i = 0; i < d; ++i) {
                const double sigma = softplus(s(c * d + i, j)) + kSigmaFloor;
                const double z = (y[i] - mu(c * d + i, j)) / sigma;
                lp += -kHalfLog2Pi - std::log(sigma) - 0.5 * z * z;
            }
            log_terms[c] = lp;
        }
        const double lse = log_sum_exp(log_terms);
        out.loss_sum += -lse;
        if (!want_grad) continue;
        for (int c = 0; c < k; ++c) {
            const double gamma = std::exp(log_terms[c] - lse);
            d_logits(c, j) = scale * (std::exp(log_pi[c]) - gamma);
            for (int i = 0; i < d; ++i) {
                const double pre_s = s(c * d + i, j);
                const double sigma = softplus(pre_s) + kSigmaFloor;
                const double diff = y[i] - mu(c * d + i, j);
                const double inv2 = 1.0 / (sigma * sigma);
                d_mu(c * d + i, j) = -scale * gamma * diff * inv2;
                d_s(c * d + i, j) = scale * gamma * (1.0 / sigma - diff * diff * inv2 / sigma) * sigmoid(pre_s);
            }
        }
    }
    if (!want_grad) return;

    MdnParameters& g = out.grad;
    g.logits.weight.noalias() += d_logits * h.transpose();
    g.logits.bias += d_logits.rowwise().sum();
    g.means.weight.noalias() += d_mu * h.transpose();
    g.means.bias += d_mu.rowwise().sum();
    g.deviations.weight.noalias() += d_s * h.transpose();
    g.deviations.bias += d_s.rowwise().sum();

    Eigen::MatrixXd d_h = P.logits.weight.transpose() * d_logits;
    d_h.noalias() += P.means.weight.transpose() * d_mu;
    d_h.noalias() += P.deviations.weight.transpose() * d_s;
    for (std::size_t l = layers; l-- > 0;) {
        const Eigen::MatrixXd d_z = d_h.cwiseProduct(pre[l].unaryExpr([](double v) { return silu_grad(v); }));
        g.trunk[l].weight.noalias() += d_z * acts[l].transpose();
        g.trunk[l].bias += d_z.rowwise().sum();
        if (l > 0) d_h = P.trunk[l].weight.transpose() * d_z;
    }
}

void check_batch(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) {
    if (inputs.cols() == 0) throw ValidationError("empty batch");
    if (inputs.rows() != model.config.input_dim || targets.rows() != model.dof() || targets.cols() != inputs.cols())
        throw DimensionError("batch shape does not match the model");
}

std::vector<ChunkResult> run_chunks(const MdnModel& model, const Eigen::MatrixXd& inputs,
                                    const Eigen::MatrixXd& targets, bool want_grad) {
    const Eigen::Index n = inputs.cols();
    const Eigen::Index chunks = (n + kGradientChunk - 1) / kGradientChunk;
    const double scale = 1.0 / static_cast<double>(n);
    std::vector<ChunkResult> parts(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static)
    for (Eigen::Index c = 0; c < chunks; ++c) {
        ChunkResult& part = parts[static_cast<std::size_t>(c)];
        if (want_grad) part.grad = MdnParameters::zeros_like(model.params);
        const Eigen::Index begin = c * kGradientChunk;
        chunk_pass(model, inputs, targets, begin, std::min(kGradientChunk, n - begin), scale, part, want_grad);
    }
    return parts;
}

}  // namespace

BatchGradient batch_gradient(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) {
    check_batch(model, inputs, targets);
    std::vector<ChunkResult> parts = run_chunks(model, inputs, targets, true);
    BatchGradient out{std::move(parts.front().grad), parts.front().loss_sum};
    auto dst = out.grad.tensors();
    for (std::size_t c = 1; c < parts.size(); ++c) {
        out.loss += parts[c].loss_sum;
        auto src = std::as_const(parts[c].grad).tensors();
        for (std::size_t t = 0; t < dst.size(); ++t)
            for (std::size_t i = 0; i < dst[t].size(); ++i) dst[t][i] += src[t][i];
    }
    out.loss /= static_cast<double>(inputs.cols());
    return out;
}

double batch_nll(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets) {
    check_batch(model, inputs, targets);
    double total = 0.0;
    for (const auto& part : run_chunks(model, inputs, targets, false)) total += part.loss_sum;
    return total / static_cast<double>(inputs.cols());
}

namespace {

void scale_batch(const MdnModel& model, std::span<const IkSample> batch, Eigen::MatrixXd& xs, Eigen::MatrixXd& ys) {
    const auto n = static_cast<Eigen::Index>(batch.size());
    xs.resize(3, n);
    ys.resize(model.dof(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const IkSample& s = batch[static_cast<std::size_t>(i)];
        if (s.config.size() != model.dof()) throw DimensionError("sample dof does not match model");
        if (!s.position.allFinite()) throw DomainError("non-finite input position");
        xs.col(i) = model.input_scaler.apply(s.position);
        ys.col(i) = model.output_scaler.apply(s.config);
    }
}

bool all_finite(const MdnParameters& p) {
    for (auto t : p.tensors())
        for (double v : t)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

BatchGradient gradients(const MdnModel& model, std::span<const IkSample> batch) {
    if (batch.empty()) throw ValidationError("empty batch");
    Eigen::MatrixXd xs, ys;
    scale_batch(model, batch, xs, ys);
    BatchGradient g = batch_gradient(model, xs, ys);
    if (!std::isfinite(g.loss) || !all_finite(g.grad)) throw DivergenceError("non-finite loss or gradient", -1, -1);
    return g;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop

Adam::Adam(const MdnParameters& shape, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
    for (auto t : shape.tensors()) {
        m_.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(t.size())));
        v_.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(t.size())));
    }
}

void Adam::step(MdnParameters& params, const MdnParameters& grad, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    auto p = params.tensors();
    auto g = grad.tensors();
    for (std::size_t t = 0; t < p.size(); ++t) {
        Eigen::Map<Eigen::VectorXd> pv(p[t].data(), static_cast<Eigen::Index>(p[t].size()));
        Eigen::Map<const Eigen::VectorXd> gv(g[t].data(), static_cast<Eigen::Index>(g[t].size()));
        m_[t] = beta1_ * m_[t] + (1.0 - beta1_) * gv;
        v_[t] = beta2_ * v_[t] + (1.0 - beta2_) * gv.cwiseProduct(gv);
        pv.array() -= lr * (m_[t].array() / c1) / ((v_[t].array() / c2).sqrt() + epsilon_);
    }
}

void TrainSettings::validate(std::size_t dataset_size) const {
    if (epochs < 1) throw ValidationError("epochs must be at least 1");
    if (!(initial_lr > 0.0)) throw ValidationError("learning rate must be positive");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ValidationError("lr decay must be in (0, 1]");
    if (decay_every < 1) throw ValidationError("decay interval must be at least 1 epoch");
    if (!(split_fraction > 0.0 && split_fraction <= 1.0)) throw ValidationError("split fraction must be in (0, 1]");
    if (batch_size < 1) throw ValidationError("batch size must be at least 1");
    if (static_cast<std::size_t>(batch_size) > dataset_size)
        throw ValidationError("batch size " + std::to_string(batch_size) + " exceeds dataset size " +
                              std::to_string(dataset_size));
}

double learning_rate(const TrainSettings& settings, int epoch) {
    return settings.initial_lr * std::pow(settings.lr_decay, epoch / settings.decay_every);
}

TrainResult train(const IkDataset& dataset, const TrainSettings& settings, MdnConfig architecture,
                  EpochCallback on_epoch, void* user) {
    const std::size_t n = dataset.samples.size();
    settings.validate(n);
    const auto dof = static_cast<int>(dataset.dof);
    architecture.output_dim = dof;
    architecture.validate();

    Rng rng(settings.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(settings.split_fraction * static_cast<double>(n))));
    if (static_cast<std::size_t>(settings.batch_size) > n_train)
        throw ValidationError("batch size exceeds training split size " + std::to_string(n_train));
    const std::size_t n_val = n - n_train;

    Eigen::MatrixXd x_train(3, n_train), q_train(dof, n_train), x_val(3, n_val), q_val(dof, n_val);
    for (std::size_t i = 0; i < n; ++i) {
        const IkSample& s = dataset.samples[order[i]];
        if (s.config.size() != dof) throw DimensionError("dataset row has wrong dof");
        if (i < n_train) {
            x_train.col(i) = s.position;
            q_train.col(i) = s.config;
        } else {
            x_val.col(i - n_train) = s.position;
            q_val.col(i - n_train) = s.config;
        }
    }

    TrainResult result;
    MdnModel& model = result.model;
    model = init_model(architecture);
    model.chain_fingerprint = dataset.chain_fingerprint;
    model.input_scaler = Scaler::fit(x_train);
    model.output_scaler = Scaler::fit(q_train);

    auto standardize = [](Eigen::MatrixXd& m, const Scaler& s) {
        m = (m.colwise() - s.mean).array().colwise() / s.std.array();
    };
    standardize(x_train, model.input_scaler);
    standardize(q_train, model.output_scaler);
    if (n_val > 0) {
        standardize(x_val, model.input_scaler);
        standardize(q_val, model.output_scaler);
    }

    TrainingReport& report = result.report;
    report.train_size = n_train;
    report.val_size = n_val;

    Adam adam(model.params, settings.beta1, settings.beta2, settings.epsilon);
    std::vector<std::size_t> perm(n_train);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    const auto bs = static_cast<std::size_t>(settings.batch_size);
    Eigen::MatrixXd xb, qb;

    for (int epoch = 0; epoch < settings.epochs; ++epoch) {
        const double lr = learning_rate(settings, epoch);
        rng.shuffle(perm);
        double loss_sum = 0.0;
        int batch_index = 0;
        for (std::size_t start = 0; start < n_train; start += bs, ++batch_index) {
            const std::size_t m = std::min(bs, n_train - start);
            xb.resize(3, static_cast<Eigen::Index>(m));
            qb.resize(dof, static_cast<Eigen::Index>(m));
            for (std::size_t i = 0; i < m; ++i) {
                xb.col(static_cast<Eigen::Index>(i)) = x_train.col(static_cast<Eigen::Index>(perm[start + i]));
                qb.col(static_cast<Eigen::Index>(i)) = q_train.col(static_cast<Eigen::Index>(perm[start + i]));
            }
            BatchGradient g = batch_gradient(model, xb, qb);
            if (!std::isfinite(g.loss) || !all_finite(g.grad)) {
                report.diverged = true;
                report.message = DivergenceError("non-finite loss or gradient", epoch, batch_index).what();
                return result;
            }
            loss_sum += g.loss * static_cast<double>(m);
            adam.step(model.params, g.grad, lr);
        }
        EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(n_train),
                        n_val > 0 ? batch_nll(model, x_val, q_val) : std::nan("")};
        report.epochs.push_back(rec);
        if (on_epoch) on_epoch(rec, user);
    }
    return result;
}

std::string report_csv(const TrainingReport& report) {
    std::string out = "epoch,lr,train_nll,val_nll\n";
    for (const auto& r : report.epochs) {
        out += std::to_string(r.epoch) + "," + format_double(r.lr) + "," + format_double(r.train_nll) + "," +
               (std::isnan(r.val_nll) ? std::string("nan") : format_double(r.val_nll)) + "\n";
    }
    return out;
}

}  // namespace mdnik
