#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdnik/kinematics.hpp"
#include "mdnik/rng.hpp"

namespace mdnik {

// Added to every softplus output (scaled space) so the likelihood stays
// bounded on duplicated targets.
inline constexpr double kSigmaFloor = 1e-4;

struct MdnConfig {
    int input_dim = 3;
    int hidden_layers = 3;
    int hidden_width = 128;
    int components = 5;
    int output_dim = 0;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DenseLayer {
    Eigen::MatrixXd weight;  // out x in
    Eigen::VectorXd bias;
};

// Trunk plus the three heads. The same shape doubles as a gradient container.
struct MdnParameters {
    std::vector<DenseLayer> trunk;
    DenseLayer logits;
    DenseLayer means;       // (K * dof) rows, component-major
    DenseLayer deviations;  // pre-softplus, same layout as means

    static MdnParameters zeros_like(const MdnParameters& other);

    // Every weight and bias in a fixed order.
    std::vector<std::span<double>> tensors();
    std::vector<std::span<const double>> tensors() const;
    std::size_t size() const;
};

// Per-dimension standardization (x - mean) / std.
struct Scaler {
    Eigen::VectorXd mean;
    Eigen::VectorXd std;

    static Scaler identity(int dim);
    // Columns are samples. Dimensions with zero spread get std = 1.
    static Scaler fit(const Eigen::MatrixXd& data);

    Eigen::VectorXd apply(const Eigen::VectorXd& v) const { return (v - mean).cwiseQuotient(std); }
    Eigen::VectorXd invert(const Eigen::VectorXd& v) const { return v.cwiseProduct(std) + mean; }
};

struct MdnModel {
    MdnConfig config;
    MdnParameters params;
    Scaler input_scaler;
    Scaler output_scaler;
    std::string chain_fingerprint;

    int components() const { return config.components; }
    int dof() const { return config.output_dim; }
};

// Fan-in uniform trunk and mean head, zero logits head, deviation head biased
// so every initial sigma is 1 in scaled space. Scalers start as identity.
MdnModel init_model(const MdnConfig& config);

struct MixturePrediction {
    Eigen::VectorXd weights;  // K
    Eigen::MatrixXd means;    // K x dof
    Eigen::MatrixXd stds;     // K x dof
};

// Mixture over raw joint values (radians / meters).
MixturePrediction forward(const MdnModel& model, const Eigen::Vector3d& x);
// Same mixture before the output scaler is undone.
MixturePrediction forward_scaled(const MdnModel& model, const Eigen::Vector3d& x);

// -log sum_k w_k N(q | mu_k, diag(sigma_k^2)), via log-sum-exp.
double nll_loss(const MixturePrediction& pred, const Eigen::VectorXd& q_true);

// Training loss for one sample: nll_loss in the scaled output space.
double sample_nll(const MdnModel& model, const Eigen::Vector3d& x, const JointConfig& q_true);

// Index of the largest weight, lowest index on ties.
std::size_t highest_mode(const Eigen::VectorXd& weights);

// Mean of the highest-weight component.
JointConfig predict_config(const MdnModel& model, const Eigen::Vector3d& x);

struct BatchGradient {
    MdnParameters grad;  // of the mean loss
    double loss = 0.0;   // mean over the batch
};

// Samples per work unit of the parallel gradient kernel. Partial sums are
// formed per chunk and reduced in chunk order, so the result is the same for
// any thread count.
inline constexpr Eigen::Index kGradientChunk = 64;

// Batched backprop over scaled inputs (3 x n) and scaled targets (dof x n).
// OpenMP-parallel over chunks of kGradientChunk columns.
BatchGradient batch_gradient(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets);

// Mean loss only, same chunking as batch_gradient.
double batch_nll(const MdnModel& model, const Eigen::MatrixXd& inputs, const Eigen::MatrixXd& targets);

// Convenience wrapper taking raw samples; applies the model's scalers.
// Throws DivergenceError on a non-finite loss.
BatchGradient gradients(const MdnModel& model, std::span<const IkSample> batch);

struct TrainSettings {
    int epochs = 1000;
    int batch_size = 256;
    double initial_lr = 1e-2;
    double lr_decay = 0.90;
    int decay_every = 100;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double split_fraction = 0.9;
    std::uint64_t seed = 0;

    void validate(std::size_t dataset_size) const;
};

// Step schedule: initial_lr * lr_decay^floor(epoch / decay_every), epoch from 0.
double learning_rate(const TrainSettings& settings, int epoch);

struct EpochRecord {
    int epoch = 0;
    double lr = 0.0;
    double train_nll = 0.0;
    double val_nll = 0.0;
};

struct TrainingReport {
    std::vector<EpochRecord> epochs;
    std::size_t train_size = 0;
    std::size_t val_size = 0;
    bool diverged = false;
    std::string message;
};

struct TrainResult {
    MdnModel model;
    TrainingReport report;
};

class Adam {
  public:
    Adam(const MdnParameters& shape, double beta1, double beta2, double epsilon);
    void step(MdnParameters& params, const MdnParameters& grad, double lr);
    long steps() const { return t_; }

  private:
    double beta1_, beta2_, epsilon_;
    long t_ = 0;
    std::vector<Eigen::VectorXd> m_, v_;
};

// Optional per-epoch callback (progress output from the CLI).
using EpochCallback = void (*)(const EpochRecord&, void*);

TrainResult train(const IkDataset& dataset, const TrainSettings& settings, MdnConfig architecture,
                  EpochCallback on_epoch = nullptr, void* user = nullptr);

// CSV "epoch,lr,train_nll,val_nll".
std::string report_csv(const TrainingReport& report);

inline constexpr int kModelFormatVersion = 1;

std::string model_to_json(const MdnModel& model);
MdnModel model_from_json(const std::string& text, std::optional<std::size_t> expected_dof = std::nullopt);
void save_model(const std::string& path, const MdnModel& model);
MdnModel load_model(const std::string& path, std::optional<std::size_t> expected_dof = std::nullopt);

}  // namespace mdnik
