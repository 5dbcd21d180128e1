#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "fence/common.hpp"

namespace fence {

enum class Activation { Relu, Sigmoid, Identity };

const char* activation_name(Activation a);
Activation activation_from_name(const std::string& name);

struct Layer {
    size_t in_dim = 0;
    size_t out_dim = 0;
    Vec weights;  // row-major [out_dim x in_dim]
    Vec biases;   // [out_dim]
    Activation act = Activation::Identity;

    double weight(size_t row, size_t col) const { return weights[row * in_dim + col]; }
    double& weight(size_t row, size_t col) { return weights[row * in_dim + col]; }
};

/// Feed-forward binary classifier. The last layer has a single output unit
/// whose pre-sigmoid value is the malicious-class logit.
struct DenseNetwork {
    std::string schema_id;
    size_t input_dim = 0;
    std::vector<Layer> layers;

    /// Throws SchemaError when layer dimensions do not chain or the final
    /// layer is not a single unit.
    void validate() const;

    size_t parameter_count() const;

    /// Hidden layers ReLU, output layer sigmoid. Weights uniform in
    /// +-sqrt(6/(in+out)), biases zero, seeded.
    static DenseNetwork make(size_t input_dim, const std::vector<size_t>& hidden,
                             uint64_t seed, std::string schema_id = "");
};

/// Zero-hidden-layer degenerate case: a single sigmoid unit.
DenseNetwork make_logistic_regression(size_t input_dim, uint64_t seed,
                                      std::string schema_id = "");

/// Pre-sigmoid malicious-class logit.
double forward_logit(const DenseNetwork& net, const Vec& x);

/// sigmoid(logit); the malicious-class probability.
double predict_probability(const DenseNetwork& net, const Vec& x);

/// 1 iff probability >= threshold (tie counts as malicious).
int predict(const DenseNetwork& net, const Vec& x, double threshold = 0.5);

/// What the attack minimizes: either the logit directly (subject to an L2
/// ball handled by the attack loop), or the distance-plus-hinge penalty.
struct AttackObjective {
    enum class Kind { Projected, Penalty };
    Kind kind = Kind::Projected;
    double penalty_weight = 0.5;  // c, only meaningful for Penalty

    static AttackObjective projected() { return {Kind::Projected, 0.0}; }
    static AttackObjective penalty(double c) { return {Kind::Penalty, c}; }
};

/// Objective value at x. For Penalty, x0 is the unperturbed start point.
double objective_value(const DenseNetwork& net, const Vec& x,
                       const AttackObjective& obj, const Vec* x0 = nullptr);

/// Exact reverse-mode gradient of the objective with respect to the input.
/// The hinge max(0, Z1) contributes zero gradient where Z1 < 0, and the
/// norm term 0 at x == x0 (subgradient convention).
Vec input_gradient(const DenseNetwork& net, const Vec& x,
                   const AttackObjective& obj, const Vec* x0 = nullptr);

struct TrainConfig {
    size_t epochs = 50;
    size_t batch_size = 64;
    double learning_rate = 1e-3;
    enum class Optimizer { Adam, Sgd } optimizer = Optimizer::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    uint64_t seed = 1;
};

struct TrainMetrics {
    std::vector<double> loss_curve;  // mean BCE per epoch
    double accuracy = 0.0;           // on the training set
    double f1 = 0.0;                 // class-1 F1 on the training set
};

/// Mini-batch training on mean binary cross-entropy. Deterministic for a
/// fixed seed (fixed shuffle order). Throws DataError on an empty dataset
/// and NumericError (naming the epoch) when the loss goes non-finite.
TrainMetrics train(DenseNetwork& net, const std::vector<Vec>& inputs,
                   const std::vector<int>& labels, const TrainConfig& cfg);

/// Called before each epoch with a fresh copy of the training set; may
/// append or replace examples (adversarial training hooks in here).
using EpochAugmenter = std::function<void(size_t epoch, const DenseNetwork& net,
                                          std::vector<Vec>& inputs, std::vector<int>& labels)>;

TrainMetrics train(DenseNetwork& net, const std::vector<Vec>& inputs,
                   const std::vector<int>& labels, const TrainConfig& cfg,
                   const EpochAugmenter& augment);

/// Checkpoint container: layer shapes, activations, weights, biases,
/// normalization vectors and the schema id. Text format with hex floats so
/// save -> load -> save is byte-identical.
struct Checkpoint {
    DenseNetwork net;
    Normalizer norm;
    std::vector<std::string> feature_names;
};

void save_checkpoint(std::ostream& os, const Checkpoint& ck);
Checkpoint load_checkpoint(std::istream& is);
void save_checkpoint_file(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace fence
