#include "fence/nn.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace fence {

const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Sigmoid: return "sigmoid";
        case Activation::Identity: return "identity";
    }
    return "?";
}

Activation activation_from_name(const std::string& name) {
    if (name == "relu") return Activation::Relu;
    if (name == "sigmoid") return Activation::Sigmoid;
    if (name == "identity") return Activation::Identity;
    throw SchemaError("unknown activation: " + name);
}

void DenseNetwork::validate() const {
    if (layers.empty()) throw SchemaError("network has no layers");
    size_t prev = input_dim;
    for (size_t l = 0; l < layers.size(); ++l) {
        const Layer& ly = layers[l];
        if (ly.in_dim != prev)
            throw SchemaError("layer " + std::to_string(l) + " expects " +
                              std::to_string(ly.in_dim) + " inputs, got " + std::to_string(prev));
        if (ly.weights.size() != ly.in_dim * ly.out_dim || ly.biases.size() != ly.out_dim)
            throw SchemaError("layer " + std::to_string(l) + " parameter sizes inconsistent");
        prev = ly.out_dim;
    }
    if (layers.back().out_dim != 1)
        throw SchemaError("final layer must have a single output unit");
}

size_t DenseNetwork::parameter_count() const {
    size_t n = 0;
    for (const auto& ly : layers) n += ly.weights.size() + ly.biases.size();
    return n;
}

DenseNetwork DenseNetwork::make(size_t input_dim, const std::vector<size_t>& hidden,
                                uint64_t seed, std::string schema_id) {
    DenseNetwork net;
    net.schema_id = std::move(schema_id);
    net.input_dim = input_dim;
    std::mt19937_64 rng(seed);
    size_t prev = input_dim;
    std::vector<size_t> dims = hidden;
    dims.push_back(1);
    for (size_t l = 0; l < dims.size(); ++l) {
        Layer ly;
        ly.in_dim = prev;
        ly.out_dim = dims[l];
        ly.act = (l + 1 == dims.size()) ? Activation::Sigmoid : Activation::Relu;
        double limit = std::sqrt(6.0 / double(ly.in_dim + ly.out_dim));
        std::uniform_real_distribution<double> dist(-limit, limit);
        ly.weights.resize(ly.in_dim * ly.out_dim);
        for (auto& w : ly.weights) w = dist(rng);
        ly.biases.assign(ly.out_dim, 0.0);
        net.layers.push_back(std::move(ly));
        prev = dims[l];
    }
    net.validate();
    return net;
}

DenseNetwork make_logistic_regression(size_t input_dim, uint64_t seed, std::string schema_id) {
    return DenseNetwork::make(input_dim, {}, seed, std::move(schema_id));
}

namespace {

void check_input(const DenseNetwork& net, const Vec& x) {
    if (x.size() != net.input_dim)
        throw SchemaError("input has " + std::to_string(x.size()) + " features, model expects " +
                          std::to_string(net.input_dim));
}

struct ForwardTrace {
    std::vector<Vec> pre;  // pre-activation per layer
    std::vector<Vec> act;  // post-activation per layer; act[0] is the input
};

double apply_activation(Activation a, double z) {
    switch (a) {
        case Activation::Relu: return z > 0.0 ? z : 0.0;
        case Activation::Sigmoid: return sigmoid(z);
        case Activation::Identity: return z;
    }
    return z;
}

double activation_grad(Activation a, double z) {
    switch (a) {
        case Activation::Relu: return z > 0.0 ? 1.0 : 0.0;
        case Activation::Sigmoid: {
            double s = sigmoid(z);
            return s * (1.0 - s);
        }
        case Activation::Identity: return 1.0;
    }
    return 1.0;
}

/// Runs the network forward, keeping every pre-activation; the final
/// layer's pre-activation is the logit.
ForwardTrace forward_trace(const DenseNetwork& net, const Vec& x) {
    ForwardTrace tr;
    tr.act.push_back(x);
    for (const Layer& ly : net.layers) {
        const Vec& in = tr.act.back();
        Vec z(ly.out_dim, 0.0);
        for (size_t r = 0; r < ly.out_dim; ++r) {
            double s = ly.biases[r];
            const double* wrow = ly.weights.data() + r * ly.in_dim;
            for (size_t c = 0; c < ly.in_dim; ++c) s += wrow[c] * in[c];
            z[r] = s;
        }
        tr.pre.push_back(z);
        Vec a(ly.out_dim);
        for (size_t r = 0; r < ly.out_dim; ++r) a[r] = apply_activation(ly.act, z[r]);
        tr.act.push_back(std::move(a));
    }
    return tr;
}

/// Backpropagates d(logit)/d(input) given a forward trace. The sigmoid on
/// the final unit is skipped: the seed gradient applies to the logit.
Vec logit_input_gradient(const DenseNetwork& net, const ForwardTrace& tr) {
    Vec delta = {1.0};  // w.r.t. the final pre-activation
    for (size_t l = net.layers.size(); l-- > 0;) {
        const Layer& ly = net.layers[l];
        if (l + 1 != net.layers.size()) {
            for (size_t r = 0; r < ly.out_dim; ++r)
                delta[r] *= activation_grad(ly.act, tr.pre[l][r]);
        }
        Vec prev(ly.in_dim, 0.0);
        for (size_t r = 0; r < ly.out_dim; ++r) {
            const double* wrow = ly.weights.data() + r * ly.in_dim;
            for (size_t c = 0; c < ly.in_dim; ++c) prev[c] += wrow[c] * delta[r];
        }
        delta = std::move(prev);
    }
    return delta;
}

}  // namespace

double forward_logit(const DenseNetwork& net, const Vec& x) {
    check_input(net, x);
    Vec cur = x;
    for (size_t l = 0; l < net.layers.size(); ++l) {
        const Layer& ly = net.layers[l];
        Vec next(ly.out_dim);
        for (size_t r = 0; r < ly.out_dim; ++r) {
            double s = ly.biases[r];
            const double* wrow = ly.weights.data() + r * ly.in_dim;
            for (size_t c = 0; c < ly.in_dim; ++c) s += wrow[c] * cur[c];
            next[r] = (l + 1 == net.layers.size()) ? s : apply_activation(ly.act, s);
        }
        cur = std::move(next);
    }
    return cur[0];
}

double predict_probability(const DenseNetwork& net, const Vec& x) {
    return sigmoid(forward_logit(net, x));
}

int predict(const DenseNetwork& net, const Vec& x, double threshold) {
    return predict_probability(net, x) >= threshold ? 1 : 0;
}

double objective_value(const DenseNetwork& net, const Vec& x,
                       const AttackObjective& obj, const Vec* x0) {
    double z = forward_logit(net, x);
    if (obj.kind == AttackObjective::Kind::Projected) return z;
    if (!x0) throw SchemaError("penalty objective requires the start point");
    return l2_distance(x, *x0) + obj.penalty_weight * std::max(0.0, z);
}

Vec input_gradient(const DenseNetwork& net, const Vec& x,
                   const AttackObjective& obj, const Vec* x0) {
    check_input(net, x);
    ForwardTrace tr = forward_trace(net, x);
    double logit = tr.pre.back()[0];
    Vec g = logit_input_gradient(net, tr);
    if (obj.kind == AttackObjective::Kind::Projected) return g;

    if (!x0) throw SchemaError("penalty objective requires the start point");
    double hinge = logit > 0.0 ? obj.penalty_weight : 0.0;
    double dist = l2_distance(x, *x0);
    for (size_t i = 0; i < g.size(); ++i) {
        double norm_term = dist > 1e-12 ? (x[i] - (*x0)[i]) / dist : 0.0;
        g[i] = norm_term + hinge * g[i];
    }
    return g;
}

namespace {

struct ParamGrads {
    std::vector<Vec> dw;
    std::vector<Vec> db;
};

ParamGrads zero_grads(const DenseNetwork& net) {
    ParamGrads g;
    for (const auto& ly : net.layers) {
        g.dw.emplace_back(ly.weights.size(), 0.0);
        g.db.emplace_back(ly.biases.size(), 0.0);
    }
    return g;
}

/// Accumulates dLoss/dparams for one example into g; returns the example loss.
double backprop_example(const DenseNetwork& net, const Vec& x, int y, ParamGrads& g) {
    ForwardTrace tr = forward_trace(net, x);
    double z = tr.pre.back()[0];
    // numerically stable BCE with logits
    double loss = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
    Vec delta = {sigmoid(z) - double(y)};  // dLoss/dz at the output unit
    for (size_t l = net.layers.size(); l-- > 0;) {
        const Layer& ly = net.layers[l];
        if (l + 1 != net.layers.size()) {
            for (size_t r = 0; r < ly.out_dim; ++r)
                delta[r] *= activation_grad(ly.act, tr.pre[l][r]);
        }
        const Vec& in = tr.act[l];
        for (size_t r = 0; r < ly.out_dim; ++r) {
            double d = delta[r];
            double* gw = g.dw[l].data() + r * ly.in_dim;
            for (size_t c = 0; c < ly.in_dim; ++c) gw[c] += d * in[c];
            g.db[l][r] += d;
        }
        if (l == 0) break;
        Vec prev(ly.in_dim, 0.0);
        for (size_t r = 0; r < ly.out_dim; ++r) {
            const double* wrow = ly.weights.data() + r * ly.in_dim;
            for (size_t c = 0; c < ly.in_dim; ++c) prev[c] += wrow[c] * delta[r];
        }
        delta = std::move(prev);
    }
    return loss;
}

}  // namespace

TrainMetrics train(DenseNetwork& net, const std::vector<Vec>& inputs,
                   const std::vector<int>& labels, const TrainConfig& cfg) {
    return train(net, inputs, labels, cfg, EpochAugmenter{});
}

TrainMetrics train(DenseNetwork& net, const std::vector<Vec>& inputs,
                   const std::vector<int>& labels, const TrainConfig& cfg,
                   const EpochAugmenter& augment) {
    net.validate();
    if (inputs.empty()) throw DataError("train: empty dataset");
    if (inputs.size() != labels.size()) throw DataError("train: inputs/labels size mismatch");
    if (cfg.batch_size < 1) throw DataError("train: batch_size must be >= 1");
    if (cfg.learning_rate <= 0) throw DataError("train: learning_rate must be > 0");
    for (const auto& x : inputs) check_input(net, x);
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError("train: labels must be 0 or 1");

    const bool adam = cfg.optimizer == TrainConfig::Optimizer::Adam;
    ParamGrads m = zero_grads(net), v = zero_grads(net);
    size_t adam_t = 0;

    std::mt19937_64 rng(cfg.seed);

    TrainMetrics metrics;
    std::vector<Vec> work_x;
    std::vector<int> work_y;
    for (size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<Vec>* xs = &inputs;
        const std::vector<int>* ys = &labels;
        if (augment) {
            work_x = inputs;
            work_y = labels;
            augment(epoch, net, work_x, work_y);
            if (work_x.size() != work_y.size())
                throw DataError("train: augmenter broke inputs/labels pairing");
            xs = &work_x;
            ys = &work_y;
        }
        std::vector<size_t> order(xs->size());
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t end = std::min(order.size(), start + cfg.batch_size);
            ParamGrads g = zero_grads(net);
            double batch_loss = 0.0;
            for (size_t k = start; k < end; ++k)
                batch_loss += backprop_example(net, (*xs)[order[k]], (*ys)[order[k]], g);
            double inv = 1.0 / double(end - start);
            epoch_loss += batch_loss;
            ++adam_t;
            for (size_t l = 0; l < net.layers.size(); ++l) {
                auto step = [&](Vec& params, Vec& grads, Vec& ml, Vec& vl) {
                    for (size_t i = 0; i < params.size(); ++i) {
                        double gi = grads[i] * inv;
                        if (adam) {
                            ml[i] = cfg.beta1 * ml[i] + (1.0 - cfg.beta1) * gi;
                            vl[i] = cfg.beta2 * vl[i] + (1.0 - cfg.beta2) * gi * gi;
                            double mh = ml[i] / (1.0 - std::pow(cfg.beta1, double(adam_t)));
                            double vh = vl[i] / (1.0 - std::pow(cfg.beta2, double(adam_t)));
                            params[i] -= cfg.learning_rate * mh / (std::sqrt(vh) + cfg.eps);
                        } else {
                            params[i] -= cfg.learning_rate * gi;
                        }
                    }
                };
                step(net.layers[l].weights, g.dw[l], m.dw[l], v.dw[l]);
                step(net.layers[l].biases, g.db[l], m.db[l], v.db[l]);
            }
        }
        epoch_loss /= double(xs->size());
        if (!std::isfinite(epoch_loss))
            throw NumericError("training diverged at epoch " + std::to_string(epoch + 1));
        metrics.loss_curve.push_back(epoch_loss);
    }

    // training-set accuracy and class-1 F1
    size_t correct = 0, tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < inputs.size(); ++i) {
        int p = predict(net, inputs[i], 0.5);
        if (p == labels[i]) ++correct;
        if (p == 1 && labels[i] == 1) ++tp;
        if (p == 1 && labels[i] == 0) ++fp;
        if (p == 0 && labels[i] == 1) ++fn;
    }
    metrics.accuracy = double(correct) / double(inputs.size());
    metrics.f1 = (2 * tp + fp + fn) > 0 ? 2.0 * double(tp) / double(2 * tp + fp + fn) : 0.0;
    return metrics;
}

void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
    ck.net.validate();
    if (ck.norm.dim() != ck.net.input_dim)
        throw SchemaError("checkpoint: normalizer dimension mismatch");
    os << "fence-model v1\n";
    os << "schema " << ck.net.schema_id << "\n";
    os << "input_dim " << ck.net.input_dim << "\n";
    os << "features " << ck.feature_names.size() << "\n";
    for (const auto& n : ck.feature_names) os << n << "\n";
    os << "normalizer\n";
    for (size_t i = 0; i < ck.norm.dim(); ++i)
        os << format_hexfloat(ck.norm.mins[i]) << " " << format_hexfloat(ck.norm.maxs[i]) << "\n";
    os << "layers " << ck.net.layers.size() << "\n";
    for (const auto& ly : ck.net.layers) {
        os << "layer " << ly.out_dim << " " << ly.in_dim << " " << activation_name(ly.act) << "\n";
        for (size_t r = 0; r < ly.out_dim; ++r) {
            for (size_t c = 0; c < ly.in_dim; ++c) {
                if (c) os << " ";
                os << format_hexfloat(ly.weight(r, c));
            }
            os << "\n";
        }
        for (size_t r = 0; r < ly.out_dim; ++r) {
            if (r) os << " ";
            os << format_hexfloat(ly.biases[r]);
        }
        os << "\n";
    }
}

namespace {

std::string expect_line(std::istream& is, const char* what) {
    std::string line;
    if (!std::getline(is, line)) throw SchemaError(std::string("checkpoint truncated before ") + what);
    return line;
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream iss(s);
    std::vector<std::string> out;
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

}  // namespace

Checkpoint load_checkpoint(std::istream& is) {
    Checkpoint ck;
    if (expect_line(is, "magic") != "fence-model v1")
        throw SchemaError("checkpoint: unsupported container version");
    {
        std::string line = expect_line(is, "schema");
        if (line.rfind("schema", 0) != 0) throw SchemaError("checkpoint: missing schema line");
        ck.net.schema_id = line.size() > 7 ? line.substr(7) : "";
    }
    auto dims = split_ws(expect_line(is, "input_dim"));
    if (dims.size() != 2 || dims[0] != "input_dim") throw SchemaError("checkpoint: bad input_dim");
    ck.net.input_dim = std::stoul(dims[1]);
    auto feats = split_ws(expect_line(is, "features"));
    if (feats.size() != 2 || feats[0] != "features") throw SchemaError("checkpoint: bad features");
    size_t n_feats = std::stoul(feats[1]);
    for (size_t i = 0; i < n_feats; ++i) ck.feature_names.push_back(expect_line(is, "feature name"));
    if (expect_line(is, "normalizer") != "normalizer") throw SchemaError("checkpoint: bad normalizer");
    for (size_t i = 0; i < ck.net.input_dim; ++i) {
        auto mm = split_ws(expect_line(is, "normalizer row"));
        if (mm.size() != 2) throw SchemaError("checkpoint: bad normalizer row");
        ck.norm.mins.push_back(parse_double(mm[0]));
        ck.norm.maxs.push_back(parse_double(mm[1]));
    }
    auto nl = split_ws(expect_line(is, "layers"));
    if (nl.size() != 2 || nl[0] != "layers") throw SchemaError("checkpoint: bad layers");
    size_t n_layers = std::stoul(nl[1]);
    for (size_t l = 0; l < n_layers; ++l) {
        auto hd = split_ws(expect_line(is, "layer header"));
        if (hd.size() != 4 || hd[0] != "layer") throw SchemaError("checkpoint: bad layer header");
        Layer ly;
        ly.out_dim = std::stoul(hd[1]);
        ly.in_dim = std::stoul(hd[2]);
        ly.act = activation_from_name(hd[3]);
        ly.weights.reserve(ly.in_dim * ly.out_dim);
        for (size_t r = 0; r < ly.out_dim; ++r) {
            auto row = split_ws(expect_line(is, "weight row"));
            if (row.size() != ly.in_dim) throw SchemaError("checkpoint: weight row length mismatch");
            for (const auto& t : row) ly.weights.push_back(parse_double(t));
        }
        auto brow = split_ws(expect_line(is, "bias row"));
        if (brow.size() != ly.out_dim) throw SchemaError("checkpoint: bias row length mismatch");
        for (const auto& t : brow) ly.biases.push_back(parse_double(t));
        ck.net.layers.push_back(std::move(ly));
    }
    ck.net.validate();
    return ck;
}

void save_checkpoint_file(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot write checkpoint: " + path);
    save_checkpoint(os, ck);
}

Checkpoint load_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot read checkpoint: " + path);
    return load_checkpoint(is);
}

}  // namespace fence
