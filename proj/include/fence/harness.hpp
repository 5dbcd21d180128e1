#pragma once

#include <memory>
#include <string>
#include <vector>

#include "fence/attack.hpp"
#include "fence/domain.hpp"
#include "fence/netflow.hpp"
#include "fence/nn.hpp"

namespace fence {

struct ExperimentConfig {
    std::string app = "domain";  // domain | netflow-raw | netflow-engineered
    uint64_t seed = 7;
    std::string out_dir = "out";

    std::vector<size_t> hidden;  // filled per app by defaults_for
    TrainConfig train;

    // domain data sizes
    int imbalance = 1;
    int malicious_train = 1230;
    int malicious_test = 500;
    int benign_test = 500;

    // netflow data sizes
    size_t benign_sources = 90;
    size_t botnet_sources = 30;
    size_t train_windows = 10;
    size_t test_windows = 5;

    // attack grid
    std::string attack = "fence";
    std::string objective = "projected";
    std::vector<double> dmax_grid = {2, 4, 6, 8, 10, 12, 14, 16, 18, 20};
    double alpha = 2.0;
    double penalty_alpha = 0.05;
    size_t max_iterations = 100;
    size_t binary_search_depth = 20;
    size_t penalty_steps = 1000;
    double threshold = 0.5;
    std::vector<double> penalty_c;  // default 0.05 .. 1.0 step 0.05
    size_t max_starts = 0;          // 0 = every correctly classified malicious test point
    int conn_add_count = 12;

    std::vector<int> imbalance_ratios = {1, 5, 15, 25, 50};

    double advtrain_dmax = 20.0;
    size_t advtrain_epochs = 0;  // 0 = reuse train.epochs

    static ExperimentConfig defaults_for(const std::string& app);
    static ExperimentConfig load(const std::string& app, const std::string& config_path);
};

/// One attack session: the hook bundle plus the owner keeping its state
/// alive, with typed access for the raw-projection checks.
struct HookSession {
    std::shared_ptr<void> owner;
    FamilyHooks hooks;
    std::function<std::vector<ConnRecord>()> emitted;  // engineered app only
};

/// Everything one application benchmark needs: data splits, normalization,
/// constraints, architecture and a per-start hook factory.
struct AppBundle {
    std::string app;
    std::vector<std::string> feature_names;
    std::vector<Vec> train_x;  // normalized
    std::vector<int> train_y;
    std::vector<Vec> test_x;  // normalized
    std::vector<int> test_y;
    Normalizer norm;
    std::shared_ptr<ConstraintSet> cs;
    std::vector<size_t> hidden;

    std::function<HookSession(const Vec& x0_norm, size_t test_index)> make_hooks;

    // engineered app: per-test-point window identity and original records
    std::vector<WindowKey> test_keys;
    std::shared_ptr<std::vector<ConnRecord>> test_records;
    std::shared_ptr<EngineeredSchema> eng_schema;
    std::shared_ptr<RawSchema> raw_schema;
    std::shared_ptr<DomainSchema> domain_schema;
};

AppBundle build_app(const ExperimentConfig& cfg);
AppBundle build_app(const ExperimentConfig& cfg, int imbalance_ratio);

Checkpoint train_model(const AppBundle& bundle, const ExperimentConfig& cfg);

/// Indices of malicious test points the model classifies correctly, capped
/// at cfg.max_starts.
std::vector<size_t> attack_start_indices(const AppBundle& bundle, const DenseNetwork& net,
                                         const ExperimentConfig& cfg);

AttackConfig attack_config_for(const ExperimentConfig& cfg, double d_max, uint64_t start_salt);

/// Dispatch by attack name; penalty-style attacks sweep cs and keep the
/// best outcome.
AttackOutcome run_attack(const std::string& attack, const DenseNetwork& net, const Vec& x0,
                         const ConstraintSet& cs, FamilyHooks& hooks, const ExperimentConfig& cfg,
                         double d_max, uint64_t start_salt);

// CLI commands; each writes its report files under cfg.out_dir and returns
// a process exit code.
int cmd_train(const ExperimentConfig& cfg);
int cmd_attack(const ExperimentConfig& cfg, const std::string& checkpoint_path);
int cmd_roc(const ExperimentConfig& cfg, const std::string& checkpoint_path,
            const std::string& outcomes_dir);
int cmd_imbalance(const ExperimentConfig& cfg);
int cmd_transfer(const ExperimentConfig& cfg, const std::string& source_checkpoint,
                 const std::vector<std::string>& target_checkpoints,
                 const std::string& outcomes_dir);
int cmd_advtrain(const ExperimentConfig& cfg);
int cmd_report(const ExperimentConfig& cfg, const std::vector<std::string>& outcome_files);

/// Full command-line entry point (used by the binary and the tests).
/// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric.
int run_cli(const std::vector<std::string>& args);

}  // namespace fence
