#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fence/constraints.hpp"
#include "fence/nn.hpp"

namespace fence {

struct AttackConfig {
    double d_max = 10.0;            // L2 budget in normalized space
    size_t max_iterations = 100;    // M
    double alpha = 1.0;             // gradient step size
    int target_class = 0;           // t (the class the attacker wants)
    double threshold = 0.5;         // decision threshold of the victim
    size_t binary_search_depth = 20;
    uint64_t seed = 0;              // drives the baseline randomness
    bool allow_revisit = false;     // keep features in F_S after a visit
    size_t penalty_steps = 1000;    // gradient steps for the unconstrained attack
    bool record_trace = false;
};

/// Application callbacks for family updates and the raw projection. The
/// object behind these functions owns per-attack state (event logs,
/// per-entity decompositions); the engine only commits accepted updates.
struct FamilyHooks {
    /// Prepares one family visit; may add raw events and mutate x
    /// accordingly. Returns the number of events added, 0 when the family
    /// cannot be used (x must then be left unchanged).
    std::function<int(Vec& x, const Vec& grad, int rep_idx, const DependencyFamily&)> init_family;

    /// Applies the family's constrained update after the representative
    /// step. Returns the updated vector, or nullopt when the feasible band
    /// is empty (family-unusable).
    std::function<std::optional<Vec>(int s, const Vec& x, const Vec& grad,
                                     const DependencyFamily&)> update_dep;

    /// Optional: pick the representative for this visit (defaults to the
    /// family's declared representative).
    std::function<int(const Vec& x, const Vec& grad, const DependencyFamily&)> choose_representative;

    /// Called once the binary search accepts a family update; the hook
    /// state behind the visit becomes permanent here.
    std::function<void(const Vec& accepted, const DependencyFamily&, int s)> commit;

    /// Maps the final adversarial point to raw records, serialized.
    std::function<std::string(const Vec& x_star)> project_to_raw;

    /// Re-derives every family's dependent features from its representative
    /// (post-processing repair); must return a feasible point.
    std::function<Vec(const Vec& x, const Vec& x0)> repair;
};

struct AttackOutcome {
    bool success = false;
    std::optional<Vec> adversarial;           // present only on success
    Vec final_point;                          // last iterate regardless of outcome
    size_t iterations = 0;
    double distance = 0.0;                    // ||final - x0||2
    double max_iteration_distance = 0.0;      // largest ||x^m - x0||2 seen at any iterate
    double final_logit = 0.0;
    std::map<std::string, int> families_touched;  // family id -> accepted visits
    std::map<int, int> update_histogram;          // feature index -> update events
    std::vector<int> update_events;               // chronological updated features
    std::string raw_artifact;                     // serialized raw records when projected
    std::vector<std::string> trace;               // optional per-iteration log lines
};

/// The constrained iterative attack: pick the admissible feature of maximum
/// absolute gradient, update it through its dependency family (or step it
/// independently inside the L2 ball), until the prediction flips or the
/// budget runs out.
AttackOutcome fence_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                           FamilyHooks& hooks, const AttackObjective& obj,
                           const AttackConfig& cfg);

/// Same loop with the feature chosen uniformly at random among admissible
/// candidates.
AttackOutcome baseline1_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                               FamilyHooks& hooks, const AttackObjective& obj,
                               const AttackConfig& cfg);

/// Random feature and the signed step magnitude drawn from N(0,1).
AttackOutcome baseline2_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                               FamilyHooks& hooks, const AttackObjective& obj,
                               const AttackConfig& cfg);

/// Plain gradient descent on ||delta||2 + c * max(0, Z1) over all mutable
/// features with only a per-feature box; no dependency enforcement. Keeps
/// the classifier-fooling iterate of smallest norm.
AttackOutcome penalty_unconstrained_attack(const DenseNetwork& net, const Vec& x0,
                                           const ConstraintSet& cs, const AttackConfig& cfg,
                                           double c);

/// Runs the unconstrained penalty attack, then repairs each family by
/// keeping its representative and re-deriving the dependents. Succeeds only
/// if the repaired point is still misclassified and feasible.
AttackOutcome postprocess_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                                 FamilyHooks& hooks, const AttackConfig& cfg, double c);

}  // namespace fence
