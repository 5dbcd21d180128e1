#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fence/common.hpp"

namespace fence {

// ---------------------------------------------------------------------------
// Dependency kinds. Parameters are in raw units; predicates are evaluated on
// denormalized values so that relationships like avg = tot/num mean what they
// mean in the application domain.
// ---------------------------------------------------------------------------

/// x in [lo, hi]
struct RangeDep {
    int idx = -1;
    double lo = 0.0;
    double hi = 0.0;
};

/// numerator in [a * anchor, b * anchor]
struct RatioDep {
    int numerator = -1;
    int anchor = -1;
    double a = 0.0;
    double b = 0.0;
};

/// each member in {0,1}, exactly one hot
struct OheDep {
    std::vector<int> members;
};

/// min <= avg <= max over the raw events behind the family; avg = tot/num
/// when both are tracked as features. num is either a feature index or the
/// sum of several count features. A count of one forces min == avg == max.
struct StatDep {
    int min_idx = -1;
    int max_idx = -1;
    int avg_idx = -1;  // -1 when the family has no explicit average feature
    int tot_idx = -1;  // -1 when no explicit total feature
    int num_idx = -1;
    std::vector<int> num_sum;  // used instead of num_idx when non-empty
};

/// sum_i w_i * x_i = constant
struct LinDep {
    std::vector<int> members;
    std::vector<double> weights;
    double constant = 0.0;
};

/// x_i = x_j / x_k. The denominator is either one feature or the sum of
/// several count features. When unit_gate >= 0 the predicate only applies
/// while that feature equals 1 (per-entity averages collapse to the plain
/// quotient only in the single-entity case).
struct NonLinDep {
    int i_idx = -1;
    int j_idx = -1;
    int k_idx = -1;
    std::vector<int> k_sum;
    int unit_gate = -1;
};

struct DependencyKind;

/// Ordered conjunction of kinds; sub-updates apply in declared order.
struct CompositeDep {
    std::vector<DependencyKind> parts;
};

struct DependencyKind {
    std::variant<RangeDep, RatioDep, OheDep, StatDep, LinDep, NonLinDep, CompositeDep> node;
};

/// A group of features that must be updated together, driven by one
/// representative. Members may include immutable anchor features.
struct DependencyFamily {
    std::string id;
    std::vector<int> members;
    int representative = -1;
    DependencyKind kind;
};

struct FeatureDef {
    std::string name;
    double lo = -std::numeric_limits<double>::infinity();  // physical bounds, raw units
    double hi = std::numeric_limits<double>::infinity();
    bool is_mutable = false;
    bool monotone_up = false;  // value may only grow relative to the start point
    bool integral = false;
};

struct Violation {
    std::string family_id;  // empty for per-feature checks
    std::string constraint;
    double observed = 0.0;
    double bound = 0.0;
};

struct FeasibilityReport {
    bool feasible = true;
    std::vector<Violation> violations;
    double tolerance = 0.0;
};

constexpr double kFeasibilityTol = 1e-6;

// ---------------------------------------------------------------------------
// Update building blocks (Ratio, Range, OHE, NonLin, Stat, Lin). All are
// total functions except where documented; vector-level updates convert to
// raw units through the supplied normalizer.
// ---------------------------------------------------------------------------

/// Gradient step on x clamped into the band [a*anchor, b*anchor].
double update_ratio(double x, double anchor, double grad, double alpha, double a, double b);

struct RangeResult {
    double value = 0.0;
    double delta = 0.0;  // |value - input|
};

/// Clamp into [a, b]; also reports how far the input was moved.
RangeResult update_range(double x, double a, double b);

/// Moves the hot slot to the member with the steepest negative gradient;
/// ties keep the current slot. Throws DataError when the block is not
/// one-hot on entry.
void update_ohe(Vec& x, const Vec& grad, const std::vector<int>& members, double tol = kFeasibilityTol);

/// Gradient step on x_j followed by x_i = x_j / x_k (raw units). Throws
/// NumericError when the denominator is zero.
void update_nonlin(Vec& x, const Vec& grad, double alpha, const NonLinDep& dep, const Normalizer& norm);

/// avg = tot/num; min/max absorb the new raw event value v. A zero count
/// is the empty-family base case: min, max (and avg when tracked) are
/// seeded from v.
void update_stat(Vec& x, double v_raw, const StatDep& dep, const Normalizer& norm);

/// As above, but the empty base case is decided by prior_count rather than
/// the count feature (which may already include the events being added).
void update_stat(Vec& x, double v_raw, const StatDep& dep, const Normalizer& norm,
                 std::optional<double> prior_count);

/// Rescales non-pinned members by a common factor so the weighted sum hits
/// the constant; distributes the residual uniformly when the non-pinned
/// weighted sum is zero. Throws DataError when everything is pinned and the
/// constraint does not already hold.
void update_lin(Vec& x, const LinDep& dep, const std::vector<int>& pinned, const Normalizer& norm);

/// Radial projection onto the L2 ball of radius d_max around x0.
Vec project_l2(const Vec& x0, const Vec& x, double d_max);

// ---------------------------------------------------------------------------

class ConstraintSet {
public:
    /// Validates on construction: family members disjoint, representative a
    /// member (and mutable when any member is), range parameters ordered.
    /// Violations are construction-time errors, never silent state.
    ConstraintSet(std::string schema_id, std::vector<FeatureDef> features,
                  std::vector<DependencyFamily> families, Normalizer norm);

    const std::string& schema_id() const { return schema_id_; }
    size_t dim() const { return features_.size(); }
    const Normalizer& normalizer() const { return norm_; }
    const std::vector<FeatureDef>& features() const { return features_; }
    const std::vector<DependencyFamily>& families() const { return families_; }

    /// Family owning a feature, nullptr for independent features.
    const DependencyFamily* family_of(int idx) const;

    /// F_S: indices the attack may modify.
    std::vector<int> mutable_indices() const;

    /// i is in F_D: mutable and owned by a family.
    bool is_dependent(int idx) const;

    /// Evaluates every family predicate plus per-feature physical ranges and
    /// integrality on the normalized vector x. When x0 is given, monotone
    /// features are also checked against it and immutable features must be
    /// unchanged. Equalities hold to tol in normalized units, or relatively
    /// when the reference value exceeds 1 in magnitude.
    FeasibilityReport check_feasible(const Vec& x, double tol = kFeasibilityTol,
                                     const Vec* x0 = nullptr) const;

    void save(std::ostream& os) const;
    static ConstraintSet load(std::istream& is, const Normalizer& norm);

private:
    std::string schema_id_;
    std::vector<FeatureDef> features_;
    std::vector<DependencyFamily> families_;
    Normalizer norm_;
    std::vector<int> family_index_of_;  // -1 for independent features
};

}  // namespace fence
