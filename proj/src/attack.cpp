#include "fence/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace fence {

namespace {

enum class Selection { MaxGradient, Random, RandomWithNormalStep };

double sq(double v) { return v * v; }

/// Largest |x_i - x0_i| still inside the ball given the other coordinates.
double coordinate_headroom(const Vec& x, const Vec& x0, size_t i, double d_max) {
    double rest = 0.0;
    for (size_t j = 0; j < x.size(); ++j)
        if (j != i) rest += sq(x[j] - x0[j]);
    double room = sq(d_max) - rest;
    return room > 0.0 ? std::sqrt(room) : 0.0;
}

struct Engine {
    const DenseNetwork& net;
    const Vec& x0;
    const ConstraintSet& cs;
    FamilyHooks& hooks;
    const AttackObjective& obj;
    const AttackConfig& cfg;
    Selection selection;
    std::mt19937_64 rng;
    std::normal_distribution<double> normal{0.0, 1.0};

    AttackOutcome out;

    Engine(const DenseNetwork& n, const Vec& start, const ConstraintSet& c, FamilyHooks& h,
           const AttackObjective& o, const AttackConfig& cf, Selection sel)
        : net(n), x0(start), cs(c), hooks(h), obj(o), cfg(cf), selection(sel), rng(cf.seed) {}

    void record_update(int feature) {
        out.update_events.push_back(feature);
        out.update_histogram[feature]++;
    }

    void trace_line(size_t m, int feature, const std::string& family, double delta, double dist,
                    double logit) {
        if (!cfg.record_trace) return;
        std::ostringstream os;
        os << "iter=" << m << " feature=" << feature << " family=" << (family.empty() ? "-" : family)
           << " delta=" << format_double(delta) << " dist=" << format_double(dist)
           << " logit=" << format_double(logit);
        out.trace.push_back(os.str());
    }

    bool admissible(int i, const Vec& grad) const {
        const auto& f = cs.features()[size_t(i)];
        if (f.monotone_up) return grad[size_t(i)] < 0.0;  // steps subtract alpha*grad
        return grad[size_t(i)] != 0.0;
    }

    int pick_feature(const std::vector<char>& active, const Vec& grad) {
        std::vector<int> candidates;
        for (size_t i = 0; i < active.size(); ++i)
            if (active[i] && admissible(int(i), grad)) candidates.push_back(int(i));
        if (candidates.empty()) return -1;
        if (selection == Selection::MaxGradient) {
            int best = candidates.front();
            for (int i : candidates)
                if (std::abs(grad[size_t(i)]) > std::abs(grad[size_t(best)])) best = i;
            return best;
        }
        std::uniform_int_distribution<size_t> pick(0, candidates.size() - 1);
        return candidates[pick(rng)];
    }

    /// Independent feature step: gradient move, clamped to the fitted box,
    /// the monotone floor, the ball and (for integral features) the raw
    /// integer grid. Returns the moved value, or the current one when the
    /// feature cannot move.
    double step_independent(const Vec& x, int i, double step) {
        const auto& f = cs.features()[size_t(i)];
        const Normalizer& nm = cs.normalizer();
        double cur = x[size_t(i)];
        double cand = cur - step;

        // fitted box in normalized units, widened to include the start value
        double lo = std::min(0.0, x0[size_t(i)]);
        double hi = std::max(1.0, x0[size_t(i)]);
        // physical bounds
        lo = std::max(lo, nm.to_norm(size_t(i), f.lo));
        hi = std::min(hi, nm.to_norm(size_t(i), f.hi));
        if (f.monotone_up) lo = std::max(lo, cur);
        // exact ball clamp on this coordinate
        double head = coordinate_headroom(x, x0, size_t(i), cfg.d_max);
        lo = std::max(lo, x0[size_t(i)] - head);
        hi = std::min(hi, x0[size_t(i)] + head);
        if (lo > hi) return cur;
        cand = std::clamp(cand, lo, hi);

        if (f.integral) {
            double raw = nm.to_raw(size_t(i), cand);
            double lo_raw = nm.to_raw(size_t(i), lo);
            double hi_raw = nm.to_raw(size_t(i), hi);
            double snapped = std::round(raw);
            if (snapped < lo_raw) snapped = std::ceil(lo_raw - 1e-9);
            if (snapped > hi_raw) snapped = std::floor(hi_raw + 1e-9);
            if (snapped < lo_raw - 1e-9 || snapped > hi_raw + 1e-9) return cur;  // no integer fits
            cand = nm.to_norm(size_t(i), snapped);
        }
        return cand;
    }

    struct FamilyVisit {
        bool ok = false;
        Vec x;
        int rep = -1;
        double delta = 0.0;
    };

    /// The per-family binary search: step the representative, apply the
    /// dependency update, and halve the step until the result fits in the
    /// ball. Reverts fully when the depth is exhausted or the hook reports
    /// an empty band.
    FamilyVisit update_family(const Vec& x_cur, const Vec& grad, const DependencyFamily& fam) {
        FamilyVisit visit;
        Vec x_init = x_cur;
        int rep = hooks.choose_representative ? hooks.choose_representative(x_cur, grad, fam)
                                              : fam.representative;
        if (rep < 0) return visit;
        int s = hooks.init_family ? hooks.init_family(x_init, grad, rep, fam) : 1;
        if (s <= 0) return visit;

        // the applied representative step; halved on ball overshoot
        double delta = selection == Selection::RandomWithNormalStep
                           ? normal(rng)
                           : cfg.alpha * grad[size_t(rep)];
        for (size_t depth = 0; depth <= cfg.binary_search_depth; ++depth) {
            Vec trial = x_init;
            trial[size_t(rep)] -= delta;
            auto updated = hooks.update_dep(s, trial, grad, fam);
            if (!updated) return visit;  // empty band: revert fully
            if (l2_distance(*updated, x0) <= cfg.d_max) {
                if (hooks.commit) hooks.commit(*updated, fam, s);
                visit.ok = true;
                visit.x = std::move(*updated);
                visit.rep = rep;
                visit.delta = delta;
                return visit;
            }
            delta /= 2.0;
        }
        return visit;  // depth exhausted: caller keeps the pre-call state
    }

    AttackOutcome run() {
        Vec x = x0;
        std::vector<char> active(cs.dim(), 0);
        for (int i : cs.mutable_indices()) active[size_t(i)] = 1;

        auto finish_success = [&](Vec point) {
            out.success = true;
            out.final_point = point;
            out.distance = l2_distance(point, x0);
            out.final_logit = forward_logit(net, point);
            if (hooks.project_to_raw) out.raw_artifact = hooks.project_to_raw(point);
            out.adversarial = std::move(point);
        };

        if (predict(net, x, cfg.threshold) == cfg.target_class) {
            finish_success(x);
            return out;
        }

        size_t m = 0;
        while (m < cfg.max_iterations) {
            bool any_active = std::any_of(active.begin(), active.end(), [](char a) { return a; });
            if (!any_active) break;

            Vec grad = input_gradient(net, x, obj, &x0);
            if (!all_finite(grad)) throw NumericError("attack: non-finite gradient");

            int i_max = pick_feature(active, grad);
            if (i_max < 0) break;

            const DependencyFamily* fam = cs.family_of(i_max);
            bool dependent = fam && cs.is_dependent(i_max);
            if (dependent) {
                FamilyVisit visit = update_family(x, grad, *fam);
                if (!visit.ok) {
                    // family unusable: drop all of its mutable members, no state change
                    for (int member : fam->members) active[size_t(member)] = 0;
                    continue;
                }
                x = std::move(visit.x);
                ++m;
                out.families_touched[fam->id]++;
                record_update(visit.rep);
                out.max_iteration_distance = std::max(out.max_iteration_distance,
                                                      l2_distance(x, x0));
                trace_line(m, visit.rep, fam->id, visit.delta, l2_distance(x, x0),
                           forward_logit(net, x));
            } else {
                double step = selection == Selection::RandomWithNormalStep
                                  ? normal(rng)
                                  : cfg.alpha * grad[size_t(i_max)];
                double moved = step_independent(x, i_max, step);
                if (moved == x[size_t(i_max)]) {
                    active[size_t(i_max)] = 0;  // pinned against a bound; nothing to do
                    continue;
                }
                x[size_t(i_max)] = moved;
                ++m;
                record_update(i_max);
                out.max_iteration_distance = std::max(out.max_iteration_distance,
                                                      l2_distance(x, x0));
                trace_line(m, i_max, "", step, l2_distance(x, x0), forward_logit(net, x));
            }
            if (!cfg.allow_revisit) active[size_t(i_max)] = 0;

            if (predict(net, x, cfg.threshold) == cfg.target_class) {
                out.iterations = m;
                finish_success(std::move(x));
                return out;
            }
        }
        out.iterations = m;
        out.final_point = x;
        out.distance = l2_distance(x, x0);
        out.final_logit = forward_logit(net, x);
        return out;
    }
};

}  // namespace

AttackOutcome fence_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                           FamilyHooks& hooks, const AttackObjective& obj,
                           const AttackConfig& cfg) {
    Engine e(net, x0, cs, hooks, obj, cfg, Selection::MaxGradient);
    return e.run();
}

AttackOutcome baseline1_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                               FamilyHooks& hooks, const AttackObjective& obj,
                               const AttackConfig& cfg) {
    Engine e(net, x0, cs, hooks, obj, cfg, Selection::Random);
    return e.run();
}

AttackOutcome baseline2_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                               FamilyHooks& hooks, const AttackObjective& obj,
                               const AttackConfig& cfg) {
    Engine e(net, x0, cs, hooks, obj, cfg, Selection::RandomWithNormalStep);
    return e.run();
}

AttackOutcome penalty_unconstrained_attack(const DenseNetwork& net, const Vec& x0,
                                           const ConstraintSet& cs, const AttackConfig& cfg,
                                           double c) {
    if (c <= 0.0) throw DataError("penalty attack: c must be > 0");
    AttackObjective obj = AttackObjective::penalty(c);
    const Normalizer& nm = cs.normalizer();
    std::vector<int> fs = cs.mutable_indices();

    AttackOutcome out;
    Vec x = x0;
    Vec best;
    double best_norm = std::numeric_limits<double>::infinity();

    if (predict(net, x, cfg.threshold) == cfg.target_class) {
        best = x;  // delta = 0 is a fixed point
        best_norm = 0.0;
    }
    size_t steps = 0;
    for (; steps < cfg.penalty_steps; ++steps) {
        Vec grad = input_gradient(net, x, obj, &x0);
        if (!all_finite(grad)) throw NumericError("penalty attack: non-finite gradient");
        for (int i : fs) {
            double lo = std::max(std::min(0.0, x0[size_t(i)]),
                                 nm.to_norm(size_t(i), cs.features()[size_t(i)].lo));
            double hi = std::min(std::max(1.0, x0[size_t(i)]),
                                 nm.to_norm(size_t(i), cs.features()[size_t(i)].hi));
            x[size_t(i)] = std::clamp(x[size_t(i)] - cfg.alpha * grad[size_t(i)], lo, hi);
        }
        if (!all_finite(x)) throw NumericError("penalty attack: diverged");
        if (predict(net, x, cfg.threshold) == cfg.target_class) {
            double n = l2_distance(x, x0);
            if (n < best_norm) {
                best_norm = n;
                best = x;
            }
        }
    }
    out.iterations = steps;
    if (best_norm < std::numeric_limits<double>::infinity()) {
        out.success = true;
        out.adversarial = best;
        out.final_point = best;
    } else {
        out.final_point = x;
    }
    out.distance = l2_distance(out.final_point, x0);
    out.final_logit = forward_logit(net, out.final_point);
    for (int i : fs)
        if (out.final_point[size_t(i)] != x0[size_t(i)]) {
            out.update_events.push_back(i);
            out.update_histogram[i]++;
        }
    return out;
}

AttackOutcome postprocess_attack(const DenseNetwork& net, const Vec& x0, const ConstraintSet& cs,
                                 FamilyHooks& hooks, const AttackConfig& cfg, double c) {
    AttackOutcome base = penalty_unconstrained_attack(net, x0, cs, cfg, c);
    if (!hooks.repair) throw SchemaError("postprocess attack: application provides no repair hook");

    AttackOutcome out;
    out.iterations = base.iterations;
    out.update_events = base.update_events;
    out.update_histogram = base.update_histogram;

    Vec repaired = hooks.repair(base.final_point, x0);
    out.final_point = repaired;
    out.distance = l2_distance(repaired, x0);
    out.final_logit = forward_logit(net, repaired);
    bool classified = predict(net, repaired, cfg.threshold) == cfg.target_class;
    bool feasible = cs.check_feasible(repaired, kFeasibilityTol, &x0).feasible;
    if (classified && feasible) {
        out.success = true;
        if (hooks.project_to_raw) out.raw_artifact = hooks.project_to_raw(repaired);
        out.adversarial = std::move(repaired);
    }
    return out;
}

}  // namespace fence
