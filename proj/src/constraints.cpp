#include "fence/constraints.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace fence {

namespace {

using nlohmann::json;

/// Equality within tol in normalized units of the feature holding lhs, or
/// relatively when the reference value exceeds 1 in magnitude.
bool near_eq(double lhs, double rhs, double span, double tol) {
    double err = std::abs(lhs - rhs);
    if (err <= tol * span) return true;
    return std::abs(rhs) > 1.0 && err <= tol * std::abs(rhs);
}

double slack_for(double span, double ref, double tol) {
    return tol * std::max(span, std::abs(ref) > 1.0 ? std::abs(ref) : 0.0);
}

}  // namespace

double update_ratio(double x, double anchor, double grad, double alpha, double a, double b) {
    double target = x - alpha * grad;
    double lo = a * anchor;
    double hi = b * anchor;
    if (target < lo) return lo;
    if (target > hi) return hi;
    return target;
}

RangeResult update_range(double x, double a, double b) {
    double v = std::clamp(x, a, b);
    return {v, std::abs(v - x)};
}

void update_ohe(Vec& x, const Vec& grad, const std::vector<int>& members, double tol) {
    int hot = -1;
    double sum = 0.0;
    for (int m : members) {
        double v = x[m];
        if (std::abs(v) > tol && std::abs(v - 1.0) > tol)
            throw DataError("update_ohe: member " + std::to_string(m) + " is not 0/1");
        if (std::abs(v - 1.0) <= tol) hot = m;
        sum += v;
    }
    if (hot < 0 || std::abs(sum - 1.0) > tol * double(members.size()))
        throw DataError("update_ohe: block is not one-hot on entry");

    int best = members.front();
    for (int m : members)
        if (grad[m] < grad[best]) best = m;
    if (grad[hot] <= grad[best]) return;  // current slot ties for steepest: keep it
    for (int m : members) x[m] = 0.0;
    x[best] = 1.0;
}

void update_nonlin(Vec& x, const Vec& grad, double alpha, const NonLinDep& dep, const Normalizer& norm) {
    x[dep.j_idx] -= alpha * grad[dep.j_idx];
    double denom;
    if (!dep.k_sum.empty()) {
        denom = 0.0;
        for (int k : dep.k_sum) denom += norm.to_raw(k, x[k]);
    } else {
        denom = norm.to_raw(dep.k_idx, x[dep.k_idx]);
    }
    if (std::abs(denom) < 1e-12)
        throw NumericError("update_nonlin: zero denominator");
    double quotient = norm.to_raw(dep.j_idx, x[dep.j_idx]) / denom;
    x[dep.i_idx] = norm.to_norm(dep.i_idx, quotient);
}

void update_stat(Vec& x, double v_raw, const StatDep& dep, const Normalizer& norm,
                 std::optional<double> prior_count);

void update_stat(Vec& x, double v_raw, const StatDep& dep, const Normalizer& norm) {
    update_stat(x, v_raw, dep, norm, std::nullopt);
}

void update_stat(Vec& x, double v_raw, const StatDep& dep, const Normalizer& norm,
                 std::optional<double> prior_count) {
    double num = 0.0;
    if (!dep.num_sum.empty())
        for (int k : dep.num_sum) num += norm.to_raw(k, x[k]);
    else if (dep.num_idx >= 0)
        num = norm.to_raw(dep.num_idx, x[dep.num_idx]);
    double count_before = prior_count.value_or(num);

    if (count_before < 0.5) {
        // empty family: seed the statistics from the first event
        if (dep.min_idx >= 0) x[dep.min_idx] = norm.to_norm(dep.min_idx, v_raw);
        if (dep.max_idx >= 0) x[dep.max_idx] = norm.to_norm(dep.max_idx, v_raw);
        if (dep.avg_idx >= 0 && dep.tot_idx < 0) x[dep.avg_idx] = norm.to_norm(dep.avg_idx, v_raw);
    } else {
        if (dep.min_idx >= 0) {
            double cur = norm.to_raw(dep.min_idx, x[dep.min_idx]);
            x[dep.min_idx] = norm.to_norm(dep.min_idx, std::min(cur, v_raw));
        }
        if (dep.max_idx >= 0) {
            double cur = norm.to_raw(dep.max_idx, x[dep.max_idx]);
            x[dep.max_idx] = norm.to_norm(dep.max_idx, std::max(cur, v_raw));
        }
    }
    if (dep.avg_idx >= 0 && dep.tot_idx >= 0) {
        if (num < 0.5) throw NumericError("update_stat: zero count with a tracked total");
        double tot = norm.to_raw(dep.tot_idx, x[dep.tot_idx]);
        x[dep.avg_idx] = norm.to_norm(dep.avg_idx, tot / num);
    }
}

void update_lin(Vec& x, const LinDep& dep, const std::vector<int>& pinned, const Normalizer& norm) {
    std::set<int> pin(pinned.begin(), pinned.end());
    double pinned_sum = 0.0, free_sum = 0.0;
    std::vector<size_t> free_pos;
    for (size_t i = 0; i < dep.members.size(); ++i) {
        double v = norm.to_raw(dep.members[i], x[dep.members[i]]);
        if (pin.count(dep.members[i])) {
            pinned_sum += dep.weights[i] * v;
        } else {
            free_sum += dep.weights[i] * v;
            free_pos.push_back(i);
        }
    }
    double target = dep.constant - pinned_sum;
    if (free_pos.empty()) {
        if (std::abs(free_sum + pinned_sum - dep.constant) > 1e-9)
            throw DataError("update_lin: all members pinned and constraint violated");
        return;
    }
    if (std::abs(free_sum) > 1e-12) {
        double factor = target / free_sum;
        for (size_t i : free_pos) {
            int f = dep.members[i];
            x[f] = norm.to_norm(f, norm.to_raw(f, x[f]) * factor);
        }
    } else {
        std::vector<size_t> nz;
        for (size_t i : free_pos)
            if (dep.weights[i] != 0.0) nz.push_back(i);
        if (nz.empty()) throw DataError("update_lin: no non-pinned member with nonzero weight");
        double share = target / double(nz.size());
        for (size_t i : nz) {
            int f = dep.members[i];
            x[f] = norm.to_norm(f, norm.to_raw(f, x[f]) + share / dep.weights[i]);
        }
    }
}

Vec project_l2(const Vec& x0, const Vec& x, double d_max) {
    double d = l2_distance(x, x0);
    if (d <= d_max) return x;
    Vec out(x.size());
    double scale = d_max / d;
    for (size_t i = 0; i < x.size(); ++i) out[i] = x0[i] + (x[i] - x0[i]) * scale;
    return out;
}

// ---------------------------------------------------------------------------

ConstraintSet::ConstraintSet(std::string schema_id, std::vector<FeatureDef> features,
                             std::vector<DependencyFamily> families, Normalizer norm)
    : schema_id_(std::move(schema_id)),
      features_(std::move(features)),
      families_(std::move(families)),
      norm_(std::move(norm)) {
    if (features_.empty()) throw DataError("ConstraintSet: no features");
    if (norm_.dim() != features_.size())
        throw SchemaError("ConstraintSet: normalizer dimension mismatch");
    for (const auto& f : features_)
        if (f.lo > f.hi) throw DataError("ConstraintSet: feature '" + f.name + "' has lo > hi");

    family_index_of_.assign(features_.size(), -1);
    for (size_t fi = 0; fi < families_.size(); ++fi) {
        const auto& fam = families_[fi];
        if (fam.members.empty()) throw DataError("family '" + fam.id + "' has no members");
        bool rep_found = false, any_mutable = false;
        for (int m : fam.members) {
            if (m < 0 || size_t(m) >= features_.size())
                throw DataError("family '" + fam.id + "' member index out of range");
            if (family_index_of_[m] != -1)
                throw DataError("feature '" + features_[m].name + "' belongs to two families");
            family_index_of_[m] = int(fi);
            rep_found |= m == fam.representative;
            any_mutable |= features_[m].is_mutable;
        }
        if (!rep_found) throw DataError("family '" + fam.id + "' representative is not a member");
        if (any_mutable && !features_[fam.representative].is_mutable)
            throw DataError("family '" + fam.id + "' has an immutable representative");
    }
}

const DependencyFamily* ConstraintSet::family_of(int idx) const {
    if (idx < 0 || size_t(idx) >= family_index_of_.size()) return nullptr;
    int fi = family_index_of_[idx];
    return fi < 0 ? nullptr : &families_[fi];
}

std::vector<int> ConstraintSet::mutable_indices() const {
    std::vector<int> out;
    for (size_t i = 0; i < features_.size(); ++i)
        if (features_[i].is_mutable) out.push_back(int(i));
    return out;
}

bool ConstraintSet::is_dependent(int idx) const {
    return features_[size_t(idx)].is_mutable && family_index_of_[size_t(idx)] >= 0;
}

namespace {

struct KindChecker {
    const ConstraintSet& cs;
    const Normalizer& norm;
    const Vec& raw;
    const std::string& fam_id;
    double tol;
    std::vector<Violation>& out;

    void fail(const std::string& what, double observed, double bound) {
        out.push_back({fam_id, what, observed, bound});
    }

    double denom_of(const NonLinDep& d) const {
        if (!d.k_sum.empty()) {
            double s = 0.0;
            for (int k : d.k_sum) s += raw[k];
            return s;
        }
        return raw[d.k_idx];
    }

    void check(const DependencyKind& kind) {
        std::visit([&](const auto& k) { (*this)(k); }, kind.node);
    }

    void operator()(const RangeDep& k) {
        double s = slack_for(norm.span(k.idx), std::max(std::abs(k.lo), std::abs(k.hi)), tol);
        if (raw[k.idx] < k.lo - s) fail("range low", raw[k.idx], k.lo);
        if (raw[k.idx] > k.hi + s) fail("range high", raw[k.idx], k.hi);
    }

    void operator()(const RatioDep& k) {
        double v = raw[k.numerator];
        double y = raw[k.anchor];
        double s = slack_for(norm.span(k.numerator), std::max(std::abs(k.a * y), std::abs(k.b * y)), tol);
        if (v < k.a * y - s) fail("ratio below band", v, k.a * y);
        if (v > k.b * y + s) fail("ratio above band", v, k.b * y);
    }

    void operator()(const OheDep& k) {
        double sum = 0.0;
        int hot = 0;
        for (int m : k.members) {
            double v = raw[m];
            if (std::abs(v) > tol && std::abs(v - 1.0) > tol) fail("ohe member not 0/1", v, 0.0);
            if (std::abs(v - 1.0) <= tol) ++hot;
            sum += v;
        }
        if (hot != 1) fail("ohe hot count", double(hot), 1.0);
        if (std::abs(sum - 1.0) > tol * double(k.members.size())) fail("ohe sum", sum, 1.0);
    }

    void operator()(const StatDep& k) {
        double num = 0.0;
        if (!k.num_sum.empty())
            for (int i : k.num_sum) num += raw[i];
        else if (k.num_idx >= 0)
            num = raw[k.num_idx];

        double vmin = k.min_idx >= 0 ? raw[k.min_idx] : 0.0;
        double vmax = k.max_idx >= 0 ? raw[k.max_idx] : 0.0;
        if (num < 0.5) {
            // empty family: the whole block must be zero
            if (k.min_idx >= 0 && std::abs(vmin) > tol * norm.span(k.min_idx))
                fail("stat empty min", vmin, 0.0);
            if (k.max_idx >= 0 && std::abs(vmax) > tol * norm.span(k.max_idx))
                fail("stat empty max", vmax, 0.0);
            if (k.tot_idx >= 0 && std::abs(raw[k.tot_idx]) > tol * norm.span(k.tot_idx))
                fail("stat empty total", raw[k.tot_idx], 0.0);
            return;
        }
        if (k.min_idx >= 0 && k.max_idx >= 0) {
            double s = slack_for(norm.span(k.min_idx), vmax, tol);
            if (vmin > vmax + s) fail("stat min > max", vmin, vmax);
        }
        double mean = std::numeric_limits<double>::quiet_NaN();
        if (k.avg_idx >= 0) mean = raw[k.avg_idx];
        if (k.tot_idx >= 0) {
            double implied = raw[k.tot_idx] / num;
            if (k.avg_idx >= 0 && !near_eq(mean, implied, norm.span(k.avg_idx), tol))
                fail("stat avg != tot/num", mean, implied);
            if (k.avg_idx < 0) mean = implied;
            if (k.max_idx >= 0) {
                double s = slack_for(norm.span(k.max_idx), raw[k.tot_idx], tol);
                if (vmax > raw[k.tot_idx] + s) fail("stat max > total", vmax, raw[k.tot_idx]);
            }
        }
        if (!std::isnan(mean)) {
            if (k.min_idx >= 0) {
                double s = slack_for(norm.span(k.min_idx), mean, tol);
                if (vmin > mean + s) fail("stat min > avg", vmin, mean);
            }
            if (k.max_idx >= 0) {
                double s = slack_for(norm.span(k.max_idx), mean, tol);
                if (vmax < mean - s) fail("stat max < avg", vmax, mean);
            }
            if (std::llround(num) == 1) {
                if (k.min_idx >= 0 && !near_eq(vmin, mean, norm.span(k.min_idx), tol))
                    fail("stat single-event min != avg", vmin, mean);
                if (k.max_idx >= 0 && !near_eq(vmax, mean, norm.span(k.max_idx), tol))
                    fail("stat single-event max != avg", vmax, mean);
            }
        }
    }

    void operator()(const LinDep& k) {
        double sum = 0.0;
        double span = 0.0;
        for (size_t i = 0; i < k.members.size(); ++i) {
            sum += k.weights[i] * raw[k.members[i]];
            span = std::max(span, norm.span(k.members[i]));
        }
        if (!near_eq(sum, k.constant, span, tol)) fail("weighted sum != constant", sum, k.constant);
    }

    void operator()(const NonLinDep& k) {
        if (k.unit_gate >= 0 && std::abs(raw[k.unit_gate] - 1.0) > 0.5) return;
        double denom = denom_of(k);
        if (std::abs(denom) < 1e-12) {
            if (std::abs(raw[k.j_idx]) > tol * norm.span(k.j_idx) ||
                std::abs(raw[k.i_idx]) > tol * norm.span(k.i_idx))
                fail("nonlin zero denominator", denom, 0.0);
            return;
        }
        double expected = raw[k.j_idx] / denom;
        if (!near_eq(raw[k.i_idx], expected, norm.span(k.i_idx), tol))
            fail("nonlin quotient", raw[k.i_idx], expected);
    }

    void operator()(const CompositeDep& k) {
        for (const auto& part : k.parts) check(part);
    }
};

}  // namespace

FeasibilityReport ConstraintSet::check_feasible(const Vec& x, double tol, const Vec* x0) const {
    if (x.size() != features_.size())
        throw SchemaError("check_feasible: vector has " + std::to_string(x.size()) +
                          " features, schema expects " + std::to_string(features_.size()));
    FeasibilityReport rep;
    rep.tolerance = tol;
    Vec raw = norm_.denormalize(x);
    Vec raw0;
    if (x0) raw0 = norm_.denormalize(*x0);

    for (size_t i = 0; i < features_.size(); ++i) {
        const auto& f = features_[i];
        double s = tol * norm_.span(i);
        if (raw[i] < f.lo - s)
            rep.violations.push_back({"", "feature '" + f.name + "' below physical range", raw[i], f.lo});
        if (raw[i] > f.hi + s)
            rep.violations.push_back({"", "feature '" + f.name + "' above physical range", raw[i], f.hi});
        if (f.integral && std::abs(raw[i] - std::round(raw[i])) > std::max(s, 1e-9))
            rep.violations.push_back({"", "feature '" + f.name + "' not integral", raw[i],
                                      std::round(raw[i])});
        if (x0) {
            if (f.monotone_up && raw[i] < raw0[i] - s)
                rep.violations.push_back({"", "feature '" + f.name + "' decreased", raw[i], raw0[i]});
            if (!f.is_mutable && std::abs(raw[i] - raw0[i]) > s)
                rep.violations.push_back({"", "immutable feature '" + f.name + "' changed", raw[i],
                                          raw0[i]});
        }
    }
    for (const auto& fam : families_) {
        KindChecker ck{*this, norm_, raw, fam.id, tol, rep.violations};
        ck.check(fam.kind);
    }
    rep.feasible = rep.violations.empty();
    return rep;
}

// ---------------------------------------------------------------------------
// Text description file: JSON with numbers carried as shortest-round-trip
// strings so that save -> load -> save is byte-identical.
// ---------------------------------------------------------------------------

namespace {

json kind_to_json(const DependencyKind& kind, const std::vector<FeatureDef>& feats);

std::string fname(const std::vector<FeatureDef>& feats, int idx) { return feats[size_t(idx)].name; }

json names_of(const std::vector<FeatureDef>& feats, const std::vector<int>& idx) {
    json arr = json::array();
    for (int i : idx) arr.push_back(fname(feats, i));
    return arr;
}

json kind_to_json(const DependencyKind& kind, const std::vector<FeatureDef>& feats) {
    json j;
    std::visit(
        [&](const auto& k) {
            using T = std::decay_t<decltype(k)>;
            if constexpr (std::is_same_v<T, RangeDep>) {
                j = {{"type", "range"}, {"feature", fname(feats, k.idx)},
                     {"lo", format_double(k.lo)}, {"hi", format_double(k.hi)}};
            } else if constexpr (std::is_same_v<T, RatioDep>) {
                j = {{"type", "ratio"}, {"numerator", fname(feats, k.numerator)},
                     {"anchor", fname(feats, k.anchor)},
                     {"a", format_double(k.a)}, {"b", format_double(k.b)}};
            } else if constexpr (std::is_same_v<T, OheDep>) {
                j = {{"type", "ohe"}, {"members", names_of(feats, k.members)}};
            } else if constexpr (std::is_same_v<T, StatDep>) {
                j["type"] = "stat";
                if (k.min_idx >= 0) j["min"] = fname(feats, k.min_idx);
                if (k.max_idx >= 0) j["max"] = fname(feats, k.max_idx);
                if (k.avg_idx >= 0) j["avg"] = fname(feats, k.avg_idx);
                if (k.tot_idx >= 0) j["tot"] = fname(feats, k.tot_idx);
                if (k.num_idx >= 0) j["num"] = fname(feats, k.num_idx);
                if (!k.num_sum.empty()) j["num_sum"] = names_of(feats, k.num_sum);
            } else if constexpr (std::is_same_v<T, LinDep>) {
                json w = json::array();
                for (double wi : k.weights) w.push_back(format_double(wi));
                j = {{"type", "lin"}, {"members", names_of(feats, k.members)}, {"weights", w},
                     {"constant", format_double(k.constant)}};
            } else if constexpr (std::is_same_v<T, NonLinDep>) {
                j["type"] = "nonlin";
                j["i"] = fname(feats, k.i_idx);
                j["j"] = fname(feats, k.j_idx);
                if (k.k_idx >= 0) j["k"] = fname(feats, k.k_idx);
                if (!k.k_sum.empty()) j["k_sum"] = names_of(feats, k.k_sum);
                if (k.unit_gate >= 0) j["unit_gate"] = fname(feats, k.unit_gate);
            } else if constexpr (std::is_same_v<T, CompositeDep>) {
                j["type"] = "composite";
                json parts = json::array();
                for (const auto& p : k.parts) parts.push_back(kind_to_json(p, feats));
                j["parts"] = parts;
            }
        },
        kind.node);
    return j;
}

int index_of(const std::vector<FeatureDef>& feats, const std::string& name) {
    for (size_t i = 0; i < feats.size(); ++i)
        if (feats[i].name == name) return int(i);
    throw DataError("constraint file references unknown feature '" + name + "'");
}

std::vector<int> indices_of(const std::vector<FeatureDef>& feats, const json& arr) {
    std::vector<int> out;
    for (const auto& n : arr) out.push_back(index_of(feats, n.get<std::string>()));
    return out;
}

DependencyKind kind_from_json(const json& j, const std::vector<FeatureDef>& feats) {
    DependencyKind kind;
    std::string type = j.at("type").get<std::string>();
    if (type == "range") {
        kind.node = RangeDep{index_of(feats, j.at("feature")), parse_double(j.at("lo")),
                             parse_double(j.at("hi"))};
    } else if (type == "ratio") {
        kind.node = RatioDep{index_of(feats, j.at("numerator")), index_of(feats, j.at("anchor")),
                             parse_double(j.at("a")), parse_double(j.at("b"))};
    } else if (type == "ohe") {
        kind.node = OheDep{indices_of(feats, j.at("members"))};
    } else if (type == "stat") {
        StatDep k;
        if (j.contains("min")) k.min_idx = index_of(feats, j.at("min"));
        if (j.contains("max")) k.max_idx = index_of(feats, j.at("max"));
        if (j.contains("avg")) k.avg_idx = index_of(feats, j.at("avg"));
        if (j.contains("tot")) k.tot_idx = index_of(feats, j.at("tot"));
        if (j.contains("num")) k.num_idx = index_of(feats, j.at("num"));
        if (j.contains("num_sum")) k.num_sum = indices_of(feats, j.at("num_sum"));
        kind.node = k;
    } else if (type == "lin") {
        LinDep k;
        k.members = indices_of(feats, j.at("members"));
        for (const auto& w : j.at("weights")) k.weights.push_back(parse_double(w));
        k.constant = parse_double(j.at("constant"));
        if (k.members.size() != k.weights.size())
            throw DataError("constraint file: lin members/weights length mismatch");
        kind.node = k;
    } else if (type == "nonlin") {
        NonLinDep k;
        k.i_idx = index_of(feats, j.at("i"));
        k.j_idx = index_of(feats, j.at("j"));
        if (j.contains("k")) k.k_idx = index_of(feats, j.at("k"));
        if (j.contains("k_sum")) k.k_sum = indices_of(feats, j.at("k_sum"));
        if (j.contains("unit_gate")) k.unit_gate = index_of(feats, j.at("unit_gate"));
        kind.node = k;
    } else if (type == "composite") {
        CompositeDep k;
        for (const auto& p : j.at("parts")) k.parts.push_back(kind_from_json(p, feats));
        kind.node = k;
    } else {
        throw DataError("constraint file: unknown dependency type '" + type + "'");
    }
    return kind;
}

}  // namespace

void ConstraintSet::save(std::ostream& os) const {
    json j;
    j["format"] = "fence-constraints";
    j["version"] = 1;
    j["schema"] = schema_id_;
    json feats = json::array();
    for (const auto& f : features_) {
        json jf;
        jf["name"] = f.name;
        jf["lo"] = format_double(f.lo);
        jf["hi"] = format_double(f.hi);
        jf["mutable"] = f.is_mutable;
        jf["monotone_up"] = f.monotone_up;
        jf["integral"] = f.integral;
        feats.push_back(jf);
    }
    j["features"] = feats;
    json fams = json::array();
    for (const auto& fam : families_) {
        json jf;
        jf["id"] = fam.id;
        jf["members"] = names_of(features_, fam.members);
        jf["representative"] = fname(features_, fam.representative);
        jf["kind"] = kind_to_json(fam.kind, features_);
        fams.push_back(jf);
    }
    j["families"] = fams;
    os << j.dump(2) << "\n";
}

ConstraintSet ConstraintSet::load(std::istream& is, const Normalizer& norm) {
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw DataError(std::string("constraint file: ") + e.what());
    }
    if (j.value("format", "") != "fence-constraints")
        throw SchemaError("constraint file: wrong format tag");
    std::vector<FeatureDef> feats;
    for (const auto& jf : j.at("features")) {
        FeatureDef f;
        f.name = jf.at("name").get<std::string>();
        f.lo = parse_double(jf.at("lo"));
        f.hi = parse_double(jf.at("hi"));
        f.is_mutable = jf.at("mutable").get<bool>();
        f.monotone_up = jf.at("monotone_up").get<bool>();
        f.integral = jf.at("integral").get<bool>();
        feats.push_back(f);
    }
    std::vector<DependencyFamily> fams;
    for (const auto& jf : j.at("families")) {
        DependencyFamily fam;
        fam.id = jf.at("id").get<std::string>();
        fam.members = indices_of(feats, jf.at("members"));
        fam.representative = index_of(feats, jf.at("representative"));
        fam.kind = kind_from_json(jf.at("kind"), feats);
        fams.push_back(fam);
    }
    return ConstraintSet(j.at("schema").get<std::string>(), std::move(feats), std::move(fams), norm);
}

}  // namespace fence
