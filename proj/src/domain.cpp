#include "fence/domain.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace fence {

std::vector<std::string> DomainSchema::feature_names() const {
    std::vector<std::string> n = {
        "NIP", "Num_Conn", "Avg_Conn",
        "Total_Recv_Bytes", "Total_Sent_Bytes", "Avg_Ratio_Bytes", "Min_Ratio_Bytes",
        "Max_Ratio_Bytes",
        "Num_POST", "Num_GET", "Avg_POST", "Min_POST", "Max_POST",
        "Num_200", "Num_300", "Num_400", "Num_500",
        "Frac_200", "Frac_300", "Frac_400", "Frac_500",
        "Frac_empty", "Frac_html", "Frac_img", "Frac_other",
        "Dom_Levels", "Sub_Domains", "Dom_Length", "Reg_Age", "Reg_Validity",
        "Update_Age", "Update_Validity", "Num_ASNs", "Num_Countries", "Avg_OS", "Avg_Browser",
    };
    for (size_t i = 0; i < kContextFeatures; ++i) {
        std::string id = std::to_string(i);
        n.push_back("Ctx_" + std::string(id.size() < 2 ? "0" : "") + id);
    }
    return n;
}

ConstraintSet DomainSchema::constraints(const Normalizer& norm) const {
    std::vector<FeatureDef> defs(kDim);
    auto names = feature_names();
    for (size_t i = 0; i < kDim; ++i) {
        defs[i].name = names[i];
        defs[i].lo = 0.0;
        defs[i].hi = std::numeric_limits<double>::infinity();
    }
    defs[Nip].lo = 1.0;
    defs[Nip].integral = true;
    defs[Nip].is_mutable = nip_mutable;
    for (size_t i : {size_t(Frac200), size_t(Frac300), size_t(Frac400), size_t(Frac500),
                     size_t(FracEmpty), size_t(FracHtml), size_t(FracImg), size_t(FracOther)})
        defs[i].hi = 1.0;
    defs[DomLevels].lo = 1.0;
    defs[DomLevels].hi = 127.0;
    defs[SubDomains].hi = 127.0;
    defs[DomLength].lo = 1.0;
    defs[DomLength].hi = 253.0;
    defs[RegAge].hi = 36500.0;
    defs[RegValidity].hi = 36500.0;
    defs[UpdateAge].hi = 36500.0;
    defs[UpdateValidity].hi = 36500.0;
    defs[NumAsns].lo = 1.0;
    defs[NumCountries].lo = 1.0;
    for (size_t i = CtxStart; i < kDim; ++i) defs[i].lo = -std::numeric_limits<double>::infinity();

    for (size_t i = NumConn; i <= Frac500; ++i) defs[i].is_mutable = true;
    for (size_t i = DomLevels; i <= AvgBrowser; ++i) defs[i].is_mutable = true;
    if (!reg_age_mutable) defs[RegAge].is_mutable = false;
    if (!update_age_mutable) defs[UpdateAge].is_mutable = false;

    // events are only ever added, never removed
    for (size_t i : {size_t(NumConn), size_t(TotalRecv), size_t(TotalSent), size_t(NumPost),
                     size_t(NumGet), size_t(Num200), size_t(Num300), size_t(Num400),
                     size_t(Num500)})
        defs[i].monotone_up = true;

    for (size_t i = DomLevels; i <= NumCountries; ++i) defs[i].integral = true;

    std::vector<DependencyFamily> fams;
    {
        DependencyFamily f;
        f.id = "connections";
        f.members = {Nip, NumConn, AvgConn};
        f.representative = NumConn;
        NonLinDep avg;
        avg.i_idx = AvgConn;
        avg.j_idx = NumConn;
        avg.k_idx = Nip;
        f.kind.node = avg;
        fams.push_back(std::move(f));
    }
    {
        DependencyFamily f;
        f.id = "bytes";
        f.members = {TotalRecv, TotalSent, AvgRatio, MinRatio, MaxRatio};
        f.representative = TotalRecv;
        CompositeDep comp;
        StatDep stat;
        stat.min_idx = MinRatio;
        stat.max_idx = MaxRatio;
        stat.avg_idx = AvgRatio;
        stat.num_idx = Nip;
        DependencyKind ks;
        ks.node = stat;
        comp.parts.push_back(ks);
        NonLinDep ratio;  // the per-IP average collapses to the plain quotient when NIP == 1
        ratio.i_idx = AvgRatio;
        ratio.j_idx = TotalRecv;
        ratio.k_idx = TotalSent;
        ratio.unit_gate = Nip;
        DependencyKind kr;
        kr.node = ratio;
        comp.parts.push_back(kr);
        f.kind.node = comp;
        fams.push_back(std::move(f));
    }
    {
        DependencyFamily f;
        f.id = "http-method";
        f.members = {NumPost, NumGet, AvgPost, MinPost, MaxPost};
        f.representative = NumPost;
        CompositeDep comp;
        StatDep stat;
        stat.min_idx = MinPost;
        stat.max_idx = MaxPost;
        stat.avg_idx = AvgPost;
        stat.num_idx = Nip;
        DependencyKind ks;
        ks.node = stat;
        comp.parts.push_back(ks);
        NonLinDep ratio;
        ratio.i_idx = AvgPost;
        ratio.j_idx = NumPost;
        ratio.k_idx = NumGet;
        ratio.unit_gate = Nip;
        DependencyKind kr;
        kr.node = ratio;
        comp.parts.push_back(kr);
        f.kind.node = comp;
        fams.push_back(std::move(f));
    }
    {
        DependencyFamily f;
        f.id = "result-code";
        f.members = {Num200, Num300, Num400, Num500, Frac200, Frac300, Frac400, Frac500};
        f.representative = Num200;
        CompositeDep comp;
        std::vector<int> codes = {Num200, Num300, Num400, Num500};
        for (int j = 0; j < 4; ++j) {
            NonLinDep frac;
            frac.i_idx = Frac200 + j;
            frac.j_idx = Num200 + j;
            frac.k_sum = codes;
            DependencyKind k;
            k.node = frac;
            comp.parts.push_back(k);
        }
        LinDep sum;
        sum.members = {Frac200, Frac300, Frac400, Frac500};
        sum.weights = {1.0, 1.0, 1.0, 1.0};
        sum.constant = 1.0;
        DependencyKind kl;
        kl.node = sum;
        comp.parts.push_back(kl);
        f.kind.node = comp;
        fams.push_back(std::move(f));
    }
    {
        DependencyFamily f;
        f.id = "content";
        f.members = {FracEmpty, FracHtml, FracImg, FracOther};
        f.representative = FracEmpty;
        LinDep sum;
        sum.members = f.members;
        sum.weights = {1.0, 1.0, 1.0, 1.0};
        sum.constant = 1.0;
        f.kind.node = sum;
        fams.push_back(std::move(f));
    }
    return ConstraintSet("domain", std::move(defs), std::move(fams), norm);
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace {

struct ClassParams {
    double nip_lambda;
    double conns_lambda;
    double sent_mu, sent_sigma;
    double ratio_mu, ratio_sigma;
    double get_lambda;
    double pg_mu, pg_sigma;
    double code_alpha[4];
    double content_alpha[4];
    double levels_n, levels_p;
    double subs_n, subs_p;
    double length_mu, length_sigma;
    double regage_mu, regvalid_mu, updage_mu, updvalid_mu;
    double asns_lambda, countries_lambda;
    double os_mu, browser_mu;
};

ClassParams benign_params() {
    ClassParams p{};
    p.nip_lambda = 1.6;
    p.conns_lambda = 45.0;
    p.sent_mu = std::log(1800.0);
    p.sent_sigma = 0.8;
    p.ratio_mu = std::log(11.0);
    p.ratio_sigma = 0.55;
    p.get_lambda = 40.0;
    p.pg_mu = std::log(0.07);
    p.pg_sigma = 0.5;
    p.code_alpha[0] = 30.0; p.code_alpha[1] = 3.0; p.code_alpha[2] = 2.0; p.code_alpha[3] = 1.0;
    p.content_alpha[0] = 5.0; p.content_alpha[1] = 8.0; p.content_alpha[2] = 6.0;
    p.content_alpha[3] = 3.0;
    p.levels_n = 2; p.levels_p = 0.25;
    p.subs_n = 3; p.subs_p = 0.3;
    p.length_mu = 14.0; p.length_sigma = 4.0;
    p.regage_mu = std::log(1400.0);
    p.regvalid_mu = std::log(700.0);
    p.updage_mu = std::log(400.0);
    p.updvalid_mu = std::log(500.0);
    p.asns_lambda = 0.4;
    p.countries_lambda = 0.3;
    p.os_mu = 2.0;
    p.browser_mu = 2.2;
    return p;
}

ClassParams malicious_params() {
    ClassParams p{};
    p.nip_lambda = 0.25;
    p.conns_lambda = 7.0;
    p.sent_mu = std::log(250.0);
    p.sent_sigma = 0.8;
    p.ratio_mu = std::log(1.6);
    p.ratio_sigma = 0.55;
    p.get_lambda = 4.0;
    p.pg_mu = std::log(0.8);
    p.pg_sigma = 0.5;
    p.code_alpha[0] = 8.0; p.code_alpha[1] = 2.0; p.code_alpha[2] = 8.0; p.code_alpha[3] = 3.0;
    p.content_alpha[0] = 9.0; p.content_alpha[1] = 4.0; p.content_alpha[2] = 2.0;
    p.content_alpha[3] = 4.0;
    p.levels_n = 4; p.levels_p = 0.45;
    p.subs_n = 8; p.subs_p = 0.4;
    p.length_mu = 24.0; p.length_sigma = 7.0;
    p.regage_mu = std::log(150.0);
    p.regvalid_mu = std::log(250.0);
    p.updage_mu = std::log(80.0);
    p.updvalid_mu = std::log(300.0);
    p.asns_lambda = 1.8;
    p.countries_lambda = 1.2;
    p.os_mu = 1.2;
    p.browser_mu = 1.3;
    return p;
}

Vec generate_sample(std::mt19937_64& rng, int label, const DomainSchema& schema) {
    const ClassParams p = label ? malicious_params() : benign_params();
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    auto normal = [&](double mu, double sigma) {
        std::normal_distribution<double> d(mu, sigma);
        return d(rng);
    };
    auto poisson = [&](double lambda) {
        std::poisson_distribution<int> d(lambda);
        return d(rng);
    };
    auto gamma = [&](double alpha) {
        std::gamma_distribution<double> d(alpha, 1.0);
        return d(rng);
    };

    Vec x(schema.dim(), 0.0);
    int nip = 1 + poisson(p.nip_lambda);
    x[DomainSchema::Nip] = double(nip);

    double num_conn = 0.0;
    for (int i = 0; i < nip; ++i) num_conn += double(1 + poisson(p.conns_lambda));
    x[DomainSchema::NumConn] = num_conn;
    x[DomainSchema::AvgConn] = num_conn / double(nip);

    double tr = 0.0, ts = 0.0;
    double rmin = std::numeric_limits<double>::infinity(), rmax = 0.0, rsum = 0.0;
    for (int i = 0; i < nip; ++i) {
        double sent = std::exp(normal(p.sent_mu, p.sent_sigma));
        double ratio = std::exp(normal(p.ratio_mu, p.ratio_sigma));
        tr += sent * ratio;
        ts += sent;
        rsum += ratio;
        rmin = std::min(rmin, ratio);
        rmax = std::max(rmax, ratio);
    }
    x[DomainSchema::TotalRecv] = tr;
    x[DomainSchema::TotalSent] = ts;
    x[DomainSchema::AvgRatio] = nip == 1 ? tr / ts : rsum / double(nip);
    x[DomainSchema::MinRatio] = nip == 1 ? tr / ts : rmin;
    x[DomainSchema::MaxRatio] = nip == 1 ? tr / ts : rmax;

    double post = 0.0, get = 0.0;
    double pgmin = std::numeric_limits<double>::infinity(), pgmax = 0.0, pgsum = 0.0;
    for (int i = 0; i < nip; ++i) {
        double g = double(1 + poisson(p.get_lambda));
        double pg = std::exp(normal(p.pg_mu, p.pg_sigma));
        post += pg * g;
        get += g;
        pgsum += pg;
        pgmin = std::min(pgmin, pg);
        pgmax = std::max(pgmax, pg);
    }
    x[DomainSchema::NumPost] = post;
    x[DomainSchema::NumGet] = get;
    x[DomainSchema::AvgPost] = nip == 1 ? post / get : pgsum / double(nip);
    x[DomainSchema::MinPost] = nip == 1 ? post / get : pgmin;
    x[DomainSchema::MaxPost] = nip == 1 ? post / get : pgmax;

    double code_total = std::max(1.0, num_conn);
    double gsum = 0.0;
    double gs[4];
    for (int j = 0; j < 4; ++j) {
        gs[j] = gamma(p.code_alpha[j]);
        gsum += gs[j];
    }
    for (int j = 0; j < 4; ++j) {
        double n = code_total * gs[j] / gsum;
        x[DomainSchema::Num200 + j] = n;
        x[DomainSchema::Frac200 + j] = n / code_total;
    }

    double csum = 0.0;
    double cs[4];
    for (int j = 0; j < 4; ++j) {
        cs[j] = gamma(p.content_alpha[j]);
        csum += cs[j];
    }
    for (int j = 0; j < 4; ++j) x[DomainSchema::FracEmpty + j] = cs[j] / csum;

    auto binom = [&](double n, double prob) {
        std::binomial_distribution<int> d(int(n), prob);
        return d(rng);
    };
    x[DomainSchema::DomLevels] = double(2 + binom(p.levels_n, p.levels_p));
    x[DomainSchema::SubDomains] = double(binom(p.subs_n, p.subs_p));
    x[DomainSchema::DomLength] =
        std::clamp(std::round(normal(p.length_mu, p.length_sigma)), 4.0, 253.0);
    auto logday = [&](double mu, double cap) {
        return std::clamp(std::round(std::exp(normal(mu, 0.8))), 0.0, cap);
    };
    x[DomainSchema::RegAge] = logday(p.regage_mu, 9000.0);
    x[DomainSchema::RegValidity] = logday(p.regvalid_mu, 5000.0);
    x[DomainSchema::UpdateAge] = logday(p.updage_mu, 9000.0);
    x[DomainSchema::UpdateValidity] = logday(p.updvalid_mu, 5000.0);
    x[DomainSchema::NumAsns] = double(1 + poisson(p.asns_lambda));
    x[DomainSchema::NumCountries] = double(1 + poisson(p.countries_lambda));
    x[DomainSchema::AvgOs] = std::max(1.0, normal(p.os_mu, 0.5));
    x[DomainSchema::AvgBrowser] = std::max(1.0, normal(p.browser_mu, 0.5));

    // opaque context block: a handful of weakly shifted features, the rest noise
    for (size_t k = 0; k < DomainSchema::kContextFeatures; ++k) {
        double shift = 0.0;
        if (k < 8) shift = (k % 2 ? -0.25 : 0.25) * (label ? 1.0 : -1.0);
        x[DomainSchema::CtxStart + k] = normal(shift, 1.0);
    }
    return x;
}

}  // namespace

DomainDataset generate_synthetic_domains(size_t n_malicious, size_t n_benign, uint64_t seed,
                                         const DomainSchema& schema) {
    DomainDataset data;
    size_t total = n_malicious + n_benign;
    data.rows.reserve(total);
    data.labels.reserve(total);
    for (size_t i = 0; i < total; ++i) {
        int label = i < n_malicious ? 1 : 0;
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + i * 2 + uint64_t(label));
        data.rows.push_back(generate_sample(rng, label, schema));
        data.labels.push_back(label);
    }
    return data;
}

DomainDataset generate_synthetic_domains(const ImbalanceConfig& cfg, const DomainSchema& schema) {
    if (cfg.ratio < 1) throw DataError("imbalance ratio must be >= 1");
    return generate_synthetic_domains(size_t(cfg.malicious_train),
                                      size_t(cfg.malicious_train) * size_t(cfg.ratio), cfg.seed,
                                      schema);
}

void write_domain_csv(std::ostream& os, const DomainSchema& schema, const DomainDataset& data) {
    auto names = schema.feature_names();
    for (size_t i = 0; i < names.size(); ++i) os << names[i] << ",";
    os << "label\n";
    for (size_t r = 0; r < data.rows.size(); ++r) {
        for (double v : data.rows[r]) os << format_double(v) << ",";
        os << data.labels[r] << "\n";
    }
}

DomainDataset read_domain_csv(std::istream& is, const DomainSchema& schema) {
    DomainDataset data;
    std::string line;
    if (!std::getline(is, line)) throw DataError("domain csv: empty file");
    size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string tok;
        Vec row;
        while (std::getline(ss, tok, ',')) row.push_back(parse_double(tok));
        if (row.size() != schema.dim() + 1)
            throw DataError("domain csv line " + std::to_string(lineno) + ": expected " +
                            std::to_string(schema.dim() + 1) + " columns");
        data.labels.push_back(int(row.back()));
        row.pop_back();
        data.rows.push_back(std::move(row));
    }
    return data;
}

// ---------------------------------------------------------------------------
// Hooks
// ---------------------------------------------------------------------------

namespace {

/// Rebuilds a per-entity value list from its (min, avg, max, n) summary.
/// The interior entries share the value that makes the mean exact.
std::optional<std::vector<double>> reconstruct_values(double mn, double avg, double mx, int n) {
    if (n < 1) return std::nullopt;
    if (n == 1) return std::vector<double>{avg};
    double lo = mn - 1e-9 * std::max(1.0, std::abs(mn));
    double hi = mx + 1e-9 * std::max(1.0, std::abs(mx));
    if (avg < lo || avg > hi) return std::nullopt;
    if (n == 2) {
        if (std::abs((mn + mx) / 2.0 - avg) > 1e-6 * std::max(1.0, std::abs(avg)))
            return std::nullopt;
        return std::vector<double>{mn, mx};
    }
    double mid = (double(n) * avg - mn - mx) / double(n - 2);
    if (mid < lo || mid > hi) return std::nullopt;
    std::vector<double> vals(size_t(n), std::clamp(mid, mn, mx));
    vals.front() = mn;
    vals.back() = mx;
    return vals;
}

/// Positive weights summing to 1 whose r-weighted mean equals rho: uniform
/// weights blended toward the extreme entry that moves the mean the right way.
std::optional<std::vector<double>> blend_weights(const std::vector<double>& r, double rho) {
    size_t n = r.size();
    double avg = 0.0;
    for (double v : r) avg += v;
    avg /= double(n);
    std::vector<double> w(n, 1.0 / double(n));
    double tol = 1e-9 * std::max(1.0, std::abs(avg));
    if (std::abs(rho - avg) <= tol) return w;
    size_t pivot = rho > avg
                       ? size_t(std::max_element(r.begin(), r.end()) - r.begin())
                       : size_t(std::min_element(r.begin(), r.end()) - r.begin());
    double extreme = r[pivot];
    if (std::abs(extreme - avg) <= tol) return std::nullopt;  // inconsistent summary
    double lambda = (rho - avg) / (extreme - avg);
    if (lambda < 0.0 || lambda > 1.0 - 1e-9) return std::nullopt;
    for (double& wi : w) wi *= 1.0 - lambda;
    w[pivot] += lambda;
    return w;
}

}  // namespace

DomainHooks::DomainHooks(const DomainSchema& schema, const ConstraintSet& cs, double alpha,
                         const Vec& x0_norm)
    : schema_(schema), cs_(cs), alpha_(alpha) {
    const Normalizer& nm = cs_.normalizer();
    Vec raw = nm.denormalize(x0_norm);
    int nip = std::max(1, int(std::llround(raw[DomainSchema::Nip])));

    auto build = [&](double total_num, double total_den, double mn, double avg, double mx,
                     std::vector<std::pair<double, double>>& out) {
        if (total_den <= 0.0) return false;
        if (nip == 1) {
            out = {{total_num, total_den}};
            return true;
        }
        auto vals = reconstruct_values(mn, avg, mx, nip);
        if (!vals) return false;
        auto w = blend_weights(*vals, total_num / total_den);
        if (!w) return false;
        out.clear();
        for (int i = 0; i < nip; ++i) {
            double den = total_den * (*w)[size_t(i)];
            out.push_back({(*vals)[size_t(i)] * den, den});
        }
        return true;
    };
    bytes_ok_ = build(raw[DomainSchema::TotalRecv], raw[DomainSchema::TotalSent],
                      raw[DomainSchema::MinRatio], raw[DomainSchema::AvgRatio],
                      raw[DomainSchema::MaxRatio], bytes_);
    http_ok_ = build(raw[DomainSchema::NumPost], raw[DomainSchema::NumGet],
                     raw[DomainSchema::MinPost], raw[DomainSchema::AvgPost],
                     raw[DomainSchema::MaxPost], http_);
}

int DomainHooks::choose_representative(const Vec&, const Vec& grad,
                                       const DependencyFamily& fam) const {
    if (fam.id == "http-method") {
        return grad[DomainSchema::NumPost] <= grad[DomainSchema::NumGet] ? DomainSchema::NumPost
                                                                         : DomainSchema::NumGet;
    }
    if (fam.id == "result-code") {
        int best = DomainSchema::Num200;
        for (int j = 1; j < 4; ++j)
            if (grad[DomainSchema::Num200 + j] < grad[size_t(best)]) best = DomainSchema::Num200 + j;
        return best;
    }
    return fam.representative;
}

int DomainHooks::init_family(Vec& x, const Vec& grad, int rep_idx, const DependencyFamily& fam) {
    if (fam.id == "connections") {
        if (grad[DomainSchema::NumConn] >= 0.0) return 0;  // counters only grow
    } else if (fam.id == "bytes") {
        if (!bytes_ok_) return 0;
        if (grad[DomainSchema::TotalRecv] >= 0.0 && grad[DomainSchema::TotalSent] >= 0.0) return 0;
    } else if (fam.id == "http-method") {
        if (!http_ok_) return 0;
        if (grad[size_t(rep_idx)] >= 0.0) return 0;
    } else if (fam.id == "result-code") {
        if (grad[size_t(rep_idx)] >= 0.0) return 0;
    } else {
        return 0;  // content and anything else is not attackable
    }
    baseline_raw_ = cs_.normalizer().denormalize(x);
    visit_rep_ = rep_idx;
    pending_is_bytes_ = pending_is_http_ = false;
    return 1;
}

std::optional<Vec> DomainHooks::update_dep(int, const Vec& x, const Vec& grad,
                                           const DependencyFamily& fam) {
    const Normalizer& nm = cs_.normalizer();
    Vec out = x;
    auto raw_at = [&](size_t i) { return nm.to_raw(i, x[i]); };
    auto base_at = [&](size_t i) { return baseline_raw_[i]; };
    auto put = [&](size_t i, double v) { out[i] = nm.to_norm(i, v); };
    // added event volume: never negative, never past the fitted range
    auto added = [&](size_t i, double candidate_raw) {
        double cap = std::max(nm.maxs[i], base_at(i));
        return std::clamp(candidate_raw, base_at(i), cap) - base_at(i);
    };

    if (fam.id == "connections") {
        double nip = raw_at(DomainSchema::Nip);
        if (nip < 0.5) return std::nullopt;
        double num = base_at(DomainSchema::NumConn) +
                     added(DomainSchema::NumConn, raw_at(DomainSchema::NumConn));
        put(DomainSchema::NumConn, num);
        put(DomainSchema::AvgConn, num / std::round(nip));
        return out;
    }

    if (fam.id == "bytes") {
        double dr = added(DomainSchema::TotalRecv, raw_at(DomainSchema::TotalRecv));
        double ds_cand = nm.to_raw(DomainSchema::TotalSent,
                                   x[DomainSchema::TotalSent] -
                                       alpha_ * grad[DomainSchema::TotalSent]);
        double ds = added(DomainSchema::TotalSent, ds_cand);
        pending_bytes_ = bytes_;
        size_t target = 0;  // the attacker-controlled IP: the heaviest sender
        for (size_t i = 1; i < pending_bytes_.size(); ++i)
            if (pending_bytes_[i].second > pending_bytes_[target].second) target = i;
        pending_bytes_[target].first += dr;
        pending_bytes_[target].second += ds;
        if (pending_bytes_[target].second <= 0.0) return std::nullopt;  // ratio undefined

        double tr = 0.0, ts = 0.0, rmin = std::numeric_limits<double>::infinity(), rmax = 0.0,
               rsum = 0.0;
        for (auto& [recv, sent] : pending_bytes_) {
            if (sent <= 0.0) return std::nullopt;
            double r = recv / sent;
            tr += recv;
            ts += sent;
            rsum += r;
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
        }
        put(DomainSchema::TotalRecv, tr);
        put(DomainSchema::TotalSent, ts);
        put(DomainSchema::AvgRatio, rsum / double(pending_bytes_.size()));
        put(DomainSchema::MinRatio, rmin);
        put(DomainSchema::MaxRatio, rmax);
        pending_is_bytes_ = true;
        return out;
    }

    if (fam.id == "http-method") {
        size_t rep = size_t(visit_rep_);
        size_t other = rep == DomainSchema::NumPost ? DomainSchema::NumGet : DomainSchema::NumPost;
        double drep = added(rep, raw_at(rep));
        double dother = added(other, nm.to_raw(other, x[other] - alpha_ * grad[other]));
        pending_http_ = http_;
        size_t target = 0;
        for (size_t i = 1; i < pending_http_.size(); ++i)
            if (pending_http_[i].second > pending_http_[target].second) target = i;
        double dpost = rep == DomainSchema::NumPost ? drep : dother;
        double dget = rep == DomainSchema::NumGet ? drep : dother;
        pending_http_[target].first += dpost;
        pending_http_[target].second += dget;
        if (pending_http_[target].second <= 0.0) return std::nullopt;

        double post = 0.0, get = 0.0, pmin = std::numeric_limits<double>::infinity(), pmax = 0.0,
               psum = 0.0;
        for (auto& [po, ge] : pending_http_) {
            if (ge <= 0.0) return std::nullopt;
            double r = po / ge;
            post += po;
            get += ge;
            psum += r;
            pmin = std::min(pmin, r);
            pmax = std::max(pmax, r);
        }
        put(DomainSchema::NumPost, post);
        put(DomainSchema::NumGet, get);
        put(DomainSchema::AvgPost, psum / double(pending_http_.size()));
        put(DomainSchema::MinPost, pmin);
        put(DomainSchema::MaxPost, pmax);
        pending_is_http_ = true;
        return out;
    }

    if (fam.id == "result-code") {
        size_t rep = size_t(visit_rep_);
        double d = added(rep, raw_at(rep));
        double counts[4];
        double total = 0.0;
        for (int j = 0; j < 4; ++j) {
            counts[j] = base_at(size_t(DomainSchema::Num200 + j));
            if (size_t(DomainSchema::Num200 + j) == rep) counts[j] += d;
            total += counts[j];
        }
        if (total <= 0.0) return std::nullopt;
        for (int j = 0; j < 4; ++j) {
            put(size_t(DomainSchema::Num200 + j), counts[j]);
            put(size_t(DomainSchema::Frac200 + j), counts[j] / total);
        }
        return out;
    }
    return std::nullopt;
}

void DomainHooks::commit(const Vec&, const DependencyFamily&, int) {
    if (pending_is_bytes_) {
        bytes_ = pending_bytes_;
        pending_is_bytes_ = false;
    }
    if (pending_is_http_) {
        http_ = pending_http_;
        pending_is_http_ = false;
    }
}

Vec DomainHooks::repair(const Vec& x, const Vec& x0) const {
    const Normalizer& nm = cs_.normalizer();
    Vec raw = nm.denormalize(x);
    Vec raw0 = nm.denormalize(x0);
    Vec out = x0;  // immutable features revert to the start point
    auto put = [&](size_t i, double v) { out[i] = nm.to_norm(i, v); };

    // independent mutable features: keep, clamp, round where integral
    for (size_t i = DomainSchema::DomLevels; i <= DomainSchema::AvgBrowser; ++i) {
        if (!cs_.features()[i].is_mutable) continue;
        double v = std::clamp(raw[i], cs_.features()[i].lo, cs_.features()[i].hi);
        if (cs_.features()[i].integral) v = std::round(v);
        put(i, v);
    }

    double nip = std::max(1.0, std::round(raw0[DomainSchema::Nip]));
    double num = std::max(raw[DomainSchema::NumConn], raw0[DomainSchema::NumConn]);
    put(DomainSchema::NumConn, num);
    put(DomainSchema::AvgConn, num / nip);

    double tr = std::max(raw[DomainSchema::TotalRecv], raw0[DomainSchema::TotalRecv]);
    double ts = std::max(raw[DomainSchema::TotalSent], raw0[DomainSchema::TotalSent]);
    put(DomainSchema::TotalRecv, tr);
    put(DomainSchema::TotalSent, ts);
    if (ts > 0.0) {
        put(DomainSchema::AvgRatio, tr / ts);
        put(DomainSchema::MinRatio, tr / ts);
        put(DomainSchema::MaxRatio, tr / ts);
    }

    double post = std::max(raw[DomainSchema::NumPost], raw0[DomainSchema::NumPost]);
    double get = std::max(raw[DomainSchema::NumGet], raw0[DomainSchema::NumGet]);
    put(DomainSchema::NumPost, post);
    put(DomainSchema::NumGet, get);
    if (get > 0.0) {
        put(DomainSchema::AvgPost, post / get);
        put(DomainSchema::MinPost, post / get);
        put(DomainSchema::MaxPost, post / get);
    }

    double total = 0.0;
    double counts[4];
    for (int j = 0; j < 4; ++j) {
        counts[j] = std::max(raw[size_t(DomainSchema::Num200 + j)],
                             raw0[size_t(DomainSchema::Num200 + j)]);
        total += counts[j];
    }
    if (total > 0.0) {
        for (int j = 0; j < 4; ++j) {
            put(size_t(DomainSchema::Num200 + j), counts[j]);
            put(size_t(DomainSchema::Frac200 + j), counts[j] / total);
        }
    }
    return out;
}

FamilyHooks DomainHooks::hooks() {
    FamilyHooks h;
    h.choose_representative = [this](const Vec& x, const Vec& grad, const DependencyFamily& fam) {
        return choose_representative(x, grad, fam);
    };
    h.init_family = [this](Vec& x, const Vec& grad, int rep, const DependencyFamily& fam) {
        return init_family(x, grad, rep, fam);
    };
    h.update_dep = [this](int s, const Vec& x, const Vec& grad, const DependencyFamily& fam) {
        return update_dep(s, x, grad, fam);
    };
    h.commit = [this](const Vec& accepted, const DependencyFamily& fam, int s) {
        commit(accepted, fam, s);
    };
    h.repair = [this](const Vec& x, const Vec& x0) { return repair(x, x0); };
    return h;
}

}  // namespace fence
