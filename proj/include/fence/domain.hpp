#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fence/attack.hpp"
#include "fence/constraints.hpp"

namespace fence {

/// 89 domain-reputation features in 7 groups. 31 are attacker-modifiable;
/// the content fractions and the opaque context block are fixed.
struct DomainSchema {
    enum Idx {
        Nip = 0, NumConn, AvgConn,
        TotalRecv, TotalSent, AvgRatio, MinRatio, MaxRatio,
        NumPost, NumGet, AvgPost, MinPost, MaxPost,
        Num200, Num300, Num400, Num500,
        Frac200, Frac300, Frac400, Frac500,
        FracEmpty, FracHtml, FracImg, FracOther,
        DomLevels, SubDomains, DomLength, RegAge, RegValidity,
        UpdateAge, UpdateValidity, NumAsns, NumCountries, AvgOs, AvgBrowser,
        CtxStart = 36,
    };
    static constexpr size_t kDim = 89;
    static constexpr size_t kContextFeatures = kDim - CtxStart;

    bool nip_mutable = false;      // controlling distinct source IPs is costly
    bool reg_age_mutable = true;   // registration age can be waited out
    bool update_age_mutable = true;

    static DomainSchema standard() { return {}; }

    size_t dim() const { return kDim; }
    std::vector<std::string> feature_names() const;
    ConstraintSet constraints(const Normalizer& norm) const;
};

struct ImbalanceConfig {
    int ratio = 1;  // benign per malicious
    int malicious_train = 1230;
    int malicious_test = 500;
    int benign_test = 500;
    uint64_t seed = 7;
};

struct DomainDataset {
    std::vector<Vec> rows;  // raw units
    std::vector<int> labels;
};

/// Class-conditional synthetic generator. Per-IP connection, byte and HTTP
/// events are drawn first and the family features derived from them, so
/// every generated point is feasible by construction. Deterministic per
/// seed and shard-safe (one RNG stream per sample).
DomainDataset generate_synthetic_domains(size_t n_malicious, size_t n_benign, uint64_t seed,
                                         const DomainSchema& schema);

DomainDataset generate_synthetic_domains(const ImbalanceConfig& cfg, const DomainSchema& schema);

void write_domain_csv(std::ostream& os, const DomainSchema& schema, const DomainDataset& data);
DomainDataset read_domain_csv(std::istream& is, const DomainSchema& schema);

/// Family hooks for the domain classifier. Per-IP byte and HTTP event lists
/// are reconstructed from the start point and evolve with every committed
/// update; added events always target one attacker-controlled IP.
class DomainHooks {
public:
    DomainHooks(const DomainSchema& schema, const ConstraintSet& cs, double alpha,
                const Vec& x0_norm);

    FamilyHooks hooks();

    int choose_representative(const Vec& x, const Vec& grad, const DependencyFamily& fam) const;
    int init_family(Vec& x, const Vec& grad, int rep_idx, const DependencyFamily& fam);
    std::optional<Vec> update_dep(int s, const Vec& x, const Vec& grad,
                                  const DependencyFamily& fam);
    void commit(const Vec& accepted, const DependencyFamily& fam, int s);
    Vec repair(const Vec& x, const Vec& x0) const;

    /// Per-IP (received, sent) byte pairs backing the ratio statistics.
    const std::vector<std::pair<double, double>>& byte_events() const { return bytes_; }
    /// Per-IP (post, get) request pairs.
    const std::vector<std::pair<double, double>>& http_events() const { return http_; }

private:
    const DomainSchema& schema_;
    const ConstraintSet& cs_;
    double alpha_;

    std::vector<std::pair<double, double>> bytes_;  // (recv, sent) per IP
    std::vector<std::pair<double, double>> http_;   // (post, get) per IP
    bool bytes_ok_ = false;
    bool http_ok_ = false;

    Vec baseline_raw_;  // per-visit scratch
    int visit_rep_ = -1;
    std::vector<std::pair<double, double>> pending_bytes_;
    std::vector<std::pair<double, double>> pending_http_;
    bool pending_is_bytes_ = false;
    bool pending_is_http_ = false;
};

}  // namespace fence
