#include "fence/netflow.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

namespace fence {

void ConnRecord::validate() const {
    if (duration < 0) throw DataError("ConnRecord: negative duration");
    if (orig_bytes < 0 || resp_bytes < 0 || orig_pkts < 0 || resp_pkts < 0)
        throw DataError("ConnRecord: negative counter");
    if (orig_pkts > 0 && double(orig_bytes) / double(orig_pkts) > 1500.0)
        throw DataError("ConnRecord: sent packets exceed 1500 bytes each");
}

const char* proto_name(ConnRecord::Proto p) {
    return p == ConnRecord::Proto::Tcp ? "TCP" : "UDP";
}

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

double num_or_zero(const std::string& tok) {
    if (tok.empty() || tok == "-") return 0.0;  // Zeek's unset marker
    return parse_double(tok);
}

long long int_or_zero(const std::string& tok) {
    return static_cast<long long>(std::llround(num_or_zero(tok)));
}

bool parse_proto(const std::string& tok, ConnRecord::Proto& out) {
    std::string p;
    for (char c : tok) p += char(std::tolower(static_cast<unsigned char>(c)));
    if (p == "tcp") {
        out = ConnRecord::Proto::Tcp;
        return true;
    }
    if (p == "udp") {
        out = ConnRecord::Proto::Udp;
        return true;
    }
    return false;
}

const char* kCompactHeader = "ts,id.dest_port,proto,duration,o_bytes,r_bytes,o_pkts,r_pkts,state";

}  // namespace

ParseResult parse_zeek_log(std::istream& is) {
    ParseResult res;
    std::string line;
    size_t lineno = 0;

    bool format_known = false;
    bool zeek_mode = false;
    std::vector<std::string> fields;  // zeek column names

    auto col = [&](const char* name) {
        for (size_t i = 0; i < fields.size(); ++i)
            if (fields[i] == name) return int(i);
        return -1;
    };

    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;

        if (line[0] == '#') {
            zeek_mode = true;
            format_known = true;
            if (line.rfind("#fields", 0) == 0) {
                fields = split(line, '\t');
                fields.erase(fields.begin());  // drop the '#fields' token
            }
            continue;
        }
        if (!format_known) {
            if (line == kCompactHeader) {
                zeek_mode = false;
                format_known = true;
                continue;
            }
            throw DataError("line " + std::to_string(lineno) + ": unrecognized log header");
        }

        if (zeek_mode) {
            if (fields.empty()) throw DataError("zeek log has data before a #fields line");
            auto toks = split(line, '\t');
            if (toks.size() != fields.size())
                throw DataError("line " + std::to_string(lineno) + ": expected " +
                                std::to_string(fields.size()) + " columns, got " +
                                std::to_string(toks.size()));
            ConnRecord r;
            int c;
            if ((c = col("ts")) >= 0) r.ts = num_or_zero(toks[size_t(c)]);
            if ((c = col("id.resp_p")) >= 0) r.dest_port = int(int_or_zero(toks[size_t(c)]));
            if ((c = col("id.orig_h")) >= 0) r.src = toks[size_t(c)];
            if ((c = col("id.resp_h")) >= 0) r.dst = toks[size_t(c)];
            if ((c = col("duration")) >= 0) r.duration = num_or_zero(toks[size_t(c)]);
            if ((c = col("orig_bytes")) >= 0) r.orig_bytes = int_or_zero(toks[size_t(c)]);
            if ((c = col("resp_bytes")) >= 0) r.resp_bytes = int_or_zero(toks[size_t(c)]);
            if ((c = col("orig_pkts")) >= 0) r.orig_pkts = int_or_zero(toks[size_t(c)]);
            if ((c = col("resp_pkts")) >= 0) r.resp_pkts = int_or_zero(toks[size_t(c)]);
            if ((c = col("conn_state")) >= 0) r.state = toks[size_t(c)];
            if ((c = col("proto")) < 0 || !parse_proto(toks[size_t(c)], r.proto)) {
                ++res.skipped;
                continue;
            }
            res.records.push_back(std::move(r));
        } else {
            auto toks = split(line, ',');
            if (toks.size() != 9)
                throw DataError("line " + std::to_string(lineno) + ": expected 9 columns, got " +
                                std::to_string(toks.size()));
            ConnRecord r;
            r.ts = num_or_zero(toks[0]);
            r.dest_port = int(int_or_zero(toks[1]));
            if (!parse_proto(toks[2], r.proto)) {
                ++res.skipped;
                continue;
            }
            r.duration = num_or_zero(toks[3]);
            r.orig_bytes = int_or_zero(toks[4]);
            r.resp_bytes = int_or_zero(toks[5]);
            r.orig_pkts = int_or_zero(toks[6]);
            r.resp_pkts = int_or_zero(toks[7]);
            r.state = toks[8];
            res.records.push_back(std::move(r));
        }
    }
    return res;
}

ParseResult parse_zeek_string(const std::string& text) {
    std::istringstream is(text);
    return parse_zeek_log(is);
}

void write_records(std::ostream& os, const std::vector<ConnRecord>& records, LogFormat fmt) {
    if (fmt == LogFormat::CompactCsv) {
        os << kCompactHeader << "\n";
        for (const auto& r : records) {
            os << format_double(r.ts) << "," << r.dest_port << "," << proto_name(r.proto) << ","
               << format_double(r.duration) << "," << r.orig_bytes << "," << r.resp_bytes << ","
               << r.orig_pkts << "," << r.resp_pkts << "," << r.state << "\n";
        }
        return;
    }
    os << "#separator \\x09\n";
    os << "#fields\tts\tid.orig_h\tid.orig_p\tid.resp_h\tid.resp_p\tproto\tduration\t"
          "orig_bytes\tresp_bytes\tconn_state\torig_pkts\tresp_pkts\n";
    for (const auto& r : records) {
        os << format_double(r.ts) << "\t" << (r.src.empty() ? "-" : r.src) << "\t0\t"
           << (r.dst.empty() ? "-" : r.dst) << "\t" << r.dest_port << "\t"
           << (r.proto == ConnRecord::Proto::Tcp ? "tcp" : "udp") << "\t"
           << format_double(r.duration) << "\t" << r.orig_bytes << "\t" << r.resp_bytes << "\t"
           << r.state << "\t" << r.orig_pkts << "\t" << r.resp_pkts << "\n";
    }
}

std::string records_to_string(const std::vector<ConnRecord>& records, LogFormat fmt) {
    std::ostringstream os;
    write_records(os, records, fmt);
    return os.str();
}

// ---------------------------------------------------------------------------

TrafficProfile benign_profile() {
    TrafficProfile p;
    p.name = "benign";
    p.port_weights = {{80, 0.26}, {443, 0.28}, {53, 0.17}, {22, 0.04}, {25, 0.04},
                      {110, 0.03}, {143, 0.03}, {993, 0.03}, {8080, 0.04}, {123, 0.03},
                      {9999, 0.05}};
    p.tcp_fraction = 0.8;
    p.conns_per_window_mean = 9.0;
    p.conns_per_window_min = 2;
    p.pkts_log_mu = std::log(22.0);
    p.pkts_log_sigma = 1.0;
    p.bytes_per_pkt_lo = 300.0;
    p.bytes_per_pkt_hi = 1400.0;
    p.dur_per_pkt_lo = 0.01;
    p.dur_per_pkt_hi = 0.25;
    p.resp_pkts_factor_lo = 0.6;
    p.resp_pkts_factor_hi = 1.4;
    p.resp_zero_prob = 0.05;
    return p;
}

TrafficProfile botnet_profile() {
    TrafficProfile p;
    p.name = "botnet";
    p.port_weights = {{6667, 0.40}, {443, 0.20}, {53, 0.15}, {80, 0.10}, {4444, 0.15}};
    p.tcp_fraction = 0.85;
    p.conns_per_window_mean = 18.0;
    p.conns_per_window_min = 3;
    p.pkts_log_mu = std::log(3.0);
    p.pkts_log_sigma = 0.6;
    p.bytes_per_pkt_lo = 40.0;
    p.bytes_per_pkt_hi = 220.0;
    p.dur_per_pkt_lo = 0.02;
    p.dur_per_pkt_hi = 0.6;
    p.resp_pkts_factor_lo = 0.0;
    p.resp_pkts_factor_hi = 0.4;
    p.resp_zero_prob = 0.5;
    return p;
}

std::vector<ConnRecord> generate_synthetic_traffic(uint64_t seed, const TrafficProfile& profile,
                                                   size_t n_sources, size_t n_windows,
                                                   double window_seconds) {
    std::vector<ConnRecord> out;
    double total_w = 0.0;
    for (auto& [port, w] : profile.port_weights) total_w += w;

    for (size_t src_i = 0; src_i < n_sources; ++src_i) {
        // one independent stream per source so shards can be generated concurrently
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + src_i);
        std::uniform_real_distribution<double> uni(0.0, 1.0);
        std::string src = profile.name + "-" + std::to_string(src_i);
        for (size_t w = 0; w < n_windows; ++w) {
            std::poisson_distribution<int> conns_dist(profile.conns_per_window_mean);
            int n_conns = std::max(profile.conns_per_window_min, conns_dist(rng));
            for (int k = 0; k < n_conns; ++k) {
                ConnRecord r;
                double pick = uni(rng) * total_w;
                r.dest_port = profile.port_weights.back().first;
                for (auto& [port, wgt] : profile.port_weights) {
                    if (pick < wgt) {
                        r.dest_port = port;
                        break;
                    }
                    pick -= wgt;
                }
                r.proto = uni(rng) < profile.tcp_fraction ? ConnRecord::Proto::Tcp
                                                          : ConnRecord::Proto::Udp;
                std::normal_distribution<double> logn(profile.pkts_log_mu, profile.pkts_log_sigma);
                r.orig_pkts = std::max<long long>(1, std::llround(std::exp(logn(rng))));
                double bpp = profile.bytes_per_pkt_lo +
                             uni(rng) * (profile.bytes_per_pkt_hi - profile.bytes_per_pkt_lo);
                r.orig_bytes = std::max<long long>(
                    1, std::llround(std::floor(bpp * double(r.orig_pkts))));
                double dpp = profile.dur_per_pkt_lo +
                             uni(rng) * (profile.dur_per_pkt_hi - profile.dur_per_pkt_lo);
                r.duration = dpp * double(r.orig_pkts);
                if (uni(rng) < profile.resp_zero_prob) {
                    r.resp_pkts = 0;
                    r.resp_bytes = 0;
                    r.state = "OTH";
                } else {
                    double rf = profile.resp_pkts_factor_lo +
                                uni(rng) * (profile.resp_pkts_factor_hi - profile.resp_pkts_factor_lo);
                    r.resp_pkts = std::llround(rf * double(r.orig_pkts));
                    double rbpp = profile.bytes_per_pkt_lo +
                                  uni(rng) * (profile.bytes_per_pkt_hi - profile.bytes_per_pkt_lo);
                    r.resp_bytes = r.resp_pkts > 0
                                       ? std::llround(std::floor(rbpp * double(r.resp_pkts)))
                                       : 0;
                    r.state = "SF";
                }
                r.ts = double(w) * window_seconds + uni(rng) * (window_seconds - 1e-3);
                r.src = src;
                r.dst = "peer-" + std::to_string(r.dest_port);
                r.validate();
                out.push_back(std::move(r));
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const ConnRecord& a, const ConnRecord& b) {
        if (a.ts != b.ts) return a.ts < b.ts;
        return a.src < b.src;
    });
    return out;
}

// ---------------------------------------------------------------------------
// Raw representation
// ---------------------------------------------------------------------------

namespace {
const std::vector<int> kStandardPorts = {20, 21, 22, 23, 25, 53, 80, 110, 123,
                                         135, 138, 143, 161, 443, 465, 993, 8080};
}

RawSchema RawSchema::standard() {
    RawSchema s;
    s.ports = kStandardPorts;
    return s;
}

int RawSchema::port_category(int port) const {
    for (size_t i = 0; i < ports.size(); ++i)
        if (ports[i] == port) return int(i);
    return int(ports.size());  // OTHER
}

std::vector<std::string> RawSchema::feature_names() const {
    std::vector<std::string> names;
    for (int p : ports) names.push_back("port_" + std::to_string(p));
    names.push_back("port_OTHER");
    names.push_back("proto_TCP");
    names.push_back("proto_UDP");
    names.push_back("duration");
    names.push_back("orig_bytes");
    names.push_back("resp_bytes");
    names.push_back("orig_pkts");
    names.push_back("resp_pkts");
    return names;
}

Vec RawSchema::vectorize(const ConnRecord& rec) const {
    Vec v(dim(), 0.0);
    v[size_t(port_category(rec.dest_port))] = 1.0;
    v[rec.proto == ConnRecord::Proto::Tcp ? idx_proto_tcp() : idx_proto_udp()] = 1.0;
    v[idx_duration()] = rec.duration;
    v[idx_orig_bytes()] = double(rec.orig_bytes);
    v[idx_resp_bytes()] = double(rec.resp_bytes);
    v[idx_orig_pkts()] = double(rec.orig_pkts);
    v[idx_resp_pkts()] = double(rec.resp_pkts);
    return v;
}

ConstraintSet RawSchema::constraints(const Normalizer& norm) const {
    std::vector<FeatureDef> defs;
    auto names = feature_names();
    for (size_t i = 0; i < dim(); ++i) {
        FeatureDef d;
        d.name = names[i];
        d.lo = 0.0;
        if (i < categories() + 2) {
            d.hi = 1.0;  // one-hot slots
            d.integral = true;
        } else {
            d.hi = std::numeric_limits<double>::infinity();
            d.integral = i != idx_duration();
        }
        defs.push_back(d);
    }
    // the attacker can only add to what it already sends
    for (size_t i : {idx_duration(), idx_orig_bytes(), idx_orig_pkts()}) {
        defs[i].is_mutable = true;
        defs[i].monotone_up = true;
    }

    std::vector<DependencyFamily> fams;
    {
        DependencyFamily ohe_port;
        ohe_port.id = "ohe-port";
        for (size_t c = 0; c < categories(); ++c) ohe_port.members.push_back(int(c));
        ohe_port.representative = 0;
        OheDep dep;
        dep.members = ohe_port.members;
        ohe_port.kind.node = dep;
        fams.push_back(std::move(ohe_port));
    }
    {
        DependencyFamily ohe_proto;
        ohe_proto.id = "ohe-proto";
        ohe_proto.members = {int(idx_proto_tcp()), int(idx_proto_udp())};
        ohe_proto.representative = int(idx_proto_tcp());
        OheDep dep;
        dep.members = ohe_proto.members;
        ohe_proto.kind.node = dep;
        fams.push_back(std::move(ohe_proto));
    }
    {
        DependencyFamily sent;
        sent.id = "sent-traffic";
        sent.members = {int(idx_duration()), int(idx_orig_bytes()), int(idx_orig_pkts())};
        sent.representative = int(idx_orig_pkts());
        CompositeDep comp;
        DependencyKind bytes_band;
        bytes_band.node = RatioDep{int(idx_orig_bytes()), int(idx_orig_pkts()),
                                   pkt_bytes_min, pkt_bytes_max};
        DependencyKind dur_band;
        dur_band.node = RatioDep{int(idx_duration()), int(idx_orig_pkts()), idle_floor, idle_cap};
        comp.parts.push_back(bytes_band);
        comp.parts.push_back(dur_band);
        sent.kind.node = comp;
        fams.push_back(std::move(sent));
    }
    return ConstraintSet("netflow-raw", std::move(defs), std::move(fams), norm);
}

RawConnHooks::RawConnHooks(const RawSchema& schema, const ConstraintSet& cs, double alpha,
                           ConnRecord original)
    : schema_(schema), cs_(cs), alpha_(alpha), original_(std::move(original)) {}

ConnRecord RawConnHooks::modified_record(const Vec& x_norm) const {
    const Normalizer& nm = cs_.normalizer();
    ConnRecord r = original_;
    r.duration = nm.to_raw(schema_.idx_duration(), x_norm[schema_.idx_duration()]);
    r.orig_bytes = std::llround(nm.to_raw(schema_.idx_orig_bytes(), x_norm[schema_.idx_orig_bytes()]));
    r.orig_pkts = std::llround(nm.to_raw(schema_.idx_orig_pkts(), x_norm[schema_.idx_orig_pkts()]));
    return r;
}

FamilyHooks RawConnHooks::hooks() {
    FamilyHooks h;
    h.init_family = [this](Vec& x, const Vec&, int, const DependencyFamily&) {
        baseline_raw_ = cs_.normalizer().denormalize(x);
        return 1;  // the attacker extends the one connection it controls
    };
    h.update_dep = [this](int, const Vec& x, const Vec& grad,
                          const DependencyFamily&) -> std::optional<Vec> {
        const Normalizer& nm = cs_.normalizer();
        size_t ip = schema_.idx_orig_pkts(), ib = schema_.idx_orig_bytes(),
               id = schema_.idx_duration();
        double base_p = baseline_raw_[ip], base_b = baseline_raw_[ib], base_d = baseline_raw_[id];

        double cap_p = std::max(nm.maxs[ip], base_p);
        double pkts = std::clamp(nm.to_raw(ip, x[ip]), base_p, cap_p);
        long long p = std::max<long long>(1, std::llround(std::floor(pkts)));
        p = std::max(p, std::llround(base_p));

        // bytes follow their own gradient, clamped into the per-packet band,
        // the fitted range, and the add-only floor
        double cand_b = nm.to_raw(ib, x[ib] - alpha_ * grad[ib]);
        double lo_b = std::max({schema_.pkt_bytes_min * double(p), base_b,
                                std::min(nm.mins[ib], base_b)});
        double hi_b = std::min(schema_.pkt_bytes_max * double(p),
                               std::max(nm.maxs[ib], base_b));
        hi_b = std::max(hi_b, base_b);  // an infeasible start is never forced down
        if (std::ceil(lo_b - 1e-9) > std::floor(hi_b + 1e-9)) return std::nullopt;
        long long b = std::llround(std::clamp(cand_b, lo_b, hi_b));
        b = std::clamp(b, (long long)std::ceil(lo_b - 1e-9), (long long)std::floor(hi_b + 1e-9));

        double cand_d = nm.to_raw(id, x[id] - alpha_ * grad[id]);
        double lo_d = std::max({schema_.idle_floor * double(p), base_d,
                                std::min(nm.mins[id], base_d)});
        double hi_d = std::max(std::min(schema_.idle_cap * double(p),
                                        std::max(nm.maxs[id], base_d)),
                               base_d);
        if (lo_d > hi_d) return std::nullopt;
        double d = std::clamp(cand_d, lo_d, hi_d);

        Vec out = x;
        out[ip] = nm.to_norm(ip, double(p));
        out[ib] = nm.to_norm(ib, double(b));
        out[id] = nm.to_norm(id, d);
        return out;
    };
    h.project_to_raw = [this](const Vec& x_star) {
        return records_to_string({modified_record(x_star)}, LogFormat::CompactCsv);
    };
    h.repair = [this](const Vec& x, const Vec& x0) {
        const Normalizer& nm = cs_.normalizer();
        size_t ip = schema_.idx_orig_pkts(), ib = schema_.idx_orig_bytes(),
               id = schema_.idx_duration();
        Vec out = x0;  // immutable features revert to the start
        double p0 = nm.to_raw(ip, x0[ip]), b0 = nm.to_raw(ib, x0[ib]), d0 = nm.to_raw(id, x0[id]);
        long long p = std::max(std::llround(p0), std::llround(nm.to_raw(ip, x[ip])));
        double lo_b = std::max(schema_.pkt_bytes_min * double(p), b0);
        double hi_b = std::max(schema_.pkt_bytes_max * double(p), b0);
        long long b = std::llround(std::clamp(nm.to_raw(ib, x[ib]), lo_b, hi_b));
        double lo_d = std::max(schema_.idle_floor * double(p), d0);
        double hi_d = std::max(schema_.idle_cap * double(p), d0);
        double d = std::clamp(nm.to_raw(id, x[id]), lo_d, hi_d);
        out[ip] = nm.to_norm(ip, double(p));
        out[ib] = nm.to_norm(ib, double(b));
        out[id] = nm.to_norm(id, d);
        return out;
    };
    return h;
}

// ---------------------------------------------------------------------------
// Engineered representation
// ---------------------------------------------------------------------------

EngineeredSchema EngineeredSchema::standard() {
    EngineeredSchema s;
    s.ports = kStandardPorts;
    return s;
}

int EngineeredSchema::port_category(int port) const {
    for (size_t i = 0; i < ports.size(); ++i)
        if (ports[i] == port) return int(i);
    return int(ports.size());
}

int EngineeredSchema::port_of_category(size_t cat) const {
    return cat < ports.size() ? ports[cat] : other_port;
}

bool EngineeredSchema::category_allowed(size_t cat) const {
    if (allowed_ports.empty()) return true;
    int port = port_of_category(cat);
    for (int p : allowed_ports)
        if (p == port) return true;
    return false;
}

std::vector<std::string> EngineeredSchema::feature_names() const {
    static const char* offs[] = {
        "tot_sent_bytes", "min_sent_bytes", "max_sent_bytes",
        "tot_sent_pkts",  "min_sent_pkts",  "max_sent_pkts",
        "tot_sent_dur",   "min_sent_dur",   "max_sent_dur",
        "tot_recv_bytes", "min_recv_bytes", "max_recv_bytes",
        "tot_recv_pkts",  "min_recv_pkts",  "max_recv_pkts",
        "tot_recv_dur",   "min_recv_dur",   "max_recv_dur",
        "tcp_count",      "udp_count",
    };
    std::vector<std::string> names;
    for (size_t c = 0; c < categories(); ++c) {
        std::string port = c < ports.size() ? std::to_string(ports[c]) : "OTHER";
        for (auto* o : offs) names.push_back("p" + port + "_" + o);
    }
    return names;
}

ConstraintSet EngineeredSchema::constraints(const Normalizer& norm) const {
    std::vector<FeatureDef> defs(dim());
    auto names = feature_names();
    for (size_t c = 0; c < categories(); ++c) {
        for (size_t o = 0; o < block_size(); ++o) {
            FeatureDef& d = defs[f(c, o)];
            d.name = names[f(c, o)];
            d.lo = 0.0;
            d.hi = std::numeric_limits<double>::infinity();
            bool duration = o == TotSentDur || o == MinSentDur || o == MaxSentDur ||
                            o == TotRecvDur || o == MinRecvDur || o == MaxRecvDur;
            d.integral = !duration;
            bool sent = o <= MaxSentDur;
            bool count = o == TcpCount || o == UdpCount;
            d.is_mutable = sent || count;  // received-direction statistics are not attacker-visible
            d.monotone_up = count || o == TotSentBytes || o == TotSentPkts || o == TotSentDur;
        }
    }

    std::vector<DependencyFamily> fams;
    for (size_t c = 0; c < categories(); ++c) {
        DependencyFamily fam;
        fam.id = "port-" + (c < ports.size() ? std::to_string(ports[c]) : std::string("OTHER"));
        for (size_t o = 0; o < block_size(); ++o)
            if (defs[f(c, o)].is_mutable) fam.members.push_back(int(f(c, o)));
        fam.representative = int(f(c, TotSentPkts));
        CompositeDep comp;
        std::vector<int> counts = {int(f(c, TcpCount)), int(f(c, UdpCount))};
        auto stat = [&](Offset tot, Offset mn, Offset mx) {
            StatDep s;
            s.tot_idx = int(f(c, size_t(tot)));
            s.min_idx = int(f(c, size_t(mn)));
            s.max_idx = int(f(c, size_t(mx)));
            s.num_sum = counts;
            DependencyKind k;
            k.node = s;
            comp.parts.push_back(k);
        };
        stat(TotSentBytes, MinSentBytes, MaxSentBytes);
        stat(TotSentPkts, MinSentPkts, MaxSentPkts);
        stat(TotSentDur, MinSentDur, MaxSentDur);
        DependencyKind bytes_band;
        bytes_band.node = RatioDep{int(f(c, TotSentBytes)), int(f(c, TotSentPkts)),
                                   pkt_bytes_min, pkt_bytes_max};
        comp.parts.push_back(bytes_band);
        DependencyKind dur_band;
        dur_band.node = RatioDep{int(f(c, TotSentDur)), int(f(c, TotSentPkts)),
                                 idle_floor, idle_cap};
        comp.parts.push_back(dur_band);
        fam.kind.node = comp;
        fams.push_back(std::move(fam));
    }
    return ConstraintSet("netflow-engineered", std::move(defs), std::move(fams), norm);
}

std::vector<AggregatedWindow> aggregate_window(const std::vector<ConnRecord>& records,
                                               const EngineeredSchema& schema) {
    std::map<WindowKey, Vec> groups;
    for (const auto& r : records) {
        WindowKey key{r.src, (long long)std::floor(r.ts / schema.window_seconds)};
        auto it = groups.try_emplace(key, Vec(schema.dim(), 0.0)).first;
        Vec& v = it->second;
        size_t c = size_t(schema.port_category(r.dest_port));
        auto upd = [&](size_t tot, size_t mn, size_t mx, double val, double seen_before) {
            v[schema.f(c, tot)] += val;
            if (seen_before == 0.0) {
                v[schema.f(c, mn)] = val;
                v[schema.f(c, mx)] = val;
            } else {
                v[schema.f(c, mn)] = std::min(v[schema.f(c, mn)], val);
                v[schema.f(c, mx)] = std::max(v[schema.f(c, mx)], val);
            }
        };
        // a connection with orig_pkts > 0 always raises TotSentPkts, so the
        // total doubles as the first-event marker for the min/max seeds
        double sent_seen = v[schema.f(c, EngineeredSchema::TotSentPkts)] > 0 ? 1.0 : 0.0;
        if (r.orig_pkts > 0) {
            upd(EngineeredSchema::TotSentBytes, EngineeredSchema::MinSentBytes,
                EngineeredSchema::MaxSentBytes, double(r.orig_bytes), sent_seen);
            upd(EngineeredSchema::TotSentPkts, EngineeredSchema::MinSentPkts,
                EngineeredSchema::MaxSentPkts, double(r.orig_pkts), sent_seen);
            upd(EngineeredSchema::TotSentDur, EngineeredSchema::MinSentDur,
                EngineeredSchema::MaxSentDur, r.duration, sent_seen);
        }
        double recv_seen = v[schema.f(c, EngineeredSchema::TotRecvPkts)] > 0 ? 1.0 : 0.0;
        if (r.resp_pkts > 0) {
            upd(EngineeredSchema::TotRecvBytes, EngineeredSchema::MinRecvBytes,
                EngineeredSchema::MaxRecvBytes, double(r.resp_bytes), recv_seen);
            upd(EngineeredSchema::TotRecvPkts, EngineeredSchema::MinRecvPkts,
                EngineeredSchema::MaxRecvPkts, double(r.resp_pkts), recv_seen);
            upd(EngineeredSchema::TotRecvDur, EngineeredSchema::MinRecvDur,
                EngineeredSchema::MaxRecvDur, r.duration, recv_seen);
        }
        v[schema.f(c, r.proto == ConnRecord::Proto::Tcp ? EngineeredSchema::TcpCount
                                                        : EngineeredSchema::UdpCount)] += 1.0;
    }
    std::vector<AggregatedWindow> out;
    out.reserve(groups.size());
    for (auto& [key, vec] : groups) out.push_back({key, std::move(vec)});
    return out;
}

// ---------------------------------------------------------------------------
// Neris hooks
// ---------------------------------------------------------------------------

NerisHooks::NerisHooks(const EngineeredSchema& schema, const ConstraintSet& cs, double alpha,
                       std::string source, double window_start, std::string sink)
    : schema_(schema), cs_(cs), alpha_(alpha), source_(std::move(source)),
      window_start_(window_start), sink_(std::move(sink)) {}

size_t NerisHooks::category_of_family(const DependencyFamily& fam) const {
    return size_t(fam.members.front()) / schema_.block_size();
}

int NerisHooks::init_family(Vec& x, const Vec& grad, int, const DependencyFamily& fam) {
    size_t cat = category_of_family(fam);
    if (!schema_.category_allowed(cat)) return 0;
    size_t itcp = schema_.f(cat, EngineeredSchema::TcpCount);
    size_t iudp = schema_.f(cat, EngineeredSchema::UdpCount);
    // add connections only when that lowers the objective
    bool tcp_ok = grad[itcp] < 0.0;
    bool udp_ok = grad[iudp] < 0.0;
    if (!tcp_ok && !udp_ok) return 0;
    bool use_tcp = tcp_ok && (!udp_ok || grad[itcp] <= grad[iudp]);

    baseline_raw_ = cs_.normalizer().denormalize(x);
    has_pending_ = false;
    pending_ = Visit{};
    pending_.cat = cat;
    pending_.proto = use_tcp ? ConnRecord::Proto::Tcp : ConnRecord::Proto::Udp;
    pending_.s = schema_.conn_add_count;

    size_t icnt = use_tcp ? itcp : iudp;
    x[icnt] = cs_.normalizer().to_norm(icnt, baseline_raw_[icnt] + double(pending_.s));
    return pending_.s;
}

std::optional<Vec> NerisHooks::update_dep(int s, const Vec& x, const Vec& grad,
                                          const DependencyFamily& fam) {
    const Normalizer& nm = cs_.normalizer();
    size_t cat = category_of_family(fam);
    size_t itp = schema_.f(cat, EngineeredSchema::TotSentPkts);
    size_t itb = schema_.f(cat, EngineeredSchema::TotSentBytes);
    size_t itd = schema_.f(cat, EngineeredSchema::TotSentDur);

    double base_p = baseline_raw_[itp];
    double base_b = baseline_raw_[itb];
    double base_d = baseline_raw_[itd];

    // packets per added connection from the representative's step
    double cap_p = std::max(nm.maxs[itp], base_p);
    if (base_p + double(s) > cap_p + 1e-9) return std::nullopt;  // no room for s packets
    double dp = nm.to_raw(itp, x[itp]) - base_p;
    long long u = std::max<long long>(1, (long long)std::floor(dp / double(s)));
    u = std::min(u, (long long)std::floor((cap_p - base_p) / double(s)));
    if (u < 1) return std::nullopt;

    // total sent bytes: gradient step, then the per-packet band, then the
    // fitted range; everything integral
    double cand_b = nm.to_raw(itb, x[itb] - alpha_ * grad[itb]);
    double lo_b = base_b + schema_.pkt_bytes_min * double(s) * double(u);
    double hi_b = base_b + schema_.pkt_bytes_max * double(s) * double(u);
    lo_b = std::max(lo_b, std::min(nm.mins[itb], base_b));
    hi_b = std::min(hi_b, std::max(nm.maxs[itb], base_b));
    long long blo = (long long)std::ceil(lo_b - 1e-9);
    long long bhi = (long long)std::floor(hi_b + 1e-9);
    if (blo > bhi) return std::nullopt;
    long long tot_b = std::clamp((long long)std::llround(cand_b), blo, bhi);
    long long db = tot_b - std::llround(base_b);

    // duration: same chain, real-valued
    double cand_d = nm.to_raw(itd, x[itd] - alpha_ * grad[itd]);
    double lo_d = base_d + schema_.idle_floor * double(s) * double(u);
    double hi_d = base_d + schema_.idle_cap * double(s) * double(u);
    lo_d = std::max(lo_d, std::min(nm.mins[itd], base_d));
    hi_d = std::min(hi_d, std::max(nm.maxs[itd], base_d));
    if (lo_d > hi_d) return std::nullopt;
    double tot_d = std::clamp(cand_d, lo_d, hi_d);
    double dd = tot_d - base_d;

    // spread the byte total over the s connections, one extra byte at a
    // time, so every connection stays under 1500 bytes per packet
    std::vector<long long> bytes(size_t(s), db / s);
    for (long long r = 0; r < db % s; ++r) bytes[size_t(r)] += 1;

    Vec out = x;
    out[itp] = nm.to_norm(itp, base_p + double(s) * double(u));
    out[itb] = nm.to_norm(itb, double(std::llround(base_b) + db));
    out[itd] = nm.to_norm(itd, base_d + dd);

    double prior = baseline_raw_[schema_.f(cat, EngineeredSchema::TcpCount)] +
                   baseline_raw_[schema_.f(cat, EngineeredSchema::UdpCount)];
    auto stat_minmax = [&](size_t mn, size_t mx, double vmin, double vmax) {
        StatDep dep;
        dep.min_idx = int(mn);
        dep.max_idx = int(mx);
        update_stat(out, vmin, dep, nm, prior);
        update_stat(out, vmax, dep, nm, prior + 1.0);
    };
    stat_minmax(schema_.f(cat, EngineeredSchema::MinSentBytes),
                schema_.f(cat, EngineeredSchema::MaxSentBytes),
                double(bytes.back()), double(bytes.front()));
    stat_minmax(schema_.f(cat, EngineeredSchema::MinSentPkts),
                schema_.f(cat, EngineeredSchema::MaxSentPkts), double(u), double(u));
    double dpc = dd / double(s);
    stat_minmax(schema_.f(cat, EngineeredSchema::MinSentDur),
                schema_.f(cat, EngineeredSchema::MaxSentDur), dpc, dpc);

    pending_.pkts_per_conn = u;
    pending_.bytes = std::move(bytes);
    pending_.dur_per_conn = dpc;
    has_pending_ = true;
    return out;
}

void NerisHooks::commit(const Vec&, const DependencyFamily&, int) {
    if (has_pending_) {
        committed_.push_back(pending_);
        has_pending_ = false;
    }
}

std::vector<ConnRecord> NerisHooks::emitted() const {
    std::vector<ConnRecord> out;
    size_t total = 0;
    for (const auto& v : committed_) total += size_t(v.s);
    size_t k = 0;
    for (const auto& v : committed_) {
        for (int j = 0; j < v.s; ++j, ++k) {
            ConnRecord r;
            r.ts = window_start_ +
                   double(k + 1) * schema_.window_seconds / double(total + 1);
            r.dest_port = schema_.port_of_category(v.cat);
            r.proto = v.proto;
            r.duration = v.dur_per_conn;
            r.orig_bytes = v.bytes[size_t(j)];
            r.orig_pkts = v.pkts_per_conn;
            r.resp_bytes = 0;  // the controlled external IP never answers
            r.resp_pkts = 0;
            r.state = "OTH";
            r.src = source_;
            r.dst = sink_;
            r.validate();
            out.push_back(std::move(r));
        }
    }
    return out;
}

std::string NerisHooks::project_to_raw(const Vec&) const {
    return records_to_string(emitted(), LogFormat::CompactCsv);
}

Vec NerisHooks::repair(const Vec& x, const Vec& x0) const {
    const Normalizer& nm = cs_.normalizer();
    Vec raw = nm.denormalize(x);
    Vec raw0 = nm.denormalize(x0);
    Vec out = x0;  // everything not explicitly repaired reverts to the start

    for (size_t c = 0; c < schema_.categories(); ++c) {
        auto at = [&](size_t off) { return schema_.f(c, off); };
        long long dtcp = std::max<long long>(
            0, std::llround(raw[at(EngineeredSchema::TcpCount)]) -
                   std::llround(raw0[at(EngineeredSchema::TcpCount)]));
        long long dudp = std::max<long long>(
            0, std::llround(raw[at(EngineeredSchema::UdpCount)]) -
                   std::llround(raw0[at(EngineeredSchema::UdpCount)]));
        // the representative's value is kept (rounded to whole packets)
        long long dp = std::max<long long>(
            0, std::llround(raw[at(EngineeredSchema::TotSentPkts)] -
                            raw0[at(EngineeredSchema::TotSentPkts)]));
        long long n = dtcp + dudp;
        if (n == 0 && dp > 0) {
            n = dtcp = 1;  // packets need a connection to ride on
        }
        if (n == 0) continue;
        long long u = std::max<long long>(1, dp / n);
        dp = n * u;

        double db_cand = raw[at(EngineeredSchema::TotSentBytes)] -
                         raw0[at(EngineeredSchema::TotSentBytes)];
        long long db = std::llround(std::clamp(db_cand, schema_.pkt_bytes_min * double(dp),
                                               schema_.pkt_bytes_max * double(dp)));
        double dd_cand = raw[at(EngineeredSchema::TotSentDur)] -
                         raw0[at(EngineeredSchema::TotSentDur)];
        double dd = std::clamp(dd_cand, schema_.idle_floor * double(dp),
                               schema_.idle_cap * double(dp));

        out[at(EngineeredSchema::TcpCount)] =
            nm.to_norm(at(EngineeredSchema::TcpCount),
                       raw0[at(EngineeredSchema::TcpCount)] + double(dtcp));
        out[at(EngineeredSchema::UdpCount)] =
            nm.to_norm(at(EngineeredSchema::UdpCount),
                       raw0[at(EngineeredSchema::UdpCount)] + double(dudp));
        out[at(EngineeredSchema::TotSentPkts)] =
            nm.to_norm(at(EngineeredSchema::TotSentPkts),
                       raw0[at(EngineeredSchema::TotSentPkts)] + double(dp));
        out[at(EngineeredSchema::TotSentBytes)] =
            nm.to_norm(at(EngineeredSchema::TotSentBytes),
                       raw0[at(EngineeredSchema::TotSentBytes)] + double(db));
        out[at(EngineeredSchema::TotSentDur)] =
            nm.to_norm(at(EngineeredSchema::TotSentDur),
                       raw0[at(EngineeredSchema::TotSentDur)] + dd);

        double prior = raw0[at(EngineeredSchema::TcpCount)] + raw0[at(EngineeredSchema::UdpCount)];
        long long per_conn_b = db / n;
        long long per_conn_b_hi = per_conn_b + (db % n ? 1 : 0);
        double per_conn_d = dd / double(n);
        auto stat_minmax = [&](size_t mn, size_t mx, double vmin, double vmax) {
            StatDep dep;
            dep.min_idx = int(mn);
            dep.max_idx = int(mx);
            update_stat(out, vmin, dep, nm, prior);
            update_stat(out, vmax, dep, nm, prior + 1.0);
        };
        stat_minmax(at(EngineeredSchema::MinSentBytes), at(EngineeredSchema::MaxSentBytes),
                    double(per_conn_b), double(per_conn_b_hi));
        stat_minmax(at(EngineeredSchema::MinSentPkts), at(EngineeredSchema::MaxSentPkts),
                    double(u), double(u));
        stat_minmax(at(EngineeredSchema::MinSentDur), at(EngineeredSchema::MaxSentDur),
                    per_conn_d, per_conn_d);
    }
    return out;
}

FamilyHooks NerisHooks::hooks() {
    FamilyHooks h;
    h.init_family = [this](Vec& x, const Vec& grad, int rep, const DependencyFamily& fam) {
        return init_family(x, grad, rep, fam);
    };
    h.update_dep = [this](int s, const Vec& x, const Vec& grad, const DependencyFamily& fam) {
        return update_dep(s, x, grad, fam);
    };
    h.commit = [this](const Vec& accepted, const DependencyFamily& fam, int s) {
        commit(accepted, fam, s);
    };
    h.project_to_raw = [this](const Vec& x_star) { return project_to_raw(x_star); };
    h.repair = [this](const Vec& x, const Vec& x0) { return repair(x, x0); };
    return h;
}

}  // namespace fence
