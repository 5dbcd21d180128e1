#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "fence/attack.hpp"
#include "fence/constraints.hpp"

namespace fence {

/// One Zeek-style connection log entry.
struct ConnRecord {
    double ts = 0.0;
    int dest_port = 0;
    enum class Proto { Tcp, Udp } proto = Proto::Tcp;
    double duration = 0.0;
    long long orig_bytes = 0;
    long long resp_bytes = 0;
    long long orig_pkts = 0;
    long long resp_pkts = 0;
    std::string state = "SF";
    std::string src;
    std::string dst;

    /// duration >= 0, counters >= 0, and sent packets average at most
    /// 1500 bytes each.
    void validate() const;
};

const char* proto_name(ConnRecord::Proto p);

struct ParseResult {
    std::vector<ConnRecord> records;
    size_t skipped = 0;  // lines dropped for an unknown protocol
};

/// Reads either standard Zeek TSV (a '#fields' header, tab-separated, '-'
/// for unset) or the compact comma-separated layout
/// (ts,id.dest_port,proto,duration,o_bytes,r_bytes,o_pkts,r_pkts,state);
/// the format is detected from the header. Throws DataError, naming the
/// line, when a row has the wrong column count.
ParseResult parse_zeek_log(std::istream& is);
ParseResult parse_zeek_string(const std::string& text);

enum class LogFormat { ZeekTsv, CompactCsv };

void write_records(std::ostream& os, const std::vector<ConnRecord>& records, LogFormat fmt);
std::string records_to_string(const std::vector<ConnRecord>& records, LogFormat fmt);

// ---------------------------------------------------------------------------
// Synthetic traffic
// ---------------------------------------------------------------------------

struct TrafficProfile {
    std::string name;  // source ids are "<name>-<k>"
    std::vector<std::pair<int, double>> port_weights;
    double tcp_fraction = 0.9;
    double conns_per_window_mean = 8.0;
    int conns_per_window_min = 1;
    double pkts_log_mu = 3.0;  // lognormal packets per connection
    double pkts_log_sigma = 1.0;
    double bytes_per_pkt_lo = 300.0;
    double bytes_per_pkt_hi = 1400.0;
    double dur_per_pkt_lo = 0.01;  // seconds per packet, bounded by the idle cap
    double dur_per_pkt_hi = 0.25;
    double resp_pkts_factor_lo = 0.6;
    double resp_pkts_factor_hi = 1.4;
    double resp_zero_prob = 0.05;  // peer never answers
};

TrafficProfile benign_profile();
TrafficProfile botnet_profile();

/// Deterministic per seed; every record satisfies the ConnRecord
/// invariants. Sources are "<profile>-<k>", one conn batch per window.
std::vector<ConnRecord> generate_synthetic_traffic(uint64_t seed, const TrafficProfile& profile,
                                                   size_t n_sources, size_t n_windows,
                                                   double window_seconds = 60.0);

// ---------------------------------------------------------------------------
// Raw per-connection representation
// ---------------------------------------------------------------------------

struct RawSchema {
    std::vector<int> ports;  // named categories; anything else maps to OTHER
    double pkt_bytes_min = 20.0;
    double pkt_bytes_max = 1500.0;
    double idle_floor = 1e-3;  // seconds per packet, lower bound
    double idle_cap = 30.0;    // Zeek closes idle connections

    static RawSchema standard();

    size_t dim() const { return ports.size() + 1 + 2 + 5; }
    size_t categories() const { return ports.size() + 1; }
    int port_category(int port) const;  // last category is OTHER

    size_t idx_port(size_t cat) const { return cat; }
    size_t idx_proto_tcp() const { return categories(); }
    size_t idx_proto_udp() const { return categories() + 1; }
    size_t idx_duration() const { return categories() + 2; }
    size_t idx_orig_bytes() const { return categories() + 3; }
    size_t idx_resp_bytes() const { return categories() + 4; }
    size_t idx_orig_pkts() const { return categories() + 5; }
    size_t idx_resp_pkts() const { return categories() + 6; }

    std::vector<std::string> feature_names() const;
    Vec vectorize(const ConnRecord& rec) const;  // raw units
    ConstraintSet constraints(const Normalizer& norm) const;
};

/// Hooks for attacking one connection record: a single family of
/// {duration, sent bytes, sent packets} driven by the packet count, all
/// add-only.
class RawConnHooks {
public:
    RawConnHooks(const RawSchema& schema, const ConstraintSet& cs, double alpha,
                 ConnRecord original);
    FamilyHooks hooks();
    /// The original record with the attacked fields replaced.
    ConnRecord modified_record(const Vec& x_norm) const;

private:
    const RawSchema& schema_;
    const ConstraintSet& cs_;
    double alpha_;
    ConnRecord original_;
    Vec baseline_raw_;
};

// ---------------------------------------------------------------------------
// Engineered per-port window representation
// ---------------------------------------------------------------------------

struct EngineeredSchema {
    std::vector<int> ports;
    double window_seconds = 60.0;
    double pkt_bytes_min = 20.0;  // integral by convention; keeps byte splits exact
    double pkt_bytes_max = 1500.0;
    double idle_floor = 1e-3;
    double idle_cap = 30.0;
    int conn_add_count = 12;       // connections added per family visit
    int other_port = 12345;        // concrete port used when emitting OTHER traffic
    std::vector<int> allowed_ports;  // attack allow-list; empty means every port

    static EngineeredSchema standard();

    // per-category feature block
    enum Offset {
        TotSentBytes = 0, MinSentBytes, MaxSentBytes,
        TotSentPkts, MinSentPkts, MaxSentPkts,
        TotSentDur, MinSentDur, MaxSentDur,
        TotRecvBytes, MinRecvBytes, MaxRecvBytes,
        TotRecvPkts, MinRecvPkts, MaxRecvPkts,
        TotRecvDur, MinRecvDur, MaxRecvDur,
        TcpCount, UdpCount,
    };
    size_t block_size() const { return 20; }
    size_t categories() const { return ports.size() + 1; }
    size_t dim() const { return categories() * block_size(); }
    size_t f(size_t cat, size_t off) const { return cat * block_size() + off; }
    int port_category(int port) const;
    int port_of_category(size_t cat) const;
    bool category_allowed(size_t cat) const;

    std::vector<std::string> feature_names() const;
    ConstraintSet constraints(const Normalizer& norm) const;
};

struct WindowKey {
    std::string source;
    long long window = 0;
    bool operator<(const WindowKey& o) const {
        return source != o.source ? source < o.source : window < o.window;
    }
    bool operator==(const WindowKey& o) const {
        return source == o.source && window == o.window;
    }
};

struct AggregatedWindow {
    WindowKey key;
    Vec features;  // raw units
};

/// Groups records by (source, fixed time window) and fills one feature
/// block per destination-port category: totals are sums, min/max range over
/// per-connection values, plus TCP/UDP connection counts. Ports with no
/// traffic keep an all-zero block.
std::vector<AggregatedWindow> aggregate_window(const std::vector<ConnRecord>& records,
                                               const EngineeredSchema& schema);

/// Hooks for the engineered traffic attack. Each family visit inserts a
/// fixed number of connections on one port and drives the block's totals
/// and per-connection statistics through the ratio/range/stat updates; the
/// committed visits can be projected back to concrete connection records.
class NerisHooks {
public:
    NerisHooks(const EngineeredSchema& schema, const ConstraintSet& cs, double alpha,
               std::string source = "victim", double window_start = 0.0,
               std::string sink = "203.0.113.66");

    FamilyHooks hooks();

    /// Connection records for every committed visit (what PROJECT_TO_RAW
    /// emits).
    std::vector<ConnRecord> emitted() const;

    int init_family(Vec& x, const Vec& grad, int rep_idx, const DependencyFamily& fam);
    std::optional<Vec> update_dep(int s, const Vec& x, const Vec& grad,
                                  const DependencyFamily& fam);
    void commit(const Vec& accepted, const DependencyFamily& fam, int s);
    std::string project_to_raw(const Vec& x_star) const;
    Vec repair(const Vec& x, const Vec& x0) const;

private:
    struct Visit {
        size_t cat = 0;
        ConnRecord::Proto proto = ConnRecord::Proto::Tcp;
        int s = 0;
        long long pkts_per_conn = 0;
        std::vector<long long> bytes;  // one entry per added connection
        double dur_per_conn = 0.0;
    };

    const EngineeredSchema& schema_;
    const ConstraintSet& cs_;
    double alpha_;
    std::string source_;
    double window_start_;
    std::string sink_;

    // per-visit scratch, valid between init_family and commit
    Vec baseline_raw_;
    Visit pending_;
    bool has_pending_ = false;

    std::vector<Visit> committed_;

    size_t category_of_family(const DependencyFamily& fam) const;
};

}  // namespace fence
