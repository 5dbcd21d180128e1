#pragma once

#include <charconv>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace fence {

using Vec = std::vector<double>;

/// Input does not match the schema the component was built for
/// (wrong dimension, wrong schema id, wrong file layout).
class SchemaError : public std::runtime_error {
public:
    explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
};

/// Unreadable, malformed or degenerate input data.
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Non-finite values showed up where the math requires finite ones.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

/// Per-feature min-max scaling fitted on training data. Model inputs,
/// gradients and attack distances all live in normalized units; raw units
/// are recovered only where raw-space semantics demand them.
struct Normalizer {
    Vec mins;
    Vec maxs;

    size_t dim() const { return mins.size(); }

    double span(size_t i) const {
        double s = maxs[i] - mins[i];
        return s > 0.0 ? s : 1.0;
    }

    double to_norm(size_t i, double raw) const { return (raw - mins[i]) / span(i); }
    double to_raw(size_t i, double z) const { return mins[i] + z * span(i); }

    Vec normalize(const Vec& raw) const {
        Vec out(raw.size());
        for (size_t i = 0; i < raw.size(); ++i) out[i] = to_norm(i, raw[i]);
        return out;
    }

    Vec denormalize(const Vec& z) const {
        Vec out(z.size());
        for (size_t i = 0; i < z.size(); ++i) out[i] = to_raw(i, z[i]);
        return out;
    }

    static Normalizer identity(size_t d) {
        Normalizer n;
        n.mins.assign(d, 0.0);
        n.maxs.assign(d, 1.0);
        return n;
    }

    static Normalizer fit(const std::vector<Vec>& rows) {
        if (rows.empty()) throw DataError("Normalizer::fit: empty dataset");
        size_t d = rows.front().size();
        Normalizer n;
        n.mins.assign(d, std::numeric_limits<double>::infinity());
        n.maxs.assign(d, -std::numeric_limits<double>::infinity());
        for (const auto& r : rows) {
            if (r.size() != d) throw SchemaError("Normalizer::fit: ragged rows");
            for (size_t i = 0; i < d; ++i) {
                n.mins[i] = std::min(n.mins[i], r[i]);
                n.maxs[i] = std::max(n.maxs[i], r[i]);
            }
        }
        return n;
    }
};

inline double l2_distance(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return std::sqrt(s);
}

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

/// Shortest decimal string that parses back to exactly the same double.
inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

/// Hex-float encoding, exact by construction. Used by checkpoint files.
inline std::string format_hexfloat(double v) {
    char buf[64];
    int n = std::snprintf(buf, sizeof(buf), "%a", v);
    return std::string(buf, static_cast<size_t>(n));
}

inline double parse_double(const std::string& s) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);  // handles both decimal and hex-float
        if (pos != s.size()) throw DataError("trailing characters in number: '" + s + "'");
        return v;
    } catch (const std::invalid_argument&) {
        throw DataError("not a number: '" + s + "'");
    } catch (const std::out_of_range&) {
        throw DataError("number out of range: '" + s + "'");
    }
}

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace fence
