#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/mathfn.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

constexpr double kSigmaFloor = 0.11;
constexpr int kSymbolClamp = 255;        // global symbol support is [-255, 255]
constexpr double kSupportSigmas = 16.0;  // per-channel support half-width in sigmas
constexpr double kLikelihoodFloor = 1e-12;

/// P(round(x) == k) for x ~ N(mu, sigma^2), integrated over the unit bin.
inline double discretized_gaussian_pmf(double mu, double sigma, int k) {
    if (sigma < kSigmaFloor)
        throw DataError("discretized_gaussian_pmf: sigma " + std::to_string(sigma) +
                        " below floor " + std::to_string(kSigmaFloor));
    return normal_cdf((k + 0.5 - mu) / sigma) - normal_cdf((k - 0.5 - mu) / sigma);
}

inline double discretized_logistic_pmf(double loc, double scale, int k) {
    return sigmoid_fn((k + 0.5 - loc) / scale) - sigmoid_fn((k - 0.5 - loc) / scale);
}

// ---------------------------------------------------------------------------
// Quantized cumulative tables
// ---------------------------------------------------------------------------

struct CdfTable {
    int sym_min = 0;
    int precision = 16;
    std::vector<std::uint32_t> cum;  // size nsym+1, cum[0]=0, cum.back()=1<<precision

    int size() const { return static_cast<int>(cum.size()) - 1; }
    int sym_max() const { return sym_min + size() - 1; }
};

/// Quantizes a pmf over [sym_min, sym_min+pmf.size()) to integer counts that
/// sum to exactly 2^precision, every symbol keeping at least one count
/// (the excess is taken from the largest bins).
inline CdfTable build_cdf_table(const std::vector<double>& pmf, int sym_min, int precision = 16) {
    if (precision < 1 || precision > 16) throw DataError("build_cdf_table: precision out of range");
    std::uint32_t total = 1u << precision;
    if (pmf.empty() || pmf.size() > total)
        throw DataError("build_cdf_table: support wider than 2^precision symbols");
    double sum = 0.0;
    for (double p : pmf) sum += p;
    if (std::abs(sum - 1.0) > 1e-9)
        throw DataError("build_cdf_table: pmf sums to " + std::to_string(sum));
    std::vector<std::uint32_t> counts(pmf.size());
    std::uint64_t have = 0;
    for (std::size_t i = 0; i < pmf.size(); ++i) {
        auto c = static_cast<std::uint32_t>(
            std::max<long long>(1, std::llround(pmf[i] * static_cast<double>(total))));
        counts[i] = c;
        have += c;
    }
    while (have > total) {
        std::size_t big = 0;
        for (std::size_t i = 1; i < counts.size(); ++i)
            if (counts[i] > counts[big]) big = i;
        std::uint32_t take = static_cast<std::uint32_t>(
            std::min<std::uint64_t>(have - total, counts[big] - 1));
        counts[big] -= take;
        have -= take;
    }
    if (have < total) {
        std::size_t big = 0;
        for (std::size_t i = 1; i < counts.size(); ++i)
            if (counts[i] > counts[big]) big = i;
        counts[big] += static_cast<std::uint32_t>(total - have);
    }
    CdfTable t;
    t.sym_min = sym_min;
    t.precision = precision;
    t.cum.resize(counts.size() + 1);
    t.cum[0] = 0;
    for (std::size_t i = 0; i < counts.size(); ++i) t.cum[i + 1] = t.cum[i] + counts[i];
    return t;
}

/// Ideal code length of the quantized table in bits for a given symbol.
inline double table_bits(const CdfTable& t, int sym) {
    std::size_t i = static_cast<std::size_t>(sym - t.sym_min);
    double freq = static_cast<double>(t.cum[i + 1] - t.cum[i]);
    return static_cast<double>(t.precision) - std::log2(freq);
}

// ---------------------------------------------------------------------------
// Range coder: 32-bit window, byte-wise renormalization, carry handled
// LZMA-style through a cache byte and a pending-0xFF run. Interval splits
// use the exact 64-bit product (range * cum) >> precision, so the only
// redundancy left is the 4-byte final window.
// ---------------------------------------------------------------------------

class RangeEncoder {
public:
    void encode(std::uint32_t cum_lo, std::uint32_t cum_hi, int precision) {
        std::uint64_t r = range_;
        std::uint64_t lo_off = (r * cum_lo) >> precision;
        std::uint64_t hi_off = (r * cum_hi) >> precision;
        low_ += lo_off;
        range_ = static_cast<std::uint32_t>(hi_off - lo_off);
        while (range_ < (1u << 24)) {
            shift_low();
            range_ <<= 8;
        }
    }

    /// Emits the final 4-byte window; the encoder is spent afterwards.
    std::vector<std::uint8_t> finish() {
        for (int i = 0; i < 5; ++i) shift_low();
        return std::move(out_);
    }

private:
    void shift_low() {
        auto carry = static_cast<std::uint32_t>(low_ >> 32);
        if (low_ < 0xFF000000ULL || carry) {
            if (carry && !has_cache_ && pending_ == 0 && out_.empty())
                throw InternalError("range encoder: carry out of stream head");
            if (has_cache_) out_.push_back(static_cast<std::uint8_t>(cache_ + carry));
            for (; pending_ > 0; --pending_)
                out_.push_back(static_cast<std::uint8_t>(0xFF + carry));
            cache_ = static_cast<std::uint8_t>(low_ >> 24);
            has_cache_ = true;
        } else {
            ++pending_;
        }
        low_ = (low_ << 8) & 0xFFFFFFFFULL;
    }

    std::uint64_t low_ = 0;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint8_t cache_ = 0;
    bool has_cache_ = false;
    std::uint64_t pending_ = 0;
    std::vector<std::uint8_t> out_;
};

class RangeDecoder {
public:
    RangeDecoder(const std::uint8_t* data, std::size_t size) : p_(data), end_(data + size) {}

    /// Returns the symbol index within the table (0-based, add sym_min upstream).
    int decode_index(const CdfTable& t) {
        if (!primed_) {
            for (int i = 0; i < 4; ++i) code_ = (code_ << 8) | next_byte();
            primed_ = true;
        }
        std::uint64_t r = range_;
        int lo = 0, hi = t.size();
        while (hi - lo > 1) {
            int mid = (lo + hi) / 2;
            if (((r * t.cum[static_cast<std::size_t>(mid)]) >> t.precision) <= code_)
                lo = mid;
            else
                hi = mid;
        }
        std::uint64_t lo_off = (r * t.cum[static_cast<std::size_t>(lo)]) >> t.precision;
        std::uint64_t hi_off = (r * t.cum[static_cast<std::size_t>(lo + 1)]) >> t.precision;
        code_ -= static_cast<std::uint32_t>(lo_off);
        range_ = static_cast<std::uint32_t>(hi_off - lo_off);
        while (range_ < (1u << 24)) {
            code_ = (code_ << 8) | next_byte();
            range_ <<= 8;
        }
        return lo;
    }

private:
    std::uint8_t next_byte() {
        if (p_ == end_) throw DataError("range decoder: truncated input");
        return *p_++;
    }

    const std::uint8_t* p_;
    const std::uint8_t* end_;
    std::uint32_t range_ = 0xFFFFFFFFu;
    std::uint32_t code_ = 0;
    bool primed_ = false;
};

inline std::vector<std::uint8_t> range_encode(const std::vector<int>& symbols,
                                              const std::vector<CdfTable>& tables) {
    if (symbols.size() != tables.size())
        throw DataError("range_encode: one table per symbol required");
    RangeEncoder enc;
    for (std::size_t i = 0; i < symbols.size(); ++i) {
        const CdfTable& t = tables[i];
        int idx = symbols[i] - t.sym_min;
        if (idx < 0 || idx >= t.size())
            throw DataError("range_encode: symbol " + std::to_string(symbols[i]) +
                            " outside support [" + std::to_string(t.sym_min) + "," +
                            std::to_string(t.sym_max()) + "]");
        enc.encode(t.cum[static_cast<std::size_t>(idx)], t.cum[static_cast<std::size_t>(idx + 1)],
                   t.precision);
    }
    return enc.finish();
}

inline std::vector<int> range_decode(const std::vector<std::uint8_t>& bytes,
                                     const std::vector<CdfTable>& tables, std::size_t count) {
    if (count != tables.size()) throw DataError("range_decode: one table per symbol required");
    std::vector<int> out(count);
    if (count == 0) return out;
    RangeDecoder dec(bytes.data(), bytes.size());
    for (std::size_t i = 0; i < count; ++i)
        out[i] = tables[i].sym_min + dec.decode_index(tables[i]);
    return out;
}

// ---------------------------------------------------------------------------
// Coding-side pmf construction (shared by encoder, decoder and the rate
// estimator so that estimates track realized lengths)
// ---------------------------------------------------------------------------

struct SymbolSupport {
    int lo = 0;
    int hi = 0;
};

inline SymbolSupport gaussian_support(double mu_min, double mu_max, double sigma_max) {
    int lo = static_cast<int>(std::floor(mu_min - kSupportSigmas * sigma_max));
    int hi = static_cast<int>(std::ceil(mu_max + kSupportSigmas * sigma_max));
    lo = std::max(lo, -kSymbolClamp);
    hi = std::min(hi, kSymbolClamp);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

/// Logistic scale has stddev scale*pi/sqrt(3); widen accordingly.
inline SymbolSupport logistic_support(double loc, double scale) {
    double sd = scale * 1.8137993642342178;
    int lo = static_cast<int>(std::floor(loc - kSupportSigmas * sd));
    int hi = static_cast<int>(std::ceil(loc + kSupportSigmas * sd));
    lo = std::max(lo, -kSymbolClamp);
    hi = std::min(hi, kSymbolClamp);
    if (hi < lo) hi = lo;
    return {lo, hi};
}

/// Unit-bin Gaussian pmf over [lo, hi]; the edge symbols absorb the tails,
/// so the vector sums to 1 exactly (up to fp).
inline std::vector<double> gaussian_pmf_vector(double mu, double sigma, SymbolSupport sup) {
    int n = sup.hi - sup.lo + 1;
    std::vector<double> pmf(static_cast<std::size_t>(n));
    if (n == 1) {
        pmf[0] = 1.0;
        return pmf;
    }
    double prev = 0.0;
    for (int k = sup.lo; k < sup.hi; ++k) {
        double c = normal_cdf((k + 0.5 - mu) / sigma);
        pmf[static_cast<std::size_t>(k - sup.lo)] = c - prev;
        prev = c;
    }
    pmf[static_cast<std::size_t>(n - 1)] = 1.0 - prev;
    return pmf;
}

inline std::vector<double> logistic_pmf_vector(double loc, double scale, SymbolSupport sup) {
    int n = sup.hi - sup.lo + 1;
    std::vector<double> pmf(static_cast<std::size_t>(n));
    if (n == 1) {
        pmf[0] = 1.0;
        return pmf;
    }
    double prev = 0.0;
    for (int k = sup.lo; k < sup.hi; ++k) {
        double c = sigmoid_fn((k + 0.5 - loc) / scale);
        pmf[static_cast<std::size_t>(k - sup.lo)] = c - prev;
        prev = c;
    }
    pmf[static_cast<std::size_t>(n - 1)] = 1.0 - prev;
    return pmf;
}

/// Model bits for an integer latent under per-element Gaussian parameters,
/// with the same per-channel support and edge absorption the coder uses.
/// y_hat/mu/sigma: [C,h,w] (or [1,C,h,w]).
inline double estimate_rate_bits(const Tensor& y_hat, const Tensor& mu, const Tensor& sigma) {
    require_same_shape(y_hat, mu, "estimate_rate_bits");
    require_same_shape(y_hat, sigma, "estimate_rate_bits");
    int rank = y_hat.rank();
    if (rank != 3 && rank != 4) throw DataError("estimate_rate_bits: expected [C,h,w] or [B,C,h,w]");
    int C = y_hat.dim(rank - 3);
    std::size_t plane = static_cast<std::size_t>(y_hat.dim(rank - 2)) * y_hat.dim(rank - 1);
    std::size_t batches = y_hat.numel() / (static_cast<std::size_t>(C) * plane);
    double bits = 0.0;
    for (std::size_t b = 0; b < batches; ++b)
        for (int c = 0; c < C; ++c) {
            std::size_t base = (b * C + c) * plane;
            double mu_min = mu.data[base], mu_max = mu.data[base], smax = sigma.data[base];
            for (std::size_t i = 1; i < plane; ++i) {
                mu_min = std::min(mu_min, mu.data[base + i]);
                mu_max = std::max(mu_max, mu.data[base + i]);
                smax = std::max(smax, sigma.data[base + i]);
            }
            SymbolSupport sup = gaussian_support(mu_min, mu_max, smax);
            for (std::size_t i = 0; i < plane; ++i) {
                int k = std::clamp(static_cast<int>(std::llround(y_hat.data[base + i])), sup.lo,
                                   sup.hi);
                double p;
                if (sup.lo == sup.hi)
                    p = 1.0;
                else if (k == sup.lo)
                    p = normal_cdf((k + 0.5 - mu.data[base + i]) / sigma.data[base + i]);
                else if (k == sup.hi)
                    p = 1.0 - normal_cdf((k - 0.5 - mu.data[base + i]) / sigma.data[base + i]);
                else
                    p = discretized_gaussian_pmf(mu.data[base + i], sigma.data[base + i], k);
                bits -= std::log2(std::max(p, kLikelihoodFloor));
            }
        }
    return bits;
}

/// Factorized analogue for the hyper-latent: loc/scale per channel.
inline double estimate_rate_bits_factorized(const Tensor& z_hat, const std::vector<double>& loc,
                                            const std::vector<double>& scale) {
    int rank = z_hat.rank();
    if (rank != 3 && rank != 4)
        throw DataError("estimate_rate_bits_factorized: expected [C,h,w] or [B,C,h,w]");
    int C = z_hat.dim(rank - 3);
    if (loc.size() != static_cast<std::size_t>(C) || scale.size() != static_cast<std::size_t>(C))
        throw DataError("estimate_rate_bits_factorized: loc/scale must have C entries");
    std::size_t plane = static_cast<std::size_t>(z_hat.dim(rank - 2)) * z_hat.dim(rank - 1);
    std::size_t batches = z_hat.numel() / (static_cast<std::size_t>(C) * plane);
    double bits = 0.0;
    for (std::size_t b = 0; b < batches; ++b)
        for (int c = 0; c < C; ++c) {
            SymbolSupport sup = logistic_support(loc[static_cast<std::size_t>(c)],
                                                 scale[static_cast<std::size_t>(c)]);
            std::size_t base = (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                int k = std::clamp(static_cast<int>(std::llround(z_hat.data[base + i])), sup.lo,
                                   sup.hi);
                double p;
                if (sup.lo == sup.hi)
                    p = 1.0;
                else if (k == sup.lo)
                    p = sigmoid_fn((k + 0.5 - loc[static_cast<std::size_t>(c)]) /
                                   scale[static_cast<std::size_t>(c)]);
                else if (k == sup.hi)
                    p = 1.0 - sigmoid_fn((k - 0.5 - loc[static_cast<std::size_t>(c)]) /
                                         scale[static_cast<std::size_t>(c)]);
                else
                    p = discretized_logistic_pmf(loc[static_cast<std::size_t>(c)],
                                                 scale[static_cast<std::size_t>(c)], k);
                bits -= std::log2(std::max(p, kLikelihoodFloor));
            }
        }
    return bits;
}

// ---------------------------------------------------------------------------
// Bitstream container
// ---------------------------------------------------------------------------

struct BitstreamHeader {
    std::uint8_t qp = 0;
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    std::uint8_t image_channels = 0;
    std::uint16_t latent_channels = 0;
    std::uint16_t hyper_channels = 0;
};

struct Bitstream {
    BitstreamHeader header;
    std::vector<std::uint8_t> hyper;
    std::vector<std::uint8_t> main;

    bool operator==(const Bitstream& o) const {
        return header.qp == o.header.qp && header.width == o.header.width &&
               header.height == o.header.height &&
               header.image_channels == o.header.image_channels &&
               header.latent_channels == o.header.latent_channels &&
               header.hyper_channels == o.header.hyper_channels && hyper == o.hyper &&
               main == o.main;
    }
};

namespace wire {

inline void put_u16(std::vector<std::uint8_t>& v, std::uint16_t x) {
    v.push_back(static_cast<std::uint8_t>(x & 0xFF));
    v.push_back(static_cast<std::uint8_t>(x >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>((x >> (8 * i)) & 0xFF));
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace wire

constexpr std::size_t kBitstreamHeaderSize = 4 + 1 + 1 + 2 + 2 + 1 + 2 + 2 + 4 + 4;

inline std::vector<std::uint8_t> serialize_bitstream(const Bitstream& b) {
    std::vector<std::uint8_t> v;
    v.reserve(kBitstreamHeaderSize + b.hyper.size() + b.main.size());
    v.push_back('D');
    v.push_back('P');
    v.push_back('C');
    v.push_back('1');
    v.push_back(1);  // version
    v.push_back(b.header.qp);
    wire::put_u16(v, b.header.width);
    wire::put_u16(v, b.header.height);
    v.push_back(b.header.image_channels);
    wire::put_u16(v, b.header.latent_channels);
    wire::put_u16(v, b.header.hyper_channels);
    wire::put_u32(v, static_cast<std::uint32_t>(b.hyper.size()));
    wire::put_u32(v, static_cast<std::uint32_t>(b.main.size()));
    v.insert(v.end(), b.hyper.begin(), b.hyper.end());
    v.insert(v.end(), b.main.begin(), b.main.end());
    return v;
}

inline Bitstream parse_bitstream(const std::vector<std::uint8_t>& v) {
    if (v.size() < kBitstreamHeaderSize) throw DataError("bitstream: shorter than header");
    if (v[0] != 'D' || v[1] != 'P' || v[2] != 'C' || v[3] != '1')
        throw DataError("bitstream: bad magic");
    if (v[4] != 1)
        throw DataError("bitstream: unsupported version " + std::to_string(int(v[4])));
    Bitstream b;
    b.header.qp = v[5];
    b.header.width = wire::get_u16(&v[6]);
    b.header.height = wire::get_u16(&v[8]);
    b.header.image_channels = v[10];
    b.header.latent_channels = wire::get_u16(&v[11]);
    b.header.hyper_channels = wire::get_u16(&v[13]);
    std::uint32_t hl = wire::get_u32(&v[15]);
    std::uint32_t ml = wire::get_u32(&v[19]);
    if (v.size() != kBitstreamHeaderSize + hl + ml)
        throw DataError("bitstream: payload length mismatch");
    b.hyper.assign(v.begin() + static_cast<long>(kBitstreamHeaderSize),
                   v.begin() + static_cast<long>(kBitstreamHeaderSize + hl));
    b.main.assign(v.begin() + static_cast<long>(kBitstreamHeaderSize + hl), v.end());
    return b;
}

/// Total payload bits per pixel.
inline double bpp_of(const Bitstream& b) {
    return static_cast<double>((b.hyper.size() + b.main.size()) * 8) /
           (static_cast<double>(b.header.width) * b.header.height);
}

}  // namespace dpc
