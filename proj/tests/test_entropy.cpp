#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "dpc/entropy.hpp"
#include "dpc/random.hpp"

using namespace dpc;

namespace {

// ideal bits of a symbol stream under its quantized tables
double stream_table_bits(const std::vector<int>& syms, const std::vector<CdfTable>& tables) {
    double bits = 0.0;
    for (std::size_t i = 0; i < syms.size(); ++i) bits += table_bits(tables[i], syms[i]);
    return bits;
}

std::vector<CdfTable> random_tables(RandomStream& rng, int count) {
    std::vector<CdfTable> tables;
    tables.reserve(static_cast<std::size_t>(count));
    for (int t = 0; t < count; ++t) {
        int nsym = rng.uniform_int(2, 300);
        std::vector<double> pmf(static_cast<std::size_t>(nsym));
        double sum = 0.0;
        for (double& p : pmf) {
            p = std::pow(rng.uniform(0.01, 1.0), 3.0);
            sum += p;
        }
        for (double& p : pmf) p /= sum;
        tables.push_back(build_cdf_table(pmf, rng.uniform_int(-150, 100)));
    }
    return tables;
}

}  // namespace

TEST(MathFn, ErfPinnedAgainstLibm) {
    double max_err = 0.0;
    for (double x = -6.0; x <= 6.0; x += 0.01)
        max_err = std::max(max_err, std::abs(erf_fn(x) - std::erf(x)));
    EXPECT_LT(max_err, 1e-7);
    EXPECT_NEAR(normal_cdf(0.5), 0.691462, 1e-6);
    EXPECT_NEAR(normal_cdf(0.0), 0.5, 1e-15);
    EXPECT_NEAR(normal_cdf(-8.0) * 1e15, 0.622096, 1e-3);  // far tail stays accurate
}

TEST(Pmf, CenterValue) {
    EXPECT_NEAR(discretized_gaussian_pmf(0.0, 1.0, 0), 0.382925, 1e-5);
    EXPECT_NEAR(discretized_gaussian_pmf(0.0, 1.0, 0), 2.0 * normal_cdf(0.5) - 1.0, 1e-15);
}

TEST(Pmf, Symmetry) {
    for (int k = 1; k <= 6; ++k)
        for (double sigma : {0.11, 0.5, 1.0, 3.0})
            EXPECT_NEAR(discretized_gaussian_pmf(0.0, sigma, k),
                        discretized_gaussian_pmf(0.0, sigma, -k), 1e-12);
}

TEST(Pmf, SumsToOne) {
    double sum = 0.0;
    for (int k = -20; k <= 20; ++k) sum += discretized_gaussian_pmf(0.0, 1.0, k);
    EXPECT_NEAR(sum, 1.0, 1e-12);
}

TEST(Pmf, SigmaFloorEnforced) {
    EXPECT_THROW(discretized_gaussian_pmf(0.0, 0.1, 0), DataError);
    EXPECT_NO_THROW(discretized_gaussian_pmf(0.0, 0.11, 0));
}

TEST(CdfTable, UniformFourSymbols) {
    CdfTable t = build_cdf_table({0.25, 0.25, 0.25, 0.25}, -2);
    ASSERT_EQ(t.size(), 4);
    for (int i = 0; i < 4; ++i)
        EXPECT_EQ(t.cum[static_cast<std::size_t>(i + 1)] - t.cum[static_cast<std::size_t>(i)],
                  16384u);
    EXPECT_EQ(t.cum.back(), 65536u);
    EXPECT_EQ(t.sym_min, -2);
    EXPECT_EQ(t.sym_max(), 1);
}

TEST(CdfTable, TinyMassKeepsACount) {
    CdfTable t = build_cdf_table({0.5, 1e-9, 0.5 - 1e-9}, 0);
    EXPECT_GE(t.cum[2] - t.cum[1], 1u);
    EXPECT_EQ(t.cum.back(), 65536u);
}

TEST(CdfTable, Validation) {
    EXPECT_THROW(build_cdf_table({0.5, 0.4}, 0), DataError);  // does not sum to 1
    std::vector<double> wide(70000, 1.0 / 70000.0);
    EXPECT_THROW(build_cdf_table(wide, 0), DataError);  // support wider than 2^16
}

TEST(RangeCoder, EmptySequence) {
    auto bytes = range_encode({}, {});
    EXPECT_LE(bytes.size(), 8u);
    auto syms = range_decode(bytes, {}, 0);
    EXPECT_TRUE(syms.empty());
}

TEST(RangeCoder, RoundTrip100kRandomTables) {
    RandomStream rng(20240920);
    auto pool = random_tables(rng, 60);
    const std::size_t n = 100000;
    std::vector<CdfTable> tables;
    std::vector<int> syms;
    tables.reserve(n);
    syms.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const CdfTable& t = pool[static_cast<std::size_t>(rng.uniform_int(0, 59))];
        tables.push_back(t);
        syms.push_back(rng.uniform_int(t.sym_min, t.sym_max()));
    }
    auto bytes = range_encode(syms, tables);
    auto back = range_decode(bytes, tables, n);
    ASSERT_EQ(back.size(), syms.size());
    EXPECT_EQ(back, syms);
    // even for adversarially chosen symbols the realized length stays within
    // the quantized cross-entropy plus the final window
    double h = stream_table_bits(syms, tables);
    EXPECT_LE(static_cast<double>(bytes.size()) * 8.0, h + 32.0);
}

TEST(RangeCoder, Uniform256LengthBound) {
    std::vector<double> pmf(256, 1.0 / 256.0);
    CdfTable t = build_cdf_table(pmf, 0);
    RandomStream rng(11);
    const std::size_t n = 10000;
    std::vector<CdfTable> tables(n, t);
    std::vector<int> syms(n);
    for (auto& s : syms) s = rng.uniform_int(0, 255);
    auto bytes = range_encode(syms, tables);
    EXPECT_GE(bytes.size(), n);
    EXPECT_LE(bytes.size(), n + 16);
    EXPECT_EQ(range_decode(bytes, tables, n), syms);
}

TEST(RangeCoder, OptimalityOnGaussianStream) {
    RandomStream rng(12);
    const std::size_t n = 20000;
    std::vector<CdfTable> tables;
    std::vector<int> syms;
    for (std::size_t i = 0; i < n; ++i) {
        double mu = rng.uniform(-3, 3);
        double sigma = rng.uniform(0.2, 2.5);
        SymbolSupport sup = gaussian_support(mu, mu, sigma);
        tables.push_back(build_cdf_table(gaussian_pmf_vector(mu, sigma, sup), sup.lo));
        int k = static_cast<int>(std::llround(mu + sigma * rng.normal()));
        syms.push_back(std::clamp(k, sup.lo, sup.hi));
    }
    auto bytes = range_encode(syms, tables);
    double h = stream_table_bits(syms, tables);
    EXPECT_LE(static_cast<double>(bytes.size()) * 8.0, h + 32.0);
    EXPECT_EQ(range_decode(bytes, tables, n), syms);
}

TEST(RangeCoder, OutOfSupportRejected) {
    CdfTable t = build_cdf_table({0.5, 0.5}, 0);
    EXPECT_THROW(range_encode({2}, {t}), DataError);
    EXPECT_THROW(range_encode({-1}, {t}), DataError);
}

TEST(RangeCoder, TruncatedInputErrors) {
    RandomStream rng(13);
    auto pool = random_tables(rng, 4);
    std::vector<CdfTable> tables;
    std::vector<int> syms;
    for (int i = 0; i < 2000; ++i) {
        const CdfTable& t = pool[static_cast<std::size_t>(i % 4)];
        tables.push_back(t);
        syms.push_back(rng.uniform_int(t.sym_min, t.sym_max()));
    }
    auto bytes = range_encode(syms, tables);
    auto truncated = bytes;
    truncated.pop_back();
    EXPECT_THROW(range_decode(truncated, tables, syms.size()), DataError);
    truncated.resize(truncated.size() / 2);
    EXPECT_THROW(range_decode(truncated, tables, syms.size()), DataError);
}

TEST(RateEstimate, TrivialValues) {
    // single symbol with pmf 0.5 -> 1 bit; pmf ~1 -> ~0 bits; 100 quarters -> 200 bits
    Tensor y({1, 1, 1}, {0.0});
    Tensor mu({1, 1, 1}, {0.0});
    // sigma such that the unit bin holds exactly 0.5:  Phi(.5/s)-Phi(-.5/s) = .5
    // -> .5/s = 0.67448975019608171 -> s = 0.74130110925280102
    Tensor sig({1, 1, 1}, {0.74130110925280102});
    EXPECT_NEAR(estimate_rate_bits(y, mu, sig), 1.0, 1e-9);

    Tensor sig_tiny({1, 1, 1}, {0.11});
    EXPECT_NEAR(estimate_rate_bits(y, mu, sig_tiny), 0.0, 1e-4);

    Tensor y100({1, 10, 10});
    Tensor mu100({1, 10, 10});
    // pmf(0) = 0.25 -> Phi(.5/s)-Phi(-.5/s) = .25 -> .5/s = 0.31863936396437514
    Tensor s100 = Tensor::full({1, 10, 10}, 0.5 / 0.31863936396437514);
    EXPECT_NEAR(estimate_rate_bits(y100, mu100, s100), 200.0, 1e-6);
}

TEST(RateEstimate, TracksRealizedBitsWithinTwoPercent) {
    RandomStream rng(14);
    int C = 8, H = 24, W = 24;  // 4608 symbols
    Tensor mu({C, H, W}), sigma({C, H, W}), y({C, H, W});
    for (int c = 0; c < C; ++c) {
        double center = rng.uniform(-2, 2);
        for (int i = 0; i < H * W; ++i) {
            std::size_t idx = static_cast<std::size_t>(c) * H * W + i;
            mu.data[idx] = center + rng.uniform(-1, 1);
            sigma.data[idx] = rng.uniform(0.25, 2.0);
            y.data[idx] = std::llround(mu.data[idx] + sigma.data[idx] * rng.normal());
        }
    }
    double est = estimate_rate_bits(y, mu, sigma);

    // encode with per-element tables over per-channel supports, as the codec does
    std::vector<CdfTable> tables;
    std::vector<int> syms;
    for (int c = 0; c < C; ++c) {
        std::size_t base = static_cast<std::size_t>(c) * H * W;
        double mu_min = mu.data[base], mu_max = mu.data[base], smax = sigma.data[base];
        for (int i = 1; i < H * W; ++i) {
            mu_min = std::min(mu_min, mu.data[base + i]);
            mu_max = std::max(mu_max, mu.data[base + i]);
            smax = std::max(smax, sigma.data[base + i]);
        }
        SymbolSupport sup = gaussian_support(mu_min, mu_max, smax);
        for (int i = 0; i < H * W; ++i) {
            tables.push_back(build_cdf_table(
                gaussian_pmf_vector(mu.data[base + i], sigma.data[base + i], sup), sup.lo));
            syms.push_back(
                std::clamp(static_cast<int>(y.data[base + i]), sup.lo, sup.hi));
        }
    }
    double realized = static_cast<double>(range_encode(syms, tables).size()) * 8.0;
    EXPECT_LT(std::abs(est - realized) / realized, 0.02)
        << "estimate " << est << " realized " << realized;
}

TEST(RateEstimate, FactorizedLogisticConsistency) {
    RandomStream rng(15);
    int C = 6, H = 32, W = 32;  // 6144 symbols
    std::vector<double> loc(6), scale(6);
    Tensor z({C, H, W});
    for (int c = 0; c < C; ++c) {
        loc[static_cast<std::size_t>(c)] = rng.uniform(-1, 1);
        scale[static_cast<std::size_t>(c)] = rng.uniform(0.4, 2.0);
    }
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H * W; ++i) {
            // logistic draw via inverse cdf
            double u = rng.uniform(1e-9, 1.0 - 1e-9);
            double v = loc[static_cast<std::size_t>(c)] +
                       scale[static_cast<std::size_t>(c)] * std::log(u / (1.0 - u));
            z.data[static_cast<std::size_t>(c) * H * W + i] = std::llround(v);
        }
    double est = estimate_rate_bits_factorized(z, loc, scale);
    std::vector<CdfTable> tables;
    std::vector<int> syms;
    for (int c = 0; c < C; ++c) {
        SymbolSupport sup =
            logistic_support(loc[static_cast<std::size_t>(c)], scale[static_cast<std::size_t>(c)]);
        CdfTable t = build_cdf_table(
            logistic_pmf_vector(loc[static_cast<std::size_t>(c)],
                                scale[static_cast<std::size_t>(c)], sup),
            sup.lo);
        for (int i = 0; i < H * W; ++i) {
            tables.push_back(t);
            syms.push_back(std::clamp(
                static_cast<int>(z.data[static_cast<std::size_t>(c) * H * W + i]), sup.lo,
                sup.hi));
        }
    }
    double realized = static_cast<double>(range_encode(syms, tables).size()) * 8.0;
    EXPECT_LT(std::abs(est - realized) / realized, 0.02)
        << "estimate " << est << " realized " << realized;
}

TEST(Bitstream, RoundTrip) {
    RandomStream rng(16);
    Bitstream b;
    b.header = {2, 32, 48, 3, 32, 16};
    b.hyper.resize(100);
    b.main.resize(333);
    for (auto& v : b.hyper) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    for (auto& v : b.main) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    auto bytes = serialize_bitstream(b);
    Bitstream back = parse_bitstream(bytes);
    EXPECT_TRUE(back == b);
    auto bytes2 = serialize_bitstream(back);
    EXPECT_EQ(bytes, bytes2);
}

TEST(Bitstream, HeaderErrorsAreDistinct) {
    Bitstream b;
    b.header = {1, 32, 32, 3, 8, 4};
    b.hyper = {1, 2, 3};
    b.main = {4, 5};
    auto bytes = serialize_bitstream(b);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    try {
        parse_bitstream(bad_magic);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
    }

    auto bad_version = bytes;
    bad_version[4] = 9;
    try {
        parse_bitstream(bad_version);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }

    auto chopped = bytes;
    chopped.pop_back();
    try {
        parse_bitstream(chopped);
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("length"), std::string::npos);
    }
}

TEST(Bitstream, BppFromHeader) {
    Bitstream b;
    b.header = {1, 32, 32, 3, 8, 4};
    b.hyper.resize(128);
    b.main.resize(128);
    EXPECT_DOUBLE_EQ(bpp_of(b), 2.0);
    b.hyper.resize(256);
    b.main.resize(256);
    EXPECT_DOUBLE_EQ(bpp_of(b), 4.0);
}
