#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>

#include "dpc/training.hpp"

using namespace dpc;

namespace {

CodecModel desk_model(std::uint64_t seed = 100) {
    return CodecModel::create(CodecConfig::desk(), ScheduleSpec{}, 2, seed);
}

double grad_abs_sum(CodecModel& m, const std::string& prefix) {
    double s = 0.0;
    for (Parameter* p : m.params_with_prefix(prefix))
        for (double v : p->grad.data) s += std::abs(v);
    return s;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Parameter a("a", Tensor({4}, {1.0, -2.0, 0.5, 3.25}));
    Parameter b("b", Tensor({2}, {0.125, -0.0}));
    std::vector<Parameter*> params{&a, &b};
    AdamOptimizer adam(1e-2);
    std::vector<double> before_a = a.value.data, before_b = b.value.data;
    for (int i = 0; i < 5; ++i) adam.step(params);
    EXPECT_EQ(a.value.data, before_a);
    EXPECT_EQ(b.value.data, before_b);
}

TEST(Adam, SkipsFrozenParametersEntirely) {
    Parameter frozen("f", Tensor({3}, {1.0, 2.0, 3.0}), /*train=*/false);
    Parameter live("l", Tensor({3}, {1.0, 2.0, 3.0}));
    std::vector<Parameter*> params{&frozen, &live};
    AdamOptimizer adam(1e-2);
    for (int i = 0; i < 3; ++i) {
        // even with a (spurious) gradient present, frozen stays bit-identical
        std::fill(frozen.grad.data.begin(), frozen.grad.data.end(), 1.0);
        std::fill(live.grad.data.begin(), live.grad.data.end(), 1.0);
        adam.step(params);
    }
    EXPECT_EQ(frozen.value.data, (std::vector<double>{1.0, 2.0, 3.0}));
    EXPECT_NE(live.value.data, (std::vector<double>{1.0, 2.0, 3.0}));
}

TEST(RdLoss, LambdaZeroGivesPureMseAndLinearity) {
    CodecModel m = desk_model(7);
    auto data = make_synthetic_dataset(2, 32, 3);
    Tensor batch({2, 3, 32, 32});
    std::copy(data[0].data.begin(), data[0].data.end(), batch.data.begin());
    std::copy(data[1].data.begin(), data[1].data.end(), batch.data.begin() + data[0].numel());

    RandomStream r1(5), r2(5), r3(5);
    RdStats s0 = rd_loss(m, batch, 0.0, r1);
    EXPECT_DOUBLE_EQ(s0.loss, s0.mse);
    EXPECT_GT(s0.bpp, 0.0);

    RdStats s1 = rd_loss(m, batch, 0.01, r2);
    RdStats s2 = rd_loss(m, batch, 0.02, r3);
    double rate1 = s1.loss - s1.mse;
    double rate2 = s2.loss - s2.mse;
    EXPECT_NEAR(rate2, 2.0 * rate1, 1e-12);
    EXPECT_NEAR(s1.loss, s1.mse + 0.01 * s1.bpp, 1e-12);
}

TEST(RdLoss, GradientsReachAllCodecNets) {
    CodecModel m = desk_model(8);
    auto data = make_synthetic_dataset(1, 32, 4);
    Tensor batch({1, 3, 32, 32}, data[0].data);
    m.zero_grads();
    RandomStream rng(6);
    rd_loss(m, batch, 0.01, rng, true);
    for (const char* prefix : {"g_a.", "g_s.", "h_a.", "h_s.", "prior."})
        EXPECT_GT(grad_abs_sum(m, prefix), 0.0) << prefix;
    EXPECT_DOUBLE_EQ(grad_abs_sum(m, "unet."), 0.0);
    EXPECT_DOUBLE_EQ(grad_abs_sum(m, "dec."), 0.0);
}

TEST(DiffusionLoss, RequiresFrozenCodec) {
    CodecModel m = desk_model(9);
    auto data = make_synthetic_dataset(1, 32, 5);
    Tensor batch({1, 3, 32, 32}, data[0].data);
    NoiseSchedule s = m.schedule.make();
    FeatureExtractor ext = FeatureExtractor::make(77);
    RandomStream rng(7);
    EXPECT_THROW(diffusion_loss(m, batch, s, ext, 1.0, rng), DataError);
}

TEST(DiffusionLoss, FreshModelStartsAtNoiseBaselineAndIsolatesGradients) {
    CodecModel m = desk_model(10);
    m.freeze_codec();
    auto data = make_synthetic_dataset(2, 32, 6);
    Tensor batch({2, 3, 32, 32});
    std::copy(data[0].data.begin(), data[0].data.end(), batch.data.begin());
    std::copy(data[1].data.begin(), data[1].data.end(), batch.data.begin() + data[0].numel());
    NoiseSchedule s = m.schedule.make();
    FeatureExtractor ext = FeatureExtractor::make(77);
    RandomStream rng(8);
    m.zero_grads();
    DiffusionStats st = diffusion_loss(m, batch, s, ext, 1.0, rng, true);
    // zero-initialized denoiser predicts 0, so l_simple ~ E|eps|^2 = 1
    EXPECT_NEAR(st.l_simple, 1.0, 0.1);
    EXPECT_GE(st.perceptual, 0.0);
    EXPECT_NEAR(st.total, st.l_simple + st.perceptual, 1e-12);
    EXPECT_GT(grad_abs_sum(m, "unet."), 0.0);

    // the zero-initialized output conv blocks deeper gradient flow at init;
    // perturb it to probe gradient presence/absence at a generic point
    RandomStream jiggle(88);
    for (Parameter* p : m.params_with_prefix("unet."))
        if (p->name.find(".conv2.w") != std::string::npos || p->name == "unet.out.conv.w")
            for (double& v : p->value.data) v = 0.02 * jiggle.normal();
    m.zero_grads();
    RandomStream rng2(9);
    diffusion_loss(m, batch, s, ext, 1.0, rng2, true);
    EXPECT_GT(grad_abs_sum(m, "unet."), 0.0);
    EXPECT_GT(grad_abs_sum(m, "dec."), 0.0);
    for (const char* prefix : {"g_a.", "g_s.", "h_a.", "h_s.", "prior."})
        EXPECT_DOUBLE_EQ(grad_abs_sum(m, prefix), 0.0) << prefix;
}

TEST(RandomCropRescale, ContractAndDeterminism) {
    RandomStream rng(9);
    Tensor img = rng.uniform_tensor({3, 48, 64}, 0, 1);
    Tensor c = random_crop_rescale(img, 32, rng);
    EXPECT_EQ(c.shape, (std::vector<int>{3, 32, 32}));

    // crop size == image size: scale is forced to 1, crop is the full image
    Tensor square = rng.uniform_tensor({1, 16, 16}, 0, 1);
    RandomStream rng2(10);
    Tensor full = random_crop_rescale(square, 16, rng2);
    EXPECT_EQ(full.data, square.data);

    RandomStream ra(11), rb(11);
    Tensor a = random_crop_rescale(img, 24, ra);
    Tensor b = random_crop_rescale(img, 24, rb);
    EXPECT_EQ(a.data, b.data);

    EXPECT_THROW(random_crop_rescale(square, 17, rng), DataError);
}

TEST(BilinearResize, IdentityAtSameSize) {
    RandomStream rng(12);
    Tensor img = rng.uniform_tensor({3, 9, 7}, 0, 1);
    Tensor same = bilinear_resize(img, 9, 7);
    EXPECT_LT(max_abs_diff(img, same), 1e-15);
}

TEST(SyntheticData, DeterministicAndRich) {
    auto a = make_synthetic_dataset(3, 32, 42);
    auto b = make_synthetic_dataset(3, 32, 42);
    ASSERT_EQ(a.size(), 3u);
    for (int i = 0; i < 3; ++i) EXPECT_EQ(a[static_cast<std::size_t>(i)].data,
                                          b[static_cast<std::size_t>(i)].data);
    // independent of count: first images identical
    auto c = make_synthetic_dataset(1, 32, 42);
    EXPECT_EQ(c[0].data, a[0].data);

    // >= 64 distinct 8-bit levels per image
    for (const Tensor& img : a) {
        std::vector<bool> seen(256, false);
        int distinct = 0;
        for (double v : img.data) {
            int q = static_cast<int>(std::lround(v * 255.0));
            q = std::min(255, std::max(0, q));
            if (!seen[static_cast<std::size_t>(q)]) {
                seen[static_cast<std::size_t>(q)] = true;
                ++distinct;
            }
        }
        EXPECT_GE(distinct, 64);
    }
    for (const Tensor& img : a)
        for (double v : img.data) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
}

TEST(Train, BaseSmokeAndBitReproducibility) {
    auto data = make_synthetic_dataset(6, 32, 50);
    TrainConfig cfg;
    cfg.phase = TrainPhase::kBase;
    cfg.steps = 60;
    cfg.batch = 4;
    cfg.crop = 16;
    cfg.lr = 2e-3;
    cfg.seed = 3;

    CodecModel m1 = desk_model(700);
    TrainReport r1 = train(m1, data, cfg);
    ASSERT_EQ(r1.trace.size(), 60u);
    for (const TraceRow& row : r1.trace) EXPECT_TRUE(std::isfinite(row.total));
    double first = 0.0, last = 0.0;
    for (int i = 0; i < 15; ++i) {
        first += r1.trace[static_cast<std::size_t>(i)].total;
        last += r1.trace[static_cast<std::size_t>(45 + i)].total;
    }
    EXPECT_LT(last, first);

    CodecModel m2 = desk_model(700);
    TrainReport r2 = train(m2, data, cfg);
    for (std::size_t i = 0; i < r1.trace.size(); ++i) {
        EXPECT_EQ(r1.trace[i].total, r2.trace[i].total);
        EXPECT_EQ(r1.trace[i].a, r2.trace[i].a);
        EXPECT_EQ(r1.trace[i].b, r2.trace[i].b);
    }
    for (Parameter* p : m1.all_params()) EXPECT_EQ(p->value.data, m2.p(p->name).value.data);
}

TEST(Train, DiffusionPhaseKeepsCodecBitIdentical) {
    auto data = make_synthetic_dataset(4, 32, 51);
    CodecModel m = desk_model(701);
    std::map<std::string, std::vector<double>> before;
    for (Parameter* p : m.codec_params()) before[p->name] = p->value.data;

    TrainConfig cfg;
    cfg.phase = TrainPhase::kDiffusion;
    cfg.steps = 8;
    cfg.batch = 2;
    cfg.crop = 16;
    cfg.seed = 4;
    TrainReport r = train(m, data, cfg);
    ASSERT_EQ(r.trace.size(), 8u);
    EXPECT_TRUE(m.codec_frozen());
    for (Parameter* p : m.codec_params()) EXPECT_EQ(p->value.data, before[p->name]) << p->name;

    // the diffusion side did move
    double moved = 0.0;
    for (Parameter* p : m.diffusion_params())
        for (double v : p->grad.data) moved += std::abs(v);
    (void)moved;  // grads are zeroed by Adam; check values instead
    CodecModel fresh = desk_model(701);
    double diff = 0.0;
    for (Parameter* p : m.diffusion_params())
        diff += max_abs_diff(p->value, fresh.p(p->name).value);
    EXPECT_GT(diff, 0.0);
}

TEST(Train, EmptyDatasetAndBadCropRejected) {
    CodecModel m = desk_model(702);
    TrainConfig cfg;
    EXPECT_THROW(train(m, {}, cfg), DataError);
    auto data = make_synthetic_dataset(1, 32, 52);
    cfg.crop = 18;  // not divisible by 4
    EXPECT_THROW(train(m, data, cfg), DataError);
}

TEST(Train, TraceCsvSchema) {
    namespace fs = std::filesystem;
    std::vector<TraceRow> rows{{0, 1.5, 1.0, 0.5}, {1, 1.2, 0.9, 0.3}};
    fs::path p = fs::temp_directory_path() / "dpc_trace_test.csv";
    write_trace_csv(p.string(), TrainPhase::kBase, rows);
    std::ifstream f(p.string());
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "step,total,distortion,rate_bpp");
    write_trace_csv(p.string(), TrainPhase::kDiffusion, rows);
    std::ifstream f2(p.string());
    std::getline(f2, header);
    EXPECT_EQ(header, "step,total,l_simple,perceptual");
    fs::remove(p);
}
