#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpc/sweep.hpp"
#include "dpc/training.hpp"

using namespace dpc;
namespace fs = std::filesystem;

TEST(SamplerPoints, PaperFourAndScaling) {
    auto full = default_sampler_points(1000);
    ASSERT_EQ(full.size(), 4u);
    EXPECT_EQ(full[0].kind, SamplerKind::kDdim);
    EXPECT_EQ(full[0].steps, 10);
    EXPECT_EQ(full[1].kind, SamplerKind::kDdim);
    EXPECT_EQ(full[1].steps, 100);
    EXPECT_EQ(full[2].kind, SamplerKind::kDdpm);
    EXPECT_EQ(full[2].steps, 100);
    EXPECT_EQ(full[3].kind, SamplerKind::kDdpm);
    EXPECT_EQ(full[3].steps, 1000);

    auto desk = default_sampler_points(100);
    EXPECT_EQ(desk[0].steps, 1);
    EXPECT_EQ(desk[1].steps, 10);
    EXPECT_EQ(desk[2].steps, 10);
    EXPECT_EQ(desk[3].steps, 100);
    for (const auto& p : desk) EXPECT_LE(p.steps, 100);
}

TEST(Sweep, RowSchemaAndDeterminism) {
    CodecModel m = CodecModel::create(CodecConfig::desk(), ScheduleSpec{}, 2, 77);
    auto images = make_synthetic_dataset(2, 32, 7);
    SweepSpec spec;
    spec.qps = {2};
    spec.points = {{SamplerKind::kDdim, 1},
                   {SamplerKind::kDdim, 4},
                   {SamplerKind::kDdpm, 4},
                   {SamplerKind::kDdpm, 8}};
    spec.patch = 16;
    spec.seed = 9;

    auto rows = run_sweep({&m}, images, spec);
    ASSERT_EQ(rows.size(), 5u);  // standard + four sampler configs
    EXPECT_EQ(rows[0].decoder, "standard");
    EXPECT_TRUE(rows[0].sampler.empty());
    for (std::size_t i = 1; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].decoder, "diffusion");
        EXPECT_FALSE(rows[i].sampler.empty());
        EXPECT_DOUBLE_EQ(rows[i].bpp, rows[0].bpp);  // same bitstream, same rate
    }
    for (const auto& r : rows) {
        EXPECT_GT(r.bpp, 0.0);
        EXPECT_GE(r.gmsd_v, 0.0);
        EXPECT_GE(r.perceptual, 0.0);
        EXPECT_GE(r.fid, 0.0);
    }

    auto rows2 = run_sweep({&m}, images, spec);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(rows[i].psnr_db, rows2[i].psnr_db);
        EXPECT_EQ(rows[i].fid, rows2[i].fid);
    }

    fs::path csv = fs::temp_directory_path() / "dpc_sweep_test.csv";
    write_sweep_csv(csv.string(), rows);
    std::ifstream f(csv.string());
    std::string header;
    std::getline(f, header);
    EXPECT_EQ(header, "qp,decoder,sampler,steps,bpp,psnr_db,gmsd,perceptual_proxy,fid_proxy");
    std::string line;
    int count = 0;
    std::string first;
    while (std::getline(f, line))
        if (!line.empty()) {
            if (count == 0) first = line;
            ++count;
        }
    EXPECT_EQ(count, 5);
    // standard row has empty sampler/steps fields: "2,standard,,,..."
    EXPECT_EQ(first.rfind("2,standard,,,", 0), 0u);
    fs::remove(csv);
}

TEST(Sweep, MissingModelNamesQp) {
    CodecModel m = CodecModel::create(CodecConfig::desk(), ScheduleSpec{}, 2, 78);
    auto images = make_synthetic_dataset(1, 32, 8);
    SweepSpec spec;
    spec.qps = {3};
    spec.patch = 16;
    try {
        run_sweep({&m}, images, spec);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("qp 3"), std::string::npos);
    }
}

TEST(Sweep, OversizedStepsRejected) {
    CodecModel m = CodecModel::create(CodecConfig::desk(), ScheduleSpec{}, 2, 79);
    auto images = make_synthetic_dataset(1, 32, 9);
    SweepSpec spec;
    spec.qps = {2};
    spec.points = {{SamplerKind::kDdim, 101}};
    spec.patch = 16;
    EXPECT_THROW(run_sweep({&m}, images, spec), DataError);
}
