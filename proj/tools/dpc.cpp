// dpc: desk-scale learned image codec with a shared-latent diffusion decoder.
//
// Subcommands: gen-data, train, encode, decode, sweep.
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dpc/codec.hpp"
#include "dpc/image_io.hpp"
#include "dpc/models.hpp"
#include "dpc/sweep.hpp"
#include "dpc/training.hpp"

namespace fs = std::filesystem;
using namespace dpc;

namespace {

std::vector<Tensor> load_image_dir(const std::string& dir) {
    std::vector<fs::path> paths;
    if (!fs::is_directory(dir)) throw DataError("not a directory: '" + dir + "'");
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        if (ext == ".ppm" || ext == ".pgm") paths.push_back(e.path());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.empty()) throw DataError("no .ppm/.pgm images in '" + dir + "'");
    std::vector<Tensor> out;
    out.reserve(paths.size());
    for (const auto& p : paths) out.push_back(read_image(p.string()));
    return out;
}

std::vector<std::uint8_t> slurp_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                     std::istreambuf_iterator<char>());
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed while writing '" + path + "'");
}

std::vector<SamplerPoint> parse_sampler_points(const std::string& text) {
    std::vector<SamplerPoint> points;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t comma = text.find(',', pos);
        std::string item = text.substr(pos, comma == std::string::npos ? comma : comma - pos);
        pos = comma == std::string::npos ? text.size() : comma + 1;
        std::size_t colon = item.find(':');
        if (colon == std::string::npos)
            throw UsageError("bad sampler spec '" + item + "' (expected kind:steps)");
        SamplerPoint p;
        p.kind = sampler_from_name(item.substr(0, colon));
        p.steps = std::stoi(item.substr(colon + 1));
        if (p.steps < 1) throw UsageError("sampler steps must be >= 1");
        points.push_back(p);
    }
    if (points.empty()) throw UsageError("empty sampler list");
    return points;
}

struct GenDataArgs {
    int count = 8;
    int size = 32;
    std::uint64_t seed = 1;
    std::string out_dir;
    bool gray = false;
};

int run_gen_data(const GenDataArgs& a) {
    if (a.size < 4) throw UsageError("--size must be at least 4");
    fs::create_directories(a.out_dir);
    auto images = make_synthetic_dataset(a.count, a.size, a.seed);
    for (int i = 0; i < a.count; ++i) {
        const Tensor& img = images[static_cast<std::size_t>(i)];
        char name[64];
        std::snprintf(name, sizeof(name), "img_%04d.%s", i, a.gray ? "pgm" : "ppm");
        std::string path = a.out_dir + "/" + name;
        if (a.gray) {
            Tensor g({1, img.dim(1), img.dim(2)});
            std::size_t plane = g.numel();
            for (std::size_t p = 0; p < plane; ++p)
                g.data[p] = 0.299 * img.data[p] + 0.587 * img.data[plane + p] +
                            0.114 * img.data[2 * plane + p];
            write_image(path, g);
        } else {
            write_image(path, img);
        }
    }
    std::printf("wrote %d images to %s\n", a.count, a.out_dir.c_str());
    return 0;
}

struct TrainArgs {
    std::string phase = "base";
    std::string data_dir;
    std::string out_path;
    std::string init_path;
    std::string trace_path;
    std::string preset = "desk";
    int steps = -1;
    int batch = 16;
    int crop = 32;
    int qp = 2;
    double lr = 1e-3;
    double lambda_override = -1.0;
    double perceptual_weight = 1.0;
    std::uint64_t seed = 0;
    std::uint64_t model_seed = 1;
    int ckpt_every = 0;
    int schedule_n = 100;
    double beta_start = 1e-4;
    double beta_end = 0.05;
};

int run_train(const TrainArgs& a) {
    TrainConfig cfg;
    if (a.phase == "base")
        cfg.phase = TrainPhase::kBase;
    else if (a.phase == "diffusion")
        cfg.phase = TrainPhase::kDiffusion;
    else
        throw UsageError("--phase must be base or diffusion");
    cfg.steps = a.steps > 0 ? a.steps : (cfg.phase == TrainPhase::kBase ? 5000 : 20000);
    cfg.batch = a.batch;
    cfg.crop = a.crop;
    cfg.qp = a.qp;
    cfg.lr = a.lr;
    cfg.lambda_override = a.lambda_override;
    cfg.perceptual_weight = a.perceptual_weight;
    cfg.seed = a.seed;
    cfg.ckpt_every = a.ckpt_every;

    CodecModel model;
    if (!a.init_path.empty()) {
        model = CodecModel::load(a.init_path);
        if (model.qp != a.qp && a.qp != 2)
            std::fprintf(stderr, "note: continuing model trained at qp %d\n", model.qp);
        cfg.qp = model.qp;
    } else {
        if (cfg.phase == TrainPhase::kDiffusion)
            throw UsageError("diffusion phase needs --init with the base-trained model");
        CodecConfig cc;
        if (a.preset == "desk")
            cc = CodecConfig::desk();
        else if (a.preset == "paper")
            cc = CodecConfig::paper();
        else
            throw UsageError("--preset must be desk or paper");
        ScheduleSpec sched{a.schedule_n, a.beta_start, a.beta_end};
        model = CodecModel::create(cc, sched, a.qp, a.model_seed);
    }

    auto dataset = load_image_dir(a.data_dir);
    TrainReport report = train(model, dataset, cfg, a.trace_path, a.out_path);
    double tail = 0.0;
    int tail_n = std::min<int>(100, static_cast<int>(report.trace.size()));
    for (int i = 0; i < tail_n; ++i)
        tail += report.trace[report.trace.size() - 1 - static_cast<std::size_t>(i)].total;
    std::printf("trained %d steps; final %d-step mean loss %.6f; model written to %s\n",
                cfg.steps, tail_n, tail / tail_n, a.out_path.c_str());
    return 0;
}

struct EncodeArgs {
    std::string image_path;
    std::string model_path;
    std::string out_path;
};

int run_encode(const EncodeArgs& a) {
    CodecModel model = CodecModel::load(a.model_path);
    Tensor img = read_image(a.image_path);
    if (img.dim(0) == 1 && model.cfg.image_channels == 3)
        img = train_detail::adapt_channels(img, 3);
    Bitstream bs = encode_image(model, img);
    write_bytes(a.out_path, serialize_bitstream(bs));
    std::printf("bpp: %.6f\n", bpp_of(bs));
    return 0;
}

struct DecodeArgs {
    std::string dpc_path;
    std::string model_path;
    std::string out_path;
    std::string decoder = "standard";
    std::string sampler = "ddim";
    int steps = 10;
    double eta = 0.0;
    std::uint64_t seed = 0;
    bool sampler_flags_given = false;
};

int run_decode(const DecodeArgs& a) {
    CodecModel model = CodecModel::load(a.model_path);
    Bitstream bs = parse_bitstream(slurp_bytes(a.dpc_path));
    Tensor out;
    if (a.decoder == "standard") {
        if (a.sampler_flags_given)
            std::fprintf(stderr,
                         "warning: --sampler/--steps/--eta/--seed ignored by the standard "
                         "decoder\n");
        out = decode_standard(model, bs);
    } else if (a.decoder == "diffusion") {
        SamplerConfig cfg;
        cfg.kind = sampler_from_name(a.sampler);
        cfg.steps = a.steps;
        cfg.eta = a.eta;
        cfg.seed = a.seed;
        out = decode_diffusion(model, bs, cfg);
    } else {
        throw UsageError("--decoder must be standard or diffusion");
    }
    write_image(a.out_path, out);
    std::printf("decoded %ux%u with the %s decoder\n", unsigned(bs.header.width),
                unsigned(bs.header.height), a.decoder.c_str());
    return 0;
}

struct SweepArgs {
    std::vector<std::string> model_paths;
    std::string images_dir;
    std::string out_csv;
    std::string samplers;
    std::string recon_dir;
    double eta = 0.0;
    int patch = 32;
    std::uint64_t seed = 0;
};

int run_sweep_cmd(const SweepArgs& a) {
    std::vector<CodecModel> models;
    models.reserve(a.model_paths.size());
    for (const std::string& p : a.model_paths) models.push_back(CodecModel::load(p));
    std::vector<CodecModel*> ptrs;
    SweepSpec spec;
    for (CodecModel& m : models) {
        ptrs.push_back(&m);
        spec.qps.push_back(m.qp);
    }
    std::sort(spec.qps.begin(), spec.qps.end());
    for (std::size_t i = 1; i < spec.qps.size(); ++i)
        if (spec.qps[i] == spec.qps[i - 1])
            throw UsageError("two models share qp " + std::to_string(spec.qps[i]));
    if (!a.samplers.empty()) spec.points = parse_sampler_points(a.samplers);
    spec.eta = a.eta;
    spec.patch = a.patch;
    spec.seed = a.seed;
    if (!a.recon_dir.empty()) {
        fs::create_directories(a.recon_dir);
        spec.recon_dir = a.recon_dir;
    }
    auto images = load_image_dir(a.images_dir);
    std::vector<DPPoint> rows = run_sweep(ptrs, images, spec);
    write_sweep_csv(a.out_csv, rows);
    std::printf("wrote %zu rows to %s\n", rows.size(), a.out_csv.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dpc: learned image codec with a shared-latent diffusion decoder"};
    app.require_subcommand(1);

    GenDataArgs gen;
    CLI::App* cmd_gen = app.add_subcommand("gen-data", "generate synthetic PPM/PGM images");
    cmd_gen->add_option("--count", gen.count, "number of images");
    cmd_gen->add_option("--size", gen.size, "image side length");
    cmd_gen->add_option("--seed", gen.seed, "generator seed");
    cmd_gen->add_option("--out", gen.out_dir, "output directory")->required();
    cmd_gen->add_flag("--gray", gen.gray, "write grayscale PGM instead of PPM");

    TrainArgs tr;
    CLI::App* cmd_train = app.add_subcommand("train", "train the base codec or diffusion decoder");
    cmd_train->add_option("--phase", tr.phase, "base | diffusion")->required();
    cmd_train->add_option("--data", tr.data_dir, "training image directory")->required();
    cmd_train->add_option("--out", tr.out_path, "output model file")->required();
    cmd_train->add_option("--init", tr.init_path, "initial model (required for diffusion)");
    cmd_train->add_option("--trace", tr.trace_path, "loss trace CSV path");
    cmd_train->add_option("--preset", tr.preset, "desk | paper");
    cmd_train->add_option("--steps", tr.steps, "training steps");
    cmd_train->add_option("--batch", tr.batch, "batch size");
    cmd_train->add_option("--crop", tr.crop, "crop size");
    cmd_train->add_option("--qp", tr.qp, "quality preset 1..3");
    cmd_train->add_option("--lr", tr.lr, "learning rate");
    cmd_train->add_option("--lambda", tr.lambda_override, "rate weight override");
    cmd_train->add_option("--perceptual-weight", tr.perceptual_weight,
                          "weight of the perceptual term (diffusion phase)");
    cmd_train->add_option("--seed", tr.seed, "training seed");
    cmd_train->add_option("--model-seed", tr.model_seed, "fresh-model init seed");
    cmd_train->add_option("--ckpt-every", tr.ckpt_every, "checkpoint interval in steps");
    cmd_train->add_option("--schedule-steps", tr.schedule_n, "diffusion schedule length N");
    cmd_train->add_option("--beta-start", tr.beta_start, "schedule beta_1");
    cmd_train->add_option("--beta-end", tr.beta_end, "schedule beta_N");
    cmd_train->set_config("--config", "", "key=value config file overriding defaults");

    EncodeArgs enc;
    CLI::App* cmd_encode = app.add_subcommand("encode", "compress an image to a .dpc bitstream");
    cmd_encode->add_option("image", enc.image_path, "input PPM/PGM")->required();
    cmd_encode->add_option("--model", enc.model_path, "model file")->required();
    cmd_encode->add_option("--out", enc.out_path, "output .dpc path")->required();

    DecodeArgs dec;
    CLI::App* cmd_decode = app.add_subcommand("decode", "reconstruct an image from a .dpc file");
    cmd_decode->add_option("bitstream", dec.dpc_path, "input .dpc")->required();
    cmd_decode->add_option("--model", dec.model_path, "model file")->required();
    cmd_decode->add_option("--out", dec.out_path, "output image path")->required();
    cmd_decode->add_option("--decoder", dec.decoder, "standard | diffusion");
    CLI::Option* o_sampler = cmd_decode->add_option("--sampler", dec.sampler, "ddim | ddpm");
    CLI::Option* o_steps = cmd_decode->add_option("--steps", dec.steps, "sampler steps K");
    CLI::Option* o_eta = cmd_decode->add_option("--eta", dec.eta, "ddim stochasticity in [0,1]");
    CLI::Option* o_seed = cmd_decode->add_option("--seed", dec.seed, "sampling seed");

    SweepArgs sw;
    CLI::App* cmd_sweep = app.add_subcommand("sweep", "distortion-perception sweep to CSV");
    cmd_sweep->add_option("--models", sw.model_paths, "model files, one per qp")
        ->required()
        ->delimiter(',');
    cmd_sweep->add_option("--images", sw.images_dir, "evaluation image directory")->required();
    cmd_sweep->add_option("--out", sw.out_csv, "output CSV path")->required();
    cmd_sweep->add_option("--samplers", sw.samplers,
                          "comma list kind:steps (default: paper four, scaled to N)");
    cmd_sweep->add_option("--eta", sw.eta, "ddim stochasticity");
    cmd_sweep->add_option("--patch", sw.patch, "fid patch size");
    cmd_sweep->add_option("--seed", sw.seed, "sweep seed");
    cmd_sweep->add_option("--save-recons", sw.recon_dir, "directory for reconstructions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (cmd_gen->parsed()) return run_gen_data(gen);
        if (cmd_train->parsed()) return run_train(tr);
        if (cmd_encode->parsed()) return run_encode(enc);
        if (cmd_decode->parsed()) {
            dec.sampler_flags_given = o_sampler->count() || o_steps->count() ||
                                      o_eta->count() || o_seed->count();
            return run_decode(dec);
        }
        if (cmd_sweep->parsed()) return run_sweep_cmd(sw);
        throw UsageError("no subcommand selected");
    } catch (const UsageError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return 1;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const InternalError& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 3;
    }
}
