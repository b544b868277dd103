#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dpc/diffusion.hpp"
#include "dpc/errors.hpp"
#include "dpc/graph.hpp"
#include "dpc/random.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

static_assert(std::endian::native == std::endian::little,
              "model and bitstream serialization assume a little-endian host");

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct CodecConfig {
    int preset = 0;  // 0 = desk, 1 = paper
    int image_channels = 3;
    int base_filters = 32;      // g_a / g_s width
    int latent_channels = 32;   // C_y
    int hyper_channels = 16;    // C_z
    int analysis_stages = 2;    // stride-2 convs in g_a (image -> latent)
    int hyper_stages = 1;       // stride-2 convs in h_a (latent -> hyper)
    int unet_levels = 3;
    int unet_blocks_per_level = 2;
    std::vector<int> attention_levels = {3};  // 1-based level indices
    int cond_decoder_levels = 3;
    int unet_base_filters = 16;
    int cond_feature_channels = 32;
    int time_embed_dim = 64;

    static CodecConfig desk() { return CodecConfig{}; }

    static CodecConfig paper() {
        CodecConfig c;
        c.preset = 1;
        c.base_filters = 128;
        c.latent_channels = 192;
        c.hyper_channels = 128;
        c.analysis_stages = 4;
        c.hyper_stages = 2;
        c.unet_levels = 5;
        c.unet_blocks_per_level = 3;
        c.attention_levels = {4, 5};
        c.cond_decoder_levels = 5;
        c.unet_base_filters = 64;
        c.cond_feature_channels = 64;
        c.time_embed_dim = 256;
        return c;
    }

    int downsample_factor() const { return 1 << analysis_stages; }
    int unet_downsample_factor() const { return 1 << (unet_levels - 1); }

    std::vector<int> unet_channels() const {
        std::vector<int> mult;
        switch (unet_levels) {
            case 2: mult = {1, 2}; break;
            case 3: mult = {1, 2, 2}; break;
            case 4: mult = {1, 2, 2, 4}; break;
            default:
                mult.assign(static_cast<std::size_t>(unet_levels), 4);
                mult[0] = 1;
                mult[1] = 1;
                mult[2] = 2;
                mult[3] = 2;
                break;
        }
        std::vector<int> ch(mult.size());
        for (std::size_t i = 0; i < mult.size(); ++i) ch[i] = unet_base_filters * mult[i];
        return ch;
    }

    bool attention_at(int level_1based) const {
        for (int l : attention_levels)
            if (l == level_1based) return true;
        return false;
    }

    void validate() const {
        if (image_channels != 1 && image_channels != 3)
            throw DataError("config: image_channels must be 1 or 3");
        if (unet_levels < 2) throw DataError("config: unet_levels must be >= 2");
        for (int l : attention_levels)
            if (l < 1 || l > unet_levels)
                throw DataError("config: attention level " + std::to_string(l) + " out of range");
        if (cond_decoder_levels != analysis_stages + 1)
            throw DataError("config: cond_decoder_levels must be analysis_stages + 1");
        if (base_filters < 1 || latent_channels < 1 || hyper_channels < 1 ||
            unet_base_filters < 1 || cond_feature_channels < 1)
            throw DataError("config: channel counts must be positive");
        if (time_embed_dim % 2 != 0) throw DataError("config: time_embed_dim must be even");
    }
};

struct ScheduleSpec {
    int n_steps = 100;
    double beta_start = 1e-4;
    double beta_end = 0.05;

    NoiseSchedule make() const { return linear_schedule(n_steps, beta_start, beta_end); }
};

inline double qp_lambda(int qp) {
    switch (qp) {
        case 1: return 0.0018;
        case 2: return 0.0035;
        case 3: return 0.0067;
        default: throw UsageError("qp must be 1, 2 or 3");
    }
}

// ---------------------------------------------------------------------------
// Model: parameter bundle for g_a, h_a/h_s, g_s, the conditioning decoder,
// the conditional UNet, and the factorized hyper prior.
// ---------------------------------------------------------------------------

enum class QuantizeMode { kRound, kNoise };

/// Nearest integer, ties away from zero (round mode) or additive uniform
/// noise on [-0.5, 0.5) (training relaxation).
inline Tensor quantize(const Tensor& y, QuantizeMode mode, RandomStream* rng = nullptr) {
    Tensor out = y;
    if (mode == QuantizeMode::kRound) {
        for (double& v : out.data) v = std::round(v);
    } else {
        if (!rng) throw InternalError("quantize: noise mode needs a random stream");
        for (double& v : out.data) v += rng->uniform() - 0.5;
    }
    return out;
}

class CodecModel {
public:
    CodecConfig cfg;
    ScheduleSpec schedule;
    int qp = 2;

    CodecModel() = default;

    static CodecModel create(const CodecConfig& config, const ScheduleSpec& sched, int qp,
                             std::uint64_t seed) {
        config.validate();
        qp_lambda(qp);  // range check
        CodecModel m;
        m.cfg = config;
        m.schedule = sched;
        m.qp = qp;
        m.build_parameters();
        m.init_parameters(seed);
        return m;
    }

    Parameter& p(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw InternalError("unknown parameter '" + name + "'");
        return *params_[it->second];
    }

    std::vector<Parameter*> all_params() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    std::vector<Parameter*> params_with_prefix(const std::string& prefix) {
        std::vector<Parameter*> out;
        for (auto& p : params_)
            if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
        return out;
    }

    /// Everything the standard codec needs: analysis, hyper transforms,
    /// standard synthesis and the hyper prior.
    std::vector<Parameter*> codec_params() {
        std::vector<Parameter*> out;
        for (auto& p : params_)
            if (!is_diffusion_name(p->name)) out.push_back(p.get());
        return out;
    }

    /// The diffusion decoder: conditioning decoder + conditional UNet.
    std::vector<Parameter*> diffusion_params() {
        std::vector<Parameter*> out;
        for (auto& p : params_)
            if (is_diffusion_name(p->name)) out.push_back(p.get());
        return out;
    }

    static bool is_diffusion_name(const std::string& name) {
        return name.rfind("dec.", 0) == 0 || name.rfind("unet.", 0) == 0;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_) std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
    }

    void freeze_codec() {
        for (Parameter* p : codec_params()) p->trainable = false;
    }

    bool codec_frozen() {
        for (Parameter* p : codec_params())
            if (p->trainable) return false;
        return true;
    }

    std::uint64_t config_hash() const {
        std::vector<std::uint8_t> bytes = config_bytes();
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (std::uint8_t b : bytes) {
            h ^= b;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot write model file '" + path + "'");
        f.write("DPM1", 4);
        std::uint8_t version = 1;
        f.write(reinterpret_cast<const char*>(&version), 1);
        std::vector<std::uint8_t> cb = config_bytes();
        f.write(reinterpret_cast<const char*>(cb.data()), static_cast<std::streamsize>(cb.size()));
        std::uint64_t hash = config_hash();
        f.write(reinterpret_cast<const char*>(&hash), 8);
        f.write("DPW1", 4);
        for (const auto& p : params_) {
            auto name_len = static_cast<std::uint16_t>(p->name.size());
            f.write(reinterpret_cast<const char*>(&name_len), 2);
            f.write(p->name.data(), name_len);
            auto rank = static_cast<std::uint8_t>(p->value.rank());
            f.write(reinterpret_cast<const char*>(&rank), 1);
            for (int d : p->value.shape) {
                auto u = static_cast<std::uint32_t>(d);
                f.write(reinterpret_cast<const char*>(&u), 4);
            }
            f.write(reinterpret_cast<const char*>(p->value.data.data()),
                    static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
        }
        if (!f) throw DataError("failed while writing model file '" + path + "'");
    }

    static CodecModel load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("cannot open model file '" + path + "'");
        char magic[4];
        f.read(magic, 4);
        if (!f || std::string(magic, 4) != "DPM1") throw DataError("model file: bad magic");
        std::uint8_t version = 0;
        f.read(reinterpret_cast<char*>(&version), 1);
        if (version != 1) throw DataError("model file: unsupported version");

        CodecModel m;
        auto ru8 = [&f]() {
            std::uint8_t v = 0;
            f.read(reinterpret_cast<char*>(&v), 1);
            return v;
        };
        auto ru32 = [&f]() {
            std::uint32_t v = 0;
            f.read(reinterpret_cast<char*>(&v), 4);
            return v;
        };
        auto rf64 = [&f]() {
            double v = 0;
            f.read(reinterpret_cast<char*>(&v), 8);
            return v;
        };
        m.cfg.preset = ru8();
        m.qp = ru8();
        m.cfg.image_channels = ru8();
        m.cfg.base_filters = static_cast<int>(ru32());
        m.cfg.latent_channels = static_cast<int>(ru32());
        m.cfg.hyper_channels = static_cast<int>(ru32());
        m.cfg.analysis_stages = static_cast<int>(ru32());
        m.cfg.hyper_stages = static_cast<int>(ru32());
        m.cfg.unet_levels = static_cast<int>(ru32());
        m.cfg.unet_blocks_per_level = static_cast<int>(ru32());
        int attn_count = ru8();
        m.cfg.attention_levels.clear();
        for (int i = 0; i < attn_count; ++i)
            m.cfg.attention_levels.push_back(static_cast<int>(ru32()));
        m.cfg.cond_decoder_levels = static_cast<int>(ru32());
        m.cfg.unet_base_filters = static_cast<int>(ru32());
        m.cfg.cond_feature_channels = static_cast<int>(ru32());
        m.cfg.time_embed_dim = static_cast<int>(ru32());
        m.schedule.n_steps = static_cast<int>(ru32());
        m.schedule.beta_start = rf64();
        m.schedule.beta_end = rf64();
        std::uint64_t stored_hash = 0;
        f.read(reinterpret_cast<char*>(&stored_hash), 8);
        if (!f) throw DataError("model file: truncated header");
        m.cfg.validate();
        if (stored_hash != m.config_hash())
            throw DataError("model file: config hash mismatch");

        char wmagic[4];
        f.read(wmagic, 4);
        if (!f || std::string(wmagic, 4) != "DPW1")
            throw DataError("model file: bad parameter bundle magic");
        m.build_parameters();
        std::map<std::string, bool> seen;
        while (true) {
            std::uint16_t name_len = 0;
            f.read(reinterpret_cast<char*>(&name_len), 2);
            if (f.eof()) break;
            if (!f) throw DataError("model file: truncated parameter record");
            std::string name(name_len, '\0');
            f.read(name.data(), name_len);
            std::uint8_t rank = ru8();
            std::vector<int> shape;
            for (int i = 0; i < rank; ++i) shape.push_back(static_cast<int>(ru32()));
            auto it = m.index_.find(name);
            if (it == m.index_.end())
                throw DataError("model file: unexpected parameter '" + name + "'");
            Parameter& p = *m.params_[it->second];
            if (p.value.shape != shape)
                throw DataError("model file: shape mismatch for '" + name + "'");
            f.read(reinterpret_cast<char*>(p.value.data.data()),
                   static_cast<std::streamsize>(p.value.data.size() * sizeof(double)));
            if (!f) throw DataError("model file: truncated data for '" + name + "'");
            seen[name] = true;
        }
        if (seen.size() != m.params_.size())
            throw DataError("model file: missing parameters (" + std::to_string(seen.size()) +
                            " of " + std::to_string(m.params_.size()) + ")");
        return m;
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;

    std::vector<std::uint8_t> config_bytes() const {
        std::vector<std::uint8_t> v;
        auto u8 = [&v](std::uint8_t x) { v.push_back(x); };
        auto u32 = [&v](std::uint32_t x) {
            for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>((x >> (8 * i))));
        };
        auto f64 = [&v](double x) {
            std::uint64_t u;
            std::memcpy(&u, &x, 8);
            for (int i = 0; i < 8; ++i) v.push_back(static_cast<std::uint8_t>((u >> (8 * i))));
        };
        u8(static_cast<std::uint8_t>(cfg.preset));
        u8(static_cast<std::uint8_t>(qp));
        u8(static_cast<std::uint8_t>(cfg.image_channels));
        u32(static_cast<std::uint32_t>(cfg.base_filters));
        u32(static_cast<std::uint32_t>(cfg.latent_channels));
        u32(static_cast<std::uint32_t>(cfg.hyper_channels));
        u32(static_cast<std::uint32_t>(cfg.analysis_stages));
        u32(static_cast<std::uint32_t>(cfg.hyper_stages));
        u32(static_cast<std::uint32_t>(cfg.unet_levels));
        u32(static_cast<std::uint32_t>(cfg.unet_blocks_per_level));
        u8(static_cast<std::uint8_t>(cfg.attention_levels.size()));
        for (int l : cfg.attention_levels) u32(static_cast<std::uint32_t>(l));
        u32(static_cast<std::uint32_t>(cfg.cond_decoder_levels));
        u32(static_cast<std::uint32_t>(cfg.unet_base_filters));
        u32(static_cast<std::uint32_t>(cfg.cond_feature_channels));
        u32(static_cast<std::uint32_t>(cfg.time_embed_dim));
        u32(static_cast<std::uint32_t>(schedule.n_steps));
        f64(schedule.beta_start);
        f64(schedule.beta_end);
        return v;
    }

    Parameter& add(const std::string& name, std::vector<int> shape) {
        params_.push_back(std::make_unique<Parameter>(name, Tensor(std::move(shape))));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    void conv_pair(const std::string& name, int out_c, int in_c, int k) {
        add(name + ".w", {out_c, in_c, k, k});
        add(name + ".b", {out_c});
    }

    void tconv_pair(const std::string& name, int in_c, int out_c, int k) {
        add(name + ".w", {in_c, out_c, k, k});
        add(name + ".b", {out_c});
    }

    void norm_pair(const std::string& name, int c) {
        add(name + ".gamma", {c});
        add(name + ".beta", {c});
    }

    void res_block(const std::string& prefix, int in_c, int out_c) {
        norm_pair(prefix + ".gn1", in_c);
        conv_pair(prefix + ".conv1", out_c, in_c, 3);
        add(prefix + ".temb.w", {out_c, cfg.time_embed_dim});
        add(prefix + ".temb.b", {out_c});
        norm_pair(prefix + ".gn2", out_c);
        conv_pair(prefix + ".conv2", out_c, out_c, 3);
        if (in_c != out_c) conv_pair(prefix + ".skip", out_c, in_c, 1);
    }

    void attn_block(const std::string& prefix, int c) {
        add(prefix + ".wq", {c, c});
        add(prefix + ".wk", {c, c});
        add(prefix + ".wv", {c, c});
        add(prefix + ".wo", {c, c});
    }

    void build_parameters() {
        const CodecConfig& c = cfg;
        // analysis g_a
        for (int s = 0; s < c.analysis_stages; ++s) {
            int in_c = s == 0 ? c.image_channels : c.base_filters;
            int out_c = s == c.analysis_stages - 1 ? c.latent_channels : c.base_filters;
            conv_pair("g_a.conv" + std::to_string(s), out_c, in_c, 5);
        }
        // standard synthesis g_s
        for (int s = 0; s < c.analysis_stages; ++s) {
            int in_c = s == 0 ? c.latent_channels : c.base_filters;
            int out_c = s == c.analysis_stages - 1 ? c.image_channels : c.base_filters;
            tconv_pair("g_s.tconv" + std::to_string(s), in_c, out_c, 4);
        }
        // hyper analysis / synthesis
        conv_pair("h_a.conv0", c.hyper_channels, c.latent_channels, 3);
        for (int s = 0; s < c.hyper_stages; ++s)
            conv_pair("h_a.conv" + std::to_string(s + 1), c.hyper_channels, c.hyper_channels, 5);
        for (int s = 0; s < c.hyper_stages; ++s)
            tconv_pair("h_s.tconv" + std::to_string(s), c.hyper_channels, c.hyper_channels, 4);
        conv_pair("h_s.out", 2 * c.latent_channels, c.hyper_channels, 3);
        // factorized prior over the hyper-latent
        add("prior.loc", {c.hyper_channels});
        add("prior.log_scale", {c.hyper_channels});
        // conditioning decoder
        int fch = c.cond_feature_channels;
        conv_pair("dec.in", fch, c.latent_channels, 3);
        for (int l = 0; l < c.cond_decoder_levels; ++l) {
            std::string p = "dec.l" + std::to_string(l);
            conv_pair(p + ".res.conv1", fch, fch, 3);
            conv_pair(p + ".res.conv2", fch, fch, 3);
            conv_pair(p + ".conv", fch, fch, 3);
            if (l < c.cond_decoder_levels - 1) tconv_pair(p + ".up", fch, fch, 4);
        }
        // conditional UNet
        std::vector<int> ch = c.unet_channels();
        add("unet.temb.l1.w", {c.time_embed_dim, 2 * c.unet_base_filters});
        add("unet.temb.l1.b", {c.time_embed_dim});
        add("unet.temb.l2.w", {c.time_embed_dim, c.time_embed_dim});
        add("unet.temb.l2.b", {c.time_embed_dim});
        conv_pair("unet.in", ch[0], c.image_channels + fch, 3);
        for (int l = 0; l < c.unet_levels; ++l) {
            std::string p = "unet.down" + std::to_string(l);
            for (int b = 0; b < c.unet_blocks_per_level; ++b)
                res_block(p + ".b" + std::to_string(b), ch[static_cast<std::size_t>(l)],
                          ch[static_cast<std::size_t>(l)]);
            if (c.attention_at(l + 1)) attn_block(p + ".attn", ch[static_cast<std::size_t>(l)]);
            if (l < c.unet_levels - 1)
                conv_pair(p + ".pool", ch[static_cast<std::size_t>(l + 1)],
                          ch[static_cast<std::size_t>(l)], 3);
        }
        res_block("unet.mid.b0", ch.back(), ch.back());
        for (int l = c.unet_levels - 1; l >= 0; --l) {
            std::string p = "unet.up" + std::to_string(l);
            for (int b = 0; b < c.unet_blocks_per_level; ++b) {
                int in_c = b == 0 ? 2 * ch[static_cast<std::size_t>(l)]
                                  : ch[static_cast<std::size_t>(l)];
                res_block(p + ".b" + std::to_string(b), in_c, ch[static_cast<std::size_t>(l)]);
            }
            if (c.attention_at(l + 1)) attn_block(p + ".attn", ch[static_cast<std::size_t>(l)]);
            if (l > 0)
                tconv_pair(p + ".upsample", ch[static_cast<std::size_t>(l)],
                           ch[static_cast<std::size_t>(l - 1)], 4);
        }
        norm_pair("unet.out.gn", ch[0]);
        conv_pair("unet.out.conv", c.image_channels, ch[0], 3);
    }

    void init_parameters(std::uint64_t seed) {
        RandomStream rng(seed);
        for (auto& up : params_) {
            Parameter& p = *up;
            const std::string& n = p.name;
            bool is_weight = n.size() > 2 && n.substr(n.size() - 2) == ".w";
            bool is_gamma = n.size() > 6 && n.substr(n.size() - 6) == ".gamma";
            if (is_gamma) {
                std::fill(p.value.data.begin(), p.value.data.end(), 1.0);
                continue;
            }
            if (!is_weight) continue;  // biases, betas, prior stay zero
            // zero-init: the second conv of every UNet res block, the UNet
            // output conv and every attention output projection, so the
            // denoiser starts as the zero map and attention as identity
            bool zero_init = n.find(".conv2.w") != std::string::npos ? n.rfind("unet.", 0) == 0
                                                                     : false;
            if (n == "unet.out.conv.w" || n.find(".wo") != std::string::npos) zero_init = true;
            if (n.find(".attn.wo") != std::string::npos) zero_init = true;
            if (zero_init) continue;
            double fan_in = 0;
            if (p.value.rank() == 4) {
                // conv [out,in,k,k] or tconv [in,out,k,k]; use the contraction size
                bool tconv = n.find("tconv") != std::string::npos ||
                             n.find(".up.w") != std::string::npos ||
                             n.find(".upsample.w") != std::string::npos;
                int in_c = tconv ? p.value.dim(0) : p.value.dim(1);
                fan_in = static_cast<double>(in_c) * p.value.dim(2) * p.value.dim(3);
            } else if (p.value.rank() == 2) {
                fan_in = static_cast<double>(p.value.dim(1));
            } else {
                fan_in = static_cast<double>(p.value.numel());
            }
            double s = std::sqrt(2.0 / fan_in);
            for (double& v : p.value.data) v = s * rng.normal();
        }
    }
};

// ---------------------------------------------------------------------------
// Forward builders (batched, graph-recorded)
// ---------------------------------------------------------------------------

namespace nets {

inline Value conv(Graph& g, CodecModel& m, const std::string& name, Value x, int stride,
                  int pad) {
    return conv2d(g, x, g.param(m.p(name + ".w")), g.param(m.p(name + ".b")), stride, pad);
}

inline Value tconv(Graph& g, CodecModel& m, const std::string& name, Value x, int stride,
                   int pad) {
    return conv2d_transpose(g, x, g.param(m.p(name + ".w")), g.param(m.p(name + ".b")), stride,
                            pad);
}

inline Value gnorm(Graph& g, CodecModel& m, const std::string& name, Value x) {
    int c = g.val(x).dim(1);
    return group_norm(g, x, g.param(m.p(name + ".gamma")), g.param(m.p(name + ".beta")),
                      std::min(8, c));
}

inline Value unet_res_block(Graph& g, CodecModel& m, const std::string& prefix, Value x,
                            Value temb) {
    int in_c = g.val(x).dim(1);
    Value h = silu(g, gnorm(g, m, prefix + ".gn1", x));
    h = conv(g, m, prefix + ".conv1", h, 1, 1);
    Value tproj = linear(g, silu(g, temb), g.param(m.p(prefix + ".temb.w")),
                         g.param(m.p(prefix + ".temb.b")));
    h = add_sample_channel_bias(g, h, tproj);
    h = silu(g, gnorm(g, m, prefix + ".gn2", h));
    h = conv(g, m, prefix + ".conv2", h, 1, 1);
    int out_c = g.val(h).dim(1);
    Value sk = in_c == out_c ? x : conv(g, m, prefix + ".skip", x, 1, 0);
    return add(g, sk, h);
}

inline Value unet_attn(Graph& g, CodecModel& m, const std::string& prefix, Value x) {
    return self_attention(g, x, g.param(m.p(prefix + ".wq")), g.param(m.p(prefix + ".wk")),
                          g.param(m.p(prefix + ".wv")), g.param(m.p(prefix + ".wo")));
}

}  // namespace nets

inline Value build_analysis(Graph& g, CodecModel& m, Value x) {
    Value h = x;
    for (int s = 0; s < m.cfg.analysis_stages; ++s) {
        h = nets::conv(g, m, "g_a.conv" + std::to_string(s), h, 2, 2);
        if (s < m.cfg.analysis_stages - 1) h = relu(g, h);
    }
    return h;
}

/// Pre-clamp synthesis output; inference wrappers clamp to [0,1].
inline Value build_synthesis(Graph& g, CodecModel& m, Value y) {
    Value h = y;
    for (int s = 0; s < m.cfg.analysis_stages; ++s) {
        h = nets::tconv(g, m, "g_s.tconv" + std::to_string(s), h, 2, 1);
        if (s < m.cfg.analysis_stages - 1) h = relu(g, h);
    }
    return h;
}

inline Value build_hyper_analysis(Graph& g, CodecModel& m, Value y) {
    Value h = relu(g, nets::conv(g, m, "h_a.conv0", y, 1, 1));
    for (int s = 0; s < m.cfg.hyper_stages; ++s) {
        h = nets::conv(g, m, "h_a.conv" + std::to_string(s + 1), h, 2, 2);
        if (s < m.cfg.hyper_stages - 1) h = relu(g, h);
    }
    return h;
}

/// mu and sigma for the main latent; sigma = 0.11 + softplus(raw) keeps the
/// likelihoods above the coder floor.
inline std::pair<Value, Value> build_hyper_synthesis(Graph& g, CodecModel& m, Value z_hat) {
    Value h = z_hat;
    for (int s = 0; s < m.cfg.hyper_stages; ++s)
        h = relu(g, nets::tconv(g, m, "h_s.tconv" + std::to_string(s), h, 2, 1));
    Value out = nets::conv(g, m, "h_s.out", h, 1, 1);
    int cy = m.cfg.latent_channels;
    Value mu = slice_channels(g, out, 0, cy);
    Value raw = slice_channels(g, out, cy, 2 * cy);
    Value sigma = add_scalar(g, softplus(g, raw), 0.11);
    return {mu, sigma};
}

inline Value build_cond_decoder(Graph& g, CodecModel& m, Value y_hat) {
    Value h = nets::conv(g, m, "dec.in", y_hat, 1, 1);
    for (int l = 0; l < m.cfg.cond_decoder_levels; ++l) {
        std::string p = "dec.l" + std::to_string(l);
        Value r = relu(g, nets::conv(g, m, p + ".res.conv1", h, 1, 1));
        r = nets::conv(g, m, p + ".res.conv2", r, 1, 1);
        h = relu(g, add(g, h, r));
        h = relu(g, nets::conv(g, m, p + ".conv", h, 1, 1));
        if (l < m.cfg.cond_decoder_levels - 1) h = nets::tconv(g, m, p + ".up", h, 2, 1);
    }
    return h;
}

/// Batched UNet: xn [B,imgC,H,W], cond [B,F,H,W], one step index per sample.
inline Value build_unet(Graph& g, CodecModel& m, Value xn, Value cond,
                        const std::vector<int>& steps) {
    const CodecConfig& c = m.cfg;
    int batch = g.val(xn).dim(0);
    if (static_cast<int>(steps.size()) != batch)
        throw DataError("build_unet: one step index per batch element required");
    int temb_in = 2 * c.unet_base_filters;
    Tensor emb({batch, temb_in});
    for (int b = 0; b < batch; ++b) {
        Tensor e = timestep_embedding(steps[static_cast<std::size_t>(b)], temb_in);
        std::copy(e.data.begin(), e.data.end(),
                  emb.data.begin() + static_cast<std::size_t>(b) * temb_in);
    }
    Value temb = linear(g, g.leaf(std::move(emb)), g.param(m.p("unet.temb.l1.w")),
                        g.param(m.p("unet.temb.l1.b")));
    temb = linear(g, silu(g, temb), g.param(m.p("unet.temb.l2.w")),
                  g.param(m.p("unet.temb.l2.b")));

    Value h = nets::conv(g, m, "unet.in", concat_channels(g, xn, cond), 1, 1);
    std::vector<Value> skips;
    for (int l = 0; l < c.unet_levels; ++l) {
        std::string p = "unet.down" + std::to_string(l);
        for (int b = 0; b < c.unet_blocks_per_level; ++b)
            h = nets::unet_res_block(g, m, p + ".b" + std::to_string(b), h, temb);
        if (c.attention_at(l + 1)) h = nets::unet_attn(g, m, p + ".attn", h);
        skips.push_back(h);
        if (l < c.unet_levels - 1) h = nets::conv(g, m, p + ".pool", h, 2, 1);
    }
    h = nets::unet_res_block(g, m, "unet.mid.b0", h, temb);
    for (int l = c.unet_levels - 1; l >= 0; --l) {
        std::string p = "unet.up" + std::to_string(l);
        h = concat_channels(g, h, skips[static_cast<std::size_t>(l)]);
        for (int b = 0; b < c.unet_blocks_per_level; ++b)
            h = nets::unet_res_block(g, m, p + ".b" + std::to_string(b), h, temb);
        if (c.attention_at(l + 1)) h = nets::unet_attn(g, m, p + ".attn", h);
        if (l > 0) h = nets::tconv(g, m, p + ".upsample", h, 2, 1);
    }
    h = silu(g, nets::gnorm(g, m, "unet.out.gn", h));
    return nets::conv(g, m, "unet.out.conv", h, 1, 1);
}

// ---------------------------------------------------------------------------
// Single-image inference wrappers ([C,H,W] in, [C,H,W] out)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor batch_of_one(const Tensor& t) {
    if (t.rank() != 3) throw DataError("expected [C,H,W], got " + t.shape_str());
    return Tensor({1, t.dim(0), t.dim(1), t.dim(2)}, t.data);
}

inline Tensor unbatch(const Tensor& t) {
    return Tensor({t.dim(1), t.dim(2), t.dim(3)}, t.data);
}

}  // namespace detail

inline Tensor analyze(CodecModel& m, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != m.cfg.image_channels)
        throw DataError("analyze: expected [" + std::to_string(m.cfg.image_channels) +
                        ",H,W], got " + image.shape_str());
    int ds = m.cfg.downsample_factor();
    if (image.dim(1) % ds != 0 || image.dim(2) % ds != 0)
        throw DataError("analyze: image dims " + image.shape_str() +
                        " not divisible by the downsampling factor " + std::to_string(ds) +
                        "; pad the image to a multiple of " + std::to_string(ds));
    Graph g;
    return detail::unbatch(g.val(build_analysis(g, m, g.leaf(detail::batch_of_one(image)))));
}

inline Tensor synthesize_standard(CodecModel& m, const Tensor& y_hat) {
    Graph g;
    return clamp01(
        detail::unbatch(g.val(build_synthesis(g, m, g.leaf(detail::batch_of_one(y_hat))))));
}

struct HyperRoundtrip {
    Tensor mu;
    Tensor sigma;
    Tensor z;
};

/// y -> z = h_a(y) -> (mu, sigma) = h_s(round(z)).
inline HyperRoundtrip hyper_roundtrip(CodecModel& m, const Tensor& y) {
    Graph g;
    Value z = build_hyper_analysis(g, m, g.leaf(detail::batch_of_one(y)));
    Tensor z_cont = detail::unbatch(g.val(z));
    Tensor z_hat = quantize(z_cont, QuantizeMode::kRound);
    auto [mu, sigma] = build_hyper_synthesis(g, m, g.leaf(detail::batch_of_one(z_hat)));
    return {detail::unbatch(g.val(mu)), detail::unbatch(g.val(sigma)), z_cont};
}

inline Tensor condition_features(CodecModel& m, const Tensor& y_hat) {
    Graph g;
    return detail::unbatch(g.val(build_cond_decoder(g, m, g.leaf(detail::batch_of_one(y_hat)))));
}

/// eps_hat for one image at step n; reads only the quantized latent.
inline Tensor denoise(CodecModel& m, const Tensor& x_n, const Tensor& y_hat, int n) {
    if (n < 1 || n > m.schedule.n_steps) throw DataError("denoise: step out of range");
    Graph g;
    Value cond = build_cond_decoder(g, m, g.leaf(detail::batch_of_one(y_hat)));
    Value eh = build_unet(g, m, g.leaf(detail::batch_of_one(x_n)), cond, {n});
    return detail::unbatch(g.val(eh));
}

}  // namespace dpc
