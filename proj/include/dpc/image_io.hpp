#pragma once

#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "dpc/errors.hpp"
#include "dpc/tensor.hpp"

namespace dpc {

// Binary PPM (P6) / PGM (P5), maxval 255 only. Values map to [0,1] by /255
// and back by round-half-away; the writer emits the canonical header form,
// so write(read(f)) is byte-identical for files this module wrote.

namespace pnm_detail {

inline int next_token_int(std::istream& f, const std::string& path) {
    // skip whitespace and '#' comments
    int c = f.get();
    while (c != EOF) {
        if (c == '#') {
            while (c != EOF && c != '\n') c = f.get();
        } else if (std::isspace(c)) {
            c = f.get();
        } else {
            break;
        }
    }
    if (c == EOF || !std::isdigit(c)) throw DataError("pnm '" + path + "': malformed header");
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
        v = v * 10 + (c - '0');
        if (v > 1 << 30) throw DataError("pnm '" + path + "': header value out of range");
        c = f.get();
    }
    if (c != EOF) f.unget();
    return static_cast<int>(v);
}

}  // namespace pnm_detail

/// Reads a P5 or P6 file into [1,H,W] or [3,H,W] with values in [0,1].
inline Tensor read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open image '" + path + "'");
    char m0 = static_cast<char>(f.get());
    char m1 = static_cast<char>(f.get());
    if (m0 != 'P' || (m1 != '5' && m1 != '6'))
        throw DataError("pnm '" + path + "': not a binary P5/P6 file");
    int channels = m1 == '6' ? 3 : 1;
    int w = pnm_detail::next_token_int(f, path);
    int h = pnm_detail::next_token_int(f, path);
    int maxval = pnm_detail::next_token_int(f, path);
    if (maxval != 255)
        throw DataError("pnm '" + path + "': maxval must be 255, got " + std::to_string(maxval));
    int sep = f.get();
    if (sep == EOF || !std::isspace(sep))
        throw DataError("pnm '" + path + "': missing whitespace before pixel data");
    if (w < 1 || h < 1) throw DataError("pnm '" + path + "': empty image");
    std::size_t count = static_cast<std::size_t>(w) * h * channels;
    std::vector<unsigned char> raw(count);
    f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(f.gcount()) != count)
        throw DataError("pnm '" + path + "': truncated pixel data");
    Tensor img({channels, h, w});
    std::size_t plane = static_cast<std::size_t>(h) * w;
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < channels; ++c)
            img.data[static_cast<std::size_t>(c) * plane + i] =
                static_cast<double>(raw[i * channels + c]) / 255.0;
    return img;
}

/// Writes [1,H,W] as P5 or [3,H,W] as P6 with the canonical header.
inline void write_image(const std::string& path, const Tensor& img) {
    if (img.rank() != 3 || (img.dim(0) != 1 && img.dim(0) != 3))
        throw DataError("write_image: expected [1,H,W] or [3,H,W], got " + img.shape_str());
    int channels = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write image '" + path + "'");
    f << (channels == 3 ? "P6\n" : "P5\n") << w << " " << h << "\n255\n";
    std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<unsigned char> raw(plane * channels);
    for (std::size_t i = 0; i < plane; ++i)
        for (int c = 0; c < channels; ++c) {
            double v = img.data[static_cast<std::size_t>(c) * plane + i] * 255.0;
            long q = std::lround(v);  // round half away from zero
            raw[i * channels + c] =
                static_cast<unsigned char>(std::min(255L, std::max(0L, q)));
        }
    f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!f) throw DataError("failed while writing image '" + path + "'");
}

}  // namespace dpc
