#pragma once

// Binary PNM (P5/P6, maxval 255) reading and writing.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "maskcount/error.hpp"
#include "maskcount/numerics.hpp"

namespace maskcount {

namespace detail {

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

struct PnmHeader {
    std::string magic;
    int width = 0;
    int height = 0;
    int maxval = 0;
    std::size_t data_offset = 0;
};

inline PnmHeader parse_pnm_header(const std::vector<char>& buf, const std::string& path) {
    std::size_t pos = 0;
    auto error = [&](const std::string& what) -> Error {
        return Error(ErrorKind::parse, path + ": " + what + " at byte offset " + std::to_string(pos));
    };
    auto skip_space = [&] {
        while (pos < buf.size()) {
            if (buf[pos] == '#') {
                while (pos < buf.size() && buf[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* field) {
        skip_space();
        if (pos >= buf.size() || !std::isdigit(static_cast<unsigned char>(buf[pos])))
            throw error(std::string("expected integer for '") + field + "'");
        long v = 0;
        while (pos < buf.size() && std::isdigit(static_cast<unsigned char>(buf[pos]))) {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1 << 20) throw error(std::string("value too large for '") + field + "'");
            ++pos;
        }
        return static_cast<int>(v);
    };

    PnmHeader h;
    if (buf.size() < 2) throw error("truncated magic number");
    h.magic.assign(buf.data(), 2);
    pos = 2;
    h.width = read_int("width");
    h.height = read_int("height");
    h.maxval = read_int("maxval");
    if (h.width < 1 || h.height < 1) throw error("non-positive image dimensions");
    if (h.maxval != 255) throw error("unsupported maxval " + std::to_string(h.maxval));
    if (pos >= buf.size() || !std::isspace(static_cast<unsigned char>(buf[pos])))
        throw error("missing whitespace after header");
    h.data_offset = pos + 1;
    return h;
}

inline std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::io, "cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace detail

/// Writes a 3-channel volume with values in [0,1] as binary P6.
inline void write_ppm(const std::string& path, const Volume3D& img) {
    require(img.channels() == 3, "write_ppm: expected 3 channels");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path);
    out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
    std::vector<char> row(static_cast<std::size_t>(img.width()) * 3);
    for (int i = 0; i < img.height(); ++i) {
        for (int j = 0; j < img.width(); ++j)
            for (int c = 0; c < 3; ++c) row[j * 3 + c] = static_cast<char>(detail::to_byte(img(c, i, j)));
        out.write(row.data(), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

inline Volume3D read_ppm(const std::string& path) {
    const std::vector<char> buf = detail::slurp(path);
    const detail::PnmHeader h = detail::parse_pnm_header(buf, path);
    if (h.magic != "P6") throw Error(ErrorKind::parse, path + ": expected P6 magic at byte offset 0");
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height * 3;
    if (buf.size() - h.data_offset < need)
        throw Error(ErrorKind::parse, path + ": truncated pixel data at byte offset " + std::to_string(buf.size()) +
                                          " (expected " + std::to_string(h.data_offset + need) + " bytes)");
    Volume3D img(3, h.height, h.width);
    std::size_t k = h.data_offset;
    for (int i = 0; i < h.height; ++i)
        for (int j = 0; j < h.width; ++j)
            for (int c = 0; c < 3; ++c) img(c, i, j) = static_cast<unsigned char>(buf[k++]) / 255.0;
    return img;
}

/// Writes a grid as binary P5, mapping [lo, hi] onto [0, 255].
inline void write_pgm(const std::string& path, const Grid2D& g, double lo = 0.0, double hi = 1.0) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::io, "cannot write " + path);
    out << "P5\n" << g.width() << ' ' << g.height() << "\n255\n";
    const double span = hi > lo ? hi - lo : 1.0;
    for (int i = 0; i < g.height(); ++i)
        for (int j = 0; j < g.width(); ++j) out.put(static_cast<char>(detail::to_byte((g(i, j) - lo) / span)));
    if (!out) throw Error(ErrorKind::io, "write failed for " + path);
}

inline Grid2D read_pgm(const std::string& path) {
    const std::vector<char> buf = detail::slurp(path);
    const detail::PnmHeader h = detail::parse_pnm_header(buf, path);
    if (h.magic != "P5") throw Error(ErrorKind::parse, path + ": expected P5 magic at byte offset 0");
    const std::size_t need = static_cast<std::size_t>(h.width) * h.height;
    if (buf.size() - h.data_offset < need)
        throw Error(ErrorKind::parse, path + ": truncated pixel data at byte offset " + std::to_string(buf.size()));
    Grid2D g(h.height, h.width);
    std::size_t k = h.data_offset;
    for (int i = 0; i < h.height; ++i)
        for (int j = 0; j < h.width; ++j) g(i, j) = static_cast<unsigned char>(buf[k++]) / 255.0;
    return g;
}

} // namespace maskcount
