#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "isa/error.hpp"

namespace isa {

// 8-bit grayscale PGM. Writing always uses binary P5; reading accepts both P5
// and ASCII P2.

struct PgmImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> pixels;  // row-major
};

inline void save_pgm(const std::string& path, const PgmImage& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("save_pgm: cannot open " + path);
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.pixels.data()),
             static_cast<std::streamsize>(img.pixels.size()));
    if (!os) throw IoError("save_pgm: write failed for " + path);
}

namespace detail {

inline int pgm_next_token(std::istream& is, std::string& tok) {
    tok.clear();
    int c = is.get();
    while (c != EOF) {
        if (c == '#') {  // comment to end of line
            while (c != EOF && c != '\n') c = is.get();
        } else if (std::isspace(c)) {
            if (!tok.empty()) return 0;
        } else {
            tok.push_back(static_cast<char>(c));
        }
        c = is.get();
    }
    return tok.empty() ? -1 : 0;
}

}  // namespace detail

inline PgmImage load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("load_pgm: cannot open " + path);
    std::string tok;
    if (detail::pgm_next_token(is, tok) != 0) throw IoError("load_pgm: empty file " + path);
    const bool binary = tok == "P5";
    if (!binary && tok != "P2") throw IoError("load_pgm: unsupported format " + tok + " in " + path);
    PgmImage img;
    std::size_t maxval = 0;
    for (std::size_t* field : {&img.width, &img.height, &maxval}) {
        if (detail::pgm_next_token(is, tok) != 0) throw IoError("load_pgm: truncated header in " + path);
        *field = static_cast<std::size_t>(std::stoull(tok));
    }
    if (maxval == 0 || maxval > 255) {
        throw IoError("load_pgm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    }
    img.pixels.resize(img.width * img.height);
    if (binary) {
        is.read(reinterpret_cast<char*>(img.pixels.data()),
                static_cast<std::streamsize>(img.pixels.size()));
        if (!is) throw IoError("load_pgm: truncated pixel data in " + path);
    } else {
        for (auto& px : img.pixels) {
            if (detail::pgm_next_token(is, tok) != 0) {
                throw IoError("load_pgm: truncated pixel data in " + path);
            }
            px = static_cast<std::uint8_t>(std::stoul(tok));
        }
    }
    return img;
}

}  // namespace isa
