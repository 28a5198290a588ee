#include "caga/ppm.hpp"

#include <cctype>
#include <fstream>

#include "caga/common.hpp"

namespace caga {

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string next_token(std::istream& is, const std::string& path) {
    std::string tok;
    int c;
    while ((c = is.get()) != EOF) {
        if (c == '#') {
            while ((c = is.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    if (tok.empty()) throw IoError("PPM: truncated header in " + path);
    return tok;
}

int parse_dim(const std::string& tok, const std::string& path, const char* what) {
    for (char ch : tok)
        if (!std::isdigit(static_cast<unsigned char>(ch)))
            throw IoError("PPM: bad " + std::string(what) + " '" + tok + "' in " + path);
    long v = std::stol(tok);
    if (v < 1 || v > 1 << 20) throw IoError("PPM: out-of-range " + std::string(what) + " in " + path);
    return static_cast<int>(v);
}

} // namespace

RawImage read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("PPM: cannot open " + path);
    if (next_token(is, path) != "P6") throw IoError("PPM: not a P6 file: " + path);
    RawImage img;
    img.width = parse_dim(next_token(is, path), path, "width");
    img.height = parse_dim(next_token(is, path), path, "height");
    const std::string maxval = next_token(is, path);
    if (maxval != "255") throw IoError("PPM: unsupported maxval " + maxval + " in " + path);
    // A single whitespace byte separates the header from the payload; the
    // token reader has already consumed it.
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height * 3;
    img.rgb.resize(n);
    if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(n)))
        throw IoError("PPM: truncated pixel data in " + path);
    return img;
}

void write_ppm(const std::string& path, const RawImage& img) {
    if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3)
        throw ContractError("write_ppm: payload size does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("PPM: cannot open " + path + " for writing");
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    if (!os) throw IoError("PPM: write failed for " + path);
}

void write_pgm(const std::string& path, const RawGray& img) {
    if (img.v.size() != static_cast<std::size_t>(img.width) * img.height)
        throw ContractError("write_pgm: payload size does not match dimensions");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("PGM: cannot open " + path + " for writing");
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.v.data()),
             static_cast<std::streamsize>(img.v.size()));
    if (!os) throw IoError("PGM: write failed for " + path);
}

} // namespace caga
