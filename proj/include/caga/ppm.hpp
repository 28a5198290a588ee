#pragma once

#include <string>
#include <vector>

namespace caga {

// Interleaved 8-bit RGB image (PPM P6 payload order).
struct RawImage {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb;  // 3 * width * height
};

// 8-bit grayscale image (PGM P5 payload order).
struct RawGray {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> v;  // width * height
};

// Binary P6 with maxval 255. Comments and arbitrary header whitespace are
// accepted; anything else raises IoError naming the file.
RawImage read_ppm(const std::string& path);
void write_ppm(const std::string& path, const RawImage& img);
void write_pgm(const std::string& path, const RawGray& img);

} // namespace caga
