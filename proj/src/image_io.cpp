#include "countgen/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace countgen {

namespace {

unsigned char quantize(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return static_cast<unsigned char>(std::lround(v * 255.0));
}

}  // namespace

void write_ppm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw std::invalid_argument("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.dim(1), w = image.dim(2);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
    out << "P6\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                row[static_cast<std::size_t>(x * 3 + c)] = quantize(image.at((c * h + y) * w + x));
            }
        }
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P6") throw std::runtime_error("read_ppm: " + path + " is not a P6 pixmap");
    std::int64_t w = 0, h = 0;
    int maxval = 0;
    in >> w >> h >> maxval;
    if (!in || w <= 0 || h <= 0 || maxval != 255) {
        throw std::runtime_error("read_ppm: bad header in " + path);
    }
    in.get();
    std::vector<unsigned char> bytes(static_cast<std::size_t>(w * h * 3));
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
        throw std::runtime_error("read_ppm: truncated pixel data in " + path);
    }
    Array a(3 * h * w);
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                a[(c * h + y) * w + x] =
                    static_cast<double>(bytes[static_cast<std::size_t>((y * w + x) * 3 + c)]) / 255.0;
            }
        }
    }
    return Tensor::from_array({3, h, w}, std::move(a), false);
}

void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 2) {
        throw std::invalid_argument("write_pgm: expected [H,W], got " + shape_str(image.shape()));
    }
    const std::int64_t h = image.dim(0), w = image.dim(1);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    out << "P5\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<std::size_t>(w));
    for (std::int64_t y = 0; y < h; ++y) {
        for (std::int64_t x = 0; x < w; ++x) row[static_cast<std::size_t>(x)] = quantize(image.at(y * w + x));
        out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

}  // namespace countgen
