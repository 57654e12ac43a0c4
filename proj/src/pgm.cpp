#include "realdiff/pgm.hpp"

#include <cmath>
#include <fstream>

namespace realdiff {

void save_pgm(const std::string& path, const GrayImage& img) {
    if (img.width <= 0 || img.height <= 0 ||
        img.pixels.size() != static_cast<std::size_t>(img.width) * img.height) {
        throw ContractError("save_pgm: inconsistent image dimensions");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open image for writing: " + path);
    os << "P5\n" << img.width << " " << img.height << "\n255\n";
    for (double p : img.pixels) {
        const double clamped = p < 0.0 ? 0.0 : (p > 1.0 ? 1.0 : p);
        os.put(static_cast<char>(static_cast<int>(std::lround(clamped * 255.0))));
    }
    if (!os) throw FormatError("write failure on image: " + path);
}

GrayImage load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open image: " + path);
    std::string magic;
    is >> magic;
    if (magic != "P5") throw FormatError("not a binary PGM (P5) file: " + path);
    int width = 0, height = 0, maxval = 0;
    is >> width >> height >> maxval;
    if (!is || width <= 0 || height <= 0) throw FormatError("bad PGM header: " + path);
    if (maxval != 255) throw FormatError("unsupported PGM maxval (want 255): " + path);
    is.get();  // single whitespace byte after the header
    GrayImage img;
    img.width = width;
    img.height = height;
    img.pixels.resize(static_cast<std::size_t>(width) * height);
    std::vector<unsigned char> raw(img.pixels.size());
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw FormatError("truncated PGM payload: " + path);
    }
    for (std::size_t i = 0; i < raw.size(); ++i) img.pixels[i] = raw[i] / 255.0;
    return img;
}

}  // namespace realdiff
