#include "realdiff/encoders.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "realdiff/errors.hpp"

namespace realdiff {
namespace {

Tensor conv_kernel_init(Shape shape, std::mt19937_64& rng) {
    int fan_in = shape[1] * shape[2] * shape[3];
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace

void init_image_encoder(ParamStore& store, const std::string& prefix,
                        const ImageEncoderConfig& cfg, std::mt19937_64& rng) {
    if (cfg.mid_channels < 1 || cfg.out_channels < 1 || cfg.d_img < 1) {
        throw ConfigError("image encoder dimensions must be positive");
    }
    double b1 = 1.0 / std::sqrt(9.0);
    double b2 = 1.0 / std::sqrt(9.0 * cfg.mid_channels);
    store.create(prefix + ".conv1.K", conv_kernel_init({cfg.mid_channels, 1, 3, 3}, rng));
    store.create(prefix + ".conv1.b", Tensor::uniform({cfg.mid_channels}, -b1, b1, rng));
    store.create(prefix + ".conv2.K",
                 conv_kernel_init({cfg.out_channels, cfg.mid_channels, 3, 3}, rng));
    store.create(prefix + ".conv2.b", Tensor::uniform({cfg.out_channels}, -b2, b2, rng));
    init_affine(store, prefix + ".proj", cfg.out_channels, cfg.d_img, rng);
}

Tensor image_to_tensor(const GrayImage& img) {
    return Tensor(Shape{1, img.height, img.width}, img.pixels);
}

Tensor encode_image_tensor(const BoundParams& params, const std::string& prefix,
                           const Tensor& image) {
    Tensor a = relu(conv2d(image, pget(params, prefix + ".conv1.K"),
                           pget(params, prefix + ".conv1.b"), 2, 1));
    Tensor b = relu(conv2d(a, pget(params, prefix + ".conv2.K"),
                           pget(params, prefix + ".conv2.b"), 2, 1));
    return affine(params, prefix + ".proj", global_avg_pool(b));
}

Tensor encode_image(const BoundParams& params, const std::string& prefix,
                    const GrayImage& img) {
    return encode_image_tensor(params, prefix, image_to_tensor(img));
}

Tensor encode_images(const BoundParams& params, const std::string& prefix,
                     const std::vector<GrayImage>& slices) {
    if (slices.empty()) throw ContractError("encode_images needs at least one slice");
    Tensor sum = encode_image(params, prefix, slices[0]);
    for (std::size_t i = 1; i < slices.size(); ++i) {
        sum = add(sum, encode_image(params, prefix, slices[i]));
    }
    return scale(sum, 1.0 / static_cast<double>(slices.size()));
}

void init_static_encoder(ParamStore& store, const std::string& prefix, int in, int hidden,
                         int out, std::mt19937_64& rng) {
    init_affine(store, prefix + ".l1", in, hidden, rng);
    init_affine(store, prefix + ".l2", hidden, out, rng);
}

Tensor encode_static(const BoundParams& params, const std::string& prefix, const Tensor& x) {
    return affine(params, prefix + ".l2", relu(affine(params, prefix + ".l1", x)));
}

std::map<std::string, std::vector<double>> load_precomputed_features(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path);

    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) header.push_back(field);
    }
    if (header.empty() || header[0] != "patient_id" || header.size() < 2) {
        throw FormatError(path + ": expected header 'patient_id,f0,f1,...'");
    }
    std::size_t width = header.size();

    std::map<std::string, std::vector<double>> out;
    int row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        {
            std::string cur;
            for (char ch : line) {
                if (ch == ',') {
                    fields.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(ch);
                }
            }
            fields.push_back(cur);
        }
        if (fields.size() != width) {
            throw FormatError(path + " row " + std::to_string(row) + ": expected " +
                              std::to_string(width) + " fields, got " +
                              std::to_string(fields.size()));
        }
        if (out.count(fields[0]) != 0) {
            throw FormatError(path + " row " + std::to_string(row) + ": duplicate patient " +
                              fields[0]);
        }
        std::vector<double> feats;
        feats.reserve(width - 1);
        for (std::size_t i = 1; i < width; ++i) {
            const char* begin = fields[i].c_str();
            char* end = nullptr;
            double v = std::strtod(begin, &end);
            if (end == begin || *end != '\0' || !std::isfinite(v)) {
                throw FormatError(path + " row " + std::to_string(row) + ": bad value '" +
                                  fields[i] + "'");
            }
            feats.push_back(v);
        }
        out.emplace(fields[0], std::move(feats));
    }
    return out;
}

}  // namespace realdiff
