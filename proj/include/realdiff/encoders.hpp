#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "realdiff/nn.hpp"
#include "realdiff/pgm.hpp"

namespace realdiff {

struct ImageEncoderConfig {
    int mid_channels = 8;
    int out_channels = 16;
    int d_img = 16;
};

// Two strided 3x3 conv layers with relu, global average pooling, then an
// affine projection to d_img. Parameters live under prefix.conv1, prefix.conv2
// and prefix.proj.
void init_image_encoder(ParamStore& store, const std::string& prefix,
                        const ImageEncoderConfig& cfg, std::mt19937_64& rng);

Tensor image_to_tensor(const GrayImage& img);  // [1, H, W]

Tensor encode_image_tensor(const BoundParams& params, const std::string& prefix,
                           const Tensor& image);
Tensor encode_image(const BoundParams& params, const std::string& prefix,
                    const GrayImage& img);

// Mean embedding over a patient's slices; at least one slice is required.
Tensor encode_images(const BoundParams& params, const std::string& prefix,
                     const std::vector<GrayImage>& slices);

// Static-information encoder: one relu hidden layer, affine out.
// Parameters live under prefix.l1 and prefix.l2.
void init_static_encoder(ParamStore& store, const std::string& prefix, int in, int hidden,
                         int out, std::mt19937_64& rng);
Tensor encode_static(const BoundParams& params, const std::string& prefix, const Tensor& x);

// CSV of externally computed image features: header `patient_id,f0,f1,...`,
// one row per patient. Width mismatches and duplicate ids are format errors
// reported with their row number.
std::map<std::string, std::vector<double>> load_precomputed_features(const std::string& path);

}  // namespace realdiff
