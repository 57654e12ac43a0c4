#include "realdiff/nn.hpp"

#include <cmath>

#include "realdiff/errors.hpp"

namespace realdiff {
namespace {

Tensor fan_in_uniform(Shape shape, int fan_in, std::mt19937_64& rng) {
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace

const Tensor& pget(const BoundParams& params, const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
}

void init_affine(ParamStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng) {
    if (in < 1 || out < 1) throw ConfigError("affine dimensions must be positive");
    store.create(prefix + ".W", fan_in_uniform({out, in}, in, rng));
    store.create(prefix + ".b", fan_in_uniform({out}, in, rng));
}

Tensor affine(const BoundParams& params, const std::string& prefix, const Tensor& x) {
    return add(matvec(pget(params, prefix + ".W"), x), pget(params, prefix + ".b"));
}

void init_affine_rows(ParamStore& store, const std::string& prefix, int in, int out,
                      std::mt19937_64& rng) {
    if (in < 1 || out < 1) throw ConfigError("affine dimensions must be positive");
    store.create(prefix + ".W", fan_in_uniform({in, out}, in, rng));
    store.create(prefix + ".b", fan_in_uniform({out}, in, rng));
}

Tensor affine_rows(const BoundParams& params, const std::string& prefix, const Tensor& x) {
    return linear_rows(x, pget(params, prefix + ".W"), pget(params, prefix + ".b"));
}

}  // namespace realdiff
