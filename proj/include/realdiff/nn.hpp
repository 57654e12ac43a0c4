#pragma once

#include <map>
#include <random>
#include <string>

#include "realdiff/optim.hpp"
#include "realdiff/tensor.hpp"

namespace realdiff {

// Tape-bound view of a ParamStore, as produced by ParamStore::bind_all.
using BoundParams = std::map<std::string, Tensor>;

// Lookup that turns a missing name into a diagnosable error instead of UB.
const Tensor& pget(const BoundParams& params, const std::string& name);

// Affine map for vector inputs: creates prefix.W [out, in] and prefix.b [out],
// both uniform in [-1/sqrt(in), +1/sqrt(in)).
void init_affine(ParamStore& store, const std::string& prefix, int in, int out,
                 std::mt19937_64& rng);
Tensor affine(const BoundParams& params, const std::string& prefix, const Tensor& x);

// Row-batch variant: prefix.W is stored [in, out] so [T, in] inputs map with
// one matrix product per sequence.
void init_affine_rows(ParamStore& store, const std::string& prefix, int in, int out,
                      std::mt19937_64& rng);
Tensor affine_rows(const BoundParams& params, const std::string& prefix, const Tensor& x);

}  // namespace realdiff
