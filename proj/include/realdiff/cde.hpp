#pragma once

#include <random>
#include <string>
#include <vector>

#include "realdiff/nn.hpp"
#include "realdiff/path.hpp"

namespace realdiff {

struct CdeConfig {
    int hidden = 16;   // latent dimension
    int width = 64;    // vector-field MLP width
    int substeps = 4;  // RK4 steps per grid interval
};

// Latent controlled-ODE trunk: dz/ds = F(z) dX/ds, with z0 an affine map of
// the path's first sample and F a bounded MLP producing an [hidden, channels]
// matrix. Parameter names live under `prefix` (init, field.l1..l3).
void init_cde_trunk(ParamStore& store, const std::string& prefix, int channels,
                    const CdeConfig& cfg, std::mt19937_64& rng);

Tensor cde_initial_state(const BoundParams& params, const std::string& prefix,
                         const ControlPath& path);

// F(z): two hidden relu layers, then tanh, reshaped to [hidden, channels].
// The tanh keeps the field bounded, which keeps fixed-step solves stable.
Tensor cde_vector_field(const BoundParams& params, const std::string& prefix,
                        const Tensor& z);

struct CdeSolveResult {
    std::vector<Tensor> states;  // latent [hidden] per eval time, in call order
    int steps_taken = 0;
};

// Classic fourth-order Runge-Kutta with a fixed grid: every knot of the path
// is a step boundary, each interval is cut into cfg.substeps equal steps, and
// requested evaluation params are inserted as extra boundaries so states are
// read off exactly, never interpolated. The whole solve records on the tape,
// so gradients flow back through every step (discretize-then-optimize).
CdeSolveResult solve_cde(const BoundParams& params, const std::string& prefix,
                         const ControlPath& path, const std::vector<double>& eval_times,
                         const CdeConfig& cfg);

// Scalar forecast head: solve to the prediction time, then affine readout
// under prefix.readout (created separately via init_affine).
Tensor cde_forecast(const BoundParams& params, const std::string& prefix,
                    const ControlPath& path, double predict_time, const CdeConfig& cfg);

}  // namespace realdiff
