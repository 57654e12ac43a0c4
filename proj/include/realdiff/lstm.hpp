#pragma once

#include <random>
#include <string>
#include <vector>

#include "realdiff/nn.hpp"

namespace realdiff {

struct LstmConfig {
    int input = 0;
    int hidden = 16;
    int layers = 2;
};

// Stacked LSTM parameters under `prefix.lN.<gate>` for gates f, i, o, g.
// Each gate holds W [hidden, in], b [hidden] and U [hidden, hidden].
void init_lstm(ParamStore& store, const std::string& prefix, const LstmConfig& cfg,
               std::mt19937_64& rng);

struct LstmState {
    Tensor h, c;
};

LstmState lstm_zero_state(int hidden);

// One step of layer `layer`:
//   f,i,o = sigmoid(W x + U h + b), g = tanh(W x + U h + b)
//   c' = f * c + i * g, h' = o * tanh(c')
LstmState lstm_cell(const BoundParams& params, const std::string& prefix, int layer,
                    const Tensor& x, const LstmState& prev);

// Full stacked pass from zero state; returns the top layer's hidden state at
// every step. State never leaks across calls, so each sequence starts fresh.
std::vector<Tensor> lstm_forward(const BoundParams& params, const std::string& prefix,
                                 const LstmConfig& cfg, const std::vector<Tensor>& inputs);

}  // namespace realdiff
