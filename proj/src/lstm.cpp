#include "realdiff/lstm.hpp"

#include <cmath>

#include "realdiff/errors.hpp"

namespace realdiff {
namespace {

std::string layer_prefix(const std::string& prefix, int layer) {
    return prefix + ".l" + std::to_string(layer);
}

Tensor gate_preact(const BoundParams& params, const std::string& gate_prefix, const Tensor& x,
                   const Tensor& h) {
    Tensor wx = add(matvec(pget(params, gate_prefix + ".W"), x),
                    pget(params, gate_prefix + ".b"));
    return add(wx, matvec(pget(params, gate_prefix + ".U"), h));
}

}  // namespace

void init_lstm(ParamStore& store, const std::string& prefix, const LstmConfig& cfg,
               std::mt19937_64& rng) {
    if (cfg.input < 1 || cfg.hidden < 1 || cfg.layers < 1) {
        throw ConfigError("lstm dimensions must be positive");
    }
    double ubound = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    for (int layer = 0; layer < cfg.layers; ++layer) {
        int in = layer == 0 ? cfg.input : cfg.hidden;
        std::string lp = layer_prefix(prefix, layer);
        for (const char* gate : {"f", "i", "o", "g"}) {
            init_affine(store, lp + "." + gate, in, cfg.hidden, rng);
            store.create(lp + "." + gate + ".U",
                         Tensor::uniform({cfg.hidden, cfg.hidden}, -ubound, ubound, rng));
        }
    }
}

LstmState lstm_zero_state(int hidden) {
    return LstmState{Tensor::zeros({hidden}), Tensor::zeros({hidden})};
}

LstmState lstm_cell(const BoundParams& params, const std::string& prefix, int layer,
                    const Tensor& x, const LstmState& prev) {
    std::string lp = layer_prefix(prefix, layer);
    Tensor f = sigmoid(gate_preact(params, lp + ".f", x, prev.h));
    Tensor i = sigmoid(gate_preact(params, lp + ".i", x, prev.h));
    Tensor o = sigmoid(gate_preact(params, lp + ".o", x, prev.h));
    Tensor g = tanh(gate_preact(params, lp + ".g", x, prev.h));
    LstmState next;
    next.c = add(mul(f, prev.c), mul(i, g));
    next.h = mul(o, tanh(next.c));
    return next;
}

std::vector<Tensor> lstm_forward(const BoundParams& params, const std::string& prefix,
                                 const LstmConfig& cfg, const std::vector<Tensor>& inputs) {
    if (inputs.empty()) throw ContractError("lstm_forward needs at least one step");
    std::vector<LstmState> states(static_cast<std::size_t>(cfg.layers));
    for (auto& s : states) s = lstm_zero_state(cfg.hidden);

    std::vector<Tensor> top;
    top.reserve(inputs.size());
    for (const Tensor& x : inputs) {
        Tensor carried = x;
        for (int layer = 0; layer < cfg.layers; ++layer) {
            states[static_cast<std::size_t>(layer)] =
                lstm_cell(params, prefix, layer, carried, states[static_cast<std::size_t>(layer)]);
            carried = states[static_cast<std::size_t>(layer)].h;
        }
        top.push_back(carried);
    }
    return top;
}

}  // namespace realdiff
