#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "feddp/errors.hpp"
#include "feddp/model.hpp"
#include "feddp/params.hpp"
#include "feddp/rng.hpp"
#include "feddp/tensor.hpp"

namespace feddp {

/// Static description of one layer's pruning gate.
struct GateSpec {
    std::string layer_name;
    int layer_index = -1;
    int in_channels = 0;   // channels of the gated conv's input feature map
    int out_channels = 0;  // channels the gate scores and selects among
    int keep_count = 0;    // K: how many output channels survive per sample
    double lasso_coefficient = 0.0;
};

/// Gates for a whole model: one GateSpec per gated conv layer.
struct GatePlan {
    std::vector<GateSpec> specs;
    std::map<int, int> by_layer;  // layer index -> position in specs

    const GateSpec* spec_for_layer(int layer_index) const {
        auto it = by_layer.find(layer_index);
        return it == by_layer.end() ? nullptr : &specs[static_cast<std::size_t>(it->second)];
    }
};

inline int keep_count_for(int out_channels, double keep_ratio) {
    const int k = static_cast<int>(std::llround(keep_ratio * out_channels));
    return std::clamp(k, 1, out_channels);
}

/// Build a plan covering the model's gated conv layers with a uniform keep
/// ratio (K = round(ratio * C_out), clamped to [1, C_out]). `only_layers`
/// restricts gating to a subset of the gateable layers when non-empty.
inline GatePlan make_gate_plan(const ModelSpec& model, double keep_ratio, double lasso_coefficient,
                               const std::vector<int>& only_layers = {}) {
    if (keep_ratio <= 0.0 || keep_ratio > 1.0)
        throw ConfigError("gate keep ratio must be in (0, 1]");
    if (lasso_coefficient < 0.0) throw ConfigError("lasso coefficient must be nonnegative");
    GatePlan plan;
    for (int li : gated_layer_indices(model)) {
        if (!only_layers.empty() &&
            std::find(only_layers.begin(), only_layers.end(), li) == only_layers.end())
            continue;
        const LayerSpec& l = model.layers[static_cast<std::size_t>(li)];
        GateSpec g;
        g.layer_name = "conv" + std::to_string(li);
        g.layer_index = li;
        g.in_channels = l.in_channels;
        g.out_channels = l.out_channels;
        g.keep_count = keep_count_for(l.out_channels, keep_ratio);
        g.lasso_coefficient = lasso_coefficient;
        plan.by_layer[li] = static_cast<int>(plan.specs.size());
        plan.specs.push_back(std::move(g));
    }
    return plan;
}

/// Per-layer keep counts, e.g. for cost accounting: layer index -> K.
inline std::map<int, int> keep_counts(const GatePlan& plan) {
    std::map<int, int> out;
    for (const auto& g : plan.specs) out[g.layer_index] = g.keep_count;
    return out;
}

/// Gate parameters for a plan: per layer a linear map (weight C_out x C_in)
/// and bias. Stored client-side only; never part of communication.
template <typename Scalar>
ParamSet<Scalar> init_gate_params(const GatePlan& plan, RngStream& rng,
                                  Scalar bias_init = Scalar(2)) {
    ParamSet<Scalar> out;
    for (const auto& g : plan.specs) {
        Tensor<Scalar> w({g.out_channels, g.in_channels});
        const double bound = 1.0 / std::sqrt(static_cast<double>(g.in_channels));
        for (std::int64_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
        // Positive bias keeps initial saliency near one for every channel,
        // so selection starts close to the full network.
        Tensor<Scalar> b = Tensor<Scalar>::full({g.out_channels}, bias_init);
        out.add("gate" + std::to_string(g.layer_index) + ".weight", std::move(w));
        out.add("gate" + std::to_string(g.layer_index) + ".bias", std::move(b));
    }
    return out;
}

/// One sample's selection for one gated layer.
template <typename Scalar>
struct GateDecision {
    std::vector<int> selected;                          // sorted, exactly keep_count entries
    Eigen::Array<Scalar, Eigen::Dynamic, 1> saliency;   // sigmoid scores, length C_out
    Eigen::Array<Scalar, Eigen::Dynamic, 1> pre_activation;  // linear output, length C_out
};

/// Spatial mean per channel: (B, C, H, W) -> (B, C).
template <typename Scalar>
Tensor<Scalar> subsample(const Tensor<Scalar>& x) {
    const int b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    Tensor<Scalar> s({b, c});
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci) {
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> slice(
                x.data() + x.offset4(bi, ci, 0, 0), hw);
            s.at2(bi, ci) = slice.sum() / static_cast<Scalar>(hw);
        }
    return s;
}

/// Indices of the K largest entries, ties resolved toward the lower index;
/// result sorted ascending.
template <typename Scalar>
std::vector<int> top_k_indices(const Eigen::Ref<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>& v,
                               int k) {
    std::vector<int> idx(static_cast<std::size_t>(v.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        if (v[a] != v[b]) return v[a] > v[b];
        return a < b;
    });
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Score one sample's subsampled features and pick the top-K channels.
template <typename Scalar>
GateDecision<Scalar> gate_decide(const Eigen::Ref<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>& s,
                                 const Tensor<Scalar>& weight, const Tensor<Scalar>& bias,
                                 const GateSpec& spec) {
    if (weight.extent(0) != spec.out_channels || weight.extent(1) != spec.in_channels ||
        s.size() != spec.in_channels)
        throw StructureError("gate parameter shapes do not match spec for " + spec.layer_name);
    GateDecision<Scalar> d;
    auto wmat = as_matrix(weight, spec.out_channels, spec.in_channels);
    d.pre_activation =
        (wmat * s.matrix()).array() +
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(bias.data(), bias.size());
    d.saliency = Scalar(1) / (Scalar(1) + (-d.pre_activation).exp());
    d.selected = top_k_indices(d.saliency, spec.keep_count);
    return d;
}

/// Lasso regularizer over a batch of decisions for one layer:
/// mean over the batch of the L1 norm of the pre-activation vector.
template <typename Scalar>
Scalar layer_lasso(const std::vector<GateDecision<Scalar>>& decisions) {
    Scalar total = 0;
    for (const auto& d : decisions) total += d.pre_activation.abs().sum();
    return total / static_cast<Scalar>(decisions.size());
}

/// Count of backbone parameters inside selected filter slices, with ungated
/// layers counted whole, over the total backbone parameter count. Gated conv
/// weights count keep_out x keep_in x K x K entries plus keep_out bias terms,
/// where keep_in comes from the nearest upstream gate (full width if none).
inline double sparsity_ratio(const ModelSpec& model, const std::map<int, int>& keep) {
    const auto layout = param_layout(model);
    const auto sources = mask_source_layers(model);
    auto keep_of = [&](int layer) -> int {
        auto it = keep.find(layer);
        return it == keep.end() ? -1 : it->second;
    };
    std::int64_t selected = 0, total = 0;
    for (const auto& d : layout) {
        std::int64_t n = 1;
        for (int e : d.shape) n *= e;
        total += n;
        const LayerSpec& l = model.layers[static_cast<std::size_t>(d.layer_index)];
        const int k_out = (l.kind == LayerKind::Conv2d && l.gated) ? keep_of(d.layer_index) : -1;
        if (k_out < 0) {
            selected += n;
            continue;
        }
        const int in_layer = l.inputs[0] == -1 ? d.layer_index - 1 : l.inputs[0];
        const int in_src = in_layer >= 0 ? sources[static_cast<std::size_t>(in_layer)] : -1;
        const int k_in = in_src >= 0 && keep.count(in_src) ? keep.at(in_src) : l.in_channels;
        if (d.shape.size() == 4) {
            selected += static_cast<std::int64_t>(k_out) * k_in * l.kernel * l.kernel;
        } else {
            selected += k_out;  // bias
        }
    }
    return static_cast<double>(selected) / static_cast<double>(total);
}

} // namespace feddp
