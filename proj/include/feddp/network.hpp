#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "feddp/errors.hpp"
#include "feddp/gate.hpp"
#include "feddp/model.hpp"
#include "feddp/params.hpp"
#include "feddp/tensor.hpp"

namespace feddp {

/// Binding of a gate plan to a client's gate parameters.
template <typename Scalar>
struct GateSet {
    const GatePlan* plan = nullptr;
    ParamSet<Scalar>* params = nullptr;

    bool active() const { return plan != nullptr && !plan->specs.empty(); }
};

/// Mask sources restricted to layers actually covered by the plan: a gated
/// conv without a plan entry runs at full width and clears the mask.
inline std::vector<int> plan_mask_sources(const ModelSpec& model, const GatePlan* plan) {
    std::vector<int> src(model.layers.size(), -1);
    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        if (l.kind == LayerKind::Conv2d) {
            if (l.gated && plan && plan->spec_for_layer(i)) src[static_cast<std::size_t>(i)] = i;
            continue;
        }
        const bool preserves = l.kind == LayerKind::Relu || l.kind == LayerKind::Norm ||
                               l.kind == LayerKind::AvgPool;
        if (preserves) {
            const int in = l.inputs[0] == -1 ? i - 1 : l.inputs[0];
            if (in >= 0) src[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(in)];
        }
    }
    return src;
}

/// Per-layer batch of gate decisions plus the subsampled features they were
/// scored from.
template <typename Scalar>
struct LayerGateTrace {
    int layer_index = -1;
    Tensor<Scalar> subsampled;  // (B, C_in)
    std::vector<GateDecision<Scalar>> decisions;
};

template <typename Scalar>
struct LayerTrace {
    Tensor<Scalar> out;
    Tensor<Scalar> conv_pre;  // gated conv: pre-saliency output incl. bias

    // norm (training mode)
    Eigen::Array<Scalar, Eigen::Dynamic, 1> mean;
    Eigen::Array<Scalar, Eigen::Dynamic, 1> invstd;
    Tensor<Scalar> xhat;
    std::vector<std::int64_t> norm_count;
};

/// Computation record of one forward pass. Consumed by backward().
template <typename Scalar>
struct Tape {
    const ModelSpec* model = nullptr;
    ParamSet<Scalar>* params = nullptr;
    GateSet<Scalar> gates;
    bool training = true;
    bool consumed = false;
    int batch = 0;
    std::uint64_t flops = 0;  // counted MACs x2 over the whole batch

    Tensor<Scalar> input;
    std::vector<LayerTrace<Scalar>> traces;
    std::vector<LayerGateTrace<Scalar>> gate_traces;
    std::vector<int> gate_trace_of_layer;  // -1 where ungated
    std::vector<int> mask_source;

    const Tensor<Scalar>& logits() const { return traces.back().out; }
    std::uint64_t flops_per_sample() const {
        return batch > 0 ? flops / static_cast<std::uint64_t>(batch) : 0;
    }
};

namespace detail {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;

inline void conv_bounds(int out_extent, int in_extent, int stride, int pad, int k_off, int& lo,
                        int& hi) {
    // output positions o with 0 <= o*stride + k_off - pad < in_extent
    const int shift = pad - k_off;
    lo = shift > 0 ? (shift + stride - 1) / stride : 0;
    const int num = in_extent - 1 + shift;
    hi = num < 0 ? -1 : num / stride;
    if (hi > out_extent - 1) hi = out_extent - 1;
}

template <typename Scalar>
void conv_accumulate_channel(const Tensor<Scalar>& x, const Tensor<Scalar>& w,
                             const LayerSpec& l, int b, int co, int ci, Tensor<Scalar>& y,
                             int oh_extent, int ow_extent) {
    const int h = x.extent(2), w_in = x.extent(3);
    for (int kh = 0; kh < l.kernel; ++kh) {
        int oh_lo, oh_hi;
        conv_bounds(oh_extent, h, l.stride, l.padding, kh, oh_lo, oh_hi);
        for (int kw = 0; kw < l.kernel; ++kw) {
            int ow_lo, ow_hi;
            conv_bounds(ow_extent, w_in, l.stride, l.padding, kw, ow_lo, ow_hi);
            const Scalar wv = w[((static_cast<std::int64_t>(co) * l.in_channels + ci) * l.kernel + kh) * l.kernel + kw];
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                const int ih = oh * l.stride + kh - l.padding;
                const Scalar* xrow = x.data() + x.offset4(b, ci, ih, 0);
                Scalar* yrow = y.data() + y.offset4(b, co, oh, 0);
                const int koff = kw - l.padding;
                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                    yrow[ow] += wv * xrow[ow * l.stride + koff];
            }
        }
    }
}

template <typename Scalar>
void conv_backward_channel(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const LayerSpec& l,
                           int b, int co, int ci, const Tensor<Scalar>& dout,
                           Tensor<Scalar>& dw, Tensor<Scalar>* dx, int oh_extent, int ow_extent) {
    const int h = x.extent(2), w_in = x.extent(3);
    for (int kh = 0; kh < l.kernel; ++kh) {
        int oh_lo, oh_hi;
        conv_bounds(oh_extent, h, l.stride, l.padding, kh, oh_lo, oh_hi);
        for (int kw = 0; kw < l.kernel; ++kw) {
            int ow_lo, ow_hi;
            conv_bounds(ow_extent, w_in, l.stride, l.padding, kw, ow_lo, ow_hi);
            const std::int64_t widx =
                ((static_cast<std::int64_t>(co) * l.in_channels + ci) * l.kernel + kh) * l.kernel + kw;
            const Scalar wv = w[widx];
            Scalar acc = 0;
            const int koff = kw - l.padding;
            for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                const int ih = oh * l.stride + kh - l.padding;
                const Scalar* xrow = x.data() + x.offset4(b, ci, ih, 0);
                const Scalar* drow = dout.data() + dout.offset4(b, co, oh, 0);
                if (dx) {
                    Scalar* dxrow = dx->data() + dx->offset4(b, ci, ih, 0);
                    for (int ow = ow_lo; ow <= ow_hi; ++ow) {
                        const Scalar d = drow[ow];
                        acc += d * xrow[ow * l.stride + koff];
                        dxrow[ow * l.stride + koff] += wv * d;
                    }
                } else {
                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                        acc += drow[ow] * xrow[ow * l.stride + koff];
                }
            }
            dw[widx] += acc;
        }
    }
}

template <typename Scalar>
bool channel_active(const std::vector<GateDecision<Scalar>>* decisions, int b, int c) {
    if (!decisions) return true;
    const auto& sel = (*decisions)[static_cast<std::size_t>(b)].selected;
    return std::binary_search(sel.begin(), sel.end(), c);
}

[[noreturn]] inline void numeric_layer_error(int index, LayerKind kind) {
    throw NumericError("non-finite values after layer " + std::to_string(index) + " (" +
                       layer_kind_name(kind) + ")");
}

} // namespace detail

/// Run the model forward, recording everything backward() needs.
///
/// `gates` may be null (or have a null plan) for a plain dense pass. In
/// training mode normalization layers use batch statistics and update the
/// running statistics stored in `params`; in eval mode they read the running
/// statistics and leave them untouched.
template <typename Scalar>
Tape<Scalar> forward(const ModelSpec& model, ParamSet<Scalar>& params, const Tensor<Scalar>& x,
                     const GateSet<Scalar>* gates, bool training) {
    if (x.rank() != 4 || x.extent(1) != model.input_channels ||
        x.extent(2) != model.input_height || x.extent(3) != model.input_width)
        throw StructureError("input shape " + shape_string(x) + " does not match model " +
                             model.name);

    Tape<Scalar> tape;
    tape.model = &model;
    tape.params = &params;
    if (gates) tape.gates = *gates;
    tape.training = training;
    tape.batch = x.extent(0);
    tape.input = x;
    tape.traces.resize(model.layers.size());
    tape.gate_trace_of_layer.assign(model.layers.size(), -1);
    tape.mask_source = plan_mask_sources(model, tape.gates.plan);

    const int n_layers = static_cast<int>(model.layers.size());
    auto input_of = [&](int i, int slot) -> const Tensor<Scalar>& {
        const int src = model.layers[static_cast<std::size_t>(i)].inputs[static_cast<std::size_t>(slot)];
        if (src == -1) return i == 0 ? tape.input : tape.traces[static_cast<std::size_t>(i - 1)].out;
        return tape.traces[static_cast<std::size_t>(src)].out;
    };
    auto input_index = [&](int i, int slot) -> int {
        const int src = model.layers[static_cast<std::size_t>(i)].inputs[static_cast<std::size_t>(slot)];
        return src == -1 ? i - 1 : src;
    };
    // Decisions masking a layer's tensor, or null.
    auto mask_of_layer = [&](int i) -> const std::vector<GateDecision<Scalar>>* {
        if (i < 0) return nullptr;
        const int src = tape.mask_source[static_cast<std::size_t>(i)];
        if (src < 0) return nullptr;
        const int gt = tape.gate_trace_of_layer[static_cast<std::size_t>(src)];
        return &tape.gate_traces[static_cast<std::size_t>(gt)].decisions;
    };

    const int batch = tape.batch;
    for (int i = 0; i < n_layers; ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        const Tensor<Scalar>& in = input_of(i, 0);
        LayerTrace<Scalar>& tr = tape.traces[static_cast<std::size_t>(i)];
        const std::string id = std::to_string(i);

        switch (l.kind) {
            case LayerKind::Conv2d: {
                const Tensor<Scalar>& w = params.at("conv" + id + ".weight").value;
                const Tensor<Scalar>& bias = params.at("conv" + id + ".bias").value;
                const int oh = (in.extent(2) + 2 * l.padding - l.kernel) / l.stride + 1;
                const int ow = (in.extent(3) + 2 * l.padding - l.kernel) / l.stride + 1;
                tr.out = Tensor<Scalar>({batch, l.out_channels, oh, ow});
                const GateSpec* gs =
                    (l.gated && tape.gates.active()) ? tape.gates.plan->spec_for_layer(i) : nullptr;
                if (gs) {
                    LayerGateTrace<Scalar> gt;
                    gt.layer_index = i;
                    gt.subsampled = subsample(in);
                    const Tensor<Scalar>& gw = tape.gates.params->at("gate" + id + ".weight").value;
                    const Tensor<Scalar>& gb = tape.gates.params->at("gate" + id + ".bias").value;
                    gt.decisions.reserve(static_cast<std::size_t>(batch));
                    for (int b = 0; b < batch; ++b) {
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> srow(
                            gt.subsampled.data() + gt.subsampled.offset2(b, 0), l.in_channels);
                        gt.decisions.push_back(gate_decide<Scalar>(srow, gw, gb, *gs));
                    }
                    const auto* in_dec = mask_of_layer(input_index(i, 0));
                    tr.conv_pre = Tensor<Scalar>({batch, l.out_channels, oh, ow});
                    const std::int64_t hw_slice = static_cast<std::int64_t>(oh) * ow;
                    for (int b = 0; b < batch; ++b) {
                        const auto& d = gt.decisions[static_cast<std::size_t>(b)];
                        std::uint64_t active_in = in_dec
                            ? (*in_dec)[static_cast<std::size_t>(b)].selected.size()
                            : static_cast<std::uint64_t>(l.in_channels);
                        for (int co : d.selected) {
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> pre_slice(
                                tr.conv_pre.data() + tr.conv_pre.offset4(b, co, 0, 0), hw_slice);
                            pre_slice.setConstant(bias[co]);
                            if (in_dec) {
                                for (int ci : (*in_dec)[static_cast<std::size_t>(b)].selected)
                                    detail::conv_accumulate_channel(in, w, l, b, co, ci,
                                                                    tr.conv_pre, oh, ow);
                            } else {
                                for (int ci = 0; ci < l.in_channels; ++ci)
                                    detail::conv_accumulate_channel(in, w, l, b, co, ci,
                                                                    tr.conv_pre, oh, ow);
                            }
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> out_slice(
                                tr.out.data() + tr.out.offset4(b, co, 0, 0), hw_slice);
                            out_slice = d.saliency[co] * pre_slice;
                        }
                        tape.flops += 2ull * d.selected.size() * active_in *
                                      static_cast<std::uint64_t>(l.kernel) * l.kernel * oh * ow;
                    }
                    tape.gate_trace_of_layer[static_cast<std::size_t>(i)] =
                        static_cast<int>(tape.gate_traces.size());
                    tape.gate_traces.push_back(std::move(gt));
                } else {
                    const std::int64_t hw_slice = static_cast<std::int64_t>(oh) * ow;
                    for (int b = 0; b < batch; ++b)
                        for (int co = 0; co < l.out_channels; ++co) {
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> out_slice(
                                tr.out.data() + tr.out.offset4(b, co, 0, 0), hw_slice);
                            out_slice.setConstant(bias[co]);
                            for (int ci = 0; ci < l.in_channels; ++ci)
                                detail::conv_accumulate_channel(in, w, l, b, co, ci, tr.out, oh, ow);
                        }
                    tape.flops += 2ull * batch * l.out_channels * l.in_channels *
                                  static_cast<std::uint64_t>(l.kernel) * l.kernel * oh * ow;
                }
                break;
            }
            case LayerKind::Linear: {
                const Tensor<Scalar>& w = params.at("fc" + id + ".weight").value;
                const Tensor<Scalar>& bias = params.at("fc" + id + ".bias").value;
                tr.out = Tensor<Scalar>({batch, l.out_features});
                auto xm = as_matrix(in, batch, l.in_features);
                auto wm = as_matrix(w, l.out_features, l.in_features);
                auto ym = as_matrix(tr.out, batch, l.out_features);
                ym.noalias() = xm * wm.transpose();
                ym.rowwise() +=
                    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data(),
                                                                               l.out_features);
                tape.flops +=
                    2ull * batch * static_cast<std::uint64_t>(l.in_features) * l.out_features;
                break;
            }
            case LayerKind::Relu: {
                tr.out = Tensor<Scalar>(in.shape());
                tr.out.array() = in.array().max(Scalar(0));
                break;
            }
            case LayerKind::Norm: {
                const Tensor<Scalar>& gamma = params.at("norm" + id + ".gamma").value;
                const Tensor<Scalar>& beta = params.at("norm" + id + ".beta").value;
                auto& rmean = params.at("norm" + id + ".running_mean").value;
                auto& rvar = params.at("norm" + id + ".running_var").value;
                const auto* mask = mask_of_layer(i);
                const int c = l.channels, h = in.extent(2), w_in = in.extent(3);
                const std::int64_t hw = static_cast<std::int64_t>(h) * w_in;
                tr.out = Tensor<Scalar>(in.shape());
                tr.mean.resize(c);
                tr.invstd.resize(c);
                tr.norm_count.assign(static_cast<std::size_t>(c), 0);
                if (training) tr.xhat = Tensor<Scalar>(in.shape());
                for (int ci = 0; ci < c; ++ci) {
                    Scalar mean_v = 0, invstd_v = 0;
                    std::int64_t m = 0;
                    if (training) {
                        Scalar sum = 0;
                        for (int b = 0; b < batch; ++b) {
                            if (!detail::channel_active(mask, b, ci)) continue;
                            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> slice(
                                in.data() + in.offset4(b, ci, 0, 0), hw);
                            sum += slice.sum();
                            m += hw;
                        }
                        if (m > 0) {
                            mean_v = sum / static_cast<Scalar>(m);
                            Scalar sq = 0;
                            for (int b = 0; b < batch; ++b) {
                                if (!detail::channel_active(mask, b, ci)) continue;
                                Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> slice(
                                    in.data() + in.offset4(b, ci, 0, 0), hw);
                                sq += (slice - mean_v).square().sum();
                            }
                            const Scalar var = sq / static_cast<Scalar>(m);
                            invstd_v = Scalar(1) /
                                       std::sqrt(var + static_cast<Scalar>(detail::kNormEps));
                            // Channels with no surviving positions keep their
                            // running statistics unchanged for this step.
                            rmean[ci] = static_cast<Scalar>(1 - detail::kNormMomentum) * rmean[ci] +
                                        static_cast<Scalar>(detail::kNormMomentum) * mean_v;
                            rvar[ci] = static_cast<Scalar>(1 - detail::kNormMomentum) * rvar[ci] +
                                       static_cast<Scalar>(detail::kNormMomentum) * var;
                        }
                    } else {
                        mean_v = rmean[ci];
                        invstd_v = Scalar(1) /
                                   std::sqrt(rvar[ci] + static_cast<Scalar>(detail::kNormEps));
                        m = 1;  // statistics available; per-slice activity still applies below
                    }
                    tr.mean[ci] = mean_v;
                    tr.invstd[ci] = invstd_v;
                    tr.norm_count[static_cast<std::size_t>(ci)] = training ? m : 0;
                    if (training && m == 0) continue;
                    for (int b = 0; b < batch; ++b) {
                        if (!detail::channel_active(mask, b, ci)) continue;
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> slice(
                            in.data() + in.offset4(b, ci, 0, 0), hw);
                        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> out_slice(
                            tr.out.data() + tr.out.offset4(b, ci, 0, 0), hw);
                        if (training) {
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> xhat_slice(
                                tr.xhat.data() + tr.xhat.offset4(b, ci, 0, 0), hw);
                            xhat_slice = (slice - mean_v) * invstd_v;
                            out_slice = gamma[ci] * xhat_slice + beta[ci];
                        } else {
                            out_slice = gamma[ci] * ((slice - mean_v) * invstd_v) + beta[ci];
                        }
                    }
                }
                break;
            }
            case LayerKind::AvgPool: {
                const int c = in.extent(1);
                const int oh = in.extent(2) / l.window, ow = in.extent(3) / l.window;
                tr.out = Tensor<Scalar>({batch, c, oh, ow});
                const Scalar inv = Scalar(1) / static_cast<Scalar>(l.window * l.window);
                for (int b = 0; b < batch; ++b)
                    for (int ci = 0; ci < c; ++ci)
                        for (int y = 0; y < oh; ++y)
                            for (int xo = 0; xo < ow; ++xo) {
                                Scalar acc = 0;
                                for (int dy = 0; dy < l.window; ++dy)
                                    for (int dxp = 0; dxp < l.window; ++dxp)
                                        acc += in.at4(b, ci, y * l.window + dy,
                                                      xo * l.window + dxp);
                                tr.out.at4(b, ci, y, xo) = acc * inv;
                            }
                break;
            }
            case LayerKind::GlobalAvgPool: {
                const int c = in.extent(1);
                const std::int64_t hw =
                    static_cast<std::int64_t>(in.extent(2)) * in.extent(3);
                tr.out = Tensor<Scalar>({batch, c, 1, 1});
                for (int b = 0; b < batch; ++b)
                    for (int ci = 0; ci < c; ++ci) {
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> slice(
                            in.data() + in.offset4(b, ci, 0, 0), hw);
                        tr.out.at4(b, ci, 0, 0) = slice.sum() / static_cast<Scalar>(hw);
                    }
                break;
            }
            case LayerKind::Flatten: {
                const std::int64_t feats = in.size() / batch;
                tr.out = Tensor<Scalar>({batch, static_cast<int>(feats)});
                tr.out.array() = in.array();
                break;
            }
            case LayerKind::Add: {
                const Tensor<Scalar>& a = input_of(i, 0);
                const Tensor<Scalar>& b2 = input_of(i, 1);
                if (!a.same_shape(b2)) throw StructureError("add inputs differ in shape");
                tr.out = Tensor<Scalar>(a.shape());
                tr.out.array() = a.array() + b2.array();
                break;
            }
        }
        if (!tr.out.all_finite()) detail::numeric_layer_error(i, l.kind);
    }
    return tape;
}

/// Mean negative log-likelihood of the labelled class under softmax(logits).
template <typename Scalar>
Scalar cross_entropy(const Tensor<Scalar>& logits, const std::vector<int>& labels) {
    const int batch = logits.extent(0), classes = logits.extent(1);
    if (static_cast<int>(labels.size()) != batch)
        throw StructureError("label count does not match batch");
    Scalar total = 0;
    for (int b = 0; b < batch; ++b) {
        if (labels[static_cast<std::size_t>(b)] < 0 ||
            labels[static_cast<std::size_t>(b)] >= classes)
            throw StructureError("label out of range: " +
                                 std::to_string(labels[static_cast<std::size_t>(b)]));
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> row(
            logits.data() + logits.offset2(b, 0), classes);
        const Scalar mx = row.maxCoeff();
        const Scalar lse = mx + std::log((row - mx).exp().sum());
        total += lse - row[labels[static_cast<std::size_t>(b)]];
    }
    return total / static_cast<Scalar>(batch);
}

template <typename Scalar>
Tensor<Scalar> cross_entropy_backward(const Tensor<Scalar>& logits, const std::vector<int>& labels,
                                      Scalar upstream) {
    const int batch = logits.extent(0), classes = logits.extent(1);
    Tensor<Scalar> d(logits.shape());
    const Scalar scale = upstream / static_cast<Scalar>(batch);
    for (int b = 0; b < batch; ++b) {
        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> row(
            logits.data() + logits.offset2(b, 0), classes);
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> drow(d.data() + d.offset2(b, 0),
                                                                 classes);
        const Scalar mx = row.maxCoeff();
        Eigen::Array<Scalar, Eigen::Dynamic, 1> e = (row - mx).exp();
        drow = e / e.sum() * scale;
        drow[labels[static_cast<std::size_t>(b)]] -= scale;
    }
    return d;
}

/// Gate regularizer over a batch: lambda * sum over layers of the batch-mean
/// L1 norm of the gate pre-activations.
template <typename Scalar>
Scalar lasso_gate_loss(const std::vector<LayerGateTrace<Scalar>>& traces, Scalar lambda) {
    if (lambda < Scalar(0)) throw ConfigError("lasso coefficient must be nonnegative");
    Scalar total = 0;
    for (const auto& t : traces) total += layer_lasso(t.decisions);
    return lambda * total;
}

/// Same, but with each layer's own coefficient from the plan.
template <typename Scalar>
Scalar gate_lasso_loss(const Tape<Scalar>& tape) {
    Scalar total = 0;
    for (const auto& t : tape.gate_traces) {
        const GateSpec* gs = tape.gates.plan->spec_for_layer(t.layer_index);
        total += static_cast<Scalar>(gs->lasso_coefficient) * layer_lasso(t.decisions);
    }
    return total;
}

/// Reverse pass. `dlogits` seeds the classifier gradient; `upstream` scales
/// the gate-regularizer subgradients (pass the same factor used to scale
/// dlogits; 1 for a plain loss gradient). Gradients accumulate into the
/// backbone and gate ParamSets. The tape is single-use.
template <typename Scalar>
void backward(Tape<Scalar>& tape, const Tensor<Scalar>& dlogits, Scalar upstream = Scalar(1)) {
    if (tape.consumed) throw UsageError("backward called on a consumed tape");
    if (!tape.training) throw UsageError("backward requires a training-mode tape");
    tape.consumed = true;

    const ModelSpec& model = *tape.model;
    ParamSet<Scalar>& params = *tape.params;
    const int n_layers = static_cast<int>(model.layers.size());
    const int batch = tape.batch;

    // dact[i+1] = gradient w.r.t. layer i's output; dact[0] w.r.t. the input.
    std::vector<Tensor<Scalar>> dact(static_cast<std::size_t>(n_layers) + 1);
    auto grad_of = [&](int layer_index) -> Tensor<Scalar>& {
        auto& g = dact[static_cast<std::size_t>(layer_index + 1)];
        if (g.size() == 0) {
            const Tensor<Scalar>& ref = layer_index < 0
                                            ? tape.input
                                            : tape.traces[static_cast<std::size_t>(layer_index)].out;
            g = Tensor<Scalar>(ref.shape());
        }
        return g;
    };
    if (!dlogits.same_shape(tape.logits()))
        throw StructureError("dlogits shape mismatch");
    grad_of(n_layers - 1).array() = dlogits.array();

    auto input_index = [&](int i, int slot) -> int {
        const int src = model.layers[static_cast<std::size_t>(i)].inputs[static_cast<std::size_t>(slot)];
        return src == -1 ? i - 1 : src;
    };
    auto activation = [&](int layer_index) -> const Tensor<Scalar>& {
        return layer_index < 0 ? tape.input
                               : tape.traces[static_cast<std::size_t>(layer_index)].out;
    };
    auto mask_of_layer = [&](int i) -> const std::vector<GateDecision<Scalar>>* {
        if (i < 0) return nullptr;
        const int src = tape.mask_source[static_cast<std::size_t>(i)];
        if (src < 0) return nullptr;
        const int gt = tape.gate_trace_of_layer[static_cast<std::size_t>(src)];
        return &tape.gate_traces[static_cast<std::size_t>(gt)].decisions;
    };

    for (int i = n_layers - 1; i >= 0; --i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        const Tensor<Scalar>& dy = grad_of(i);
        const LayerTrace<Scalar>& tr = tape.traces[static_cast<std::size_t>(i)];
        const int in_idx = input_index(i, 0);
        const Tensor<Scalar>& in = activation(in_idx);
        const std::string id = std::to_string(i);

        switch (l.kind) {
            case LayerKind::Conv2d: {
                auto& wp = params.at("conv" + id + ".weight");
                auto& bp = params.at("conv" + id + ".bias");
                Tensor<Scalar>& dx = grad_of(in_idx);
                const int oh = tr.out.extent(2), ow = tr.out.extent(3);
                const std::int64_t hw = static_cast<std::int64_t>(oh) * ow;
                const int gti = tape.gate_trace_of_layer[static_cast<std::size_t>(i)];
                if (gti >= 0) {
                    LayerGateTrace<Scalar>& gt = tape.gate_traces[static_cast<std::size_t>(gti)];
                    const GateSpec* gs = tape.gates.plan->spec_for_layer(i);
                    auto& gwp = tape.gates.params->at("gate" + id + ".weight");
                    auto& gbp = tape.gates.params->at("gate" + id + ".bias");
                    const auto* in_dec = mask_of_layer(in_idx);
                    const Scalar lasso_scale =
                        upstream * static_cast<Scalar>(gs->lasso_coefficient) /
                        static_cast<Scalar>(batch);
                    Tensor<Scalar> dconv({batch, l.out_channels, oh, ow});
                    const int in_h = in.extent(2), in_w = in.extent(3);
                    const std::int64_t in_hw = static_cast<std::int64_t>(in_h) * in_w;
                    for (int b = 0; b < batch; ++b) {
                        const auto& d = gt.decisions[static_cast<std::size_t>(b)];
                        Eigen::Array<Scalar, Eigen::Dynamic, 1> dpre =
                            lasso_scale * d.pre_activation.sign();
                        for (int co : d.selected) {
                            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy_slice(
                                dy.data() + dy.offset4(b, co, 0, 0), hw);
                            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> pre_slice(
                                tr.conv_pre.data() + tr.conv_pre.offset4(b, co, 0, 0), hw);
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dconv_slice(
                                dconv.data() + dconv.offset4(b, co, 0, 0), hw);
                            dconv_slice = dy_slice * d.saliency[co];
                            const Scalar dsal = (dy_slice * pre_slice).sum();
                            dpre[co] += dsal * d.saliency[co] * (Scalar(1) - d.saliency[co]);
                            bp.grad[co] += dconv_slice.sum();
                            if (in_dec) {
                                for (int ci : (*in_dec)[static_cast<std::size_t>(b)].selected)
                                    detail::conv_backward_channel(in, wp.value, l, b, co, ci,
                                                                  dconv, wp.grad, &dx, oh, ow);
                            } else {
                                for (int ci = 0; ci < l.in_channels; ++ci)
                                    detail::conv_backward_channel(in, wp.value, l, b, co, ci,
                                                                  dconv, wp.grad, &dx, oh, ow);
                            }
                        }
                        // gate linear + subsample backward
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> srow(
                            gt.subsampled.data() + gt.subsampled.offset2(b, 0), l.in_channels);
                        auto gw = as_matrix(gwp.value, l.out_channels, l.in_channels);
                        auto dgw = as_matrix(gwp.grad, l.out_channels, l.in_channels);
                        dgw.noalias() += dpre.matrix() * srow.matrix().transpose();
                        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(
                            gbp.grad.data(), l.out_channels) += dpre;
                        Eigen::Array<Scalar, Eigen::Dynamic, 1> ds =
                            (gw.transpose() * dpre.matrix()).array();
                        const Scalar inv_hw = Scalar(1) / static_cast<Scalar>(in_hw);
                        for (int ci = 0; ci < l.in_channels; ++ci) {
                            Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dx_slice(
                                dx.data() + dx.offset4(b, ci, 0, 0), in_hw);
                            dx_slice += ds[ci] * inv_hw;
                        }
                    }
                } else {
                    for (int b = 0; b < batch; ++b)
                        for (int co = 0; co < l.out_channels; ++co) {
                            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy_slice(
                                dy.data() + dy.offset4(b, co, 0, 0), hw);
                            bp.grad[co] += dy_slice.sum();
                            for (int ci = 0; ci < l.in_channels; ++ci)
                                detail::conv_backward_channel(in, wp.value, l, b, co, ci, dy,
                                                              wp.grad, &dx, oh, ow);
                        }
                }
                break;
            }
            case LayerKind::Linear: {
                auto& wp = params.at("fc" + id + ".weight");
                auto& bp = params.at("fc" + id + ".bias");
                Tensor<Scalar>& dx = grad_of(in_idx);
                auto dym = as_matrix(dy, batch, l.out_features);
                auto xm = as_matrix(in, batch, l.in_features);
                auto wm = as_matrix(wp.value, l.out_features, l.in_features);
                as_matrix(wp.grad, l.out_features, l.in_features).noalias() +=
                    dym.transpose() * xm;
                Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bp.grad.data(),
                                                                     l.out_features) +=
                    dym.colwise().sum().transpose();
                as_matrix(dx, batch, l.in_features).noalias() += dym * wm;
                break;
            }
            case LayerKind::Relu: {
                Tensor<Scalar>& dx = grad_of(in_idx);
                dx.array() += (tr.out.array() > Scalar(0)).template cast<Scalar>() * dy.array();
                break;
            }
            case LayerKind::Norm: {
                auto& gp = params.at("norm" + id + ".gamma");
                auto& bp = params.at("norm" + id + ".beta");
                Tensor<Scalar>& dx = grad_of(in_idx);
                const auto* mask = mask_of_layer(i);
                const int c = l.channels;
                const std::int64_t hw =
                    static_cast<std::int64_t>(in.extent(2)) * in.extent(3);
                for (int ci = 0; ci < c; ++ci) {
                    const std::int64_t m = tr.norm_count[static_cast<std::size_t>(ci)];
                    if (m == 0) continue;
                    Scalar sum_dy = 0, sum_dy_xhat = 0;
                    for (int b = 0; b < batch; ++b) {
                        if (!detail::channel_active(mask, b, ci)) continue;
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy_slice(
                            dy.data() + dy.offset4(b, ci, 0, 0), hw);
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xhat_slice(
                            tr.xhat.data() + tr.xhat.offset4(b, ci, 0, 0), hw);
                        sum_dy += dy_slice.sum();
                        sum_dy_xhat += (dy_slice * xhat_slice).sum();
                    }
                    gp.grad[ci] += sum_dy_xhat;
                    bp.grad[ci] += sum_dy;
                    const Scalar g = gp.value[ci];
                    const Scalar inv_m = Scalar(1) / static_cast<Scalar>(m);
                    for (int b = 0; b < batch; ++b) {
                        if (!detail::channel_active(mask, b, ci)) continue;
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> dy_slice(
                            dy.data() + dy.offset4(b, ci, 0, 0), hw);
                        Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>> xhat_slice(
                            tr.xhat.data() + tr.xhat.offset4(b, ci, 0, 0), hw);
                        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dx_slice(
                            dx.data() + dx.offset4(b, ci, 0, 0), hw);
                        dx_slice += g * tr.invstd[ci] *
                                    (dy_slice - inv_m * sum_dy - xhat_slice * inv_m * sum_dy_xhat);
                    }
                }
                break;
            }
            case LayerKind::AvgPool: {
                Tensor<Scalar>& dx = grad_of(in_idx);
                const int c = in.extent(1);
                const int oh = tr.out.extent(2), ow = tr.out.extent(3);
                const Scalar inv = Scalar(1) / static_cast<Scalar>(l.window * l.window);
                for (int b = 0; b < batch; ++b)
                    for (int ci = 0; ci < c; ++ci)
                        for (int y = 0; y < oh; ++y)
                            for (int xo = 0; xo < ow; ++xo) {
                                const Scalar d = dy.at4(b, ci, y, xo) * inv;
                                for (int dy2 = 0; dy2 < l.window; ++dy2)
                                    for (int dx2 = 0; dx2 < l.window; ++dx2)
                                        dx.at4(b, ci, y * l.window + dy2, xo * l.window + dx2) += d;
                            }
                break;
            }
            case LayerKind::GlobalAvgPool: {
                Tensor<Scalar>& dx = grad_of(in_idx);
                const int c = in.extent(1);
                const std::int64_t hw =
                    static_cast<std::int64_t>(in.extent(2)) * in.extent(3);
                const Scalar inv = Scalar(1) / static_cast<Scalar>(hw);
                for (int b = 0; b < batch; ++b)
                    for (int ci = 0; ci < c; ++ci) {
                        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>> dx_slice(
                            dx.data() + dx.offset4(b, ci, 0, 0), hw);
                        dx_slice += dy.at4(b, ci, 0, 0) * inv;
                    }
                break;
            }
            case LayerKind::Flatten: {
                Tensor<Scalar>& dx = grad_of(in_idx);
                dx.array() += dy.array();
                break;
            }
            case LayerKind::Add: {
                grad_of(input_index(i, 0)).array() += dy.array();
                grad_of(input_index(i, 1)).array() += dy.array();
                break;
            }
        }
    }
}

} // namespace feddp
