#include "feddp/model.hpp"

#include <algorithm>
#include <sstream>

namespace feddp {

const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Linear: return "linear";
        case LayerKind::Relu: return "relu";
        case LayerKind::Norm: return "norm";
        case LayerKind::AvgPool: return "avgpool";
        case LayerKind::GlobalAvgPool: return "globalavgpool";
        case LayerKind::Flatten: return "flatten";
        case LayerKind::Add: return "add";
    }
    return "?";
}

LayerSpec conv_spec(int in_ch, int out_ch, int kernel, int stride, int padding,
                    bool gated, int input) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_channels = in_ch;
    s.out_channels = out_ch;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    s.gated = gated;
    s.inputs = {input, -1};
    return s;
}

LayerSpec linear_spec(int in_features, int out_features) {
    LayerSpec s;
    s.kind = LayerKind::Linear;
    s.in_features = in_features;
    s.out_features = out_features;
    return s;
}

LayerSpec relu_spec() {
    LayerSpec s;
    s.kind = LayerKind::Relu;
    return s;
}

LayerSpec norm_spec(int channels) {
    LayerSpec s;
    s.kind = LayerKind::Norm;
    s.channels = channels;
    return s;
}

LayerSpec avgpool_spec(int window) {
    LayerSpec s;
    s.kind = LayerKind::AvgPool;
    s.window = window;
    return s;
}

LayerSpec global_avgpool_spec() {
    LayerSpec s;
    s.kind = LayerKind::GlobalAvgPool;
    return s;
}

LayerSpec flatten_spec() {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

LayerSpec add_spec(int input_a, int input_b) {
    LayerSpec s;
    s.kind = LayerKind::Add;
    s.inputs = {input_a, input_b};
    return s;
}

namespace {

[[noreturn]] void layer_error(int index, LayerKind kind, const std::string& msg) {
    std::ostringstream os;
    os << "layer " << index << " (" << layer_kind_name(kind) << "): " << msg;
    throw StructureError(os.str());
}

int conv_extent(int in, int padding, int kernel, int stride) {
    return (in + 2 * padding - kernel) / stride + 1;
}

} // namespace

std::vector<Dims> infer_dims(const ModelSpec& model) {
    std::vector<Dims> out(model.layers.size());
    const Dims input_dims{model.input_channels, model.input_height, model.input_width};

    auto dims_of = [&](int layer, int slot) -> Dims {
        const int src = model.layers[static_cast<std::size_t>(layer)].inputs[static_cast<std::size_t>(slot)];
        if (src == -1) return layer == 0 ? input_dims : out[static_cast<std::size_t>(layer - 1)];
        if (src < -1 || src >= layer)
            layer_error(layer, model.layers[static_cast<std::size_t>(layer)].kind,
                        "input index out of range");
        return out[static_cast<std::size_t>(src)];
    };

    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        const Dims in = dims_of(i, 0);
        switch (l.kind) {
            case LayerKind::Conv2d: {
                if (l.in_channels != in.c)
                    layer_error(i, l.kind, "expects " + std::to_string(l.in_channels) +
                                               " input channels, got " + std::to_string(in.c));
                if (l.kernel < 1 || l.stride < 1 || l.padding < 0)
                    layer_error(i, l.kind, "bad kernel/stride/padding");
                const int oh = conv_extent(in.h, l.padding, l.kernel, l.stride);
                const int ow = conv_extent(in.w, l.padding, l.kernel, l.stride);
                if (oh < 1 || ow < 1) layer_error(i, l.kind, "empty spatial output");
                out[static_cast<std::size_t>(i)] = {l.out_channels, oh, ow};
                break;
            }
            case LayerKind::Linear: {
                const int feats = in.c * in.h * in.w;
                if (l.in_features != feats)
                    layer_error(i, l.kind, "expects " + std::to_string(l.in_features) +
                                               " input features, got " + std::to_string(feats));
                out[static_cast<std::size_t>(i)] = {l.out_features, 1, 1};
                break;
            }
            case LayerKind::Relu:
                out[static_cast<std::size_t>(i)] = in;
                break;
            case LayerKind::Norm:
                if (l.channels != in.c)
                    layer_error(i, l.kind, "channel count mismatch");
                out[static_cast<std::size_t>(i)] = in;
                break;
            case LayerKind::AvgPool: {
                if (l.window < 1) layer_error(i, l.kind, "bad window");
                const int oh = in.h / l.window;
                const int ow = in.w / l.window;
                if (oh < 1 || ow < 1) layer_error(i, l.kind, "empty spatial output");
                out[static_cast<std::size_t>(i)] = {in.c, oh, ow};
                break;
            }
            case LayerKind::GlobalAvgPool:
                out[static_cast<std::size_t>(i)] = {in.c, 1, 1};
                break;
            case LayerKind::Flatten:
                out[static_cast<std::size_t>(i)] = {in.c * in.h * in.w, 1, 1};
                break;
            case LayerKind::Add: {
                const Dims a = dims_of(i, 0);
                const Dims b = dims_of(i, 1);
                if (l.inputs[0] < 0 || l.inputs[1] < 0)
                    layer_error(i, l.kind, "add requires two explicit inputs");
                if (!(a == b)) layer_error(i, l.kind, "input shapes differ");
                out[static_cast<std::size_t>(i)] = a;
                break;
            }
        }
    }
    return out;
}

void validate_model(const ModelSpec& model) {
    if (model.layers.empty()) throw StructureError("model has no layers");
    infer_dims(model);

    int first_conv = -1;
    int last_linear = -1;
    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        if (l.kind == LayerKind::Conv2d && first_conv < 0) first_conv = i;
        if (l.kind == LayerKind::Linear) last_linear = i;
        if (l.gated && l.kind != LayerKind::Conv2d)
            layer_error(i, l.kind, "only conv2d layers may be gated");
    }
    if (first_conv >= 0 && model.layers[static_cast<std::size_t>(first_conv)].gated)
        layer_error(first_conv, LayerKind::Conv2d, "the first conv layer is never gated");
    if (last_linear < 0) throw StructureError("model lacks a classifier linear layer");
    if (last_linear != static_cast<int>(model.layers.size()) - 1)
        throw StructureError("classifier linear layer must be last");
}

std::vector<int> gated_layer_indices(const ModelSpec& model) {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i)
        if (model.layers[static_cast<std::size_t>(i)].gated) out.push_back(i);
    return out;
}

std::vector<int> mask_source_layers(const ModelSpec& model) {
    std::vector<int> src(model.layers.size(), -1);
    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        if (l.kind == LayerKind::Conv2d && l.gated) {
            src[static_cast<std::size_t>(i)] = i;
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

std::vector<ParamDesc> param_layout(const ModelSpec& model) {
    std::vector<ParamDesc> out;
    for (int i = 0; i < static_cast<int>(model.layers.size()); ++i) {
        const LayerSpec& l = model.layers[static_cast<std::size_t>(i)];
        const std::string id = std::to_string(i);
        switch (l.kind) {
            case LayerKind::Conv2d:
                out.push_back({"conv" + id + ".weight",
                               {l.out_channels, l.in_channels, l.kernel, l.kernel},
                               true,
                               i});
                out.push_back({"conv" + id + ".bias", {l.out_channels}, true, i});
                break;
            case LayerKind::Linear:
                out.push_back({"fc" + id + ".weight", {l.out_features, l.in_features}, true, i});
                out.push_back({"fc" + id + ".bias", {l.out_features}, true, i});
                break;
            case LayerKind::Norm:
                out.push_back({"norm" + id + ".gamma", {l.channels}, true, i});
                out.push_back({"norm" + id + ".beta", {l.channels}, true, i});
                out.push_back({"norm" + id + ".running_mean", {l.channels}, false, i});
                out.push_back({"norm" + id + ".running_var", {l.channels}, false, i});
                break;
            default:
                break;
        }
    }
    return out;
}

std::int64_t backbone_param_count(const ModelSpec& model) {
    std::int64_t n = 0;
    for (const auto& d : param_layout(model)) {
        std::int64_t c = 1;
        for (int e : d.shape) c *= e;
        n += c;
    }
    return n;
}

ModelSpec make_tiny_vgg(int num_classes) {
    ModelSpec m;
    m.name = "tiny-vgg";
    m.input_channels = 3;
    m.input_height = 8;
    m.input_width = 8;
    m.num_classes = num_classes;
    m.layers = {
        conv_spec(3, 8, 3, 2, 1),  // 8x4x4
        norm_spec(8),
        relu_spec(),
        conv_spec(8, 24, 3, 1, 1, true),  // 24x4x4
        norm_spec(24),
        relu_spec(),
        conv_spec(24, 24, 3, 1, 1, true),  // 24x4x4
        norm_spec(24),
        relu_spec(),
        avgpool_spec(2),  // 24x2x2
        conv_spec(24, 32, 3, 1, 1, true),  // 32x2x2
        norm_spec(32),
        relu_spec(),
        global_avgpool_spec(),
        flatten_spec(),
        linear_spec(32, num_classes),
    };
    return m;
}

namespace {

/// Basic residual block: conv(gated)-norm-relu-conv-norm, plus a projection
/// shortcut when the shape changes, joined by add-relu. Only the first conv
/// is gated so the channels feeding the addition always match.
void append_basic_block(ModelSpec& m, int in_ch, int out_ch, int stride, bool gate_first) {
    const int entry = static_cast<int>(m.layers.size()) - 1;
    m.layers.push_back(conv_spec(in_ch, out_ch, 3, stride, 1, gate_first));
    m.layers.push_back(norm_spec(out_ch));
    m.layers.push_back(relu_spec());
    m.layers.push_back(conv_spec(out_ch, out_ch, 3, 1, 1));
    m.layers.push_back(norm_spec(out_ch));
    const int main_end = static_cast<int>(m.layers.size()) - 1;
    int shortcut = entry;
    if (stride != 1 || in_ch != out_ch) {
        m.layers.push_back(conv_spec(in_ch, out_ch, 1, stride, 0, false, entry));
        m.layers.push_back(norm_spec(out_ch));
        shortcut = static_cast<int>(m.layers.size()) - 1;
    }
    m.layers.push_back(add_spec(main_end, shortcut));
    m.layers.push_back(relu_spec());
}

} // namespace

ModelSpec make_tiny_resnet(int num_classes) {
    ModelSpec m;
    m.name = "tiny-resnet";
    m.input_channels = 3;
    m.input_height = 8;
    m.input_width = 8;
    m.num_classes = num_classes;
    m.layers = {
        conv_spec(3, 8, 3, 1, 1),  // 8x8x8
        norm_spec(8),
        relu_spec(),
    };
    append_basic_block(m, 8, 8, 1, true);
    append_basic_block(m, 8, 12, 2, true);   // 12x4x4
    append_basic_block(m, 12, 16, 2, true);  // 16x2x2
    m.layers.push_back(global_avgpool_spec());
    m.layers.push_back(flatten_spec());
    m.layers.push_back(linear_spec(16, num_classes));
    return m;
}

ModelSpec make_vgg11_shape() {
    ModelSpec m;
    m.name = "vgg11-shape";
    m.input_channels = 3;
    m.input_height = 224;
    m.input_width = 224;
    m.num_classes = 1000;
    auto block = [&](int in_ch, int out_ch, bool gated) {
        m.layers.push_back(conv_spec(in_ch, out_ch, 3, 1, 1, gated));
        m.layers.push_back(norm_spec(out_ch));
        m.layers.push_back(relu_spec());
    };
    block(3, 64, false);
    m.layers.push_back(avgpool_spec(2));  // 112
    block(64, 128, true);
    m.layers.push_back(avgpool_spec(2));  // 56
    block(128, 256, true);
    block(256, 256, true);
    m.layers.push_back(avgpool_spec(2));  // 28
    block(256, 512, true);
    block(512, 512, true);
    m.layers.push_back(avgpool_spec(2));  // 14
    block(512, 512, true);
    block(512, 512, true);
    m.layers.push_back(avgpool_spec(2));  // 7
    m.layers.push_back(flatten_spec());
    m.layers.push_back(linear_spec(512 * 7 * 7, 4096));
    m.layers.push_back(relu_spec());
    m.layers.push_back(linear_spec(4096, 4096));
    m.layers.push_back(relu_spec());
    m.layers.push_back(linear_spec(4096, 1000));
    return m;
}

ModelSpec make_resnet32_shape() {
    ModelSpec m;
    m.name = "resnet32-shape";
    m.input_channels = 3;
    m.input_height = 224;
    m.input_width = 224;
    m.num_classes = 10;
    m.layers = {
        conv_spec(3, 16, 3, 1, 1),
        norm_spec(16),
        relu_spec(),
    };
    const int blocks_per_stage = 5;
    int in_ch = 16;
    for (int stage = 0; stage < 3; ++stage) {
        const int out_ch = 16 << stage;
        for (int b = 0; b < blocks_per_stage; ++b) {
            const int stride = (b == 0 && stage > 0) ? 2 : 1;
            append_basic_block(m, in_ch, out_ch, stride, true);
            in_ch = out_ch;
        }
    }
    m.layers.push_back(global_avgpool_spec());
    m.layers.push_back(flatten_spec());
    m.layers.push_back(linear_spec(64, 10));
    return m;
}

ModelSpec model_preset(const std::string& name, int num_classes) {
    ModelSpec m;
    if (name == "tiny-vgg") {
        m = make_tiny_vgg(num_classes);
    } else if (name == "tiny-resnet") {
        m = make_tiny_resnet(num_classes);
    } else if (name == "vgg11-shape") {
        m = make_vgg11_shape();
    } else if (name == "resnet32-shape") {
        m = make_resnet32_shape();
    } else {
        throw ConfigError("unknown model preset: " + name);
    }
    validate_model(m);
    return m;
}

std::vector<std::string> model_preset_names() {
    return {"tiny-vgg", "tiny-resnet", "vgg11-shape", "resnet32-shape"};
}

} // namespace feddp
