#pragma once

#include <array>
#include <string>
#include <vector>

#include "feddp/errors.hpp"

namespace feddp {

enum class LayerKind {
    Conv2d,
    Linear,
    Relu,
    Norm,
    AvgPool,
    GlobalAvgPool,
    Flatten,
    Add,
};

const char* layer_kind_name(LayerKind k);

/// One layer of a model. Layers form a flat list; by default each layer
/// consumes the previous layer's output. `inputs` overrides that for skip
/// connections: Add takes two explicit producer indices, and a projection
/// conv on a shortcut names the branch point. Index -1 means "previous
/// output" (the model input for layer 0).
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;

    // conv2d
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 0;
    int stride = 1;
    int padding = 0;
    bool gated = false;

    // linear
    int in_features = 0;
    int out_features = 0;

    // norm
    int channels = 0;

    // avgpool (stride equals window)
    int window = 2;

    std::array<int, 2> inputs = {-1, -1};
};

LayerSpec conv_spec(int in_ch, int out_ch, int kernel, int stride, int padding,
                    bool gated = false, int input = -1);
LayerSpec linear_spec(int in_features, int out_features);
LayerSpec relu_spec();
LayerSpec norm_spec(int channels);
LayerSpec avgpool_spec(int window);
LayerSpec global_avgpool_spec();
LayerSpec flatten_spec();
LayerSpec add_spec(int input_a, int input_b);

/// Per-layer output dimensions (channels/features, height, width).
struct Dims {
    int c = 0;
    int h = 0;
    int w = 0;
    bool operator==(const Dims&) const = default;
};

struct ModelSpec {
    std::string name;
    int input_channels = 3;
    int input_height = 8;
    int input_width = 8;
    int num_classes = 4;
    std::vector<LayerSpec> layers;
};

/// Output dims for every layer, given the model input. Throws StructureError
/// on any inconsistency (channel mismatch, empty spatial output, bad wiring).
std::vector<Dims> infer_dims(const ModelSpec& model);

/// Full consistency check, including the gating placement rules: the first
/// conv and the final classifier are never gated, and only conv2d layers
/// may carry a gate.
void validate_model(const ModelSpec& model);

/// Indices of conv layers eligible for (and flagged with) gating.
std::vector<int> gated_layer_indices(const ModelSpec& model);

/// For each layer, the index of the gated conv whose per-sample channel
/// selection still applies to that layer's output, or -1. A gated conv is
/// its own source; relu/norm/avgpool preserve the channel structure and
/// propagate the source; every other kind clears it. A gated conv's input
/// restriction is the source of its input layer.
std::vector<int> mask_source_layers(const ModelSpec& model);

/// Parameter layout of a model: names, shapes, trainability, in the fixed
/// order shared by every client and the server.
struct ParamDesc {
    std::string name;
    std::vector<int> shape;
    bool trainable = true;
    int layer_index = -1;
};

std::vector<ParamDesc> param_layout(const ModelSpec& model);

std::int64_t backbone_param_count(const ModelSpec& model);

// Named presets. tiny-* are runnable desk-scale models; *-shape are
// full-size configurations used for cost accounting only.
ModelSpec make_tiny_vgg(int num_classes = 4);
ModelSpec make_tiny_resnet(int num_classes = 4);
ModelSpec make_vgg11_shape();
ModelSpec make_resnet32_shape();

/// Lookup by preset name ("tiny-vgg", "tiny-resnet", "vgg11-shape",
/// "resnet32-shape"). Throws ConfigError for unknown names. num_classes
/// applies to the tiny presets; the shape presets fix their own.
ModelSpec model_preset(const std::string& name, int num_classes = 4);

std::vector<std::string> model_preset_names();

} // namespace feddp
