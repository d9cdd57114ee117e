#pragma once

#include <string>
#include <vector>

#include "unlearn/rng.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

struct LoraAdapter;
struct AdapterSet;

enum class LayerKind { conv, linear };

// One weighted layer. Conv kernels are [Cout,Cin,kh,kw], linear weights
// [out,in]. The name/tag pair is the registry entry LoRA targets.
struct Layer {
    std::string name;
    std::string tag;  // encoder | decoder | head | trunk
    LayerKind kind = LayerKind::conv;
    Tensor w;
    Tensor b;
    int stride = 1;
    int pad = 1;
};

// 3-level U-Net for binary segmentation: encoder widths {w0,w1}, bottleneck
// w2, mirrored decoder, 1x1 head to a single logit channel.
struct SegNet {
    std::vector<Layer> layers;
    int width0 = 16, width1 = 32, width_bottleneck = 64;
    bool lora_merged = false;

    static SegNet build(int w0, int w1, int wb, Rng& rng);
    Layer& layer(const std::string& name);
    const Layer& layer(const std::string& name) const;
    int64_t param_count() const;
};

// Small conv classifier: two conv+pool stages, global average pool, linear head.
struct ClsNet {
    std::vector<Layer> layers;
    int width0 = 16, width1 = 32, classes = 3;
    bool lora_merged = false;

    static ClsNet build(int w0, int w1, int classes, Rng& rng);
    Layer& layer(const std::string& name);
    const Layer& layer(const std::string& name) const;
    int64_t param_count() const;
};

struct SegOut {
    Tensor logits;    // [N,1,H,W]
    Tensor features;  // bottleneck activation [N,wb,H/4,W/4]
};

struct ClsOut {
    Tensor logits;    // [N,C]
    Tensor features;  // pooled trunk activation [N,w1]
};

// adapters == nullptr runs the plain (teacher) path; with adapters the same
// graph is built over LoRA-effective weights. training enables adapter dropout.
SegOut forward_seg(const SegNet& net, const Tensor& images, const AdapterSet* adapters = nullptr,
                   bool training = false, Rng* dropout_rng = nullptr);
ClsOut forward_cls(const ClsNet& net, const Tensor& images, const AdapterSet* adapters = nullptr,
                   bool training = false, Rng* dropout_rng = nullptr);

SegNet clone_frozen(const SegNet& net);
ClsNet clone_frozen(const ClsNet& net);

// trainable parameter handles (weights + biases), registry order
std::vector<Tensor> parameters(SegNet& net);
std::vector<Tensor> parameters(ClsNet& net);

}  // namespace unlearn
