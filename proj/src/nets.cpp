#include "unlearn/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "unlearn/lora.hpp"

namespace unlearn {

namespace {

Layer make_conv(const std::string& name, const std::string& tag, int cin, int cout, int ksize,
                int pad, Rng& rng) {
    Layer l;
    l.name = name;
    l.tag = tag;
    l.kind = LayerKind::conv;
    double std = std::sqrt(2.0 / (static_cast<double>(cin) * ksize * ksize));
    l.w = Tensor::randn(Shape{cout, cin, ksize, ksize}, rng, std);
    l.w.set_requires_grad(true);
    l.b = Tensor(Shape{cout}, 0.0);
    l.b.set_requires_grad(true);
    l.stride = 1;
    l.pad = pad;
    return l;
}

Layer make_linear(const std::string& name, const std::string& tag, int in, int out, Rng& rng) {
    Layer l;
    l.name = name;
    l.tag = tag;
    l.kind = LayerKind::linear;
    double std = std::sqrt(2.0 / static_cast<double>(in));
    l.w = Tensor::randn(Shape{out, in}, rng, std);
    l.w.set_requires_grad(true);
    l.b = Tensor(Shape{out}, 0.0);
    l.b.set_requires_grad(true);
    return l;
}

template <typename Net>
auto& find_layer(Net& net, const std::string& name) {
    for (auto& l : net.layers)
        if (l.name == name) return l;
    throw std::runtime_error("net: no layer named '" + name + "'");
}

// conv with optional LoRA on the kernel; dropout applies to the adapter
// branch input only
Tensor run_conv(const Layer& l, const Tensor& x, const AdapterSet* adapters, bool training,
                Rng* dropout_rng) {
    const LoraAdapter* ad = adapters ? adapters->find(l.name) : nullptr;
    if (!ad) return conv2d(x, l.w, l.b, l.stride, l.pad);
    if (training && ad->dropout_p > 0.0) {
        if (!dropout_rng) throw std::runtime_error("forward: adapter dropout requires an rng in training mode");
        Tensor base = conv2d(x, l.w, l.b, l.stride, l.pad);
        Tensor delta = reshape(scalar_mul(matmul(ad->B, ad->A), ad->scale), l.w.shape());
        Tensor branch = conv2d(dropout(x, ad->dropout_p, *dropout_rng, true), delta, Tensor(), l.stride, l.pad);
        return add(base, branch);
    }
    return conv2d(x, adapted_weight(l, *ad), l.b, l.stride, l.pad);
}

Tensor run_linear(const Layer& l, const Tensor& x, const AdapterSet* adapters, bool training,
                  Rng* dropout_rng) {
    const LoraAdapter* ad = adapters ? adapters->find(l.name) : nullptr;
    if (!ad) return add(matmul(x, l.w, false, true), l.b);
    if (training && ad->dropout_p > 0.0) {
        if (!dropout_rng) throw std::runtime_error("forward: adapter dropout requires an rng in training mode");
        Tensor base = add(matmul(x, l.w, false, true), l.b);
        Tensor delta = scalar_mul(matmul(ad->B, ad->A), ad->scale);  // [out,in]
        Tensor branch = matmul(dropout(x, ad->dropout_p, *dropout_rng, true), delta, false, true);
        return add(base, branch);
    }
    return add(matmul(x, adapted_weight(l, *ad), false, true), l.b);
}

Tensor conv_relu(const Layer& l, const Tensor& x, const AdapterSet* a, bool tr, Rng* rng) {
    return relu(run_conv(l, x, a, tr, rng));
}

int64_t count_params(const std::vector<Layer>& layers) {
    int64_t n = 0;
    for (const auto& l : layers) n += l.w.numel() + l.b.numel();
    return n;
}

}  // namespace

SegNet SegNet::build(int w0, int w1, int wb, Rng& rng) {
    SegNet net;
    net.width0 = w0;
    net.width1 = w1;
    net.width_bottleneck = wb;
    auto& L = net.layers;
    L.push_back(make_conv("enc1.conv1", "encoder", 1, w0, 3, 1, rng));
    L.push_back(make_conv("enc1.conv2", "encoder", w0, w0, 3, 1, rng));
    L.push_back(make_conv("enc2.conv1", "encoder", w0, w1, 3, 1, rng));
    L.push_back(make_conv("enc2.conv2", "encoder", w1, w1, 3, 1, rng));
    L.push_back(make_conv("bottleneck.conv1", "encoder", w1, wb, 3, 1, rng));
    L.push_back(make_conv("bottleneck.conv2", "encoder", wb, wb, 3, 1, rng));
    L.push_back(make_conv("dec1.conv1", "decoder", wb + w1, w1, 3, 1, rng));
    L.push_back(make_conv("dec1.conv2", "decoder", w1, w1, 3, 1, rng));
    L.push_back(make_conv("dec2.conv1", "decoder", w1 + w0, w0, 3, 1, rng));
    L.push_back(make_conv("dec2.conv2", "decoder", w0, w0, 3, 1, rng));
    L.push_back(make_conv("head", "head", w0, 1, 1, 0, rng));
    return net;
}

Layer& SegNet::layer(const std::string& name) { return find_layer(*this, name); }
const Layer& SegNet::layer(const std::string& name) const { return find_layer(*this, name); }
int64_t SegNet::param_count() const { return count_params(layers); }

ClsNet ClsNet::build(int w0, int w1, int classes, Rng& rng) {
    if (classes < 2) throw std::runtime_error("ClsNet: need at least 2 classes");
    ClsNet net;
    net.width0 = w0;
    net.width1 = w1;
    net.classes = classes;
    net.layers.push_back(make_conv("trunk.conv1", "trunk", 1, w0, 3, 1, rng));
    net.layers.push_back(make_conv("trunk.conv2", "trunk", w0, w1, 3, 1, rng));
    net.layers.push_back(make_linear("head", "head", w1, classes, rng));
    return net;
}

Layer& ClsNet::layer(const std::string& name) { return find_layer(*this, name); }
const Layer& ClsNet::layer(const std::string& name) const { return find_layer(*this, name); }
int64_t ClsNet::param_count() const { return count_params(layers); }

SegOut forward_seg(const SegNet& net, const Tensor& images, const AdapterSet* adapters,
                   bool training, Rng* dropout_rng) {
    if (images.rank() != 4 || images.dim(1) != 1) {
        throw std::runtime_error("forward_seg: expected [N,1,H,W] input, got " + shape_str(images.shape()));
    }
    if (images.dim(2) % 4 != 0 || images.dim(3) % 4 != 0) {
        throw std::runtime_error("forward_seg: spatial dims must be divisible by 4, got " + shape_str(images.shape()));
    }
    const AdapterSet* a = adapters;
    Tensor e1 = conv_relu(net.layer("enc1.conv1"), images, a, training, dropout_rng);
    e1 = conv_relu(net.layer("enc1.conv2"), e1, a, training, dropout_rng);
    Tensor p1 = max_pool2d(e1);
    Tensor e2 = conv_relu(net.layer("enc2.conv1"), p1, a, training, dropout_rng);
    e2 = conv_relu(net.layer("enc2.conv2"), e2, a, training, dropout_rng);
    Tensor p2 = max_pool2d(e2);
    Tensor bt = conv_relu(net.layer("bottleneck.conv1"), p2, a, training, dropout_rng);
    bt = conv_relu(net.layer("bottleneck.conv2"), bt, a, training, dropout_rng);
    Tensor d1 = concat({nearest_upsample2d(bt), e2}, 1);
    d1 = conv_relu(net.layer("dec1.conv1"), d1, a, training, dropout_rng);
    d1 = conv_relu(net.layer("dec1.conv2"), d1, a, training, dropout_rng);
    Tensor d2 = concat({nearest_upsample2d(d1), e1}, 1);
    d2 = conv_relu(net.layer("dec2.conv1"), d2, a, training, dropout_rng);
    d2 = conv_relu(net.layer("dec2.conv2"), d2, a, training, dropout_rng);
    Tensor logits = run_conv(net.layer("head"), d2, a, training, dropout_rng);
    return SegOut{logits, bt};
}

ClsOut forward_cls(const ClsNet& net, const Tensor& images, const AdapterSet* adapters,
                   bool training, Rng* dropout_rng) {
    if (images.rank() != 4 || images.dim(1) != 1) {
        throw std::runtime_error("forward_cls: expected [N,1,H,W] input, got " + shape_str(images.shape()));
    }
    if (images.dim(2) % 4 != 0 || images.dim(3) % 4 != 0) {
        throw std::runtime_error("forward_cls: spatial dims must be divisible by 4, got " + shape_str(images.shape()));
    }
    const AdapterSet* a = adapters;
    Tensor c1 = conv_relu(net.layer("trunk.conv1"), images, a, training, dropout_rng);
    Tensor p1 = max_pool2d(c1);
    Tensor c2 = conv_relu(net.layer("trunk.conv2"), p1, a, training, dropout_rng);
    Tensor p2 = max_pool2d(c2);
    // global average pool
    int n = p2.dim(0), c = p2.dim(1);
    int64_t hw = static_cast<int64_t>(p2.dim(2)) * p2.dim(3);
    Tensor flat = reshape(p2, Shape{n, c, static_cast<int>(hw)});
    Tensor pooled = scalar_mul(sum_axis(flat, 2), 1.0 / static_cast<double>(hw));  // [N,C]
    Tensor logits = run_linear(net.layer("head"), pooled, a, training, dropout_rng);
    return ClsOut{logits, pooled};
}

namespace {
template <typename Net>
Net clone_frozen_impl(const Net& net) {
    Net out = net;
    out.layers.clear();
    for (const auto& l : net.layers) {
        Layer c = l;
        c.w = l.w.detached_copy();
        c.b = l.b.detached_copy();
        out.layers.push_back(std::move(c));
    }
    return out;
}
}  // namespace

SegNet clone_frozen(const SegNet& net) { return clone_frozen_impl(net); }
ClsNet clone_frozen(const ClsNet& net) { return clone_frozen_impl(net); }

namespace {
template <typename Net>
std::vector<Tensor> parameters_impl(Net& net) {
    std::vector<Tensor> ps;
    for (auto& l : net.layers) {
        ps.push_back(l.w);
        ps.push_back(l.b);
    }
    return ps;
}
}  // namespace

std::vector<Tensor> parameters(SegNet& net) { return parameters_impl(net); }
std::vector<Tensor> parameters(ClsNet& net) { return parameters_impl(net); }

}  // namespace unlearn
