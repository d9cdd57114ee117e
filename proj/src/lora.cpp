#include "unlearn/lora.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace unlearn {

const LoraAdapter* AdapterSet::find(const std::string& target) const {
    for (const auto& a : adapters)
        if (a.target == target) return &a;
    return nullptr;
}

LoraAdapter* AdapterSet::find(const std::string& target) {
    for (auto& a : adapters)
        if (a.target == target) return &a;
    return nullptr;
}

bool AdapterSet::adapts_tag(const std::string& tag) const {
    return std::find(policy.begin(), policy.end(), tag) != policy.end();
}

int effective_rank(int requested, int d, int k) {
    if (requested < 1) throw std::runtime_error("lora: rank must be >= 1");
    int m = std::min(d, k);
    if (m == 1) return 1;  // the matrix itself has rank 1
    if (requested > m / 2) {
        throw std::runtime_error("lora: rank " + std::to_string(requested) + " too large for a " +
                                 std::to_string(d) + "x" + std::to_string(k) + " layer (max " +
                                 std::to_string(m / 2) + ")");
    }
    return requested;
}

namespace {

// conv kernels are adapted through their [Cout, Cin*kh*kw] matrix view
void layer_dims(const Layer& l, int& d, int& k) {
    if (l.kind == LayerKind::conv) {
        d = l.w.dim(0);
        k = l.w.dim(1) * l.w.dim(2) * l.w.dim(3);
    } else {
        d = l.w.dim(0);
        k = l.w.dim(1);
    }
}

template <typename Net>
AdapterSet inject_impl(const Net& net, const std::vector<std::string>& policy, int r, double alpha,
                       double dropout_p, uint64_t seed) {
    if (net.lora_merged) throw std::runtime_error("inject: net already carries merged adapters");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw std::runtime_error("inject: dropout must be in [0,1)");
    std::vector<std::string> known;
    for (const auto& l : net.layers)
        if (std::find(known.begin(), known.end(), l.tag) == known.end()) known.push_back(l.tag);
    for (const auto& t : policy) {
        if (std::find(known.begin(), known.end(), t) == known.end()) {
            throw std::runtime_error("inject: unknown tag '" + t + "' for this net");
        }
    }
    for (const auto& l : net.layers) {
        if (l.w.requires_grad() || l.b.requires_grad()) {
            throw std::runtime_error("inject: net weights must be frozen (layer '" + l.name + "' is trainable)");
        }
    }
    AdapterSet set;
    set.policy = policy;
    set.rank = r;
    set.alpha = alpha;
    set.dropout_p = dropout_p;
    Rng rng(seed);
    for (const auto& l : net.layers) {
        if (std::find(policy.begin(), policy.end(), l.tag) == policy.end()) continue;
        LoraAdapter ad;
        ad.target = l.name;
        layer_dims(l, ad.d, ad.k);
        ad.rank = effective_rank(r, ad.d, ad.k);
        ad.alpha = alpha;
        ad.scale = alpha / static_cast<double>(r);
        ad.dropout_p = dropout_p;
        ad.A = Tensor::randn(Shape{ad.rank, ad.k}, rng, 0.02);
        ad.A.set_requires_grad(true);
        ad.B = Tensor(Shape{ad.d, ad.rank}, 0.0);
        ad.B.set_requires_grad(true);
        set.adapters.push_back(std::move(ad));
    }
    return set;
}

}  // namespace

AdapterSet inject(const SegNet& net, const std::vector<std::string>& policy, int r, double alpha,
                  double dropout_p, uint64_t seed) {
    return inject_impl(net, policy, r, alpha, dropout_p, seed);
}

AdapterSet inject(const ClsNet& net, const std::vector<std::string>& policy, int r, double alpha,
                  double dropout_p, uint64_t seed) {
    return inject_impl(net, policy, r, alpha, dropout_p, seed);
}

Tensor adapted_weight(const Layer& layer, const LoraAdapter& ad) {
    Tensor delta = scalar_mul(matmul(ad.B, ad.A), ad.scale);  // [d,k]
    if (layer.kind == LayerKind::conv) {
        Tensor wv = reshape(layer.w, Shape{ad.d, ad.k});
        return reshape(add(wv, delta), layer.w.shape());
    }
    return add(layer.w, delta);
}

namespace {

template <typename Net>
Net merge_impl(const Net& net, const AdapterSet& adapters) {
    if (net.lora_merged) throw std::runtime_error("merge: net already merged");
    Net out = clone_frozen(net);
    for (const auto& ad : adapters.adapters) {
        Layer& l = out.layer(ad.target);
        // fold scale*B*A into the kernel view, off the tape
        const double* a = ad.A.data();
        const double* b = ad.B.data();
        double* w = l.w.data();
        for (int i = 0; i < ad.d; ++i) {
            for (int r = 0; r < ad.rank; ++r) {
                double bv = ad.scale * b[i * ad.rank + r];
                const double* arow = a + static_cast<int64_t>(r) * ad.k;
                double* wrow = w + static_cast<int64_t>(i) * ad.k;
                for (int j = 0; j < ad.k; ++j) wrow[j] += bv * arow[j];
            }
        }
    }
    out.lora_merged = true;
    return out;
}

template <typename Net>
Net remove_impl(const Net& net, const AdapterSet& adapters) {
    if (net.lora_merged) throw std::runtime_error("remove: merged nets carry no adapters");
    for (const auto& ad : adapters.adapters) net.layer(ad.target);  // validates targets
    return clone_frozen(net);
}

template <typename Net>
Budget budget_impl(const Net& net, const AdapterSet& adapters) {
    Budget b;
    for (const auto& ad : adapters.adapters) b.trainable += ad.A.numel() + ad.B.numel();
    b.total = net.param_count();
    b.pct = b.total > 0 ? 100.0 * static_cast<double>(b.trainable) / static_cast<double>(b.total) : 0.0;
    return b;
}

}  // namespace

SegNet merge(const SegNet& net, const AdapterSet& adapters) { return merge_impl(net, adapters); }
ClsNet merge(const ClsNet& net, const AdapterSet& adapters) { return merge_impl(net, adapters); }
SegNet remove(const SegNet& net, const AdapterSet& adapters) { return remove_impl(net, adapters); }
ClsNet remove(const ClsNet& net, const AdapterSet& adapters) { return remove_impl(net, adapters); }

Budget budget(const SegNet& net, const AdapterSet& adapters) { return budget_impl(net, adapters); }
Budget budget(const ClsNet& net, const AdapterSet& adapters) { return budget_impl(net, adapters); }

Budget budget_symbolic(double trainable, double total) {
    Budget b;
    b.trainable = static_cast<int64_t>(trainable);
    b.total = static_cast<int64_t>(total);
    b.pct = 100.0 * trainable / total;
    return b;
}

double spectral_norm(const Tensor& m, int iters, double tol) {
    if (m.rank() != 2) throw std::runtime_error("spectral_norm: expected a matrix, got " + shape_str(m.shape()));
    int rows = m.dim(0), cols = m.dim(1);
    const double* a = m.data();
    Rng rng(0xC0FFEEULL);
    std::vector<double> v(static_cast<size_t>(cols));
    double vn = 0.0;
    for (auto& x : v) {
        x = rng.normal();
        vn += x * x;
    }
    vn = std::sqrt(vn);
    for (auto& x : v) x /= vn;
    std::vector<double> u(static_cast<size_t>(rows));
    double sigma = 0.0;
    int stable = 0;
    for (int it = 0; it < iters; ++it) {
        // u = M v (v normalized), so ||u|| is the Rayleigh estimate of sigma
        double un = 0.0;
        for (int i = 0; i < rows; ++i) {
            double acc = 0.0;
            const double* row = a + static_cast<int64_t>(i) * cols;
            for (int j = 0; j < cols; ++j) acc += row[j] * v[static_cast<size_t>(j)];
            u[static_cast<size_t>(i)] = acc;
            un += acc * acc;
        }
        un = std::sqrt(un);
        if (un == 0.0) return 0.0;
        // v <- normalize(M^T u)
        vn = 0.0;
        for (int j = 0; j < cols; ++j) {
            double acc = 0.0;
            for (int i = 0; i < rows; ++i) acc += a[static_cast<int64_t>(i) * cols + j] * u[static_cast<size_t>(i)];
            v[static_cast<size_t>(j)] = acc;
            vn += acc * acc;
        }
        vn = std::sqrt(vn);
        if (vn == 0.0) return 0.0;
        for (auto& x : v) x /= vn;
        // two consecutive sub-tol changes guard against plateau artifacts
        stable = std::fabs(un - sigma) < tol ? stable + 1 : 0;
        sigma = un;
        if (stable >= 2) return sigma;
    }
    return sigma;
}

std::vector<DriftBound> drift_bound(const AdapterSet& adapters) {
    std::vector<DriftBound> out;
    for (const auto& ad : adapters.adapters) {
        DriftBound db;
        db.target = ad.target;
        // ||scale*B*A||_F without materializing when small; direct product here
        const double* a = ad.A.data();
        const double* b = ad.B.data();
        double fro2 = 0.0;
        for (int i = 0; i < ad.d; ++i) {
            for (int j = 0; j < ad.k; ++j) {
                double acc = 0.0;
                for (int r = 0; r < ad.rank; ++r) acc += b[i * ad.rank + r] * a[static_cast<int64_t>(r) * ad.k + j];
                acc *= ad.scale;
                fro2 += acc * acc;
            }
        }
        db.lhs = std::sqrt(fro2);
        db.rhs = ad.scale * std::sqrt(static_cast<double>(ad.rank)) * spectral_norm(ad.A) * spectral_norm(ad.B);
        out.push_back(db);
    }
    return out;
}

std::vector<Tensor> adapter_parameters(AdapterSet& adapters) {
    std::vector<Tensor> ps;
    for (auto& ad : adapters.adapters) {
        ps.push_back(ad.A);
        ps.push_back(ad.B);
    }
    return ps;
}

}  // namespace unlearn
