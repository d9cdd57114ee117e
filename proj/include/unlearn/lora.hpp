#pragma once

#include <string>
#include <vector>

#include "unlearn/nets.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

// Low-rank update delta = scale * B * A on the [d,k] matrix view of one
// frozen layer (conv kernels viewed as [Cout, Cin*kh*kw]). A and B are the
// only trainable tensors.
struct LoraAdapter {
    std::string target;
    int rank = 0;  // effective rank after per-layer clamping
    double alpha = 0.0;
    double scale = 0.0;  // alpha / requested rank, fixed at construction
    double dropout_p = 0.0;
    int d = 0, k = 0;
    Tensor A;  // [rank, k]
    Tensor B;  // [d, rank]
};

struct AdapterSet {
    std::vector<LoraAdapter> adapters;  // registry order
    std::vector<std::string> policy;    // adapted tags
    int rank = 0;
    double alpha = 0.0;
    double dropout_p = 0.0;

    const LoraAdapter* find(const std::string& target) const;
    LoraAdapter* find(const std::string& target);
    bool adapts_tag(const std::string& tag) const;
};

// Layers with min(d,k) == 1 carry a rank-1 adapter (full rank for that
// matrix); otherwise r must satisfy r <= min(d,k)/2.
int effective_rank(int requested, int d, int k);

AdapterSet inject(const SegNet& net, const std::vector<std::string>& policy, int r, double alpha,
                  double dropout_p, uint64_t seed);
AdapterSet inject(const ClsNet& net, const std::vector<std::string>& policy, int r, double alpha,
                  double dropout_p, uint64_t seed);

// effective layer weight on the tape: w + scale * reshape(B*A)
Tensor adapted_weight(const Layer& layer, const LoraAdapter& ad);

SegNet merge(const SegNet& net, const AdapterSet& adapters);
ClsNet merge(const ClsNet& net, const AdapterSet& adapters);
SegNet remove(const SegNet& net, const AdapterSet& adapters);
ClsNet remove(const ClsNet& net, const AdapterSet& adapters);

struct Budget {
    int64_t trainable = 0;
    int64_t total = 0;
    double pct = 0.0;
};
Budget budget(const SegNet& net, const AdapterSet& adapters);
Budget budget(const ClsNet& net, const AdapterSet& adapters);
Budget budget_symbolic(double trainable, double total);

struct DriftBound {
    std::string target;
    double lhs = 0.0;  // ||scale * B * A||_F
    double rhs = 0.0;  // scale * sqrt(r) * sigma_max(A) * sigma_max(B)
};
std::vector<DriftBound> drift_bound(const AdapterSet& adapters);

// largest singular value via power iteration, tol on successive estimates
double spectral_norm(const Tensor& m, int iters = 500, double tol = 1e-8);

std::vector<Tensor> adapter_parameters(AdapterSet& adapters);

}  // namespace unlearn
