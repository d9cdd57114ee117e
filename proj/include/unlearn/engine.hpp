#pragma once

#include <string>
#include <vector>

#include "unlearn/config.hpp"
#include "unlearn/dataset.hpp"
#include "unlearn/lora.hpp"
#include "unlearn/nets.hpp"

namespace unlearn {

// Adam with beta = (0.9, 0.999), eps 1e-8, bias correction. One slot per
// parameter; t advances only when that slot is stepped.
struct AdamState {
    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::vector<Slot> slots;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init(const std::vector<Tensor>& params);
};

// steps params[i] for which mask[i] is true (empty mask = all)
void adam_step(std::vector<Tensor>& params, AdamState& state, double lr,
               const std::vector<bool>& mask = {});

struct StepRecord {
    std::string phase;
    int epoch = 0;
    int step = 0;
    double total = 0, sup = 0, kd = 0, guard = 0, flip = 0, tc = 0, entropy = 0;
    double repulsion = 0, mean_reg = 0, tv = 0, forget = 0;
    double grad_norm = 0;
};

struct EpochMetrics {
    std::string phase;
    int epoch = 0;
    double retain_metric = 0, forget_metric = 0, val_metric = 0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochMetrics> epoch_metrics;

    void to_csv(const std::string& path) const;
    void metrics_to_csv(const std::string& path) const;
    std::string to_csv_string() const;
};

// deterministic epoch stream: each sample once, forget batches interleaved in
// proportion to their share
struct BatchPlan {
    bool forget = false;
    std::vector<std::string> ids;
};
std::vector<BatchPlan> interleave(const std::vector<std::string>& retain_ids,
                                  const std::vector<std::string>& forget_ids, int retain_bs,
                                  int forget_bs, Rng& rng);

// trains on the full retain+forget pool, stops once the val threshold is met,
// throws ThresholdError when the epoch cap is hit below threshold
SegNet train_teacher_seg(const SplitDataset& data, const TeacherConfig& cfg, TrainLog* log = nullptr);
ClsNet train_teacher_cls(const SplitDataset& data, const TeacherConfig& cfg, TrainLog* log = nullptr);

struct SegUnlearnResult {
    SegNet student_base;  // frozen teacher clone the adapters attach to
    AdapterSet adapters;
    TrainLog log;
};
struct ClsUnlearnResult {
    ClsNet student_base;
    AdapterSet adapters;
    TrainLog log;
};

SegUnlearnResult unlearn(const SegNet& teacher, const SplitDataset& data, const UnlearnConfig& cfg);
ClsUnlearnResult unlearn(const ClsNet& teacher, const SplitDataset& data, const UnlearnConfig& cfg);

}  // namespace unlearn
