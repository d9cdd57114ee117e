#pragma once

#include <map>
#include <string>
#include <vector>

#include "unlearn/dataset.hpp"
#include "unlearn/lora.hpp"
#include "unlearn/nets.hpp"

namespace unlearn {

// hard-threshold overlap metrics; both-empty prediction/target counts as 1.0
std::pair<double, double> dice_iou(const Tensor& logits, const Tensor& mask, double threshold = 0.5);

struct ClsMetrics {
    double accuracy = 0.0;
    std::vector<double> f1;  // one-vs-rest per class, 0/0 := 0
};
ClsMetrics cls_metrics(const Tensor& logits, const std::vector<int>& labels, int classes);

double split_dice(const SegNet& net, const AdapterSet* adapters, const SplitDataset& ds, SplitTag split);
double split_accuracy(const ClsNet& net, const AdapterSet* adapters, const SplitDataset& ds, SplitTag split);

struct SplitBlock {
    int count = 0;
    // segmentation
    double dice = 0, iou = 0, teacher_dice = 0, teacher_iou = 0, delta_dice = 0, delta_iou = 0;
    // classification
    double accuracy = 0, teacher_accuracy = 0, delta_accuracy = 0;
    std::vector<double> f1, teacher_f1;
    // divergence
    double l1_prob_gap = 0, feature_gap = 0;
};

struct EvalReport {
    std::string task;
    std::map<std::string, SplitBlock> splits;  // retain / forget / val
    double selectivity = 0.0;                  // delta_forget - max(delta_retain, delta_val)
    Budget budget;
};

EvalReport evaluate(const SegNet& teacher, const SegNet& student_base, const AdapterSet& adapters,
                    const SplitDataset& ds);
EvalReport evaluate(const ClsNet& teacher, const ClsNet& student_base, const AdapterSet& adapters,
                    const SplitDataset& ds);

// (mean per-pixel |sigma(z_s)-sigma(z_t)|, mean per-sample 1-cos(f_s,f_t))
std::pair<double, double> divergence(const SegNet& teacher, const SegNet& student_base,
                                     const AdapterSet& adapters, const SplitDataset& ds, SplitTag split);

struct DiffMapStats {
    std::string id;
    double teacher_fg = 0, student_fg = 0;       // mean probability inside the GT mask
    double diff_inside = 0, diff_outside = 0;    // mean |p_t - p_s| inside/outside the mask
};
// writes <id>_input/_gt/_teacher/_student/_diff .pgm per item (5 files each)
std::vector<DiffMapStats> diff_maps(const SegNet& teacher, const SegNet& student_base,
                                    const AdapterSet& adapters, const SplitDataset& ds,
                                    const std::vector<std::string>& ids, const std::string& out_dir);

std::string report_to_json(const EvalReport& report);
void write_report_json(const EvalReport& report, const std::string& path);
EvalReport report_from_json_file(const std::string& path);
void write_metrics_csv(const EvalReport& report, const std::string& path);
void write_svg_chart(const EvalReport& report, const std::string& path);
void write_fg_means_csv(const std::vector<DiffMapStats>& stats, const std::string& path);

}  // namespace unlearn
