#pragma once

#include <string>
#include <vector>

#include "unlearn/common.hpp"
#include "unlearn/nets.hpp"
#include "unlearn/rng.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

struct LossWeights {
    double alpha_kd = 1.0;
    double beta_guard = 0.05;
    double lambda_forget = 3.0;
    double alpha_flip = 1.0;
    double lambda_unc = 0.1;
    double lambda_rep = 0.1;
    double lambda_mean = 0.1;
    double lambda_tv = 0.01;
    double gamma_des = 1.0;
    double lambda_fg_guard = 0.05;
    double temperature = 2.0;
    double teacher_conf_threshold = 0.8;

    void validate() const;
};

// probability clamp used before every log
constexpr double kProbEps = 1e-7;
// soft-dice smoothing
constexpr double kDiceEps = 1.0;

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets);
Tensor dice_bce(const Tensor& logits, const Tensor& target_mask);
Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels);

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double T, Task task);
Tensor guard_loss(const Tensor& student_logits, const Tensor& teacher_logits);

Tensor forget_background(const Tensor& logits);
Tensor flip_loss(const Tensor& logits, const Tensor& target_mask);
Tensor teacher_contradiction(const Tensor& student_logits, const Tensor& teacher_probs, double threshold);
Tensor entropy_term(const Tensor& probs, Task task);
Tensor repulsion(const Tensor& f_s, const Tensor& f_t);
Tensor mean_prob_reg(const Tensor& probs);
Tensor tv_penalty(const Tensor& probs);
// random labels are redrawn from rng on every call; entropy_mode swaps in
// negated entropy so that minimizing the term maximizes uncertainty
Tensor forget_cls(const Tensor& logits, int classes, Rng& rng, bool entropy_mode);

struct Composite {
    Tensor total;
    std::vector<std::pair<std::string, double>> terms;

    double term(const std::string& name) const;
};

Composite retain_composite_seg(const Tensor& z_s, const Tensor& z_t, const Tensor& mask, const LossWeights& w);
Composite retain_composite_cls(const Tensor& z_s, const Tensor& z_t, const std::vector<int>& labels, const LossWeights& w);

// minimized form: alpha*flip + tc + rep + mean + tv - unc*entropy
Composite ascent_composite(const SegOut& student, const SegOut& teacher, const Tensor& mask, const LossWeights& w);

Composite descent_composite_seg(const Tensor& z_s, const Tensor& z_t, const Tensor& mask, const LossWeights& w,
                                bool with_supervised);
Composite descent_composite_cls(const Tensor& z_s, const Tensor& z_t, const std::vector<int>& labels,
                                const LossWeights& w, bool with_supervised);

}  // namespace unlearn
