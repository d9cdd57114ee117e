#include "unlearn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace unlearn {

void LossWeights::validate() const {
    if (temperature <= 0.0) throw std::runtime_error("loss weights: temperature must be > 0");
    if (teacher_conf_threshold <= 0.5 || teacher_conf_threshold >= 1.0)
        throw std::runtime_error("loss weights: teacher_conf_threshold must be in (0.5, 1)");
    const double ws[] = {alpha_kd, beta_guard, lambda_forget, alpha_flip, lambda_unc,
                         lambda_rep, lambda_mean, lambda_tv, gamma_des, lambda_fg_guard};
    for (double v : ws) {
        if (v < 0.0) throw std::runtime_error("loss weights: negative weight");
    }
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) {
        throw std::runtime_error(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

void check_binary(const Tensor& t, const char* who) {
    const double* p = t.data();
    int64_t n = t.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (p[i] != 0.0 && p[i] != 1.0) throw std::runtime_error(std::string(who) + ": target mask is not binary {0,1}");
    }
}

Tensor clamped_probs(const Tensor& logits) {
    return clamp(sigmoid(logits), kProbEps, 1.0 - kProbEps);
}

Tensor one_minus(const Tensor& t) { return affine(t, -1.0, 1.0); }

}  // namespace

Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    check_same_shape(logits, targets, "bce");
    Tensor p = clamped_probs(logits);
    Tensor ll = add(mul(targets, log(p)), mul(one_minus(targets), log(one_minus(p))));
    return scalar_mul(mean(ll), -1.0);
}

Tensor dice_bce(const Tensor& logits, const Tensor& target_mask) {
    check_same_shape(logits, target_mask, "dice_bce");
    check_binary(target_mask, "dice_bce");
    int n = logits.dim(0);
    int m = static_cast<int>(logits.numel() / n);
    Tensor p = reshape(sigmoid(logits), Shape{n, m});
    Tensor y = reshape(target_mask, Shape{n, m});
    Tensor inter = sum_axis(mul(p, y), 1);                     // [N]
    Tensor psum = sum_axis(p, 1);
    Tensor ysum = sum_axis(y, 1);
    Tensor frac = div(affine(inter, 2.0, kDiceEps), affine(add(psum, ysum), 1.0, kDiceEps));
    Tensor dice = mean(one_minus(frac));
    return add(dice, bce_with_logits(logits, target_mask));
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.rank() != 2) throw std::runtime_error("ce_loss: expected [N,C] logits, got " + shape_str(logits.shape()));
    int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n) throw std::runtime_error("ce_loss: label count mismatch");
    Tensor onehot(Shape{n, c}, 0.0);
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
            throw std::runtime_error("ce_loss: label out of range");
        onehot.data()[static_cast<int64_t>(i) * c + labels[static_cast<size_t>(i)]] = 1.0;
    }
    Tensor lp = log(clamp(softmax(logits, 1), kProbEps, 1.0));
    return scalar_mul(sum(mul(onehot, lp)), -1.0 / static_cast<double>(n));
}

Tensor kd_loss(const Tensor& student_logits, const Tensor& teacher_logits, double T, Task task) {
    if (T <= 0.0) throw std::runtime_error("kd_loss: temperature must be > 0");
    check_same_shape(student_logits, teacher_logits, "kd_loss");
    double t2 = T * T;
    if (task == Task::segmentation) {
        Tensor ps = clamp(sigmoid(scalar_mul(student_logits, 1.0 / T)), kProbEps, 1.0 - kProbEps);
        Tensor pt = clamp(sigmoid(scalar_mul(teacher_logits, 1.0 / T)), kProbEps, 1.0 - kProbEps);
        Tensor kl = add(mul(ps, sub(log(ps), log(pt))),
                        mul(one_minus(ps), sub(log(one_minus(ps)), log(one_minus(pt)))));
        return scalar_mul(mean(kl), t2);
    }
    int n = student_logits.dim(0);
    Tensor ps = clamp(softmax(scalar_mul(student_logits, 1.0 / T), 1), kProbEps, 1.0);
    Tensor pt = clamp(softmax(scalar_mul(teacher_logits, 1.0 / T), 1), kProbEps, 1.0);
    Tensor kl = mul(ps, sub(log(ps), log(pt)));
    return scalar_mul(sum(kl), t2 / static_cast<double>(n));
}

Tensor guard_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
    check_same_shape(student_logits, teacher_logits, "guard_loss");
    Tensor d = sub(student_logits, teacher_logits);
    return mean(mul(d, d));
}

Tensor forget_background(const Tensor& logits) {
    return bce_with_logits(logits, Tensor(logits.shape(), 0.0));
}

Tensor flip_loss(const Tensor& logits, const Tensor& target_mask) {
    check_same_shape(logits, target_mask, "flip_loss");
    check_binary(target_mask, "flip_loss");
    return bce_with_logits(logits, one_minus(target_mask));
}

Tensor teacher_contradiction(const Tensor& student_logits, const Tensor& teacher_probs, double threshold) {
    check_same_shape(student_logits, teacher_probs, "teacher_contradiction");
    Tensor w(student_logits.shape(), 0.0);
    const double* pt = teacher_probs.data();
    double* pw = w.data();
    int64_t n = w.numel();
    double count = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (pt[i] > threshold || pt[i] < 1.0 - threshold) {
            pw[i] = 1.0;
            count += 1.0;
        }
    }
    if (count == 0.0) return Tensor::scalar(0.0);
    Tensor p = clamped_probs(student_logits);
    Tensor target = one_minus(teacher_probs);  // no grad flows into the teacher
    Tensor ll = add(mul(target, log(p)), mul(one_minus(target), log(one_minus(p))));
    return scalar_mul(sum(mul(w, ll)), -1.0 / count);
}

Tensor entropy_term(const Tensor& probs, Task task) {
    Tensor p = clamp(probs, kProbEps, 1.0 - kProbEps);
    if (task == Task::segmentation) {
        Tensor h = add(mul(p, log(p)), mul(one_minus(p), log(one_minus(p))));
        return scalar_mul(mean(h), -1.0);
    }
    int n = probs.dim(0);
    return scalar_mul(sum(mul(p, log(p))), -1.0 / static_cast<double>(n));
}

Tensor repulsion(const Tensor& f_s, const Tensor& f_t) {
    check_same_shape(f_s, f_t, "repulsion");
    int n = f_s.dim(0);
    int64_t m = f_s.numel() / n;
    Tensor fs = reshape(f_s, Shape{n, static_cast<int>(m)});
    Tensor ft = reshape(f_t, Shape{n, static_cast<int>(m)});
    Tensor total = Tensor::scalar(0.0);
    for (int i = 0; i < n; ++i) {
        Tensor a = slice(fs, 0, i, 1);
        Tensor b = slice(ft, 0, i, 1);
        Tensor dot = sum(mul(a, b));
        Tensor na = clamp(sqrt(sum(mul(a, a))), 1e-8, 1e300);
        Tensor nb = clamp(sqrt(sum(mul(b, b))), 1e-8, 1e300);
        Tensor cos = div(dot, mul(na, nb));
        total = add(total, one_minus(cos));
    }
    return scalar_mul(total, 1.0 / static_cast<double>(n));
}

Tensor mean_prob_reg(const Tensor& probs) {
    Tensor d = affine(mean(probs), 1.0, -0.5);
    return mul(d, d);
}

Tensor tv_penalty(const Tensor& probs) {
    if (probs.rank() != 4) throw std::runtime_error("tv_penalty: expected [N,C,H,W], got " + shape_str(probs.shape()));
    int n = probs.dim(0), c = probs.dim(1), h = probs.dim(2), w = probs.dim(3);
    if (h < 2 && w < 2) return Tensor::scalar(0.0);
    int64_t count = 0;
    Tensor acc;
    if (h >= 2) {
        Tensor dv = abs(sub(slice(probs, 2, 1, h - 1), slice(probs, 2, 0, h - 1)));
        acc = sum(dv);
        count += static_cast<int64_t>(n) * c * (h - 1) * w;
    }
    if (w >= 2) {
        Tensor dh = abs(sub(slice(probs, 3, 1, w - 1), slice(probs, 3, 0, w - 1)));
        Tensor s = sum(dh);
        acc = acc.defined() ? add(acc, s) : s;
        count += static_cast<int64_t>(n) * c * h * (w - 1);
    }
    return scalar_mul(acc, 1.0 / static_cast<double>(count));
}

Tensor forget_cls(const Tensor& logits, int classes, Rng& rng, bool entropy_mode) {
    if (classes < 2) throw std::runtime_error("forget_cls: need at least 2 classes");
    if (logits.rank() != 2 || logits.dim(1) != classes)
        throw std::runtime_error("forget_cls: logits shape " + shape_str(logits.shape()) + " does not match " + std::to_string(classes) + " classes");
    if (entropy_mode) {
        return scalar_mul(entropy_term(softmax(logits, 1), Task::classification), -1.0);
    }
    int n = logits.dim(0);
    std::vector<int> labels(static_cast<size_t>(n));
    for (auto& l : labels) l = rng.uniform_int(0, classes - 1);
    return ce_loss(logits, labels);
}

double Composite::term(const std::string& name) const {
    for (const auto& [k, v] : terms)
        if (k == name) return v;
    throw std::runtime_error("composite: no term named '" + name + "'");
}

Composite retain_composite_seg(const Tensor& z_s, const Tensor& z_t, const Tensor& mask, const LossWeights& w) {
    Composite c;
    Tensor sup = dice_bce(z_s, mask);
    Tensor kd = kd_loss(z_s, z_t, w.temperature, Task::segmentation);
    Tensor guard = guard_loss(z_s, z_t);
    c.total = add(sup, add(scalar_mul(kd, w.alpha_kd), scalar_mul(guard, w.beta_guard)));
    c.terms = {{"sup", sup.item()}, {"kd", kd.item()}, {"guard", guard.item()}};
    return c;
}

Composite retain_composite_cls(const Tensor& z_s, const Tensor& z_t, const std::vector<int>& labels, const LossWeights& w) {
    Composite c;
    Tensor sup = ce_loss(z_s, labels);
    Tensor kd = kd_loss(z_s, z_t, w.temperature, Task::classification);
    Tensor guard = guard_loss(z_s, z_t);
    c.total = add(sup, add(scalar_mul(kd, w.alpha_kd), scalar_mul(guard, w.beta_guard)));
    c.terms = {{"sup", sup.item()}, {"kd", kd.item()}, {"guard", guard.item()}};
    return c;
}

Composite ascent_composite(const SegOut& student, const SegOut& teacher, const Tensor& mask, const LossWeights& w) {
    Composite c;
    Tensor ps = sigmoid(student.logits);
    Tensor pt;
    {
        NoGradScope ng;
        pt = sigmoid(teacher.logits);
    }
    Tensor flip = flip_loss(student.logits, mask);
    Tensor tc = teacher_contradiction(student.logits, pt, w.teacher_conf_threshold);
    Tensor rep = repulsion(student.features, teacher.features);
    Tensor mreg = mean_prob_reg(ps);
    Tensor tv = tv_penalty(ps);
    Tensor ent = entropy_term(ps, Task::segmentation);
    c.total = add(scalar_mul(flip, w.alpha_flip),
                  add(tc,
                      add(scalar_mul(rep, w.lambda_rep),
                          add(scalar_mul(mreg, w.lambda_mean),
                              add(scalar_mul(tv, w.lambda_tv), scalar_mul(ent, -w.lambda_unc))))));
    c.terms = {{"flip", flip.item()}, {"tc", tc.item()},     {"repulsion", rep.item()},
               {"mean_reg", mreg.item()}, {"tv", tv.item()}, {"entropy", ent.item()}};
    return c;
}

Composite descent_composite_seg(const Tensor& z_s, const Tensor& z_t, const Tensor& mask, const LossWeights& w,
                                bool with_supervised) {
    Composite c;
    Tensor kd = kd_loss(z_s, z_t, w.temperature, Task::segmentation);
    Tensor guard = guard_loss(z_s, z_t);
    c.total = add(scalar_mul(kd, w.gamma_des), scalar_mul(guard, w.lambda_fg_guard));
    c.terms = {{"kd", kd.item()}, {"guard", guard.item()}};
    if (with_supervised) {
        Tensor sup = dice_bce(z_s, mask);
        c.total = add(c.total, sup);
        c.terms.emplace_back("sup", sup.item());
    }
    return c;
}

Composite descent_composite_cls(const Tensor& z_s, const Tensor& z_t, const std::vector<int>& labels,
                                const LossWeights& w, bool with_supervised) {
    Composite c;
    Tensor kd = kd_loss(z_s, z_t, w.temperature, Task::classification);
    Tensor guard = guard_loss(z_s, z_t);
    c.total = add(scalar_mul(kd, w.gamma_des), scalar_mul(guard, w.lambda_fg_guard));
    c.terms = {{"kd", kd.item()}, {"guard", guard.item()}};
    if (with_supervised) {
        Tensor sup = ce_loss(z_s, labels);
        c.total = add(c.total, sup);
        c.terms.emplace_back("sup", sup.item());
    }
    return c;
}

}  // namespace unlearn
