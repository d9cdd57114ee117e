#include "unlearn/engine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "unlearn/evalkit.hpp"
#include "unlearn/losses.hpp"

namespace unlearn {

void AdamState::init(const std::vector<Tensor>& params) {
    slots.clear();
    slots.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        slots[i].m.assign(static_cast<size_t>(params[i].numel()), 0.0);
        slots[i].v.assign(static_cast<size_t>(params[i].numel()), 0.0);
    }
}

void adam_step(std::vector<Tensor>& params, AdamState& state, double lr, const std::vector<bool>& mask) {
    if (params.size() != state.slots.size())
        throw std::runtime_error("adam_step: state holds " + std::to_string(state.slots.size()) +
                                 " slots for " + std::to_string(params.size()) + " params");
    if (!mask.empty() && mask.size() != params.size())
        throw std::runtime_error("adam_step: mask size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        auto& slot = state.slots[i];
        Tensor& p = params[i];
        if (slot.m.size() != static_cast<size_t>(p.numel()))
            throw std::runtime_error("adam_step: state shape mismatch for param " + std::to_string(i));
        if (!p.has_grad()) continue;  // no gradient ever accumulated: nothing moves
        slot.t += 1;
        double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(slot.t));
        double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(slot.t));
        const double* g = p.impl->grad.data();
        double* w = p.data();
        for (size_t j = 0; j < slot.m.size(); ++j) {
            slot.m[j] = state.beta1 * slot.m[j] + (1.0 - state.beta1) * g[j];
            slot.v[j] = state.beta2 * slot.v[j] + (1.0 - state.beta2) * g[j] * g[j];
            double mhat = slot.m[j] / bc1;
            double vhat = slot.v[j] / bc2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

// ---- train log ----

namespace {

std::string csv_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

std::string TrainLog::to_csv_string() const {
    std::ostringstream os;
    os << "phase,epoch,step,total,sup,kd,guard,flip,tc,entropy,repulsion,mean_reg,tv,forget,grad_norm\n";
    for (const auto& r : steps) {
        os << r.phase << "," << r.epoch << "," << r.step << "," << csv_num(r.total) << "," << csv_num(r.sup)
           << "," << csv_num(r.kd) << "," << csv_num(r.guard) << "," << csv_num(r.flip) << ","
           << csv_num(r.tc) << "," << csv_num(r.entropy) << "," << csv_num(r.repulsion) << ","
           << csv_num(r.mean_reg) << "," << csv_num(r.tv) << "," << csv_num(r.forget) << ","
           << csv_num(r.grad_norm) << "\n";
    }
    return os.str();
}

void TrainLog::to_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("trainlog: cannot write " + path);
    out << to_csv_string();
}

void TrainLog::metrics_to_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("trainlog: cannot write " + path);
    out << "phase,epoch,retain,forget,val\n";
    for (const auto& m : epoch_metrics) {
        out << m.phase << "," << m.epoch << "," << csv_num(m.retain_metric) << ","
            << csv_num(m.forget_metric) << "," << csv_num(m.val_metric) << "\n";
    }
}

// ---- batch planning ----

std::vector<BatchPlan> interleave(const std::vector<std::string>& retain_ids,
                                  const std::vector<std::string>& forget_ids, int retain_bs,
                                  int forget_bs, Rng& rng) {
    if (retain_bs < 1 || forget_bs < 1) throw std::runtime_error("interleave: batch sizes must be >= 1");
    std::vector<std::string> r = retain_ids, f = forget_ids;
    rng.shuffle(r);
    rng.shuffle(f);
    std::vector<BatchPlan> plans;
    for (size_t i = 0; i < r.size(); i += static_cast<size_t>(retain_bs)) {
        BatchPlan p;
        p.forget = false;
        p.ids.assign(r.begin() + static_cast<long>(i),
                     r.begin() + static_cast<long>(std::min(r.size(), i + static_cast<size_t>(retain_bs))));
        plans.push_back(std::move(p));
    }
    for (size_t i = 0; i < f.size(); i += static_cast<size_t>(forget_bs)) {
        BatchPlan p;
        p.forget = true;
        p.ids.assign(f.begin() + static_cast<long>(i),
                     f.begin() + static_cast<long>(std::min(f.size(), i + static_cast<size_t>(forget_bs))));
        plans.push_back(std::move(p));
    }
    rng.shuffle(plans);
    return plans;
}

// ---- teacher training ----

namespace {

std::vector<std::string> train_pool_ids(const SplitDataset& ds) {
    std::vector<std::string> ids = ds.ids_of(SplitTag::retain);
    auto f = ds.ids_of(SplitTag::forget);
    ids.insert(ids.end(), f.begin(), f.end());
    std::sort(ids.begin(), ids.end());
    return ids;
}

std::vector<std::vector<std::string>> chunk(const std::vector<std::string>& ids, int bs) {
    std::vector<std::vector<std::string>> out;
    for (size_t i = 0; i < ids.size(); i += static_cast<size_t>(bs)) {
        out.emplace_back(ids.begin() + static_cast<long>(i),
                         ids.begin() + static_cast<long>(std::min(ids.size(), i + static_cast<size_t>(bs))));
    }
    return out;
}

}  // namespace

SegNet train_teacher_seg(const SplitDataset& data, const TeacherConfig& cfg, TrainLog* log) {
    if (data.task != Task::segmentation) throw UsageError("train_teacher_seg: dataset is not segmentation");
    set_num_threads(cfg.threads);
    Rng rng(cfg.seed);
    SegNet net = SegNet::build(16, 32, 64, rng);
    auto params = parameters(net);
    AdamState adam;
    adam.init(params);
    std::vector<std::string> pool = train_pool_ids(data);
    double val_metric = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::string> order = pool;
        rng.shuffle(order);
        int step = 0;
        for (const auto& ids : chunk(order, cfg.batch_size)) {
            Tape tape;
            TapeScope scope(tape);
            Batch batch = make_batch_mixed(data, ids);
            SegOut out = forward_seg(net, batch.images);
            Tensor loss = dice_bce(out.logits, batch.masks);
            backward(loss);
            adam_step(params, adam, cfg.lr);
            for (auto& p : params) p.zero_grad();
            if (log) {
                StepRecord r;
                r.phase = "teacher";
                r.epoch = epoch;
                r.step = step;
                r.total = r.sup = loss.item();
                log->steps.push_back(r);
            }
            ++step;
        }
        val_metric = split_dice(net, nullptr, data, SplitTag::val);
        if (log) {
            EpochMetrics m;
            m.phase = "teacher";
            m.epoch = epoch;
            m.retain_metric = -1;
            m.forget_metric = -1;
            m.val_metric = val_metric;
            log->epoch_metrics.push_back(m);
        }
        if (val_metric >= cfg.val_threshold) return net;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "teacher training missed the threshold: val dice %.4f < %.4f after %d epochs",
                  val_metric, cfg.val_threshold, cfg.epochs);
    throw ThresholdError(buf);
}

ClsNet train_teacher_cls(const SplitDataset& data, const TeacherConfig& cfg, TrainLog* log) {
    if (data.task != Task::classification) throw UsageError("train_teacher_cls: dataset is not classification");
    set_num_threads(cfg.threads);
    Rng rng(cfg.seed);
    ClsNet net = ClsNet::build(16, 32, data.spec.classes, rng);
    auto params = parameters(net);
    AdamState adam;
    adam.init(params);
    std::vector<std::string> pool = train_pool_ids(data);
    double val_metric = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::string> order = pool;
        rng.shuffle(order);
        int step = 0;
        for (const auto& ids : chunk(order, cfg.batch_size)) {
            Tape tape;
            TapeScope scope(tape);
            Batch batch = make_batch_mixed(data, ids);
            ClsOut out = forward_cls(net, batch.images);
            Tensor loss = ce_loss(out.logits, batch.labels);
            backward(loss);
            adam_step(params, adam, cfg.lr);
            for (auto& p : params) p.zero_grad();
            if (log) {
                StepRecord r;
                r.phase = "teacher";
                r.epoch = epoch;
                r.step = step;
                r.total = r.sup = loss.item();
                log->steps.push_back(r);
            }
            ++step;
        }
        val_metric = split_accuracy(net, nullptr, data, SplitTag::val);
        if (log) {
            EpochMetrics m;
            m.phase = "teacher";
            m.epoch = epoch;
            m.retain_metric = -1;
            m.forget_metric = -1;
            m.val_metric = val_metric;
            log->epoch_metrics.push_back(m);
        }
        if (val_metric >= cfg.val_threshold) return net;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "teacher training missed the threshold: val accuracy %.4f < %.4f after %d epochs",
                  val_metric, cfg.val_threshold, cfg.epochs);
    throw ThresholdError(buf);
}

// ---- unlearning ----

namespace {

struct CachedOutputs {
    std::map<std::string, Tensor> logits;
    std::map<std::string, Tensor> features;

    Tensor stack(const std::vector<std::string>& ids, bool feats) const {
        const auto& src = feats ? features : logits;
        const Tensor& first = src.at(ids[0]);
        Shape s = first.shape();
        s[0] = static_cast<int>(ids.size());
        Tensor out(s);
        int64_t per = first.numel();
        for (size_t i = 0; i < ids.size(); ++i) {
            const Tensor& t = src.at(ids[i]);
            std::copy(t.data(), t.data() + per, out.data() + static_cast<int64_t>(i) * per);
        }
        return out;
    }
};

template <typename Net, typename Fwd>
CachedOutputs cache_teacher(const Net& teacher, const SplitDataset& ds, Fwd fwd) {
    CachedOutputs cache;
    NoGradScope ng;
    std::vector<std::string> ids = ds.ids_of(SplitTag::retain);
    auto f = ds.ids_of(SplitTag::forget);
    ids.insert(ids.end(), f.begin(), f.end());
    for (const auto& group : chunk(ids, 32)) {
        Batch b = make_batch_mixed(ds, group);
        auto out = fwd(teacher, b.images);
        int64_t lper = out.logits.numel() / static_cast<int64_t>(group.size());
        int64_t fper = out.features.numel() / static_cast<int64_t>(group.size());
        for (size_t i = 0; i < group.size(); ++i) {
            Shape ls = out.logits.shape();
            ls[0] = 1;
            Tensor li(ls);
            std::copy(out.logits.data() + static_cast<int64_t>(i) * lper,
                      out.logits.data() + static_cast<int64_t>(i + 1) * lper, li.data());
            cache.logits[group[i]] = li;
            Shape fs = out.features.shape();
            fs[0] = 1;
            Tensor fi(fs);
            std::copy(out.features.data() + static_cast<int64_t>(i) * fper,
                      out.features.data() + static_cast<int64_t>(i + 1) * fper, fi.data());
            cache.features[group[i]] = fi;
        }
    }
    return cache;
}

double scoped_grad_norm(std::vector<Tensor>& params, const std::vector<bool>& mask) {
    double acc = 0.0;
    for (size_t i = 0; i < params.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        if (!params[i].has_grad()) continue;
        for (double g : params[i].grad_vec()) acc += g * g;
    }
    return std::sqrt(acc);
}

template <typename Net>
void check_gradient_isolation(const Net& base) {
    for (const auto& l : base.layers) {
        for (const Tensor* t : {&l.w, &l.b}) {
            if (!t->has_grad()) continue;
            for (double g : t->grad_vec()) {
                if (g != 0.0)
                    throw std::logic_error("gradient isolation violated: frozen layer '" + l.name + "' has gradient");
            }
        }
    }
}

void check_drift(const AdapterSet& adapters) {
    for (const auto& db : drift_bound(adapters)) {
        if (db.lhs > db.rhs * (1.0 + 1e-9) + 1e-12) {
            throw std::logic_error("drift bound violated for adapter '" + db.target + "': " +
                                   std::to_string(db.lhs) + " > " + std::to_string(db.rhs));
        }
    }
}

void fill_terms(StepRecord& r, const Composite& c) {
    for (const auto& [name, v] : c.terms) {
        if (name == "sup") r.sup = v;
        else if (name == "kd") r.kd = v;
        else if (name == "guard") r.guard = v;
        else if (name == "flip") r.flip = v;
        else if (name == "tc") r.tc = v;
        else if (name == "entropy") r.entropy = v;
        else if (name == "repulsion") r.repulsion = v;
        else if (name == "mean_reg") r.mean_reg = v;
        else if (name == "tv") r.tv = v;
        else if (name == "forget") r.forget = v;
    }
}

void validate_objective(Task task, ForgetObjective obj) {
    if (task == Task::segmentation &&
        (obj == ForgetObjective::random_label || obj == ForgetObjective::entropy)) {
        throw UsageError("forget objective '" + forget_objective_name(obj) + "' applies to classification only");
    }
    if (task == Task::classification &&
        (obj == ForgetObjective::background || obj == ForgetObjective::ascent_composite)) {
        throw UsageError("forget objective '" + forget_objective_name(obj) + "' applies to segmentation only");
    }
}

}  // namespace

SegUnlearnResult unlearn(const SegNet& teacher, const SplitDataset& data, const UnlearnConfig& cfg) {
    cfg.validate();
    if (cfg.task != Task::segmentation || data.task != Task::segmentation)
        throw UsageError("unlearn: segmentation teacher wants a segmentation dataset/config");
    validate_objective(cfg.task, cfg.forget_objective);
    set_num_threads(cfg.threads);

    SegUnlearnResult res;
    res.student_base = clone_frozen(teacher);
    for (const auto& l : res.student_base.layers) {
        if (l.w.requires_grad() || l.b.requires_grad()) throw UsageError("unlearn: teacher must be frozen");
    }
    res.adapters = inject(res.student_base, cfg.lora.policy, cfg.lora.rank, cfg.lora.alpha,
                          cfg.lora.dropout, cfg.seed);
    auto params = adapter_parameters(res.adapters);
    AdamState adam;
    adam.init(params);

    std::vector<bool> head_mask(params.size(), false);
    for (size_t i = 0; i < res.adapters.adapters.size(); ++i) {
        bool is_head = res.student_base.layer(res.adapters.adapters[i].target).tag == "head";
        head_mask[2 * i] = head_mask[2 * i + 1] = is_head;
    }

    CachedOutputs tcache = cache_teacher(res.student_base, data,
                                         [](const SegNet& n, const Tensor& x) { return forward_seg(n, x); });

    std::vector<std::string> retain_ids = data.ids_of(SplitTag::retain);
    std::vector<std::string> forget_ids = data.ids_of(SplitTag::forget);
    Rng order_rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFULL);
    Rng dropout_rng(cfg.seed ^ 0x3333CCCC0F0F0F0FULL);

    int global_epoch = 0;
    for (const auto& phase : cfg.effective_schedule()) {
        double lr = phase.lr > 0.0 ? phase.lr : cfg.lr;
        const std::vector<bool>& mask = phase.scope == Scope::head_only ? head_mask : std::vector<bool>{};
        const std::string phase_name =
            phase.kind == PhaseKind::joint ? "joint" : (phase.kind == PhaseKind::ascent ? "ascent" : "restore");

        // snapshot for bitwise scope enforcement
        std::vector<std::vector<double>> frozen_snapshot;
        if (cfg.debug_checks && phase.scope == Scope::head_only) {
            for (size_t i = 0; i < params.size(); ++i)
                if (!head_mask[i]) frozen_snapshot.push_back(params[i].vec());
        }

        for (int e = 0; e < phase.epochs; ++e, ++global_epoch) {
            std::vector<BatchPlan> plans;
            if (phase.kind == PhaseKind::joint) {
                plans = interleave(retain_ids, forget_ids, cfg.batch_size,
                                   std::min<int>(cfg.batch_size, static_cast<int>(forget_ids.size())), order_rng);
            } else if (phase.kind == PhaseKind::ascent) {
                std::vector<std::string> f = forget_ids;
                order_rng.shuffle(f);
                for (auto& ids : chunk(f, cfg.forget_batch_size)) plans.push_back({true, ids});
            } else {
                std::vector<std::string> r = retain_ids;
                order_rng.shuffle(r);
                for (auto& ids : chunk(r, cfg.batch_size)) plans.push_back({false, ids});
            }

            int step = 0;
            for (const auto& plan : plans) {
                Tape tape;
                TapeScope scope(tape);
                Batch batch = make_batch(data, plan.ids, plan.forget ? SplitTag::forget : SplitTag::retain);
                SegOut tout{tcache.stack(plan.ids, false), tcache.stack(plan.ids, true)};
                SegOut sout = forward_seg(res.student_base, batch.images, &res.adapters, true, &dropout_rng);

                Composite comp;
                if (!plan.forget) {
                    comp = phase.kind == PhaseKind::restore
                               ? descent_composite_seg(sout.logits, tout.logits, batch.masks, cfg.weights,
                                                       cfg.restore_supervised)
                               : retain_composite_seg(sout.logits, tout.logits, batch.masks, cfg.weights);
                } else if (cfg.forget_objective == ForgetObjective::background) {
                    Tensor fg = forget_background(sout.logits);
                    comp.terms = {{"forget", fg.item()}};
                    comp.total = phase.kind == PhaseKind::joint ? scalar_mul(fg, cfg.weights.lambda_forget) : fg;
                } else {
                    comp = ascent_composite(sout, tout, batch.masks, cfg.weights);
                    if (phase.kind == PhaseKind::joint)
                        comp.total = scalar_mul(comp.total, cfg.weights.lambda_forget);
                }

                backward(comp.total);
                StepRecord r;
                r.phase = phase_name;
                r.epoch = global_epoch;
                r.step = step;
                r.total = comp.total.item();
                fill_terms(r, comp);
                r.grad_norm = scoped_grad_norm(params, mask);
                adam_step(params, adam, lr, mask);
                for (auto& p : params) p.zero_grad();
                res.log.steps.push_back(r);
                ++step;
            }

            if (cfg.debug_checks) {
                check_gradient_isolation(res.student_base);
                check_drift(res.adapters);
            }
            if (cfg.eval_every > 0 && (global_epoch + 1) % cfg.eval_every == 0) {
                EpochMetrics m;
                m.phase = phase_name;
                m.epoch = global_epoch;
                m.retain_metric = split_dice(res.student_base, &res.adapters, data, SplitTag::retain);
                m.forget_metric = split_dice(res.student_base, &res.adapters, data, SplitTag::forget);
                m.val_metric = split_dice(res.student_base, &res.adapters, data, SplitTag::val);
                res.log.epoch_metrics.push_back(m);
            }
        }

        if (cfg.debug_checks && phase.scope == Scope::head_only) {
            size_t si = 0;
            for (size_t i = 0; i < params.size(); ++i) {
                if (head_mask[i]) continue;
                if (params[i].vec() != frozen_snapshot[si++])
                    throw std::logic_error("scope enforcement violated: non-head adapter moved in restore phase");
            }
        }
    }
    return res;
}

ClsUnlearnResult unlearn(const ClsNet& teacher, const SplitDataset& data, const UnlearnConfig& cfg) {
    cfg.validate();
    if (cfg.task != Task::classification || data.task != Task::classification)
        throw UsageError("unlearn: classification teacher wants a classification dataset/config");
    validate_objective(cfg.task, cfg.forget_objective);
    set_num_threads(cfg.threads);

    ClsUnlearnResult res;
    res.student_base = clone_frozen(teacher);
    res.adapters = inject(res.student_base, cfg.lora.policy, cfg.lora.rank, cfg.lora.alpha,
                          cfg.lora.dropout, cfg.seed);
    auto params = adapter_parameters(res.adapters);
    AdamState adam;
    adam.init(params);

    std::vector<bool> head_mask(params.size(), false);
    for (size_t i = 0; i < res.adapters.adapters.size(); ++i) {
        bool is_head = res.student_base.layer(res.adapters.adapters[i].target).tag == "head";
        head_mask[2 * i] = head_mask[2 * i + 1] = is_head;
    }

    CachedOutputs tcache = cache_teacher(res.student_base, data,
                                         [](const ClsNet& n, const Tensor& x) { return forward_cls(n, x); });

    std::vector<std::string> retain_ids = data.ids_of(SplitTag::retain);
    std::vector<std::string> forget_ids = data.ids_of(SplitTag::forget);
    Rng order_rng(cfg.seed ^ 0xA5A5A5A5DEADBEEFULL);
    Rng dropout_rng(cfg.seed ^ 0x3333CCCC0F0F0F0FULL);
    Rng label_rng(cfg.seed ^ 0x7777AAAA12345678ULL);

    int global_epoch = 0;
    for (const auto& phase : cfg.effective_schedule()) {
        double lr = phase.lr > 0.0 ? phase.lr : cfg.lr;
        const std::vector<bool>& mask = phase.scope == Scope::head_only ? head_mask : std::vector<bool>{};
        const std::string phase_name =
            phase.kind == PhaseKind::joint ? "joint" : (phase.kind == PhaseKind::ascent ? "ascent" : "restore");

        std::vector<std::vector<double>> frozen_snapshot;
        if (cfg.debug_checks && phase.scope == Scope::head_only) {
            for (size_t i = 0; i < params.size(); ++i)
                if (!head_mask[i]) frozen_snapshot.push_back(params[i].vec());
        }

        for (int e = 0; e < phase.epochs; ++e, ++global_epoch) {
            std::vector<BatchPlan> plans;
            if (phase.kind == PhaseKind::joint) {
                plans = interleave(retain_ids, forget_ids, cfg.batch_size,
                                   std::min<int>(cfg.batch_size, static_cast<int>(forget_ids.size())), order_rng);
            } else if (phase.kind == PhaseKind::ascent) {
                std::vector<std::string> f = forget_ids;
                order_rng.shuffle(f);
                for (auto& ids : chunk(f, cfg.forget_batch_size)) plans.push_back({true, ids});
            } else {
                std::vector<std::string> r = retain_ids;
                order_rng.shuffle(r);
                for (auto& ids : chunk(r, cfg.batch_size)) plans.push_back({false, ids});
            }

            int step = 0;
            for (const auto& plan : plans) {
                Tape tape;
                TapeScope scope(tape);
                Batch batch = make_batch(data, plan.ids, plan.forget ? SplitTag::forget : SplitTag::retain);
                Tensor t_logits = tcache.stack(plan.ids, false);
                ClsOut sout = forward_cls(res.student_base, batch.images, &res.adapters, true, &dropout_rng);

                Composite comp;
                if (!plan.forget) {
                    comp = phase.kind == PhaseKind::restore
                               ? descent_composite_cls(sout.logits, t_logits, batch.labels, cfg.weights,
                                                       cfg.restore_supervised)
                               : retain_composite_cls(sout.logits, t_logits, batch.labels, cfg.weights);
                } else {
                    Tensor fg = forget_cls(sout.logits, data.spec.classes, label_rng,
                                           cfg.forget_objective == ForgetObjective::entropy);
                    comp.terms = {{"forget", fg.item()}};
                    comp.total = phase.kind == PhaseKind::joint ? scalar_mul(fg, cfg.weights.lambda_forget) : fg;
                }

                backward(comp.total);
                StepRecord r;
                r.phase = phase_name;
                r.epoch = global_epoch;
                r.step = step;
                r.total = comp.total.item();
                fill_terms(r, comp);
                r.grad_norm = scoped_grad_norm(params, mask);
                adam_step(params, adam, lr, mask);
                for (auto& p : params) p.zero_grad();
                res.log.steps.push_back(r);
                ++step;
            }

            if (cfg.debug_checks) {
                check_gradient_isolation(res.student_base);
                check_drift(res.adapters);
            }
            if (cfg.eval_every > 0 && (global_epoch + 1) % cfg.eval_every == 0) {
                EpochMetrics m;
                m.phase = phase_name;
                m.epoch = global_epoch;
                m.retain_metric = split_accuracy(res.student_base, &res.adapters, data, SplitTag::retain);
                m.forget_metric = split_accuracy(res.student_base, &res.adapters, data, SplitTag::forget);
                m.val_metric = split_accuracy(res.student_base, &res.adapters, data, SplitTag::val);
                res.log.epoch_metrics.push_back(m);
            }
        }

        if (cfg.debug_checks && phase.scope == Scope::head_only) {
            size_t si = 0;
            for (size_t i = 0; i < params.size(); ++i) {
                if (head_mask[i]) continue;
                if (params[i].vec() != frozen_snapshot[si++])
                    throw std::logic_error("scope enforcement violated: non-head adapter moved in restore phase");
            }
        }
    }
    return res;
}

}  // namespace unlearn
