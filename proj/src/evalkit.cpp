#include "unlearn/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace unlearn {

std::pair<double, double> dice_iou(const Tensor& logits, const Tensor& mask, double threshold) {
    if (logits.shape() != mask.shape())
        throw std::runtime_error("dice_iou: shape mismatch " + shape_str(logits.shape()) + " vs " + shape_str(mask.shape()));
    const double* z = logits.data();
    const double* m = mask.data();
    int64_t n = logits.numel();
    double logit_thr = std::log(threshold / (1.0 - threshold));
    int64_t inter = 0, p = 0, g = 0;
    for (int64_t i = 0; i < n; ++i) {
        bool pred = z[i] > logit_thr;
        bool gt = m[i] != 0.0;
        inter += pred && gt;
        p += pred;
        g += gt;
    }
    if (p == 0 && g == 0) return {1.0, 1.0};
    double dice = static_cast<double>(2 * inter) / static_cast<double>(p + g);
    int64_t uni = p + g - inter;
    double iou = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    return {dice, iou};
}

ClsMetrics cls_metrics(const Tensor& logits, const std::vector<int>& labels, int classes) {
    if (logits.rank() != 2 || logits.dim(1) != classes)
        throw std::runtime_error("cls_metrics: logits shape " + shape_str(logits.shape()) + " vs " + std::to_string(classes) + " classes");
    int n = logits.dim(0);
    if (static_cast<int>(labels.size()) != n) throw std::runtime_error("cls_metrics: label count mismatch");
    std::vector<int64_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    int64_t correct = 0;
    for (int i = 0; i < n; ++i) {
        const double* row = logits.data() + static_cast<int64_t>(i) * classes;
        int pred = 0;
        for (int c = 1; c < classes; ++c)
            if (row[c] > row[pred]) pred = c;
        int truth = labels[static_cast<size_t>(i)];
        if (pred == truth) {
            ++correct;
            ++tp[pred];
        } else {
            ++fp[pred];
            ++fn[truth];
        }
    }
    ClsMetrics out;
    out.accuracy = static_cast<double>(correct) / n;
    for (int c = 0; c < classes; ++c) {
        double denom = static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
        out.f1.push_back(denom == 0.0 ? 0.0 : 2.0 * tp[c] / denom);
    }
    return out;
}

namespace {

constexpr int kEvalBatch = 25;

std::vector<std::vector<std::string>> chunk_ids(const std::vector<std::string>& ids, int bs) {
    std::vector<std::vector<std::string>> out;
    for (size_t i = 0; i < ids.size(); i += static_cast<size_t>(bs)) {
        out.emplace_back(ids.begin() + static_cast<long>(i),
                         ids.begin() + static_cast<long>(std::min(ids.size(), i + static_cast<size_t>(bs))));
    }
    return out;
}

Tensor slice_item(const Tensor& batched, size_t i) {
    Shape s = batched.shape();
    int64_t per = batched.numel() / s[0];
    s[0] = 1;
    Tensor out(s);
    std::copy(batched.data() + static_cast<int64_t>(i) * per, batched.data() + static_cast<int64_t>(i + 1) * per,
              out.data());
    return out;
}

double cosine_gap(const Tensor& a, const Tensor& b) {
    const double* pa = a.data();
    const double* pb = b.data();
    double dot = 0, na = 0, nb = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        dot += pa[i] * pb[i];
        na += pa[i] * pa[i];
        nb += pb[i] * pb[i];
    }
    double denom = std::max(std::sqrt(na), 1e-8) * std::max(std::sqrt(nb), 1e-8);
    return 1.0 - dot / denom;
}

double sigmoid_l1(const Tensor& zs, const Tensor& zt) {
    const double* a = zs.data();
    const double* b = zt.data();
    double acc = 0;
    for (int64_t i = 0; i < zs.numel(); ++i) {
        double ps = 1.0 / (1.0 + std::exp(-a[i]));
        double pt = 1.0 / (1.0 + std::exp(-b[i]));
        acc += std::fabs(ps - pt);
    }
    return acc / static_cast<double>(zs.numel());
}

double softmax_l1(const Tensor& zs, const Tensor& zt) {
    int n = zs.dim(0), c = zs.dim(1);
    double acc = 0;
    std::vector<double> ps(static_cast<size_t>(c)), pt(static_cast<size_t>(c));
    for (int i = 0; i < n; ++i) {
        const double* a = zs.data() + static_cast<int64_t>(i) * c;
        const double* b = zt.data() + static_cast<int64_t>(i) * c;
        double ma = *std::max_element(a, a + c), mb = *std::max_element(b, b + c);
        double za = 0, zb = 0;
        for (int j = 0; j < c; ++j) {
            ps[static_cast<size_t>(j)] = std::exp(a[j] - ma);
            za += ps[static_cast<size_t>(j)];
            pt[static_cast<size_t>(j)] = std::exp(b[j] - mb);
            zb += pt[static_cast<size_t>(j)];
        }
        for (int j = 0; j < c; ++j) acc += std::fabs(ps[static_cast<size_t>(j)] / za - pt[static_cast<size_t>(j)] / zb);
    }
    return acc / static_cast<double>(zs.numel());
}

}  // namespace

double split_dice(const SegNet& net, const AdapterSet* adapters, const SplitDataset& ds, SplitTag split) {
    NoGradScope ng;
    auto ids = ds.ids_of(split);
    double acc = 0;
    for (const auto& group : chunk_ids(ids, kEvalBatch)) {
        Batch b = make_batch(ds, group, split);
        SegOut out = forward_seg(net, b.images, adapters);
        for (size_t i = 0; i < group.size(); ++i) {
            acc += dice_iou(slice_item(out.logits, i), slice_item(b.masks, i)).first;
        }
    }
    return ids.empty() ? 0.0 : acc / static_cast<double>(ids.size());
}

double split_accuracy(const ClsNet& net, const AdapterSet* adapters, const SplitDataset& ds, SplitTag split) {
    NoGradScope ng;
    auto ids = ds.ids_of(split);
    int64_t correct = 0;
    for (const auto& group : chunk_ids(ids, kEvalBatch)) {
        Batch b = make_batch(ds, group, split);
        ClsOut out = forward_cls(net, b.images, adapters);
        ClsMetrics m = cls_metrics(out.logits, b.labels, ds.spec.classes);
        correct += static_cast<int64_t>(std::llround(m.accuracy * static_cast<double>(group.size())));
    }
    return ids.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(ids.size());
}

std::pair<double, double> divergence(const SegNet& teacher, const SegNet& student_base,
                                     const AdapterSet& adapters, const SplitDataset& ds, SplitTag split) {
    NoGradScope ng;
    auto ids = ds.ids_of(split);
    double l1 = 0, fg = 0;
    for (const auto& group : chunk_ids(ids, kEvalBatch)) {
        Batch b = make_batch(ds, group, split);
        SegOut t = forward_seg(teacher, b.images);
        SegOut s = forward_seg(student_base, b.images, &adapters);
        for (size_t i = 0; i < group.size(); ++i) {
            l1 += sigmoid_l1(slice_item(s.logits, i), slice_item(t.logits, i));
            fg += cosine_gap(slice_item(s.features, i), slice_item(t.features, i));
        }
    }
    double n = ids.empty() ? 1.0 : static_cast<double>(ids.size());
    return {l1 / n, fg / n};
}

namespace {

const char* kSplitsOrdered[3] = {"retain", "forget", "val"};
const SplitTag kTagsOrdered[3] = {SplitTag::retain, SplitTag::forget, SplitTag::val};

}  // namespace

EvalReport evaluate(const SegNet& teacher, const SegNet& student_base, const AdapterSet& adapters,
                    const SplitDataset& ds) {
    NoGradScope ng;
    EvalReport rep;
    rep.task = "segmentation";
    rep.budget = budget(student_base, adapters);
    for (int si = 0; si < 3; ++si) {
        SplitTag tag = kTagsOrdered[si];
        auto ids = ds.ids_of(tag);
        SplitBlock blk;
        blk.count = static_cast<int>(ids.size());
        double l1 = 0, fgap = 0;
        for (const auto& group : chunk_ids(ids, kEvalBatch)) {
            Batch b = make_batch(ds, group, tag);
            SegOut t = forward_seg(teacher, b.images);
            SegOut s = forward_seg(student_base, b.images, &adapters);
            for (size_t i = 0; i < group.size(); ++i) {
                Tensor ti = slice_item(t.logits, i), siL = slice_item(s.logits, i), mi = slice_item(b.masks, i);
                auto [td, tiou] = dice_iou(ti, mi);
                auto [sd, siou] = dice_iou(siL, mi);
                blk.teacher_dice += td;
                blk.teacher_iou += tiou;
                blk.dice += sd;
                blk.iou += siou;
                l1 += sigmoid_l1(siL, ti);
                fgap += cosine_gap(slice_item(s.features, i), slice_item(t.features, i));
            }
        }
        double n = std::max<double>(1.0, blk.count);
        blk.dice /= n;
        blk.iou /= n;
        blk.teacher_dice /= n;
        blk.teacher_iou /= n;
        blk.delta_dice = blk.teacher_dice - blk.dice;
        blk.delta_iou = blk.teacher_iou - blk.iou;
        blk.l1_prob_gap = l1 / n;
        blk.feature_gap = fgap / n;
        rep.splits[kSplitsOrdered[si]] = blk;
    }
    rep.selectivity = rep.splits["forget"].delta_dice -
                      std::max(rep.splits["retain"].delta_dice, rep.splits["val"].delta_dice);
    return rep;
}

EvalReport evaluate(const ClsNet& teacher, const ClsNet& student_base, const AdapterSet& adapters,
                    const SplitDataset& ds) {
    NoGradScope ng;
    EvalReport rep;
    rep.task = "classification";
    rep.budget = budget(student_base, adapters);
    for (int si = 0; si < 3; ++si) {
        SplitTag tag = kTagsOrdered[si];
        auto ids = ds.ids_of(tag);
        SplitBlock blk;
        blk.count = static_cast<int>(ids.size());
        // gather logits for the whole split, then compute metrics once
        Tensor s_logits(Shape{std::max(1, blk.count), ds.spec.classes});
        Tensor t_logits(Shape{std::max(1, blk.count), ds.spec.classes});
        std::vector<int> labels;
        double fgap = 0;
        int64_t row = 0;
        for (const auto& group : chunk_ids(ids, kEvalBatch)) {
            Batch b = make_batch(ds, group, tag);
            ClsOut t = forward_cls(teacher, b.images);
            ClsOut s = forward_cls(student_base, b.images, &adapters);
            for (size_t i = 0; i < group.size(); ++i) {
                std::copy(t.logits.data() + static_cast<int64_t>(i) * ds.spec.classes,
                          t.logits.data() + static_cast<int64_t>(i + 1) * ds.spec.classes,
                          t_logits.data() + row * ds.spec.classes);
                std::copy(s.logits.data() + static_cast<int64_t>(i) * ds.spec.classes,
                          s.logits.data() + static_cast<int64_t>(i + 1) * ds.spec.classes,
                          s_logits.data() + row * ds.spec.classes);
                fgap += cosine_gap(slice_item(s.features, i), slice_item(t.features, i));
                ++row;
            }
            labels.insert(labels.end(), b.labels.begin(), b.labels.end());
        }
        ClsMetrics sm = cls_metrics(s_logits, labels, ds.spec.classes);
        ClsMetrics tm = cls_metrics(t_logits, labels, ds.spec.classes);
        blk.accuracy = sm.accuracy;
        blk.teacher_accuracy = tm.accuracy;
        blk.delta_accuracy = tm.accuracy - sm.accuracy;
        blk.f1 = sm.f1;
        blk.teacher_f1 = tm.f1;
        blk.l1_prob_gap = softmax_l1(s_logits, t_logits);
        blk.feature_gap = blk.count > 0 ? fgap / blk.count : 0.0;
        rep.splits[kSplitsOrdered[si]] = blk;
    }
    rep.selectivity = rep.splits["forget"].delta_accuracy -
                      std::max(rep.splits["retain"].delta_accuracy, rep.splits["val"].delta_accuracy);
    return rep;
}

std::vector<DiffMapStats> diff_maps(const SegNet& teacher, const SegNet& student_base,
                                    const AdapterSet& adapters, const SplitDataset& ds,
                                    const std::vector<std::string>& ids, const std::string& out_dir) {
    NoGradScope ng;
    fs::create_directories(out_dir);
    std::vector<DiffMapStats> stats;
    int H = ds.spec.height, W = ds.spec.width;
    auto to_bytes = [&](const double* p) {
        std::vector<uint8_t> b(static_cast<size_t>(H) * W);
        for (size_t i = 0; i < b.size(); ++i)
            b[i] = static_cast<uint8_t>(std::llround(std::min(1.0, std::max(0.0, p[i])) * 255.0));
        return b;
    };
    for (const auto& id : ids) {
        const Item& it = ds.item(id);
        Batch b = make_batch_mixed(ds, {id});
        SegOut t = forward_seg(teacher, b.images);
        SegOut s = forward_seg(student_base, b.images, &adapters);
        std::vector<double> pt(static_cast<size_t>(H) * W), psv(static_cast<size_t>(H) * W), diff(static_cast<size_t>(H) * W);
        DiffMapStats st;
        st.id = id;
        double fg_n = 0, bg_n = 0;
        for (size_t i = 0; i < pt.size(); ++i) {
            pt[i] = 1.0 / (1.0 + std::exp(-t.logits.data()[i]));
            psv[i] = 1.0 / (1.0 + std::exp(-s.logits.data()[i]));
            diff[i] = std::fabs(pt[i] - psv[i]);
            if (it.mask.data()[i] != 0.0) {
                st.teacher_fg += pt[i];
                st.student_fg += psv[i];
                st.diff_inside += diff[i];
                fg_n += 1;
            } else {
                st.diff_outside += diff[i];
                bg_n += 1;
            }
        }
        if (fg_n > 0) {
            st.teacher_fg /= fg_n;
            st.student_fg /= fg_n;
            st.diff_inside /= fg_n;
        }
        if (bg_n > 0) st.diff_outside /= bg_n;
        stats.push_back(st);

        write_pgm((fs::path(out_dir) / (id + "_input.pgm")).string(), W, H, to_bytes(it.image.data()));
        write_pgm((fs::path(out_dir) / (id + "_gt.pgm")).string(), W, H, to_bytes(it.mask.data()));
        write_pgm((fs::path(out_dir) / (id + "_teacher.pgm")).string(), W, H, to_bytes(pt.data()));
        write_pgm((fs::path(out_dir) / (id + "_student.pgm")).string(), W, H, to_bytes(psv.data()));
        write_pgm((fs::path(out_dir) / (id + "_diff.pgm")).string(), W, H, to_bytes(diff.data()));
    }
    return stats;
}

// ---- serialization ----

namespace {

ordered_json split_to_json(const SplitBlock& b, const std::string& task) {
    ordered_json j;
    j["count"] = b.count;
    if (task == "segmentation") {
        j["dice"] = b.dice;
        j["iou"] = b.iou;
        j["teacher_dice"] = b.teacher_dice;
        j["teacher_iou"] = b.teacher_iou;
        j["delta_dice"] = b.delta_dice;
        j["delta_iou"] = b.delta_iou;
    } else {
        j["accuracy"] = b.accuracy;
        j["teacher_accuracy"] = b.teacher_accuracy;
        j["delta_accuracy"] = b.delta_accuracy;
        j["f1"] = b.f1;
        j["teacher_f1"] = b.teacher_f1;
    }
    j["l1_prob_gap"] = b.l1_prob_gap;
    j["feature_gap"] = b.feature_gap;
    return j;
}

SplitBlock split_from_json(const ordered_json& j, const std::string& task) {
    SplitBlock b;
    b.count = j.at("count").get<int>();
    if (task == "segmentation") {
        b.dice = j.at("dice").get<double>();
        b.iou = j.at("iou").get<double>();
        b.teacher_dice = j.at("teacher_dice").get<double>();
        b.teacher_iou = j.at("teacher_iou").get<double>();
        b.delta_dice = j.at("delta_dice").get<double>();
        b.delta_iou = j.at("delta_iou").get<double>();
    } else {
        b.accuracy = j.at("accuracy").get<double>();
        b.teacher_accuracy = j.at("teacher_accuracy").get<double>();
        b.delta_accuracy = j.at("delta_accuracy").get<double>();
        b.f1 = j.at("f1").get<std::vector<double>>();
        b.teacher_f1 = j.at("teacher_f1").get<std::vector<double>>();
    }
    b.l1_prob_gap = j.at("l1_prob_gap").get<double>();
    b.feature_gap = j.at("feature_gap").get<double>();
    return b;
}

}  // namespace

std::string report_to_json(const EvalReport& report) {
    ordered_json j;
    j["task"] = report.task;
    for (const char* s : kSplitsOrdered) {
        j["splits"][s] = split_to_json(report.splits.at(s), report.task);
    }
    j["selectivity"] = report.selectivity;
    j["budget"]["trainable"] = report.budget.trainable;
    j["budget"]["total"] = report.budget.total;
    j["budget"]["percent"] = report.budget.pct;
    return j.dump(2) + "\n";
}

void write_report_json(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot write " + path);
    out << report_to_json(report);
}

EvalReport report_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("report: cannot open " + path);
    ordered_json j = ordered_json::parse(in);
    EvalReport rep;
    rep.task = j.at("task").get<std::string>();
    for (const char* s : kSplitsOrdered) rep.splits[s] = split_from_json(j.at("splits").at(s), rep.task);
    rep.selectivity = j.at("selectivity").get<double>();
    rep.budget.trainable = j.at("budget").at("trainable").get<int64_t>();
    rep.budget.total = j.at("budget").at("total").get<int64_t>();
    rep.budget.pct = j.at("budget").at("percent").get<double>();
    return rep;
}

namespace {

std::string sig6(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace

void write_metrics_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot write " + path);
    out << "split,metric,student,teacher,delta\n";
    for (const char* s : kSplitsOrdered) {
        const SplitBlock& b = report.splits.at(s);
        if (report.task == "segmentation") {
            out << s << ",dice," << sig6(b.dice) << "," << sig6(b.teacher_dice) << "," << sig6(b.delta_dice) << "\n";
            out << s << ",iou," << sig6(b.iou) << "," << sig6(b.teacher_iou) << "," << sig6(b.delta_iou) << "\n";
        } else {
            out << s << ",accuracy," << sig6(b.accuracy) << "," << sig6(b.teacher_accuracy) << ","
                << sig6(b.delta_accuracy) << "\n";
            for (size_t c = 0; c < b.f1.size(); ++c) {
                out << s << ",f1_class" << c << "," << sig6(b.f1[c]) << "," << sig6(b.teacher_f1[c]) << ","
                    << sig6(b.teacher_f1[c] - b.f1[c]) << "\n";
            }
        }
        out << s << ",l1_prob_gap," << sig6(b.l1_prob_gap) << ",0,0\n";
        out << s << ",feature_gap," << sig6(b.feature_gap) << ",0,0\n";
    }
}

void write_svg_chart(const EvalReport& report, const std::string& path) {
    bool seg = report.task == "segmentation";
    const int width = 640, height = 360, base_y = 300, group_w = 180, bar_w = 34;
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot write " + path);
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    out << "  <text x=\"20\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">teacher vs student "
        << (seg ? "dice" : "accuracy") << " per split</text>\n";
    out << "  <line x1=\"40\" y1=\"" << base_y << "\" x2=\"" << width - 20 << "\" y2=\"" << base_y
        << "\" stroke=\"#333\"/>\n";
    int gx = 60;
    for (const char* s : kSplitsOrdered) {
        const SplitBlock& b = report.splits.at(s);
        double tval = seg ? b.teacher_dice : b.teacher_accuracy;
        double sval = seg ? b.dice : b.accuracy;
        int th = static_cast<int>(tval * 240);
        int sh = static_cast<int>(sval * 240);
        out << "  <g>\n";
        out << "    <rect x=\"" << gx << "\" y=\"" << base_y - th << "\" width=\"" << bar_w << "\" height=\"" << th
            << "\" fill=\"#4878cf\"/>\n";
        out << "    <rect x=\"" << gx + bar_w + 8 << "\" y=\"" << base_y - sh << "\" width=\"" << bar_w
            << "\" height=\"" << sh << "\" fill=\"#6acc65\"/>\n";
        out << "    <text x=\"" << gx << "\" y=\"" << base_y + 20 << "\" font-family=\"sans-serif\" font-size=\"13\">"
            << s << "</text>\n";
        out << "    <text x=\"" << gx << "\" y=\"" << base_y + 38 << "\" font-family=\"sans-serif\" font-size=\"11\">T "
            << sig6(tval) << " / S " << sig6(sval) << "</text>\n";
        out << "  </g>\n";
        gx += group_w;
    }
    out << "  <rect x=\"470\" y=\"40\" width=\"12\" height=\"12\" fill=\"#4878cf\"/>\n";
    out << "  <text x=\"488\" y=\"51\" font-family=\"sans-serif\" font-size=\"12\">teacher</text>\n";
    out << "  <rect x=\"470\" y=\"60\" width=\"12\" height=\"12\" fill=\"#6acc65\"/>\n";
    out << "  <text x=\"488\" y=\"71\" font-family=\"sans-serif\" font-size=\"12\">student</text>\n";
    out << "</svg>\n";
}

void write_fg_means_csv(const std::vector<DiffMapStats>& stats, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("report: cannot write " + path);
    out << "id,teacher_fg,student_fg,diff_inside,diff_outside\n";
    for (const auto& s : stats) {
        out << s.id << "," << sig6(s.teacher_fg) << "," << sig6(s.student_fg) << "," << sig6(s.diff_inside)
            << "," << sig6(s.diff_outside) << "\n";
    }
}

}  // namespace unlearn
