#include "unlearn/config.hpp"

#include <fstream>
#include <sstream>

namespace unlearn {

std::string forget_objective_name(ForgetObjective f) {
    switch (f) {
        case ForgetObjective::background: return "background";
        case ForgetObjective::ascent_composite: return "ascent-composite";
        case ForgetObjective::random_label: return "random-label";
        default: return "entropy";
    }
}

ForgetObjective forget_objective_from(const std::string& s) {
    if (s == "background") return ForgetObjective::background;
    if (s == "ascent-composite") return ForgetObjective::ascent_composite;
    if (s == "random-label") return ForgetObjective::random_label;
    if (s == "entropy") return ForgetObjective::entropy;
    throw UsageError("unknown forget objective '" + s + "'");
}

namespace {

std::string scope_name(Scope s) { return s == Scope::all_adapters ? "all-adapters" : "head-adapters-only"; }

Scope scope_from(const std::string& s) {
    if (s == "all-adapters" || s == "all") return Scope::all_adapters;
    if (s == "head-adapters-only" || s == "head") return Scope::head_only;
    throw UsageError("unknown trainable scope '" + s + "'");
}

std::string phase_kind_name(PhaseKind k) {
    switch (k) {
        case PhaseKind::joint: return "joint";
        case PhaseKind::ascent: return "ascent";
        default: return "restore";
    }
}

PhaseKind phase_kind_from(const std::string& s) {
    if (s == "joint") return PhaseKind::joint;
    if (s == "ascent") return PhaseKind::ascent;
    if (s == "restore") return PhaseKind::restore;
    throw UsageError("unknown phase '" + s + "'");
}

}  // namespace

// "<kind>:<epochs>:<scope>[@lr]"
std::string phase_str(const Phase& p) {
    std::ostringstream os;
    os << phase_kind_name(p.kind) << ":" << p.epochs << ":" << scope_name(p.scope);
    if (p.lr > 0.0) os << "@" << p.lr;
    return os.str();
}

Phase phase_from_str(const std::string& s) {
    Phase p;
    std::string body = s;
    auto at = body.find('@');
    if (at != std::string::npos) {
        p.lr = std::stod(body.substr(at + 1));
        body = body.substr(0, at);
    }
    auto c1 = body.find(':');
    auto c2 = body.find(':', c1 == std::string::npos ? std::string::npos : c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
        throw UsageError("malformed phase '" + s + "' (want kind:epochs:scope[@lr])");
    p.kind = phase_kind_from(body.substr(0, c1));
    p.epochs = std::stoi(body.substr(c1 + 1, c2 - c1 - 1));
    p.scope = scope_from(body.substr(c2 + 1));
    if (p.epochs < 1) throw UsageError("phase '" + s + "': epochs must be >= 1");
    return p;
}

std::vector<Phase> UnlearnConfig::effective_schedule() const {
    if (!schedule.empty()) return schedule;
    if (mode == "joint") {
        return {Phase{PhaseKind::joint, epochs, Scope::all_adapters, lr}};
    }
    if (mode == "two-phase") {
        return {Phase{PhaseKind::ascent, ascent_epochs, Scope::all_adapters, ascent_lr > 0 ? ascent_lr : lr},
                Phase{PhaseKind::restore, restore_epochs, Scope::head_only, restore_lr > 0 ? restore_lr : lr}};
    }
    throw UsageError("unknown unlearn mode '" + mode + "' (want two-phase or joint)");
}

void UnlearnConfig::validate() const {
    weights.validate();
    if (lr <= 0.0) throw UsageError("config: lr must be > 0");
    if (batch_size < 1 || forget_batch_size < 1) throw UsageError("config: batch sizes must be >= 1");
    if (lora.rank < 1) throw UsageError("config: lora rank must be >= 1");
    if (lora.dropout < 0.0 || lora.dropout >= 1.0) throw UsageError("config: lora dropout must be in [0,1)");
    if (threads < 1) throw UsageError("config: threads must be >= 1");
    auto sched = effective_schedule();
    if (sched.empty()) throw UsageError("config: schedule is empty");
    if (task == Task::classification && forget_objective == ForgetObjective::ascent_composite && mode != "two-phase") {
        // tolerated; the objective check happens where the loss is built
    }
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError("config: malformed line " + std::to_string(lineno) + " in " + path + ": '" + line + "'");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv) {
    std::ofstream out(path);
    if (!out) throw IoError("config: cannot write " + path);
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

bool to_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw UsageError("config: key '" + key + "' wants a boolean, got '" + v + "'");
}

}  // namespace

void apply_config(UnlearnConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
        if (key == "task") cfg.task = task_from_name(val);
        else if (key == "lr") cfg.lr = std::stod(val);
        else if (key == "batch_size") cfg.batch_size = std::stoi(val);
        else if (key == "epochs") cfg.epochs = std::stoi(val);
        else if (key == "mode") cfg.mode = val;
        else if (key == "schedule") {
            cfg.schedule.clear();
            if (!val.empty()) {
                std::istringstream ss(val);
                std::string tok;
                while (std::getline(ss, tok, ',')) cfg.schedule.push_back(phase_from_str(tok));
            }
        } else if (key == "forget_objective") cfg.forget_objective = forget_objective_from(val);
        else if (key == "alpha_kd") cfg.weights.alpha_kd = std::stod(val);
        else if (key == "beta_guard") cfg.weights.beta_guard = std::stod(val);
        else if (key == "lambda_forget") cfg.weights.lambda_forget = std::stod(val);
        else if (key == "alpha_flip") cfg.weights.alpha_flip = std::stod(val);
        else if (key == "lambda_unc") cfg.weights.lambda_unc = std::stod(val);
        else if (key == "lambda_rep") cfg.weights.lambda_rep = std::stod(val);
        else if (key == "lambda_mean") cfg.weights.lambda_mean = std::stod(val);
        else if (key == "lambda_tv") cfg.weights.lambda_tv = std::stod(val);
        else if (key == "gamma_des") cfg.weights.gamma_des = std::stod(val);
        else if (key == "lambda_fg_guard") cfg.weights.lambda_fg_guard = std::stod(val);
        else if (key == "temperature") cfg.weights.temperature = std::stod(val);
        else if (key == "teacher_conf_threshold") cfg.weights.teacher_conf_threshold = std::stod(val);
        else if (key == "lora_r") cfg.lora.rank = std::stoi(val);
        else if (key == "lora_alpha") cfg.lora.alpha = std::stod(val);
        else if (key == "lora_dropout") cfg.lora.dropout = std::stod(val);
        else if (key == "lora_policy") {
            cfg.lora.policy.clear();
            std::istringstream ss(val);
            std::string tok;
            while (std::getline(ss, tok, '+')) cfg.lora.policy.push_back(tok);
        } else if (key == "seed") cfg.seed = std::stoull(val);
        else if (key == "ascent_epochs") cfg.ascent_epochs = std::stoi(val);
        else if (key == "restore_epochs") cfg.restore_epochs = std::stoi(val);
        else if (key == "ascent_lr") cfg.ascent_lr = std::stod(val);
        else if (key == "restore_lr") cfg.restore_lr = std::stod(val);
        else if (key == "forget_batch_size") cfg.forget_batch_size = std::stoi(val);
        else if (key == "restore_supervised") cfg.restore_supervised = to_bool(val, key);
        else if (key == "debug_checks") cfg.debug_checks = to_bool(val, key);
        else if (key == "eval_every") cfg.eval_every = std::stoi(val);
        else if (key == "threads") cfg.threads = std::stoi(val);
        else if (key.rfind("teacher_", 0) == 0 || key == "val_threshold") continue;  // teacher keys
        else throw UsageError("config: unknown key '" + key + "'");
    }
}

void apply_config(TeacherConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [key, val] : kv) {
        if (key == "teacher_lr") cfg.lr = std::stod(val);
        else if (key == "teacher_epochs") cfg.epochs = std::stoi(val);
        else if (key == "teacher_batch_size") cfg.batch_size = std::stoi(val);
        else if (key == "teacher_seed") cfg.seed = std::stoull(val);
        else if (key == "val_threshold") cfg.val_threshold = std::stod(val);
        else if (key == "threads") cfg.threads = std::stoi(val);
        // remaining keys belong to the unlearn config and are checked there
    }
}

std::map<std::string, std::string> to_kv(const UnlearnConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["task"] = task_name(cfg.task);
    kv["lr"] = fmt(cfg.lr);
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["epochs"] = std::to_string(cfg.epochs);
    kv["mode"] = cfg.mode;
    if (!cfg.schedule.empty()) {
        std::string s;
        for (size_t i = 0; i < cfg.schedule.size(); ++i) {
            if (i) s += ",";
            s += phase_str(cfg.schedule[i]);
        }
        kv["schedule"] = s;
    }
    kv["forget_objective"] = forget_objective_name(cfg.forget_objective);
    kv["alpha_kd"] = fmt(cfg.weights.alpha_kd);
    kv["beta_guard"] = fmt(cfg.weights.beta_guard);
    kv["lambda_forget"] = fmt(cfg.weights.lambda_forget);
    kv["alpha_flip"] = fmt(cfg.weights.alpha_flip);
    kv["lambda_unc"] = fmt(cfg.weights.lambda_unc);
    kv["lambda_rep"] = fmt(cfg.weights.lambda_rep);
    kv["lambda_mean"] = fmt(cfg.weights.lambda_mean);
    kv["lambda_tv"] = fmt(cfg.weights.lambda_tv);
    kv["gamma_des"] = fmt(cfg.weights.gamma_des);
    kv["lambda_fg_guard"] = fmt(cfg.weights.lambda_fg_guard);
    kv["temperature"] = fmt(cfg.weights.temperature);
    kv["teacher_conf_threshold"] = fmt(cfg.weights.teacher_conf_threshold);
    kv["lora_r"] = std::to_string(cfg.lora.rank);
    kv["lora_alpha"] = fmt(cfg.lora.alpha);
    kv["lora_dropout"] = fmt(cfg.lora.dropout);
    std::string pol;
    for (size_t i = 0; i < cfg.lora.policy.size(); ++i) {
        if (i) pol += "+";
        pol += cfg.lora.policy[i];
    }
    kv["lora_policy"] = pol;
    kv["seed"] = std::to_string(cfg.seed);
    kv["ascent_epochs"] = std::to_string(cfg.ascent_epochs);
    kv["restore_epochs"] = std::to_string(cfg.restore_epochs);
    kv["ascent_lr"] = fmt(cfg.ascent_lr);
    kv["restore_lr"] = fmt(cfg.restore_lr);
    kv["forget_batch_size"] = std::to_string(cfg.forget_batch_size);
    kv["restore_supervised"] = cfg.restore_supervised ? "true" : "false";
    kv["debug_checks"] = cfg.debug_checks ? "true" : "false";
    kv["eval_every"] = std::to_string(cfg.eval_every);
    kv["threads"] = std::to_string(cfg.threads);
    return kv;
}

std::map<std::string, std::string> to_kv(const TeacherConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["teacher_lr"] = fmt(cfg.lr);
    kv["teacher_epochs"] = std::to_string(cfg.epochs);
    kv["teacher_batch_size"] = std::to_string(cfg.batch_size);
    kv["teacher_seed"] = std::to_string(cfg.seed);
    kv["val_threshold"] = fmt(cfg.val_threshold);
    return kv;
}

}  // namespace unlearn
