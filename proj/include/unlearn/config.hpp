#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unlearn/common.hpp"
#include "unlearn/losses.hpp"

namespace unlearn {

enum class ForgetObjective { background, ascent_composite, random_label, entropy };
enum class PhaseKind { joint, ascent, restore };
enum class Scope { all_adapters, head_only };

std::string forget_objective_name(ForgetObjective f);
ForgetObjective forget_objective_from(const std::string& s);

struct Phase {
    PhaseKind kind = PhaseKind::joint;
    int epochs = 1;
    Scope scope = Scope::all_adapters;
    double lr = 0.0;  // 0 -> global lr
};

std::string phase_str(const Phase& p);
Phase phase_from_str(const std::string& s);

struct LoraSpec {
    int rank = 8;
    double alpha = 32.0;
    double dropout = 0.05;
    std::vector<std::string> policy = {"decoder", "head"};
};

struct UnlearnConfig {
    Task task = Task::segmentation;
    double lr = 1e-4;
    int batch_size = 16;
    int epochs = 15;                // joint-mode budget
    std::string mode = "two-phase";  // "two-phase" | "joint"
    std::vector<Phase> schedule;     // empty -> derived from mode
    ForgetObjective forget_objective = ForgetObjective::ascent_composite;
    LossWeights weights;
    LoraSpec lora;
    uint64_t seed = 7;

    // two-phase split and per-phase step sizes; the paper fixes neither
    int ascent_epochs = 5;
    int restore_epochs = 10;
    double ascent_lr = 0.0;   // 0 -> lr
    double restore_lr = 0.0;  // 0 -> lr
    int forget_batch_size = 4;
    bool restore_supervised = true;

    bool debug_checks = true;
    int eval_every = 0;
    int threads = 1;

    std::vector<Phase> effective_schedule() const;
    void validate() const;
};

struct TeacherConfig {
    double lr = 2e-3;
    int epochs = 60;
    int batch_size = 16;
    uint64_t seed = 7;
    double val_threshold = 0.85;  // dice (segmentation) or accuracy (classification)
    int threads = 1;
};

// flat key=value config file; unknown keys are fatal
std::map<std::string, std::string> read_kv_file(const std::string& path);
void write_kv_file(const std::string& path, const std::map<std::string, std::string>& kv);

void apply_config(UnlearnConfig& cfg, const std::map<std::string, std::string>& kv);
void apply_config(TeacherConfig& cfg, const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> to_kv(const UnlearnConfig& cfg);
std::map<std::string, std::string> to_kv(const TeacherConfig& cfg);

}  // namespace unlearn
