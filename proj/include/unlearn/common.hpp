#pragma once

#include <stdexcept>
#include <string>

namespace unlearn {

enum class Task { segmentation, classification };

inline std::string task_name(Task t) {
    return t == Task::segmentation ? "segmentation" : "classification";
}
inline Task task_from_name(const std::string& s) {
    if (s == "segmentation" || s == "seg") return Task::segmentation;
    if (s == "classification" || s == "cls") return Task::classification;
    throw std::runtime_error("unknown task '" + s + "' (expected seg or cls)");
}

// error categories the CLI maps to exit codes
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ThresholdError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace unlearn
