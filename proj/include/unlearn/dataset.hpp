#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "unlearn/common.hpp"
#include "unlearn/tensor.hpp"

namespace unlearn {

enum class SplitTag { retain, forget, val };

std::string split_name(SplitTag s);
SplitTag split_from_name(const std::string& s, const std::string& id_for_error = "");

enum class ForgetMode { random_pick, by_morphology };

struct GenSpec {
    int count = 200;
    int height = 32;
    int width = 32;
    int lesion_min = 1;
    int lesion_max = 3;
    double radius_min = 0.10;  // fraction of height
    double radius_max = 0.26;
    double noise_sigma = 0.04;
    ForgetMode forget_mode = ForgetMode::random_pick;
    double forget_ratio = 0.10;
    int val_count = 40;
    int classes = 3;  // classification only
    uint64_t seed = 7;

    void validate() const;
};

struct Item {
    std::string id;
    Tensor image;  // [1,H,W] in [0,1]
    Tensor mask;   // [1,H,W] binary; undefined for classification
    int label = -1;
    SplitTag split = SplitTag::retain;
};

struct SplitDataset {
    Task task = Task::segmentation;
    GenSpec spec;
    std::vector<Item> items;

    std::vector<std::string> ids_of(SplitTag split) const;
    const Item& item(const std::string& id) const;
    int height() const { return spec.height; }
    int width() const { return spec.width; }
};

SplitDataset generate(const GenSpec& spec);
SplitDataset generate_cls(const GenSpec& spec);

// directory layout: images/<id>.pgm, masks/<id>.pgm, manifest.tsv, genspec.txt
void save(const SplitDataset& ds, const std::string& dir);
SplitDataset load(const std::string& dir);

// checks split disjointness/exhaustiveness, forget fraction, mask validity
void validate(const SplitDataset& ds);

struct Batch {
    std::vector<std::string> ids;
    Tensor images;  // [B,1,H,W]
    Tensor masks;   // [B,1,H,W] (segmentation)
    std::vector<int> labels;
};

// expected split guards against forget-set leakage into retain/val batches
Batch make_batch(const SplitDataset& ds, const std::vector<std::string>& ids, SplitTag expected_split);
Batch make_batch_mixed(const SplitDataset& ds, const std::vector<std::string>& ids);

// 8-bit binary PGM (P5), maxval 255
void write_pgm(const std::string& path, int width, int height, const std::vector<uint8_t>& bytes);
void read_pgm(const std::string& path, int& width, int& height, std::vector<uint8_t>& bytes);

}  // namespace unlearn
