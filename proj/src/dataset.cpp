#include "unlearn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace unlearn {

std::string split_name(SplitTag s) {
    switch (s) {
        case SplitTag::retain: return "retain";
        case SplitTag::forget: return "forget";
        default: return "val";
    }
}

SplitTag split_from_name(const std::string& s, const std::string& id_for_error) {
    if (s == "retain") return SplitTag::retain;
    if (s == "forget") return SplitTag::forget;
    if (s == "val") return SplitTag::val;
    throw IoError("dataset: invalid split tag '" + s + "'" +
                  (id_for_error.empty() ? "" : " for id '" + id_for_error + "'"));
}

void GenSpec::validate() const {
    if (count < 3) throw UsageError("genspec: count must be >= 3");
    if (height % 4 != 0 || width % 4 != 0) throw UsageError("genspec: height and width must be divisible by 4");
    if (forget_ratio <= 0.0 || forget_ratio >= 1.0) throw UsageError("genspec: forget_ratio must be in (0,1)");
    if (val_count <= 0 || val_count >= count) throw UsageError("genspec: val_count must be in (0, count)");
    if (lesion_min < 1 || lesion_max < lesion_min) throw UsageError("genspec: invalid lesion count range");
    if (radius_min <= 0.0 || radius_max < radius_min || radius_max > 0.5)
        throw UsageError("genspec: invalid radius range");
    if (classes < 2) throw UsageError("genspec: classes must be >= 2");
    int train_n = count - val_count;
    int n_forget = static_cast<int>(forget_ratio * train_n);
    if (n_forget < 1) throw UsageError("genspec: forget split is empty for this count/ratio");
    if (n_forget >= train_n) throw UsageError("genspec: retain split is empty for this count/ratio");
}

std::vector<std::string> SplitDataset::ids_of(SplitTag split) const {
    std::vector<std::string> out;
    for (const auto& it : items)
        if (it.split == split) out.push_back(it.id);
    return out;
}

const Item& SplitDataset::item(const std::string& id) const {
    for (const auto& it : items)
        if (it.id == id) return it;
    throw std::runtime_error("dataset: no item with id '" + id + "'");
}

namespace {

std::string make_id(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img%04d", i);
    return buf;
}

// forget membership over the training pool; val is always the tail
std::set<int> pick_forget(int train_n, double ratio, uint64_t seed) {
    int n_forget = static_cast<int>(ratio * train_n);
    std::vector<int> idx(static_cast<size_t>(train_n));
    for (int i = 0; i < train_n; ++i) idx[static_cast<size_t>(i)] = i;
    Rng rng(seed ^ 0x9E3779B97F4A7C15ULL);
    rng.shuffle(idx);
    return std::set<int>(idx.begin(), idx.begin() + n_forget);
}

}  // namespace

SplitDataset generate(const GenSpec& spec) {
    spec.validate();
    SplitDataset ds;
    ds.task = Task::segmentation;
    ds.spec = spec;
    int H = spec.height, W = spec.width;
    int train_n = spec.count - spec.val_count;
    std::set<int> forget_ids = pick_forget(train_n, spec.forget_ratio, spec.seed);
    Rng rng(spec.seed);

    for (int i = 0; i < spec.count; ++i) {
        Item item;
        item.id = make_id(i);
        bool in_train = i < train_n;
        bool is_forget = in_train && forget_ids.count(i) > 0;
        item.split = !in_train ? SplitTag::val : (is_forget ? SplitTag::forget : SplitTag::retain);

        Tensor img(Shape{1, H, W});
        Tensor mask(Shape{1, H, W}, 0.0);
        double* pi = img.data();
        double* pm = mask.data();

        // smooth background: base level + directional gradient + slow sinusoid
        double base = rng.uniform(0.18, 0.32);
        double grad_amp = rng.uniform(0.03, 0.10);
        double grad_theta = rng.uniform(0.0, 2.0 * M_PI);
        double wave_amp = rng.uniform(0.02, 0.06);
        double wave_freq = rng.uniform(0.5, 1.5);
        double wave_theta = rng.uniform(0.0, 2.0 * M_PI);
        double wave_phase = rng.uniform(0.0, 2.0 * M_PI);
        double diag = static_cast<double>(std::max(H, W));
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double u = (std::cos(grad_theta) * x + std::sin(grad_theta) * y) / diag;
                double v = (std::cos(wave_theta) * x + std::sin(wave_theta) * y) / diag;
                pi[y * W + x] = base + grad_amp * u + wave_amp * std::sin(2.0 * M_PI * wave_freq * v + wave_phase);
            }
        }

        // bright elliptical lesions; mask is the exact support
        int lesions = rng.uniform_int(spec.lesion_min, spec.lesion_max);
        for (int l = 0; l < lesions; ++l) {
            double cx = rng.uniform(0.2, 0.8) * W;
            double cy = rng.uniform(0.2, 0.8) * H;
            double ra = rng.uniform(spec.radius_min, spec.radius_max) * H;
            double ecc = (spec.forget_mode == ForgetMode::by_morphology)
                             ? (is_forget ? rng.uniform(0.85, 0.95) : rng.uniform(0.0, 0.5))
                             : rng.uniform(0.0, 0.75);
            double rb = ra * std::sqrt(1.0 - ecc * ecc);
            if (rb < 1.2) rb = 1.2;
            double psi = rng.uniform(0.0, M_PI);
            double amp = rng.uniform(0.30, 0.45);
            double cp = std::cos(psi), sp = std::sin(psi);
            for (int y = 0; y < H; ++y) {
                for (int x = 0; x < W; ++x) {
                    double dx = x - cx, dy = y - cy;
                    double ex = (cp * dx + sp * dy) / ra;
                    double ey = (-sp * dx + cp * dy) / rb;
                    double rho2 = ex * ex + ey * ey;
                    if (rho2 <= 1.0) {
                        pi[y * W + x] += amp * (0.35 + 0.65 * (1.0 - rho2));
                        pm[y * W + x] = 1.0;
                    }
                }
            }
        }

        for (int j = 0; j < H * W; ++j) {
            pi[j] += rng.normal(0.0, spec.noise_sigma);
            pi[j] = std::min(1.0, std::max(0.0, pi[j]));
        }

        item.image = img;
        item.mask = mask;
        ds.items.push_back(std::move(item));
    }
    validate(ds);
    return ds;
}

SplitDataset generate_cls(const GenSpec& spec) {
    spec.validate();
    SplitDataset ds;
    ds.task = Task::classification;
    ds.spec = spec;
    int H = spec.height, W = spec.width;
    int train_n = spec.count - spec.val_count;
    std::set<int> forget_ids = pick_forget(train_n, spec.forget_ratio, spec.seed);
    Rng rng(spec.seed);

    for (int i = 0; i < spec.count; ++i) {
        Item item;
        item.id = make_id(i);
        bool in_train = i < train_n;
        item.split = !in_train ? SplitTag::val
                               : (forget_ids.count(i) > 0 ? SplitTag::forget : SplitTag::retain);
        item.label = i % spec.classes;

        // class-specific grating period, geometric spacing from 4 to 16 px
        double expo = spec.classes > 1 ? static_cast<double>(item.label) / (spec.classes - 1) : 0.0;
        double period = 4.0 * std::pow(4.0, expo);
        double theta = rng.uniform(0.0, M_PI);
        double phase = rng.uniform(0.0, 2.0 * M_PI);
        double ct = std::cos(theta), st = std::sin(theta);

        Tensor img(Shape{1, H, W});
        double* pi = img.data();
        for (int y = 0; y < H; ++y) {
            for (int x = 0; x < W; ++x) {
                double v = 0.5 + 0.35 * std::sin(2.0 * M_PI * (ct * x + st * y) / period + phase);
                v += rng.normal(0.0, spec.noise_sigma);
                pi[y * W + x] = std::min(1.0, std::max(0.0, v));
            }
        }
        item.image = img;
        ds.items.push_back(std::move(item));
    }
    validate(ds);
    return ds;
}

void validate(const SplitDataset& ds) {
    std::set<std::string> seen;
    int n_train = 0, n_forget = 0;
    for (const auto& it : ds.items) {
        if (!seen.insert(it.id).second) throw IoError("dataset: duplicate id '" + it.id + "'");
        if (it.split != SplitTag::val) {
            ++n_train;
            if (it.split == SplitTag::forget) ++n_forget;
        }
        if (ds.task == Task::segmentation) {
            if (!it.mask.defined()) throw IoError("dataset: item '" + it.id + "' has no mask");
            const double* m = it.mask.data();
            bool any = false;
            for (int64_t j = 0; j < it.mask.numel(); ++j) {
                if (m[j] != 0.0 && m[j] != 1.0) throw IoError("dataset: mask of '" + it.id + "' is not binary");
                any = any || m[j] == 1.0;
            }
            if (!any) throw IoError("dataset: mask of '" + it.id + "' is empty");
        } else if (it.label < 0 || it.label >= ds.spec.classes) {
            throw IoError("dataset: label of '" + it.id + "' out of range");
        }
    }
    int expect = static_cast<int>(ds.spec.forget_ratio * n_train);
    if (std::abs(n_forget - expect) > 1) {
        throw IoError("dataset: forget fraction mismatch (" + std::to_string(n_forget) + " vs expected " +
                      std::to_string(expect) + ")");
    }
    if (n_forget == 0 || n_forget == n_train) throw IoError("dataset: degenerate forget split");
}

// ---- persistence ----

void write_pgm(const std::string& path, int width, int height, const std::vector<uint8_t>& bytes) {
    if (static_cast<int64_t>(bytes.size()) != static_cast<int64_t>(width) * height)
        throw IoError("pgm: payload size does not match " + std::to_string(width) + "x" + std::to_string(height));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("pgm: cannot open " + path + " for writing");
    out << "P5\n" << width << " " << height << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("pgm: write failed for " + path);
}

void read_pgm(const std::string& path, int& width, int& height, std::vector<uint8_t>& bytes) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("pgm: cannot open " + path);
    std::string magic;
    in >> magic;
    if (magic != "P5") throw IoError("pgm: corrupt header (bad magic) in " + path);
    int maxval = 0;
    in >> width >> height >> maxval;
    if (!in || width <= 0 || height <= 0) throw IoError("pgm: corrupt header (dimensions) in " + path);
    if (maxval != 255) throw IoError("pgm: unsupported maxval " + std::to_string(maxval) + " in " + path);
    in.get();  // single whitespace after header
    bytes.resize(static_cast<size_t>(width) * height);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError("pgm: truncated payload in " + path);
}

namespace {

std::vector<uint8_t> quantize(const Tensor& t) {
    std::vector<uint8_t> out(static_cast<size_t>(t.numel()));
    const double* p = t.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double v = std::min(1.0, std::max(0.0, p[i]));
        out[i] = static_cast<uint8_t>(std::llround(v * 255.0));
    }
    return out;
}

std::string forget_mode_name(ForgetMode m) {
    return m == ForgetMode::random_pick ? "random" : "by-morphology";
}

ForgetMode forget_mode_from(const std::string& s) {
    if (s == "random") return ForgetMode::random_pick;
    if (s == "by-morphology") return ForgetMode::by_morphology;
    throw IoError("genspec: unknown forget_mode '" + s + "'");
}

}  // namespace

void save(const SplitDataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    if (ds.task == Task::segmentation) fs::create_directories(fs::path(dir) / "masks");

    for (const auto& it : ds.items) {
        write_pgm((fs::path(dir) / "images" / (it.id + ".pgm")).string(), ds.spec.width, ds.spec.height,
                  quantize(it.image));
        if (ds.task == Task::segmentation) {
            write_pgm((fs::path(dir) / "masks" / (it.id + ".pgm")).string(), ds.spec.width, ds.spec.height,
                      quantize(it.mask));
        }
    }

    std::ofstream mf((fs::path(dir) / "manifest.tsv").string());
    if (!mf) throw IoError("dataset: cannot write manifest in " + dir);
    for (const auto& it : ds.items) {
        mf << it.id << "\t" << split_name(it.split) << "\t";
        if (ds.task == Task::classification) mf << it.label;
        else mf << "-";
        mf << "\n";
    }

    std::ofstream gf((fs::path(dir) / "genspec.txt").string());
    if (!gf) throw IoError("dataset: cannot write genspec in " + dir);
    const GenSpec& g = ds.spec;
    gf << "task=" << task_name(ds.task) << "\n";
    gf << "count=" << g.count << "\n";
    gf << "height=" << g.height << "\n";
    gf << "width=" << g.width << "\n";
    gf << "lesion_min=" << g.lesion_min << "\n";
    gf << "lesion_max=" << g.lesion_max << "\n";
    gf << "radius_min=" << g.radius_min << "\n";
    gf << "radius_max=" << g.radius_max << "\n";
    gf << "noise_sigma=" << g.noise_sigma << "\n";
    gf << "forget_mode=" << forget_mode_name(g.forget_mode) << "\n";
    gf << "forget_ratio=" << g.forget_ratio << "\n";
    gf << "val_count=" << g.val_count << "\n";
    gf << "classes=" << g.classes << "\n";
    gf << "seed=" << g.seed << "\n";
}

SplitDataset load(const std::string& dir) {
    SplitDataset ds;
    std::ifstream gf((fs::path(dir) / "genspec.txt").string());
    if (!gf) throw IoError("dataset: missing genspec.txt in " + dir);
    std::string line;
    while (std::getline(gf, line)) {
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos) throw IoError("genspec: malformed line '" + line + "'");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        GenSpec& g = ds.spec;
        if (key == "task") ds.task = task_from_name(val);
        else if (key == "count") g.count = std::stoi(val);
        else if (key == "height") g.height = std::stoi(val);
        else if (key == "width") g.width = std::stoi(val);
        else if (key == "lesion_min") g.lesion_min = std::stoi(val);
        else if (key == "lesion_max") g.lesion_max = std::stoi(val);
        else if (key == "radius_min") g.radius_min = std::stod(val);
        else if (key == "radius_max") g.radius_max = std::stod(val);
        else if (key == "noise_sigma") g.noise_sigma = std::stod(val);
        else if (key == "forget_mode") g.forget_mode = forget_mode_from(val);
        else if (key == "forget_ratio") g.forget_ratio = std::stod(val);
        else if (key == "val_count") g.val_count = std::stoi(val);
        else if (key == "classes") g.classes = std::stoi(val);
        else if (key == "seed") g.seed = std::stoull(val);
        else throw IoError("genspec: unknown key '" + key + "'");
    }

    std::ifstream mf((fs::path(dir) / "manifest.tsv").string());
    if (!mf) throw IoError("dataset: missing manifest.tsv in " + dir);
    std::set<std::string> seen;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string id, split, label;
        if (!std::getline(ss, id, '\t') || !std::getline(ss, split, '\t') || !std::getline(ss, label))
            throw IoError("manifest: malformed line '" + line + "'");
        if (!seen.insert(id).second) throw IoError("manifest: duplicate id '" + id + "'");
        Item it;
        it.id = id;
        it.split = split_from_name(split, id);
        if (ds.task == Task::classification) it.label = std::stoi(label);

        std::string img_path = (fs::path(dir) / "images" / (id + ".pgm")).string();
        if (!fs::exists(img_path)) throw IoError("dataset: manifest id '" + id + "' has no image file");
        int w = 0, h = 0;
        std::vector<uint8_t> bytes;
        read_pgm(img_path, w, h, bytes);
        if (w != ds.spec.width || h != ds.spec.height)
            throw IoError("dataset: image '" + id + "' has unexpected size");
        Tensor img(Shape{1, h, w});
        for (size_t i = 0; i < bytes.size(); ++i) img.data()[i] = bytes[i] / 255.0;
        it.image = img;

        if (ds.task == Task::segmentation) {
            std::string mask_path = (fs::path(dir) / "masks" / (id + ".pgm")).string();
            if (!fs::exists(mask_path)) throw IoError("dataset: manifest id '" + id + "' has no mask file");
            read_pgm(mask_path, w, h, bytes);
            Tensor mask(Shape{1, h, w});
            for (size_t i = 0; i < bytes.size(); ++i) mask.data()[i] = bytes[i] > 127 ? 1.0 : 0.0;
            it.mask = mask;
        }
        ds.items.push_back(std::move(it));
    }
    validate(ds);
    return ds;
}

Batch make_batch_mixed(const SplitDataset& ds, const std::vector<std::string>& ids) {
    if (ids.empty()) throw std::runtime_error("make_batch: empty id list");
    int H = ds.spec.height, W = ds.spec.width;
    Batch b;
    b.ids = ids;
    b.images = Tensor(Shape{static_cast<int>(ids.size()), 1, H, W});
    if (ds.task == Task::segmentation) b.masks = Tensor(Shape{static_cast<int>(ids.size()), 1, H, W});
    for (size_t i = 0; i < ids.size(); ++i) {
        const Item& it = ds.item(ids[i]);
        std::copy(it.image.data(), it.image.data() + it.image.numel(),
                  b.images.data() + static_cast<int64_t>(i) * H * W);
        if (ds.task == Task::segmentation) {
            std::copy(it.mask.data(), it.mask.data() + it.mask.numel(),
                      b.masks.data() + static_cast<int64_t>(i) * H * W);
        } else {
            b.labels.push_back(it.label);
        }
    }
    return b;
}

Batch make_batch(const SplitDataset& ds, const std::vector<std::string>& ids, SplitTag expected_split) {
    for (const auto& id : ids) {
        const Item& it = ds.item(id);
        if (it.split != expected_split) {
            throw std::runtime_error("loader: id '" + id + "' belongs to split '" + split_name(it.split) +
                                     "', expected '" + split_name(expected_split) + "'");
        }
    }
    return make_batch_mixed(ds, ids);
}

}  // namespace unlearn
