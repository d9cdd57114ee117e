#include "unlearn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "unlearn/common.hpp"

namespace unlearn {

namespace {

constexpr char kMagic[6] = {'E', 'R', 'N', 'E', 'T', '1'};

void put_u32(std::ofstream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff), static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("checkpoint: truncated file " + path);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

char tag_for(const std::string& tag) {
    if (tag == "encoder") return 'e';
    if (tag == "decoder") return 'd';
    if (tag == "head") return 'h';
    if (tag == "trunk") return 't';
    return 'M';
}

CkptEntry tensor_entry(const std::string& name, char tag, const Tensor& t) {
    CkptEntry e;
    e.name = name;
    e.tag = tag;
    e.shape = t.shape();
    e.data.resize(static_cast<size_t>(t.numel()));
    const double* p = t.data();
    for (size_t i = 0; i < e.data.size(); ++i) e.data[i] = static_cast<float>(p[i]);
    return e;
}

Tensor entry_tensor(const CkptEntry& e) {
    std::vector<double> v(e.data.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(e.data[i]);
    return Tensor(e.shape, std::move(v));
}

const CkptEntry& find_entry(const std::vector<CkptEntry>& es, const std::string& name, const std::string& path) {
    for (const auto& e : es)
        if (e.name == name) return e;
    throw IoError("checkpoint: missing entry '" + name + "' in " + path);
}

}  // namespace

void write_container(const std::string& path, const std::vector<CkptEntry>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
    out.write(kMagic, 6);
    for (const auto& e : entries) {
        put_u32(out, static_cast<uint32_t>(e.name.size()));
        out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        out.put(e.tag);
        put_u32(out, static_cast<uint32_t>(e.shape.size()));
        int64_t n = 1;
        for (int d : e.shape) {
            put_u32(out, static_cast<uint32_t>(d));
            n *= d;
        }
        if (n != static_cast<int64_t>(e.data.size()))
            throw IoError("checkpoint: entry '" + e.name + "' payload does not match shape");
        out.write(reinterpret_cast<const char*>(e.data.data()),
                  static_cast<std::streamsize>(e.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("checkpoint: write failed for " + path);
}

std::vector<CkptEntry> read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint: cannot open " + path);
    char magic[6];
    in.read(magic, 6);
    if (!in || std::memcmp(magic, kMagic, 6) != 0) throw IoError("checkpoint: bad magic in " + path);
    std::vector<CkptEntry> entries;
    while (true) {
        in.peek();
        if (in.eof()) break;
        CkptEntry e;
        uint32_t name_len = get_u32(in, path);
        if (name_len > 4096) throw IoError("checkpoint: implausible name length in " + path);
        e.name.resize(name_len);
        in.read(e.name.data(), name_len);
        int tag = in.get();
        if (tag == EOF) throw IoError("checkpoint: truncated file " + path);
        e.tag = static_cast<char>(tag);
        uint32_t rank = get_u32(in, path);
        if (rank > 8) throw IoError("checkpoint: implausible rank in " + path);
        int64_t n = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            uint32_t d = get_u32(in, path);
            if (d == 0 || d > (1u << 28)) throw IoError("checkpoint: bad extent in " + path);
            e.shape.push_back(static_cast<int>(d));
            n *= d;
        }
        e.data.resize(static_cast<size_t>(n));
        in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw IoError("checkpoint: truncated payload for '" + e.name + "' in " + path);
        entries.push_back(std::move(e));
    }
    return entries;
}

namespace {

template <typename Net>
std::vector<CkptEntry> net_entries(const Net& net, float kind_id, int p0, int p1, int p2) {
    std::vector<CkptEntry> es;
    CkptEntry arch;
    arch.name = "__arch__";
    arch.tag = 'M';
    arch.shape = {4};
    arch.data = {kind_id, static_cast<float>(p0), static_cast<float>(p1), static_cast<float>(p2)};
    es.push_back(std::move(arch));
    for (const auto& l : net.layers) {
        es.push_back(tensor_entry(l.name + ".w", tag_for(l.tag), l.w));
        es.push_back(tensor_entry(l.name + ".b", tag_for(l.tag), l.b));
    }
    return es;
}

template <typename Net>
void fill_net(Net& net, const std::vector<CkptEntry>& es, const std::string& path) {
    for (auto& l : net.layers) {
        const CkptEntry& w = find_entry(es, l.name + ".w", path);
        const CkptEntry& b = find_entry(es, l.name + ".b", path);
        if (w.shape != l.w.shape() || b.shape != l.b.shape())
            throw IoError("checkpoint: shape mismatch for layer '" + l.name + "' in " + path);
        l.w = entry_tensor(w);
        l.b = entry_tensor(b);
    }
}

}  // namespace

void save_net(const SegNet& net, const std::string& path) {
    write_container(path, net_entries(net, 0.0f, net.width0, net.width1, net.width_bottleneck));
}

void save_net(const ClsNet& net, const std::string& path) {
    write_container(path, net_entries(net, 1.0f, net.width0, net.width1, net.classes));
}

SegNet load_segnet(const std::string& path) {
    auto es = read_container(path);
    const CkptEntry& arch = find_entry(es, "__arch__", path);
    if (arch.data.size() != 4 || arch.data[0] != 0.0f)
        throw IoError("checkpoint: " + path + " does not hold a segmentation net");
    Rng rng(0);
    SegNet net = SegNet::build(static_cast<int>(arch.data[1]), static_cast<int>(arch.data[2]),
                               static_cast<int>(arch.data[3]), rng);
    fill_net(net, es, path);
    return net;
}

ClsNet load_clsnet(const std::string& path) {
    auto es = read_container(path);
    const CkptEntry& arch = find_entry(es, "__arch__", path);
    if (arch.data.size() != 4 || arch.data[0] != 1.0f)
        throw IoError("checkpoint: " + path + " does not hold a classifier net");
    Rng rng(0);
    ClsNet net = ClsNet::build(static_cast<int>(arch.data[1]), static_cast<int>(arch.data[2]),
                               static_cast<int>(arch.data[3]), rng);
    fill_net(net, es, path);
    return net;
}

void save_adapters(const AdapterSet& adapters, const std::string& path) {
    std::vector<CkptEntry> es;
    CkptEntry header;
    std::string tags;
    for (size_t i = 0; i < adapters.policy.size(); ++i) {
        if (i) tags += "+";
        tags += adapters.policy[i];
    }
    header.name = "lora.header:" + tags;
    header.tag = 'M';
    header.shape = {3};
    header.data = {static_cast<float>(adapters.rank), static_cast<float>(adapters.alpha),
                   static_cast<float>(adapters.dropout_p)};
    es.push_back(std::move(header));
    for (const auto& ad : adapters.adapters) {
        es.push_back(tensor_entry(ad.target + ".A", 'a', ad.A));
        es.push_back(tensor_entry(ad.target + ".B", 'a', ad.B));
    }
    write_container(path, es);
}

namespace {

template <typename Net>
AdapterSet load_adapters_impl(const std::string& path, const Net& host) {
    auto es = read_container(path);
    const CkptEntry* header = nullptr;
    for (const auto& e : es) {
        if (e.name.rfind("lora.header:", 0) == 0) {
            header = &e;
            break;
        }
    }
    if (!header || header->data.size() != 3) throw IoError("checkpoint: missing lora header in " + path);
    std::vector<std::string> policy;
    std::string tags = header->name.substr(std::string("lora.header:").size());
    size_t pos = 0;
    while (pos < tags.size()) {
        size_t next = tags.find('+', pos);
        if (next == std::string::npos) next = tags.size();
        policy.push_back(tags.substr(pos, next - pos));
        pos = next + 1;
    }
    int r = static_cast<int>(header->data[0]);
    double alpha = static_cast<double>(header->data[1]);
    double dropout_p = static_cast<double>(header->data[2]);
    AdapterSet set = inject(host, policy, r, alpha, dropout_p, /*seed=*/0);
    for (auto& ad : set.adapters) {
        const CkptEntry& ea = find_entry(es, ad.target + ".A", path);
        const CkptEntry& eb = find_entry(es, ad.target + ".B", path);
        if (ea.shape != ad.A.shape() || eb.shape != ad.B.shape())
            throw IoError("checkpoint: adapter shape mismatch for '" + ad.target + "' in " + path);
        ad.A = entry_tensor(ea);
        ad.A.set_requires_grad(true);
        ad.B = entry_tensor(eb);
        ad.B.set_requires_grad(true);
    }
    return set;
}

}  // namespace

AdapterSet load_adapters(const std::string& path, const SegNet& host) { return load_adapters_impl(path, host); }
AdapterSet load_adapters(const std::string& path, const ClsNet& host) { return load_adapters_impl(path, host); }

}  // namespace unlearn
