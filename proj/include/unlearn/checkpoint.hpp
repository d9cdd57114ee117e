#pragma once

#include <string>
#include <vector>

#include "unlearn/lora.hpp"
#include "unlearn/nets.hpp"

namespace unlearn {

// Binary container: magic "ERNET1", then for each entry
//   u32 name length, name bytes, tag byte, u32 rank, u32 extents..., f32 payload
// (all integers little-endian). Save -> load -> save is byte-identical.
struct CkptEntry {
    std::string name;
    char tag = 'M';
    Shape shape;
    std::vector<float> data;
};

void write_container(const std::string& path, const std::vector<CkptEntry>& entries);
std::vector<CkptEntry> read_container(const std::string& path);

void save_net(const SegNet& net, const std::string& path);
void save_net(const ClsNet& net, const std::string& path);
SegNet load_segnet(const std::string& path);
ClsNet load_clsnet(const std::string& path);

void save_adapters(const AdapterSet& adapters, const std::string& path);
AdapterSet load_adapters(const std::string& path, const SegNet& host);
AdapterSet load_adapters(const std::string& path, const ClsNet& host);

}  // namespace unlearn
