#include "moeflow/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "moeflow/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "blob format is little-endian raw bytes");

namespace moeflow {

namespace fs = std::filesystem;
using nlohmann::json;

void save_checkpoint(const std::string& dir, const NamedTensors& tensors) {
    fs::create_directories(dir);
    json manifest;
    manifest["tensors"] = json::array();
    std::ofstream blob(fs::path(dir) / "blob.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write blob: " + dir);
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        json entry;
        entry["name"] = name;
        entry["dtype"] = "f64";
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        entry["count"] = t.size();
        manifest["tensors"].push_back(entry);
        blob.write(reinterpret_cast<const char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)));
        offset += t.size() * sizeof(double);
    }
    if (!blob) throw IoError("short write to blob: " + dir);
    blob.close();
    std::ofstream mf(fs::path(dir) / "manifest", std::ios::trunc);
    if (!mf) throw IoError("cannot write manifest: " + dir);
    mf << manifest.dump(2) << '\n';
}

NamedTensors load_checkpoint(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest");
    if (!mf) throw IoError("cannot read manifest: " + dir);
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw IoError("malformed manifest in " + dir + ": " + e.what());
    }
    std::ifstream blob(fs::path(dir) / "blob.bin", std::ios::binary);
    if (!blob) throw IoError("cannot read blob: " + dir);
    NamedTensors out;
    for (const json& entry : manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        if (dtype != "f64") throw IoError("unsupported dtype '" + dtype + "' for " + name);
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto count = entry.at("count").get<std::size_t>();
        if (Tensor::count(shape) != count)
            throw IoError("manifest shape/count mismatch for " + name);
        Tensor t(shape);
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(reinterpret_cast<char*>(t.data()),
                  static_cast<std::streamsize>(count * sizeof(double)));
        if (blob.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
            throw IoError("short read from blob for " + name);
        out.emplace_back(name, std::move(t));
    }
    return out;
}

const Tensor& checkpoint_get(const NamedTensors& tensors, const std::string& name) {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw ContractError("tensor not in checkpoint: " + name);
}

}  // namespace moeflow
