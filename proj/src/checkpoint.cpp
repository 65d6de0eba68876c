#include "dualpath/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dualpath/errors.hpp"

namespace dualpath {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'P', 'V', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw FormatError("checkpoint truncated in header");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

nlohmann::json read_header(std::istream& in, const std::filesystem::path& path) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError(path.string() + ": not a DPV1 checkpoint");
    }
    const std::uint64_t len = read_u64(in);
    if (len > (1ull << 30)) throw FormatError(path.string() + ": implausible manifest length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError(path.string() + ": truncated manifest");
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad manifest: " + e.what());
    }
}

}  // namespace

template <typename T>
const Tensor<T>& CheckpointData<T>::tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return t;
    throw FormatError("checkpoint has no tensor " + name);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const CheckpointData<T>& data) {
    nlohmann::json manifest;
    manifest["format"] = "DPV1";
    manifest["model_config"] = data.model;
    manifest["train_state"] = data.train_state;
    nlohmann::json entries = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : data.tensors) {
        entries.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"offset", offset}});
        offset += t.size() * sizeof(T);
    }
    manifest["tensors"] = entries;
    manifest["blob_bytes"] = offset;
    const std::string text = manifest.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError("cannot write " + tmp.string());
        out.write(kMagic, 4);
        write_u64(out, text.size());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& [name, t] : data.tensors) {
            out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
        }
        if (!out) throw FormatError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
CheckpointData<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    const nlohmann::json manifest = read_header(in, path);
    CheckpointData<T> data;
    try {
        data.model = manifest.at("model_config").get<ModelConfig>();
        data.train_state = manifest.value("train_state", nlohmann::json::object());
        const std::streampos blob = in.tellg();
        for (const auto& e : manifest.at("tensors")) {
            const std::string dtype = e.at("dtype").get<std::string>();
            if (dtype != dtype_name<T>()) {
                throw FormatError(path.string() + ": tensor " + e.at("name").get<std::string>() + " is " + dtype +
                                  ", expected " + dtype_name<T>());
            }
            Shape shape = e.at("shape").get<Shape>();
            Tensor<T> t(shape);
            in.seekg(blob + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>()));
            if (!in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)))) {
                throw FormatError(path.string() + ": truncated tensor data");
            }
            data.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": bad manifest: " + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return data;
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint " + path.string());
    return read_header(in, path);
}

template struct CheckpointData<float>;
template struct CheckpointData<double>;
template void save_checkpoint<float>(const std::filesystem::path&, const CheckpointData<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const CheckpointData<double>&);
template CheckpointData<float> load_checkpoint<float>(const std::filesystem::path&);
template CheckpointData<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace dualpath
