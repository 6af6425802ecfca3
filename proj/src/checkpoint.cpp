// Copyright 2026 The keyauth Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "keyauth/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "keyauth/error.hpp"
#include "keyauth/key_codec.hpp"

namespace keyauth {

namespace {

constexpr char kMagic[8] = {'K', 'A', 'C', 'K', 'P', 'T', '\0', '\n'};

enum class DType : std::uint8_t { f32 = 0, i64 = 1 };

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw FormatError("checkpoint truncated");
    return v;
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is, std::uint64_t limit) {
    const auto n = get<std::uint64_t>(is);
    if (n > limit) throw FormatError("checkpoint string length out of range");
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw FormatError("checkpoint truncated");
    return s;
}

}  // namespace

const torch::Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : arrays)
        if (n == name) return &t;
    return nullptr;
}

NamedTensors Checkpoint::section(const std::string& prefix) const {
    NamedTensors out;
    const std::string p = prefix + ".";
    for (const auto& [n, t] : arrays)
        if (n.rfind(p, 0) == 0) out.emplace_back(n.substr(p.size()), t);
    return out;
}

void Checkpoint::add_section(const std::string& prefix, const NamedTensors& tensors) {
    for (const auto& [n, t] : tensors) arrays.emplace_back(prefix + "." + n, t);
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot write checkpoint " + path.string());
        os.write(kMagic, sizeof(kMagic));
        put<std::uint32_t>(os, Checkpoint::kFormatVersion);
        put_string(os, ckpt.meta.dump());
        put<std::uint64_t>(os, ckpt.arrays.size());
        for (const auto& [name, tensor] : ckpt.arrays) {
            put_string(os, name);
            const bool is_int = tensor.scalar_type() == torch::kInt64;
            const auto t = (is_int ? tensor : tensor.to(torch::kFloat32)).detach().cpu().contiguous();
            put<std::uint8_t>(os, static_cast<std::uint8_t>(is_int ? DType::i64 : DType::f32));
            put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
            for (auto d : t.sizes()) put<std::int64_t>(os, d);
            const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
            put<std::uint64_t>(os, nbytes);
            os.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        }
        if (!os) throw FormatError("short write on checkpoint " + path.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot read checkpoint " + path.string());
    char magic[sizeof(kMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw FormatError(path.string() + " is not a keyauth checkpoint");
    const auto version = get<std::uint32_t>(is);
    if (version != Checkpoint::kFormatVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    try {
        ckpt.meta = nlohmann::json::parse(get_string(is, 1ULL << 26));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint metadata: ") + e.what());
    }
    const auto count = get<std::uint64_t>(is);
    for (std::uint64_t k = 0; k < count; ++k) {
        auto name = get_string(is, 4096);
        const auto dtype = static_cast<DType>(get<std::uint8_t>(is));
        const auto ndim = get<std::uint32_t>(is);
        if (ndim > 8) throw FormatError("checkpoint array rank out of range");
        std::vector<std::int64_t> shape(ndim);
        for (auto& d : shape) d = get<std::int64_t>(is);
        const auto nbytes = get<std::uint64_t>(is);
        const auto opts = torch::TensorOptions().dtype(dtype == DType::i64 ? torch::kInt64 : torch::kFloat32);
        auto t = torch::empty(shape, opts);
        if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size()))
            throw FormatError("checkpoint array '" + name + "' size mismatch");
        is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        if (!is) throw FormatError("checkpoint truncated in '" + name + "'");
        ckpt.arrays.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

NamedTensors module_state(const torch::nn::Module& module) {
    NamedTensors out;
    for (const auto& p : module.named_parameters(true)) out.emplace_back(p.key(), p.value().detach().clone());
    for (const auto& b : module.named_buffers(true)) out.emplace_back(b.key(), b.value().detach().clone());
    return out;
}

void load_module_state(torch::nn::Module& module, const NamedTensors& state) {
    torch::NoGradGuard guard;
    auto assign = [&](const std::string& name, torch::Tensor& dst) {
        for (const auto& [n, t] : state)
            if (n == name) {
                if (!dst.sizes().equals(t.sizes()))
                    throw FormatError("state '" + name + "' has a mismatched shape");
                dst.copy_(t);
                return;
            }
        throw FormatError("state is missing '" + name + "'");
    };
    for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
    for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

std::string module_digest(const torch::nn::Module& module) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : module_state(module)) {
        h = fnv1a64(name, h);
        const auto c = t.contiguous();
        h = fnv1a64(std::string_view(static_cast<const char*>(c.data_ptr()),
                                     static_cast<std::size_t>(c.numel() * c.element_size())),
                    h);
    }
    return hex64(h);
}

}  // namespace keyauth
