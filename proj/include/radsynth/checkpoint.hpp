#pragma once

// Single-file binary archive: versioned magic, JSON metadata, then named raw
// double tensors. Writes are atomic (temp file + rename).

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "radsynth/errors.hpp"
#include "radsynth/nn.hpp"
#include "radsynth/tensor.hpp"

namespace radsynth {

class Archive {
  public:
    nlohmann::json meta = nlohmann::json::object();
    std::map<std::string, Tensor> tensors;

    void put(const std::string& name, const Tensor& t) { tensors[name] = t; }

    const Tensor& get(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw IoError("archive missing tensor: " + name);
        return it->second;
    }

    void load_into(const std::string& name, Tensor& dst) const {
        const Tensor& src = get(name);
        if (!src.same_shape(dst))
            throw IoError("archive tensor " + name + " has shape " + Tensor::shape_str(src.shape()) +
                          ", expected " + Tensor::shape_str(dst.shape()));
        std::memcpy(dst.data(), src.data(), sizeof(double) * (size_t)src.size());
    }

    void save(const std::string& path) const {
        const std::string tmp = path + ".tmp";
        {
            std::FILE* f = std::fopen(tmp.c_str(), "wb");
            if (!f) throw IoError("cannot write checkpoint: " + tmp);
            auto wr = [&](const void* p, size_t n) {
                if (std::fwrite(p, 1, n, f) != n) {
                    std::fclose(f);
                    throw IoError("short write: " + tmp);
                }
            };
            wr(kMagic, 8);
            const std::string meta_s = meta.dump();
            const std::uint64_t meta_len = meta_s.size();
            wr(&meta_len, 8);
            wr(meta_s.data(), meta_s.size());
            const std::uint64_t count = tensors.size();
            wr(&count, 8);
            for (const auto& [name, t] : tensors) {
                const std::uint32_t name_len = (std::uint32_t)name.size();
                wr(&name_len, 4);
                wr(name.data(), name.size());
                const std::uint32_t nd = (std::uint32_t)t.ndim();
                wr(&nd, 4);
                for (int i = 0; i < t.ndim(); ++i) {
                    const std::int32_t d = t.dim(i);
                    wr(&d, 4);
                }
                const std::uint64_t n = (std::uint64_t)t.size();
                wr(&n, 8);
                wr(t.data(), sizeof(double) * n);
            }
            std::fclose(f);
        }
        std::filesystem::rename(tmp, path);
    }

    static Archive load(const std::string& path) {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw IoError("cannot read checkpoint: " + path);
        Archive a;
        try {
            auto rd = [&](void* p, size_t n) {
                if (std::fread(p, 1, n, f) != n) throw IoError("truncated checkpoint: " + path);
            };
            char magic[8];
            rd(magic, 8);
            if (std::memcmp(magic, kMagic, 8) != 0)
                throw IoError("bad checkpoint magic (wrong or corrupt file): " + path);
            std::uint64_t meta_len = 0;
            rd(&meta_len, 8);
            std::string meta_s(meta_len, '\0');
            rd(meta_s.data(), meta_len);
            a.meta = nlohmann::json::parse(meta_s);
            std::uint64_t count = 0;
            rd(&count, 8);
            for (std::uint64_t k = 0; k < count; ++k) {
                std::uint32_t name_len = 0;
                rd(&name_len, 4);
                std::string name(name_len, '\0');
                rd(name.data(), name_len);
                std::uint32_t nd = 0;
                rd(&nd, 4);
                std::vector<int> shape(nd);
                for (auto& d : shape) {
                    std::int32_t v = 0;
                    rd(&v, 4);
                    d = v;
                }
                std::uint64_t n = 0;
                rd(&n, 8);
                Tensor t(shape);
                if ((std::uint64_t)t.size() != n) throw IoError("tensor size mismatch in " + path);
                rd(t.data(), sizeof(double) * n);
                a.tensors.emplace(std::move(name), std::move(t));
            }
        } catch (...) {
            std::fclose(f);
            throw;
        }
        std::fclose(f);
        return a;
    }

  private:
    static constexpr const char kMagic[9] = "RSARCH01";
};

// Parameter/buffer bridging: spectral state rides along under .sn_u/.sn_v.
inline void archive_params(Archive& a, const std::vector<nn::Parameter*>& ps) {
    for (const auto* p : ps) {
        a.put(p->name, p->value);
        if (p->spectral) {
            a.put(p->name + ".sn_u", p->sn_u);
            a.put(p->name + ".sn_v", p->sn_v);
        }
    }
}

inline void restore_params(const Archive& a, const std::vector<nn::Parameter*>& ps) {
    for (auto* p : ps) {
        a.load_into(p->name, p->value);
        if (p->spectral) {
            a.load_into(p->name + ".sn_u", p->sn_u);
            a.load_into(p->name + ".sn_v", p->sn_v);
        }
    }
}

inline void archive_buffers(Archive& a, const std::vector<std::pair<std::string, Tensor*>>& bufs) {
    for (const auto& [name, t] : bufs) a.put(name, *t);
}

inline void restore_buffers(const Archive& a, const std::vector<std::pair<std::string, Tensor*>>& bufs) {
    for (const auto& [name, t] : bufs) a.load_into(name, *t);
}

inline void archive_adam(Archive& a, const std::string& prefix, const nn::Adam& opt) {
    a.meta[prefix + ".t"] = opt.t;
    for (size_t i = 0; i < opt.m.size(); ++i) {
        a.put(prefix + ".m." + std::to_string(i), opt.m[i]);
        a.put(prefix + ".v." + std::to_string(i), opt.v[i]);
    }
}

inline void restore_adam(const Archive& a, const std::string& prefix, nn::Adam& opt) {
    opt.t = a.meta.at(prefix + ".t").get<long long>();
    for (size_t i = 0; i < opt.m.size(); ++i) {
        a.load_into(prefix + ".m." + std::to_string(i), opt.m[i]);
        a.load_into(prefix + ".v." + std::to_string(i), opt.v[i]);
    }
}

} // namespace radsynth
