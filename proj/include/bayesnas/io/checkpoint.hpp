#pragma once

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "bayesnas/autodiff/adam.hpp"
#include "bayesnas/autodiff/tensor.hpp"
#include "bayesnas/error.hpp"
#include "json.hpp"

namespace bayesnas {

inline constexpr int kCheckpointVersion = 1;

struct ParamBlob {
  Shape shape;
  std::vector<double> values;

  bool operator==(const ParamBlob&) const = default;
};

using ParamGroup = std::map<std::string, ParamBlob>;

struct OptimizerSnapshot {
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::map<std::string, AdamMoments> state;
};

/// Parameters, optimizer states and metadata of one artifact. Stored as a
/// JSON manifest at `path` plus a little-endian float64 blob at `path.bin`.
struct Checkpoint {
  int format_version = kCheckpointVersion;
  std::string kind;  // "vae", "search", "model"
  std::uint64_t seed = 0;
  std::map<std::string, ParamGroup> groups;
  std::map<std::string, OptimizerSnapshot> optimizers;
  nlohmann::json selection;
  nlohmann::json metadata = nlohmann::json::object();
};

inline ParamGroup capture(const std::vector<NamedTensor>& params) {
  ParamGroup g;
  for (const auto& p : params) g[p.name] = {p.tensor.shape(), p.tensor.values()};
  return g;
}

/// Copies stored values into existing tensors of the same names and shapes.
inline void restore_into(const ParamGroup& g, const std::vector<NamedTensor>& params, const std::string& what) {
  if (g.size() != params.size()) {
    throw DataError(what + ": checkpoint holds " + std::to_string(g.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = g.find(p.name);
    if (it == g.end()) throw DataError(what + ": tensor '" + p.name + "' missing from checkpoint");
    if (it->second.shape != p.tensor.shape()) {
      throw DataError(what + ": tensor '" + p.name + "' has shape " + shape_str(it->second.shape) + ", expected " +
                      shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_data();
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
  }
}

inline OptimizerSnapshot snapshot(const Adam& a) { return {a.lr(), a.beta1(), a.beta2(), a.eps(), a.state()}; }

inline Adam restore_optimizer(const OptimizerSnapshot& s) {
  Adam a(s.lr, s.beta1, s.beta2, s.eps);
  a.state() = s.state;
  return a;
}

namespace detail {

class BlobWriter {
 public:
  std::size_t put(const std::vector<double>& v) {
    const std::size_t off = count_;
    for (double d : v) {
      std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
      for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    count_ += v.size();
    return off;
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
  std::size_t count_ = 0;
};

inline std::vector<double> blob_read(const std::string& bytes, std::size_t offset, std::size_t count,
                                     const std::string& path) {
  if ((offset + count) * 8 > bytes.size()) throw DataError("checkpoint blob '" + path + "' is truncated");
  std::vector<double> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= std::uint64_t{static_cast<unsigned char>(bytes[(offset + k) * 8 + static_cast<std::size_t>(i)])} << (8 * i);
    out[k] = std::bit_cast<double>(bits);
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  detail::BlobWriter blob;
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [gname, g] : ck.groups) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, p] : g) {
      entries.push_back({{"name", name}, {"shape", p.shape}, {"offset", blob.put(p.values)}, {"count", p.values.size()}});
    }
    groups[gname] = entries;
  }
  nlohmann::json opts = nlohmann::json::object();
  for (const auto& [oname, o] : ck.optimizers) {
    nlohmann::json states = nlohmann::json::array();
    for (const auto& [name, s] : o.state) {
      const std::size_t om = blob.put(s.m);
      const std::size_t ov = blob.put(s.v);
      states.push_back({{"name", name}, {"step", s.step}, {"offset_m", om}, {"offset_v", ov}, {"count", s.m.size()}});
    }
    opts[oname] = {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}, {"state", states}};
  }
  const std::string blob_path = path + ".bin";
  nlohmann::json manifest = {{"format_version", ck.format_version},
                             {"kind", ck.kind},
                             {"seed", ck.seed},
                             {"created", detail::utc_timestamp()},
                             {"blob", std::filesystem::path(blob_path).filename().string()},
                             {"groups", groups},
                             {"optimizers", opts},
                             {"selection", ck.selection},
                             {"metadata", ck.metadata}};
  {
    std::ofstream b(blob_path, std::ios::binary);
    if (!b) throw DataError("cannot write '" + blob_path + "'");
    b.write(blob.bytes().data(), static_cast<std::streamsize>(blob.bytes().size()));
    if (!b) throw DataError("failed writing '" + blob_path + "'");
  }
  std::ofstream m(path);
  if (!m) throw DataError("cannot write '" + path + "'");
  m << manifest.dump(2) << "\n";
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream m(path);
  if (!m) throw DataError("cannot open checkpoint '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(m, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw DataError("checkpoint manifest '" + path + "' is not valid JSON");
  Checkpoint ck;
  try {
    ck.format_version = j.at("format_version").get<int>();
    if (ck.format_version != kCheckpointVersion) {
      throw DataError("checkpoint '" + path + "' has format version " + std::to_string(ck.format_version) +
                      ", this build reads version " + std::to_string(kCheckpointVersion));
    }
    ck.kind = j.at("kind").get<std::string>();
    ck.seed = j.at("seed").get<std::uint64_t>();
    ck.selection = j.value("selection", nlohmann::json());
    ck.metadata = j.value("metadata", nlohmann::json::object());
    const std::string blob_path =
        (std::filesystem::path(path).parent_path() / j.at("blob").get<std::string>()).string();
    std::ifstream b(blob_path, std::ios::binary);
    if (!b) throw DataError("cannot open checkpoint blob '" + blob_path + "'");
    const std::string bytes((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    for (const auto& [gname, entries] : j.at("groups").items()) {
      ParamGroup& g = ck.groups[gname];
      for (const auto& e : entries) {
        ParamBlob p;
        p.shape = e.at("shape").get<Shape>();
        const auto count = e.at("count").get<std::size_t>();
        if (count != shape_numel(p.shape)) throw DataError("checkpoint tensor count does not match its shape");
        p.values = detail::blob_read(bytes, e.at("offset").get<std::size_t>(), count, blob_path);
        g[e.at("name").get<std::string>()] = std::move(p);
      }
    }
    for (const auto& [oname, o] : j.at("optimizers").items()) {
      OptimizerSnapshot s{o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                          o.at("eps").get<double>(), {}};
      for (const auto& e : o.at("state")) {
        const auto count = e.at("count").get<std::size_t>();
        AdamMoments mo;
        mo.step = e.at("step").get<std::uint64_t>();
        mo.m = detail::blob_read(bytes, e.at("offset_m").get<std::size_t>(), count, blob_path);
        mo.v = detail::blob_read(bytes, e.at("offset_v").get<std::size_t>(), count, blob_path);
        s.state[e.at("name").get<std::string>()] = std::move(mo);
      }
      ck.optimizers[oname] = std::move(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint manifest '" + path + "': " + e.what());
  }
  return ck;
}

}  // namespace bayesnas
