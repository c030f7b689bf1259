#include "plug/checkpoint.hpp"

#include "json.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

using json = nlohmann::json;

namespace plug {

namespace {

std::string sha256_hex(const unsigned char* data, size_t len) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int md_len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, md, &md_len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 failure");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < md_len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

}  // namespace

std::string frozen_base_hash(const ParamStore<float>& ps) {
  std::vector<unsigned char> bytes;
  for (const auto& p : ps.all()) {
    if (p.name.rfind("enc.", 0) != 0) continue;
    size_t off = bytes.size();
    size_t n = (size_t)p.value.numel() * sizeof(float);
    bytes.resize(off + n);
    std::memcpy(bytes.data() + off, p.value.ptr(), n);
  }
  return sha256_hex(bytes.data(), bytes.size());
}

void save_checkpoint(const std::string& path, const ParamStore<float>& ps,
                     CheckpointMeta meta) {
  meta.frozen_base_hash = frozen_base_hash(ps);

  json table = json::array();
  uint64_t offset = 0;
  for (const auto& p : ps.all()) {
    table.push_back(json{{"name", p.name},
                         {"shape", p.value.shape},
                         {"dtype", "f32"},
                         {"byte_offset", offset}});
    offset += (uint64_t)p.value.numel() * sizeof(float);
  }
  json header{{"magic", "PLUGCKPT"},
              {"version", 1},
              {"stage", meta.stage},
              {"lora", meta.lora},
              {"dual_branch", meta.dual_branch},
              {"refine", meta.refine},
              {"frozen_base_hash", meta.frozen_base_hash},
              {"config", json::parse(run_config_to_json_text(meta.config))},
              {"tensors", table}};
  std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  uint64_t hlen = htext.size();
  out.write((const char*)&hlen, sizeof(hlen));
  out.write(htext.data(), (std::streamsize)htext.size());
  for (const auto& p : ps.all())
    out.write((const char*)p.value.ptr(),
              (std::streamsize)(p.value.numel() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  uint64_t hlen = 0;
  in.read((char*)&hlen, sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), (std::streamsize)hlen);
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  json header = json::parse(htext);
  if (header.at("magic") != "PLUGCKPT") throw std::runtime_error("bad checkpoint magic");
  if (header.at("version") != 1) throw std::runtime_error("unsupported checkpoint version");

  LoadedCheckpoint ck;
  ck.meta.stage = header.at("stage");
  ck.meta.lora = header.at("lora");
  ck.meta.dual_branch = header.at("dual_branch");
  ck.meta.refine = header.at("refine");
  ck.meta.frozen_base_hash = header.at("frozen_base_hash");
  ck.meta.config = run_config_from_json_text(header.at("config").dump());

  uint64_t expect_off = 0;
  for (const auto& t : header.at("tensors")) {
    std::string name = t.at("name");
    std::vector<int> shape = t.at("shape").get<std::vector<int>>();
    if (t.at("dtype") != "f32") throw std::runtime_error("unsupported dtype");
    uint64_t off = t.at("byte_offset");
    if (off != expect_off) throw std::runtime_error("non-contiguous tensor table");
    Tensor<float> v(shape);
    in.read((char*)v.ptr(), (std::streamsize)(v.numel() * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint body: " + path);
    expect_off = off + (uint64_t)v.numel() * sizeof(float);
    ck.params.add(name, std::move(v), name != "prompt.fourier");
  }
  if (frozen_base_hash(ck.params) != ck.meta.frozen_base_hash)
    throw std::runtime_error("frozen-base hash mismatch: " + path);
  return ck;
}

}  // namespace plug
