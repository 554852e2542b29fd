#pragma once

// Checkpoint files: an 8-byte magic, a little-endian u64 header length, a
// JSON header (config, vocabulary symbols, init seed, tensor manifest), then
// the tensor payload as raw little-endian f64 in manifest order. Fast-mode
// floats are stored upcast; reloading them is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dail/model.hpp"
#include "dail/vocab.hpp"

namespace dail {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads assume a little-endian host");

namespace detail {

constexpr char kCheckpointMagic[9] = "DAILCKP1";

inline void write_blob(std::ofstream& out, const void* data, size_t len) {
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
}

template <class Storage>
void append_payload(const Storage& storage, nlohmann::json& manifest,
                    std::vector<double>& payload) {
  std::visit(
      [&](const auto& t) {
        nn::for_each_tensor(t, [&](const std::string& name, const auto& m) {
          manifest.push_back({{"name", name},
                              {"rows", m.rows()},
                              {"cols", m.cols()}});
          for (Eigen::Index c = 0; c < m.cols(); ++c)
            for (Eigen::Index r = 0; r < m.rows(); ++r)
              payload.push_back(static_cast<double>(m(r, c)));
        });
      },
      storage);
}

inline void write_checkpoint(const std::string& path, const nlohmann::json& header,
                             const std::vector<double>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  const std::string hs = header.dump();
  const std::uint64_t hlen = hs.size();
  write_blob(out, kCheckpointMagic, 8);
  write_blob(out, &hlen, 8);
  write_blob(out, hs.data(), hs.size());
  write_blob(out, payload.data(), payload.size() * sizeof(double));
  if (!out) throw std::runtime_error("short write: " + path);
}

struct RawCheckpoint {
  nlohmann::json header;
  std::vector<double> payload;
};

inline RawCheckpoint read_checkpoint(const std::string& path,
                                     const std::string& expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  std::uint64_t hlen = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  RawCheckpoint raw;
  raw.header = nlohmann::json::parse(hs, nullptr, false);
  if (raw.header.is_discarded())
    throw std::runtime_error("corrupt checkpoint header: " + path);
  if (raw.header.value("kind", "") != expected_kind)
    throw std::runtime_error("checkpoint " + path + " holds a '" +
                             raw.header.value("kind", "?") + "', expected a '" +
                             expected_kind + "'");
  std::uint64_t count = 0;
  for (const auto& t : raw.header.at("tensors"))
    count += t.at("rows").get<std::uint64_t>() * t.at("cols").get<std::uint64_t>();
  raw.payload.resize(count);
  in.read(reinterpret_cast<char*>(raw.payload.data()),
          static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
  return raw;
}

// Rehydrate a tensor struct from the manifest, verifying names and shapes.
template <class Tensors>
void fill_from_payload(Tensors& dst, const RawCheckpoint& raw) {
  std::vector<std::pair<std::string, nn::Mat<double>*>> mats;
  nn::for_each_tensor(dst, [&](const std::string& n, nn::Mat<double>& m) {
    mats.emplace_back(n, &m);
  });
  const auto& manifest = raw.header.at("tensors");
  if (manifest.size() != mats.size())
    throw std::runtime_error("checkpoint tensor count mismatch");
  size_t offset = 0;
  for (size_t i = 0; i < mats.size(); ++i) {
    const auto& entry = manifest[i];
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (entry.at("name").get<std::string>() != mats[i].first ||
        rows != mats[i].second->rows() || cols != mats[i].second->cols())
      throw std::runtime_error("checkpoint tensor '" +
                               entry.at("name").get<std::string>() +
                               "' does not match the expected manifest");
    for (Eigen::Index c = 0; c < cols; ++c)
      for (Eigen::Index r = 0; r < rows; ++r)
        (*mats[i].second)(r, c) = raw.payload[offset++];
  }
}

}  // namespace detail

inline void save_model_checkpoint(const std::string& path,
                                  const ModelParams& params,
                                  const Vocabulary& vocab) {
  const auto& cfg = params.config();
  if (cfg.vocab_size != vocab.size())
    throw std::invalid_argument("vocabulary size does not match model config");
  nlohmann::json header;
  header["kind"] = "model";
  header["config"] = {{"vocab_size", cfg.vocab_size},
                      {"embed_dim", cfg.embed_dim},
                      {"n_layers", cfg.n_layers},
                      {"n_heads", cfg.n_heads},
                      {"context_len", cfg.context_len},
                      {"precision", precision_name(cfg.precision)}};
  header["init_seed"] = params.init_seed();
  header["vocab"] = vocab.symbols();
  header["tensors"] = nlohmann::json::array();
  std::vector<double> payload;
  detail::append_payload(params.storage(), header["tensors"], payload);
  detail::write_checkpoint(path, header, payload);
}

struct LoadedModel {
  ModelParams params;
  Vocabulary vocab;
};

inline LoadedModel load_model_checkpoint(const std::string& path) {
  auto raw = detail::read_checkpoint(path, "model");
  const auto& jc = raw.header.at("config");
  ModelConfig cfg;
  cfg.vocab_size = jc.at("vocab_size").get<int>();
  cfg.embed_dim = jc.at("embed_dim").get<int>();
  cfg.n_layers = jc.at("n_layers").get<int>();
  cfg.n_heads = jc.at("n_heads").get<int>();
  cfg.context_len = jc.at("context_len").get<int>();
  cfg.precision = parse_precision(jc.at("precision").get<std::string>());
  cfg.validate();

  auto tensors = nn::init_tensors<double>(cfg.dims(), 0);
  detail::fill_from_payload(tensors, raw);

  LoadedModel lm;
  lm.params = ModelParams::from_tensors(cfg, tensors,
                                        raw.header.value("init_seed", 0ULL));
  lm.vocab = Vocabulary::from_symbols(
      raw.header.at("vocab").get<std::vector<std::string>>());
  if (lm.vocab.size() != cfg.vocab_size)
    throw std::runtime_error("checkpoint vocabulary does not match its config");
  return lm;
}

inline void save_adapter_checkpoint(const std::string& path,
                                    const LowRankAdapter& adapter,
                                    const ModelParams& base) {
  nlohmann::json header;
  header["kind"] = "adapter";
  header["adapter"] = {{"rank", adapter.config().rank},
                       {"alpha", adapter.config().alpha},
                       {"precision", precision_name(adapter.precision())}};
  header["init_seed"] = adapter.init_seed();
  header["base_fingerprint"] = base.fingerprint();
  header["tensors"] = nlohmann::json::array();
  std::vector<double> payload;
  detail::append_payload(adapter.storage(), header["tensors"], payload);
  detail::write_checkpoint(path, header, payload);
}

inline LowRankAdapter load_adapter_checkpoint(const std::string& path,
                                              const ModelParams& base) {
  auto raw = detail::read_checkpoint(path, "adapter");
  const auto& ja = raw.header.at("adapter");
  AdapterConfig cfg;
  cfg.rank = ja.at("rank").get<int>();
  cfg.alpha = ja.at("alpha").get<double>();
  if (parse_precision(ja.at("precision").get<std::string>()) !=
      base.config().precision)
    throw std::runtime_error(
        "adapter checkpoint precision does not match the base model");
  if (raw.header.at("base_fingerprint").get<std::uint64_t>() != base.fingerprint())
    throw std::runtime_error(
        "adapter checkpoint was trained against different base weights");

  auto tensors = nn::init_adapter_tensors<double>(base.config().dims(), cfg.rank, 0);
  detail::fill_from_payload(tensors, raw);
  return LowRankAdapter::from_tensors(base, cfg, tensors,
                                      raw.header.value("init_seed", 0ULL));
}

}  // namespace dail
