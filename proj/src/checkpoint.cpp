#include <bit>
#include <cstring>
#include <fstream>

#include "fvlab/error.hpp"
#include "fvlab/model.hpp"
#include "binio.hpp"

namespace fvlab {

namespace {

using detail::Reader;
using detail::Writer;

constexpr char kMagic[4] = {'F', 'V', 'L', 'B'};

template <typename T>
ModelParams<T> read_values(Reader& r, const ModelConfig& cfg, std::uint64_t count, bool frozen, std::uint64_t seed) {
  std::vector<T> values(count);
  for (auto& v : values) v = r.get<T>();
  ModelParams<T> p(cfg, std::move(values));
  p.set_training_seed(seed);
  if (frozen) p.freeze();
  return p;
}

}  // namespace

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  const ModelConfig& c = params.config();
  Writer w(path);
  w.bytes(kMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);
  for (int v : {c.d_model, c.n_layers, c.n_heads, c.d_head, c.mlp_ratio, c.max_seq_len, c.scene_grid_bins}) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }
  w.put<std::uint8_t>(static_cast<std::uint8_t>(c.precision));
  w.put<std::uint8_t>(std::is_same_v<T, float> ? 0 : 1);
  w.put<std::uint8_t>(params.frozen() ? 1 : 0);
  w.put<std::uint64_t>(params.training_seed());
  w.put<std::uint64_t>(params.values().size());
  for (T v : params.values()) w.put<T>(v);
  w.finish();
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  Reader r(path, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw ParseError("'" + path.string() + "' is not an FVLB checkpoint");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  ModelConfig cfg;
  cfg.d_model = static_cast<int>(r.get<std::uint32_t>());
  cfg.n_layers = static_cast<int>(r.get<std::uint32_t>());
  cfg.n_heads = static_cast<int>(r.get<std::uint32_t>());
  cfg.d_head = static_cast<int>(r.get<std::uint32_t>());
  cfg.mlp_ratio = static_cast<int>(r.get<std::uint32_t>());
  cfg.max_seq_len = static_cast<int>(r.get<std::uint32_t>());
  cfg.scene_grid_bins = static_cast<int>(r.get<std::uint32_t>());
  const auto prec = r.get<std::uint8_t>();
  if (prec > 1) throw ParseError("checkpoint has unknown precision tag");
  cfg.precision = static_cast<Precision>(prec);
  const auto storage = r.get<std::uint8_t>();
  const bool frozen = r.get<std::uint8_t>() != 0;
  const auto seed = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  const ParamLayout layout = ParamLayout::for_config(cfg);
  if (count != layout.total) {
    throw ConfigError("checkpoint header (d_model=" + std::to_string(cfg.d_model) + ") implies " +
                      std::to_string(layout.total) + " weights but file stores " + std::to_string(count));
  }
  if (storage == 0) return {read_values<float>(r, cfg, count, frozen, seed)};
  if (storage == 1) return {read_values<double>(r, cfg, count, frozen, seed)};
  throw ParseError("checkpoint has unknown storage precision");
}

const ModelConfig& LoadedCheckpoint::config() const {
  return std::visit([](const auto& p) -> const ModelConfig& { return p.config(); }, params);
}

std::uint64_t LoadedCheckpoint::checksum() const {
  return std::visit([](const auto& p) { return p.checksum(); }, params);
}

std::unique_ptr<Backbone> LoadedCheckpoint::backbone(Precision precision) const {
  return std::visit([&](const auto& p) { return make_backbone(p, precision); }, params);
}

template void save_checkpoint<float>(const ModelParams<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const ModelParams<double>&, const std::filesystem::path&);

}  // namespace fvlab
