#include "flowscope/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "flowscope/errors.hpp"

namespace flowscope {
namespace {

constexpr std::array<char, 8> kMagic = {'F', 'L', 'O', 'W', 'S', 'C', 'K', '\0'};
constexpr std::uint32_t kConfigFields = 11;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw IoError("checkpoint truncated");
  return value;
}

std::array<std::uint64_t, kConfigFields> config_fields(const ModelConfig& c) {
  return {c.n_layers, c.n_heads,       c.d_model, c.d_ff, c.vocab_size, c.patch_rows, c.patch_cols,
          c.patch_channels, c.max_seq, c.seed,    c.image_cutoff_layer};
}

}  // namespace

void save_checkpoint(const Model& model, std::ostream& out) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, kConfigFields);
  for (auto f : config_fields(model.config())) put<std::uint64_t>(out, f);

  std::uint32_t n = 0;
  model.weights().for_each([&](const std::string&, const Tensor&) { ++n; });
  put<std::uint32_t>(out, n);
  model.weights().for_each([&](const std::string& name, const Tensor& t) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
  });
  if (!out) throw IoError("failed writing checkpoint");
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  save_checkpoint(model, out);
}

Model load_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw IoError("not a flowscope checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  if (get<std::uint32_t>(in) != kConfigFields) throw IoError("unexpected config header size");
  ModelConfig c;
  c.n_layers = get<std::uint64_t>(in);
  c.n_heads = get<std::uint64_t>(in);
  c.d_model = get<std::uint64_t>(in);
  c.d_ff = get<std::uint64_t>(in);
  c.vocab_size = get<std::uint64_t>(in);
  c.patch_rows = get<std::uint64_t>(in);
  c.patch_cols = get<std::uint64_t>(in);
  c.patch_channels = get<std::uint64_t>(in);
  c.max_seq = get<std::uint64_t>(in);
  c.seed = get<std::uint64_t>(in);
  c.image_cutoff_layer = get<std::uint64_t>(in);
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw IoError(std::string("checkpoint header: ") + e.what());
  }

  const auto manifest = parameter_manifest(c);
  if (get<std::uint32_t>(in) != manifest.size()) throw IoError("checkpoint parameter count does not match config");

  ModelWeights w;
  w.layers.resize(c.n_layers);
  std::size_t k = 0;
  w.for_each([&](const std::string&, Tensor& t) {
    const auto& [name, shape] = manifest[k++];
    const auto len = get<std::uint32_t>(in);
    std::string stored(len, '\0');
    if (!in.read(stored.data(), len)) throw IoError("checkpoint truncated");
    if (stored != name) throw IoError("checkpoint manifest mismatch: expected " + name + ", found " + stored);
    const auto rank = get<std::uint32_t>(in);
    Shape dims(rank);
    for (auto& d : dims) d = get<std::uint64_t>(in);
    if (dims != shape) throw IoError("checkpoint shape mismatch for " + name);
    std::vector<double> data(shape_product(shape));
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw IoError("checkpoint truncated in " + name);
    t = Tensor(shape, std::move(data));
  });
  return Model(c, std::move(w));
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return load_checkpoint(in);
}

}  // namespace flowscope
