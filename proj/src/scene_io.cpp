#include "gtm/scene_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace gtm {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
  }
  return v;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    v = to_little(v);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_magic(const char (&m)[4]) { bytes_.insert(bytes_.end(), m, m + 4); }
  template <typename Derived>
  void put_floats(const Eigen::DenseBase<Derived>& values) {
    for (Eigen::Index i = 0; i < values.size(); ++i) put<float>(float(values.derived().data()[i]));
  }
  void put_bytes(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return to_little(v);
  }
  bool magic_is(const char (&m)[4]) {
    need(4);
    const bool ok = std::memcmp(bytes_.data() + pos_, m, 4) == 0;
    pos_ += 4;
    return ok;
  }
  void get_floats(float* out, size_t n) {
    need(n * sizeof(float));
    for (size_t i = 0; i < n; ++i) out[i] = get<float>();
  }
  std::span<const std::uint8_t> get_bytes(size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  /// Fails early when a declared payload cannot fit in the remaining bytes.
  void need(size_t n) const {
    if (n > bytes_.size() - pos_)
      throw FormatError("truncated file: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                        ", file has " + std::to_string(bytes_.size()));
  }
  size_t offset() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  size_t pos_ = 0;
};

// Row-major (one anchor/time per record) order for per-column tensors.
template <typename Derived>
void put_columns(Writer& w, const Eigen::MatrixBase<Derived>& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) w.put<float>(float(m(r, c)));
}

template <typename Derived>
void get_columns(Reader& rd, Eigen::MatrixBase<Derived>& m) {
  rd.need(size_t(m.size()) * sizeof(float));
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rd.get<float>();
}

constexpr std::uint16_t kFlagPositional = 1;

}  // namespace

std::vector<std::uint8_t> encode_scene(const SceneModel<float>& model) {
  model.validate();
  const auto& cfg = model.config;
  Writer w;
  w.put_magic(kSceneMagic);
  w.put<std::uint16_t>(kSceneVersion);
  w.put<std::uint16_t>(cfg.encoder == TimeEncoder::Positional ? kFlagPositional : 0);
  w.put<std::uint32_t>(std::uint32_t(model.anchors.size()));
  w.put<std::uint32_t>(std::uint32_t(cfg.offsets_per_anchor));
  w.put<std::uint32_t>(std::uint32_t(cfg.feature_dim));
  w.put<std::uint32_t>(std::uint32_t(cfg.embedding_dim));
  w.put<std::uint32_t>(std::uint32_t(model.num_times));
  w.put<std::uint32_t>(std::uint32_t(cfg.pe_frequencies));
  w.put<std::uint32_t>(std::uint32_t(cfg.hidden_width));
  w.put<float>(float(cfg.scene_extent));
  w.put<float>(float(cfg.near_clip));
  w.put<float>(float(cfg.cull_margin));
  w.put<std::uint32_t>(5);
  for (const auto& net : model.heads.nets) {
    w.put<std::uint32_t>(std::uint32_t(net.layers.size()));
    w.put<std::uint32_t>(std::uint32_t(net.input_dim()));
    for (const auto& l : net.layers) w.put<std::uint32_t>(std::uint32_t(l.weight.rows()));
  }
  put_columns(w, model.anchors.centers);
  put_columns(w, model.anchors.features);
  put_columns(w, model.anchors.offsets);
  put_columns(w, model.anchors.log_scalings);
  for (const auto& net : model.heads.nets)
    for (const auto& l : net.layers) {
      put_columns(w, l.weight.transpose());  // row-major weights
      put_columns(w, l.bias);
    }
  put_columns(w, model.embeddings.table);
  return w.take();
}

SceneModel<float> decode_scene(std::span<const std::uint8_t> bytes) {
  Reader rd(bytes);
  if (!rd.magic_is(kSceneMagic)) throw FormatError("not a .gtms scene (bad magic)");
  const auto version = rd.get<std::uint16_t>();
  if (version != kSceneVersion)
    throw FormatError("unsupported .gtms version " + std::to_string(version) + " (expected " +
                      std::to_string(kSceneVersion) + ")");
  const auto flags = rd.get<std::uint16_t>();
  SceneModel<float> m;
  auto& cfg = m.config;
  const auto n = rd.get<std::uint32_t>();
  cfg.offsets_per_anchor = int(rd.get<std::uint32_t>());
  cfg.feature_dim = int(rd.get<std::uint32_t>());
  cfg.embedding_dim = int(rd.get<std::uint32_t>());
  m.num_times = int(rd.get<std::uint32_t>());
  cfg.pe_frequencies = int(rd.get<std::uint32_t>());
  cfg.hidden_width = int(rd.get<std::uint32_t>());
  cfg.scene_extent = rd.get<float>();
  cfg.near_clip = rd.get<float>();
  cfg.cull_margin = rd.get<float>();
  cfg.encoder = (flags & kFlagPositional) ? TimeEncoder::Positional : TimeEncoder::Embedding;
  const auto heads = rd.get<std::uint32_t>();
  if (heads != 5) throw FormatError("expected 5 heads, header declares " + std::to_string(heads));
  if (cfg.offsets_per_anchor < 1 || cfg.feature_dim < 1 || m.num_times < 1)
    throw FormatError("header declares empty dimensions");
  std::array<std::vector<int>, 5> dims;
  for (auto& d : dims) {
    const auto layers = rd.get<std::uint32_t>();
    if (layers < 1 || layers > 64) throw FormatError("implausible head depth " + std::to_string(layers));
    for (std::uint32_t i = 0; i <= layers; ++i) d.push_back(int(rd.get<std::uint32_t>()));
  }
  cfg.hidden_layers = int(dims[0].size()) - 2;
  for (int h = 0; h < 5; ++h)
    if (dims[size_t(h)] != head_dims(cfg, Head(h)))
      throw FormatError(std::string("head dims of ") + kHeadNames[size_t(h)] + " inconsistent with header");

  // size check before allocating anything large
  const std::uint64_t k = std::uint64_t(cfg.offsets_per_anchor);
  std::uint64_t floats = std::uint64_t(n) * (3 + std::uint64_t(cfg.feature_dim) + 3 * k + 3);
  for (const auto& d : dims)
    for (size_t i = 0; i + 1 < d.size(); ++i) floats += std::uint64_t(d[i]) * std::uint64_t(d[i + 1]) + std::uint64_t(d[i + 1]);
  const std::uint64_t l = cfg.encoder == TimeEncoder::Embedding ? std::uint64_t(cfg.embedding_dim) : 0;
  floats += l * std::uint64_t(m.num_times);
  if (floats * 4 != rd.remaining())
    throw FormatError("payload size mismatch at offset " + std::to_string(rd.offset()) + ": header implies " +
                      std::to_string(floats * 4) + " bytes, file has " + std::to_string(rd.remaining()));

  auto& an = m.anchors;
  an.centers.resize(3, n);
  an.features.resize(cfg.feature_dim, n);
  an.offsets.resize(Eigen::Index(3 * k), n);
  an.log_scalings.resize(3, n);
  get_columns(rd, an.centers);
  get_columns(rd, an.features);
  get_columns(rd, an.offsets);
  get_columns(rd, an.log_scalings);
  for (size_t h = 0; h < 5; ++h) {
    auto& net = m.heads.nets[h];
    const auto& d = dims[h];
    for (size_t i = 0; i + 1 < d.size(); ++i) {
      typename MlpParams<float>::Layer layer;
      MatrixX<float> wt(d[i], d[i + 1]);
      get_columns(rd, wt);
      layer.weight = wt.transpose();
      layer.bias.resize(d[i + 1]);
      get_columns(rd, layer.bias);
      net.layers.push_back(std::move(layer));
    }
  }
  m.embeddings.table.resize(Eigen::Index(l), m.num_times);
  get_columns(rd, m.embeddings.table);
  m.validate();
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_scene(const SceneModel<float>& model, const std::filesystem::path& path) {
  write_file_atomic(path, encode_scene(model));
}

SceneModel<float> load_scene(const std::filesystem::path& path) { return decode_scene(read_file(path)); }

void save_checkpoint(const TrainerState<float>& state, const std::filesystem::path& path) {
  Writer w;
  w.put_magic(kCheckpointMagic);
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint16_t>(0);
  w.put<std::uint32_t>(std::uint32_t(state.iteration));
  w.put<std::uint64_t>(std::uint64_t(state.adam.step));
  const auto scene = encode_scene(state.model);
  w.put<std::uint64_t>(scene.size());
  w.put_bytes(scene);
  w.put<std::uint32_t>(std::uint32_t(state.adam.tensors.size()));
  for (const auto& t : state.adam.tensors) {
    w.put<std::uint64_t>(std::uint64_t(t.m.size()));
    w.put_floats(t.m);
    w.put_floats(t.v);
  }
  const auto& st = state.stats;
  w.put<std::uint32_t>(std::uint32_t(st.grad_sum.rows()));
  w.put<std::uint32_t>(std::uint32_t(st.grad_sum.cols()));
  w.put_floats(st.grad_sum);
  w.put_floats(st.visible);
  w.put_floats(st.max_opacity);
  w.put_floats(st.visits);
  write_file_atomic(path, w.take());
}

TrainerState<float> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Reader rd(bytes);
  if (!rd.magic_is(kCheckpointMagic)) throw FormatError("not a checkpoint (bad magic)");
  const auto version = rd.get<std::uint16_t>();
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  (void)rd.get<std::uint16_t>();
  TrainerState<float> st;
  st.iteration = int(rd.get<std::uint32_t>());
  st.adam.step = std::int64_t(rd.get<std::uint64_t>());
  const auto scene_size = rd.get<std::uint64_t>();
  if (scene_size > rd.remaining()) throw FormatError("checkpoint scene blob truncated at offset " + std::to_string(rd.offset()));
  st.model = decode_scene(rd.get_bytes(size_t(scene_size)));
  const auto count = rd.get<std::uint32_t>();
  auto expected = make_adam_state(st.model);
  if (count != expected.tensors.size()) throw FormatError("checkpoint optimizer tensor count does not match scene");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto size = rd.get<std::uint64_t>();
    auto& t = expected.tensors[i];
    if (size != std::uint64_t(t.m.size())) throw FormatError("checkpoint optimizer tensor shape mismatch");
    rd.get_floats(t.m.data(), size_t(size));
    rd.get_floats(t.v.data(), size_t(size));
  }
  expected.step = st.adam.step;
  st.adam = std::move(expected);
  const auto k = rd.get<std::uint32_t>();
  const auto n = rd.get<std::uint32_t>();
  if (int(k) != st.model.k() || Eigen::Index(n) != st.model.anchors.size())
    throw FormatError("checkpoint statistics shape mismatch");
  st.stats = AdaptStats<float>::zeros(k, n);
  rd.get_floats(st.stats.grad_sum.data(), size_t(k) * n);
  rd.get_floats(st.stats.visible.data(), size_t(k) * n);
  rd.get_floats(st.stats.max_opacity.data(), n);
  rd.get_floats(st.stats.visits.data(), n);
  if (rd.remaining() != 0) throw FormatError("trailing bytes after checkpoint at offset " + std::to_string(rd.offset()));
  return st;
}

}  // namespace gtm
