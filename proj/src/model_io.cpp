#include "crm/model_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace crm {

namespace {

using Kind = PersistenceError::Kind;
using Bytes = std::vector<std::uint8_t>;

constexpr char kMagic[4] = {'C', 'R', 'M', '1'};

class Writer {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.insert(out_.end(), raw, raw + sizeof(T));
  }
  void u8(std::uint8_t v) { put(v); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f64(double v) { put(v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void vec(const Vector& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void mat(const Matrix& m) {
    u64(m.rows);
    u64(m.cols);
    for (double x : m.data) f64(x);
  }
  void raw(const Bytes& b) { out_.insert(out_.end(), b.begin(), b.end()); }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size, std::string where) : p_(data), end_(data + size), where_(std::move(where)) {}

  std::size_t remaining() const { return static_cast<std::size_t>(end_ - p_); }

  void need(std::size_t n) const {
    if (remaining() < n)
      throw PersistenceError(Kind::Truncated, "model file truncated in " + where_ + ": need " + std::to_string(n) +
                                                  " bytes, have " + std::to_string(remaining()));
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, p_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    p_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_), n);
    p_ += n;
    return s;
  }
  std::size_t count(std::size_t elem_size) {
    const std::uint64_t n = u64();
    if (elem_size != 0 && n > remaining() / elem_size)
      throw PersistenceError(Kind::Truncated, "model file truncated in " + where_ + ": declared " + std::to_string(n) +
                                                  " elements, " + std::to_string(remaining()) + " bytes left");
    return static_cast<std::size_t>(n);
  }
  Vector vec() {
    const std::size_t n = count(8);
    Vector v(n);
    for (auto& x : v) x = f64();
    return v;
  }
  Matrix mat() {
    const std::uint64_t rows = u64();
    const std::uint64_t cols = u64();
    if (cols != 0 && rows > remaining() / 8 / cols)
      throw PersistenceError(Kind::Truncated, "model file truncated in " + where_ + ": matrix " + std::to_string(rows) +
                                                  "x" + std::to_string(cols) + " exceeds remaining bytes");
    Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
    for (auto& x : m.data) x = f64();
    return m;
  }
  void skip(std::size_t n) {
    need(n);
    p_ += n;
  }
  std::uint8_t enum_byte(std::uint8_t max_value, const char* what) {
    const std::uint8_t v = u8();
    if (v > max_value) throw PersistenceError(Kind::Malformed, std::string("bad ") + what + " in " + where_);
    return v;
  }
  void finish() const {
    if (p_ != end_) throw PersistenceError(Kind::Malformed, "trailing bytes in " + where_);
  }

 private:
  const std::uint8_t* p_;
  const std::uint8_t* end_;
  std::string where_;
};

void malformed_if(bool cond, const std::string& what) {
  if (cond) throw PersistenceError(Kind::Malformed, what);
}

BackboneModel read_backbone(Reader& r) {
  BackboneModel m;
  m.input_kind = static_cast<InputKind>(r.enum_byte(1, "input kind"));
  m.input_dim = static_cast<std::size_t>(r.u64());
  m.vocab.max_features = static_cast<std::size_t>(r.u64());
  const std::size_t terms = r.count(4 + 8);
  for (std::size_t i = 0; i < terms; ++i) {
    m.vocab.terms.push_back(r.str());
    m.vocab.idf.push_back(r.f64());
  }
  m.vocab.rebuild_index();
  const std::size_t layers = r.count(32);
  for (std::size_t l = 0; l < layers; ++l) {
    DenseLayer layer;
    layer.weight = r.mat();
    layer.bias = r.vec();
    m.encoder.push_back(std::move(layer));
  }
  m.head_W = r.mat();
  m.head_b = r.vec();
  m.alpha = r.f64();
  r.finish();

  std::size_t fan_in = m.input_dim;
  for (const auto& layer : m.encoder) {
    malformed_if(layer.weight.cols != fan_in || layer.bias.size() != layer.weight.rows, "backbone layer shapes disagree");
    fan_in = layer.weight.rows;
  }
  malformed_if(m.head_W.cols != fan_in || m.head_b.size() != m.head_W.rows || m.head_W.rows < 2,
               "backbone head shape disagrees");
  malformed_if(m.input_kind == InputKind::Text && m.vocab.size() != m.input_dim, "vocabulary size disagrees");
  return m;
}

Bytes write_retrospection(const RetrospectionModel& m) {
  Writer w;
  w.u8(static_cast<std::uint8_t>(m.fusion));
  w.u8(static_cast<std::uint8_t>(m.middle_pooling));
  w.u8(static_cast<std::uint8_t>(m.act));
  w.f64(m.lambda);
  w.mat(m.conv_F);
  w.mat(m.fc_W);
  w.vec(m.fc_b);
  w.vec(m.attn_v);
  return w.take();
}

RetrospectionModel read_retrospection(Reader& r) {
  RetrospectionModel m;
  m.fusion = static_cast<Fusion>(r.enum_byte(2, "fusion"));
  m.middle_pooling = static_cast<MiddlePooling>(r.enum_byte(1, "pooling"));
  m.act = static_cast<ActivationKind>(r.enum_byte(1, "activation"));
  m.lambda = r.f64();
  m.conv_F = r.mat();
  m.fc_W = r.mat();
  m.fc_b = r.vec();
  m.attn_v = r.vec();
  r.finish();
  const std::size_t C = m.fc_W.rows;
  malformed_if(m.conv_F.rows != 3 || m.conv_F.cols == 0, "retrospection filters must be 3xK");
  malformed_if(m.fc_W.cols != C * m.conv_F.cols || m.fc_b.size() != C, "retrospection FC shape disagrees");
  malformed_if(m.fusion == Fusion::Middle ? m.attn_v.size() != C * m.conv_F.cols : !m.attn_v.empty(),
               "attention vector present iff middle fusion");
  return m;
}

Bytes write_generation(const GenerationModel& g) {
  Writer w;
  w.u64(g.backbone_fingerprint);
  w.u8(g.normalize_injected ? 1 : 0);
  w.mat(g.head_W);
  w.u64(g.per_class.size());
  for (const auto& m : g.per_class) {
    w.u64(m.class_id);
    w.f64(m.gamma);
    w.mat(m.conv_Fg);
    w.mat(m.fc1_W);
    w.vec(m.fc1_b);
    w.mat(m.fc2_W);
    w.vec(m.fc2_b);
  }
  return w.take();
}

GenerationModel read_generation(Reader& r) {
  GenerationModel g;
  g.backbone_fingerprint = r.u64();
  g.normalize_injected = r.enum_byte(1, "normalize flag") != 0;
  g.head_W = r.mat();
  const std::size_t classes = r.count(16);
  for (std::size_t c = 0; c < classes; ++c) {
    DecompositionModel m;
    m.class_id = static_cast<std::size_t>(r.u64());
    m.gamma = r.f64();
    m.conv_Fg = r.mat();
    m.fc1_W = r.mat();
    m.fc1_b = r.vec();
    m.fc2_W = r.mat();
    m.fc2_b = r.vec();
    const std::size_t D = g.head_W.cols;
    malformed_if(m.class_id != c, "generation classes out of order");
    malformed_if(m.conv_Fg.rows != 2 * g.head_W.rows + 1, "generation filter height disagrees");
    malformed_if(m.fc1_W.cols != D || m.fc1_b.size() != m.fc1_W.rows || m.fc2_W.rows != D ||
                     m.fc2_W.cols != m.fc1_W.rows || m.fc2_b.size() != D,
                 "generation FC shapes disagree");
    g.per_class.push_back(std::move(m));
  }
  r.finish();
  malformed_if(g.per_class.size() != g.head_W.rows, "generation model must cover every class");
  return g;
}

}  // namespace

std::uint64_t fnv1a64(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::uint8_t> serialize_backbone(const BackboneModel& m) {
  Writer w;
  w.u8(static_cast<std::uint8_t>(m.input_kind));
  w.u64(m.input_dim);
  w.u64(m.vocab.max_features);
  w.u64(m.vocab.size());
  for (std::size_t i = 0; i < m.vocab.size(); ++i) {
    w.str(m.vocab.terms[i]);
    w.f64(m.vocab.idf[i]);
  }
  w.u64(m.encoder.size());
  for (const auto& layer : m.encoder) {
    w.mat(layer.weight);
    w.vec(layer.bias);
  }
  w.mat(m.head_W);
  w.vec(m.head_b);
  w.f64(m.alpha);
  return w.take();
}

std::uint64_t backbone_fingerprint(const BackboneModel& m) { return fnv1a64(serialize_backbone(m)); }

void check_generation_compatible(const GenerationModel& gm, const BackboneModel& backbone) {
  const std::uint64_t fp = backbone_fingerprint(backbone);
  if (fp != gm.backbone_fingerprint)
    throw PersistenceError(Kind::FingerprintMismatch,
                           "generation model was trained against a different backbone (fingerprint " +
                               std::to_string(gm.backbone_fingerprint) + ", backbone " + std::to_string(fp) + ")");
}

std::vector<std::uint8_t> serialize_bundle(const ModelBundle& bundle) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u16(kModelFormatVersion);
  auto section = [&](const std::string& name, const Bytes& payload) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    for (char c : name) w.u8(static_cast<std::uint8_t>(c));
    w.u64(payload.size());
    w.raw(payload);
  };
  if (bundle.backbone) section("backbone", serialize_backbone(*bundle.backbone));
  if (bundle.retrospection) section("retrospection", write_retrospection(*bundle.retrospection));
  if (bundle.generation) section("generation", write_generation(*bundle.generation));
  return w.take();
}

ModelBundle deserialize_bundle(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw PersistenceError(Kind::BadMagic, "not a CRM model file (bad magic)");
  Reader r(bytes.data() + 4, bytes.size() - 4, "header");
  const std::uint16_t version = r.u16();
  if (version != kModelFormatVersion)
    throw PersistenceError(Kind::BadVersion, "unsupported model format version " + std::to_string(version));

  ModelBundle bundle;
  std::uint64_t backbone_fp = 0;
  while (r.remaining() > 0) {
    const std::uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name;
    for (std::uint16_t i = 0; i < name_len; ++i) name += static_cast<char>(r.u8());
    const std::uint64_t len = r.u64();
    if (len > r.remaining())
      throw PersistenceError(Kind::Truncated, "model file truncated in section '" + name + "'");
    const std::size_t offset = bytes.size() - r.remaining();
    Reader sr(bytes.data() + offset, static_cast<std::size_t>(len), "section '" + name + "'");
    r.skip(static_cast<std::size_t>(len));

    if (name == "backbone") {
      malformed_if(bundle.backbone.has_value(), "duplicate backbone section");
      bundle.backbone = read_backbone(sr);
      backbone_fp = fnv1a64(Bytes(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(offset + len)));
    } else if (name == "retrospection") {
      malformed_if(bundle.retrospection.has_value(), "duplicate retrospection section");
      bundle.retrospection = read_retrospection(sr);
    } else if (name == "generation") {
      malformed_if(bundle.generation.has_value(), "duplicate generation section");
      bundle.generation = read_generation(sr);
    } else {
      throw PersistenceError(Kind::Malformed, "unknown section '" + name + "'");
    }
  }
  if (bundle.backbone && bundle.generation && bundle.generation->backbone_fingerprint != backbone_fp)
    throw PersistenceError(Kind::FingerprintMismatch,
                           "generation section was trained against a different backbone");
  if (bundle.backbone && bundle.retrospection &&
      bundle.retrospection->class_count() != bundle.backbone->class_count())
    throw PersistenceError(Kind::Malformed, "retrospection and backbone class counts differ");
  return bundle;
}

void save_model(const std::string& path, const ModelBundle& bundle) {
  const Bytes bytes = serialize_bundle(bundle);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PersistenceError(Kind::Io, "cannot write model file '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PersistenceError(Kind::Io, "failed writing model file '" + path + "'");
}

ModelBundle load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PersistenceError(Kind::Io, "cannot open model file '" + path + "'");
  const Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_bundle(bytes);
}

}  // namespace crm
