#include "spen/model_io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace spen {

namespace {

constexpr std::array<char, 8> kMagic{'S', 'P', 'E', 'N', 'M', 'O', 'D', 'L'};
constexpr std::uint64_t kMaxTensorEntries = std::uint64_t{1} << 32;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u32(std::uint32_t v) { bytes(v, 4); }
  void u64(std::uint64_t v) { bytes(v, 8); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void tensor(std::size_t rows, std::size_t cols, std::span<const double> values) {
    u64(rows);
    u64(cols);
    for (double v : values) f64(v);
  }
  void matrix(const Matrix& m) { tensor(m.rows(), m.cols(), m.values()); }
  void vector(const Vector& v) { tensor(v.size(), 1, v); }

 private:
  void bytes(std::uint64_t v, int n) {
    char buf[8];
    for (int i = 0; i < n; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(buf, n);
  }
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  std::uint64_t u64() { return bytes(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const auto n = u32();
    if (n > 4096) throw DataError("model file: implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  Matrix matrix() {
    const auto rows = u64();
    const auto cols = u64();
    if (rows * cols > kMaxTensorEntries) throw DataError("model file: implausible tensor shape");
    std::vector<double> data(rows * cols);
    for (double& v : data) v = f64();
    return Matrix(rows, cols, std::move(data));
  }
  Vector vector() {
    Matrix m = matrix();
    if (m.cols() != 1 && !(m.rows() == 0)) throw DataError("model file: expected a column vector, got " + m.shape_string());
    return Vector(m.values().begin(), m.values().end());
  }
  void read(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw DataError("model file: unexpected end of file");
  }

 private:
  std::uint64_t bytes(int n) {
    unsigned char buf[8];
    read(reinterpret_cast<char*>(buf), static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
  }
  std::istream& in_;
};

void write_summary(Writer& w, const SpenParams& p) {
  std::uint64_t m = 0, depth = 0;
  if (const auto* g = std::get_if<LabelEnergy>(&p.global)) {
    m = g->measurements.rows();
    depth = static_cast<std::uint64_t>(g->depth());
  } else if (const auto* c = std::get_if<CondEnergy>(&p.global)) {
    m = c->weights.rows();
    depth = 1;
  }
  w.u64(p.input_dim());
  w.u64(p.features.layers.empty() ? 0 : p.features.layers.front().output_dim());
  w.u64(p.feature_dim());
  w.u64(p.num_labels());
  w.u64(m);
  w.u64(depth);
}

void write_spen(Writer& w, const SpenParams& p) {
  p.validate();
  w.u64(p.features.input_dim);
  w.u64(p.features.layers.size());
  for (const auto& layer : p.features.layers) {
    w.str(to_string(layer.activation));
    w.matrix(layer.weights);
    w.vector(layer.bias);
  }
  w.matrix(p.local.weights);
  w.vector(p.local.bias);
  w.str(to_string(p.global_kind()));
  std::visit(
      [&](const auto& g) {
        using T = std::decay_t<decltype(g)>;
        if constexpr (std::is_same_v<T, LabelEnergy>) {
          w.str(to_string(g.activation));
          w.u64(static_cast<std::uint64_t>(g.depth()));
          w.matrix(g.measurements);
          w.vector(g.measurement_bias);
          if (g.second) {
            w.str(to_string(g.second->activation));
            w.matrix(g.second->weights);
            w.vector(g.second->bias);
          }
          w.vector(g.output);
        } else if constexpr (std::is_same_v<T, CondEnergy>) {
          w.str(to_string(g.activation));
          w.matrix(g.weights);
          w.vector(g.bias);
          w.vector(g.output);
        } else if constexpr (std::is_same_v<T, CrfEnergy>) {
          w.matrix(g.pairwise);
          w.vector(g.linear);
        }
      },
      p.global);
}

SpenParams read_spen(Reader& r) {
  SpenParams p;
  p.features.input_dim = r.u64();
  const auto layers = r.u64();
  if (layers > 64) throw DataError("model file: implausible feature layer count");
  for (std::uint64_t k = 0; k < layers; ++k) {
    DenseLayer layer;
    layer.activation = parse_nonlinearity(r.str());
    layer.weights = r.matrix();
    layer.bias = r.vector();
    p.features.layers.push_back(std::move(layer));
  }
  p.local.weights = r.matrix();
  p.local.bias = r.vector();
  switch (parse_global_kind(r.str())) {
    case GlobalKind::None: break;
    case GlobalKind::LabelOnly: {
      LabelEnergy g;
      g.activation = parse_nonlinearity(r.str());
      const auto depth = r.u64();
      if (depth != 1 && depth != 2) throw DataError("model file: global depth must be 1 or 2");
      g.measurements = r.matrix();
      g.measurement_bias = r.vector();
      if (depth == 2) {
        DenseLayer second;
        second.activation = parse_nonlinearity(r.str());
        second.weights = r.matrix();
        second.bias = r.vector();
        g.second = std::move(second);
      }
      g.output = r.vector();
      p.global = std::move(g);
      break;
    }
    case GlobalKind::Conditioned: {
      CondEnergy g;
      g.activation = parse_nonlinearity(r.str());
      g.weights = r.matrix();
      g.bias = r.vector();
      g.output = r.vector();
      p.global = std::move(g);
      break;
    }
    case GlobalKind::CrfQuadratic: {
      Matrix s = r.matrix();
      Vector lin = r.vector();
      p.global = CrfEnergy(std::move(s), std::move(lin));
      break;
    }
  }
  p.validate();
  return p;
}

}  // namespace

void write_model(std::ostream& out, const Model& model) {
  Writer w(out);
  out.write(kMagic.data(), kMagic.size());
  w.u32(kModelFormatVersion);
  if (const auto* spen = std::get_if<SpenParams>(&model)) {
    w.u32(0);
    write_summary(w, *spen);
    write_spen(w, *spen);
  } else {
    const auto& dmf = std::get<DmfParams>(model);
    dmf.validate();
    w.u32(1);
    write_summary(w, dmf.unary_source);
    w.u64(dmf.iters);
    w.u32(dmf.clamp_unaries ? 1 : 0);
    write_spen(w, dmf.unary_source);
    w.matrix(dmf.pairwise);
    w.vector(dmf.unary_adjust);
  }
  if (!out) throw DataError("failed to write model");
}

Model read_model(std::istream& in) {
  Reader r(in);
  std::array<char, 8> magic{};
  r.read(magic.data(), magic.size());
  if (magic != kMagic) throw DataError("not a model file (bad magic)");
  const auto version = r.u32();
  if (version != kModelFormatVersion) throw DataError("unsupported model format version " + std::to_string(version));
  const auto kind = r.u32();
  for (int i = 0; i < 6; ++i) r.u64();  // summary, re-derived from the tensors
  if (kind == 0) return read_spen(r);
  if (kind != 1) throw DataError("unknown model kind " + std::to_string(kind));
  DmfParams dmf;
  dmf.iters = r.u64();
  dmf.clamp_unaries = r.u32() != 0;
  dmf.unary_source = read_spen(r);
  dmf.pairwise = r.matrix();
  dmf.unary_adjust = r.vector();
  dmf.validate();
  return dmf;
}

void save_model(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write model file " + path.string());
  write_model(out, model);
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open model file " + path.string());
  return read_model(in);
}

}  // namespace spen
