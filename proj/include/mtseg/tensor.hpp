#ifndef MTSEG_TENSOR_HPP
#define MTSEG_TENSOR_HPP

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense n-dimensional array with row-major storage and an optional gradient
/// slot. Scalar is float or double; gradient checking always runs in double.
template <typename Scalar>
struct Tensor {
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Shape shape;
  Storage data;
  bool requires_grad = false;
  Storage grad;  // size 0 means absent

  Tensor() = default;

  explicit Tensor(Shape s) : shape(std::move(s)) {
    check_extents(shape);
    data = Storage::Zero(numel(shape));
  }

  Tensor(Shape s, Storage d) : shape(std::move(s)), data(std::move(d)) {
    check_extents(shape);
    if (numel(shape) != data.size())
      throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                  std::to_string(data.size()));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

  static Tensor full(Shape s, Scalar v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }

  static Tensor scalar(Scalar v) { return full({1}, v); }

  static Tensor from(Shape s, std::initializer_list<Scalar> values) {
    Tensor t(std::move(s));
    if (static_cast<Index>(values.size()) != t.size())
      throw std::invalid_argument("Tensor::from: value count mismatch");
    Index i = 0;
    for (Scalar v : values) t.data[i++] = v;
    return t;
  }

  Index size() const { return data.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  Scalar item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " + shape_str(shape));
    return data[0];
  }

  bool has_grad() const { return grad.size() == data.size() && data.size() > 0; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad = Storage::Zero(data.size());
  }

  // flat index helpers for the [C,H,W] layouts the network uses
  Scalar& at3(Index c, Index i, Index j) { return data[(c * shape[1] + i) * shape[2] + j]; }
  Scalar at3(Index c, Index i, Index j) const { return data[(c * shape[1] + i) * shape[2] + j]; }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.data = data.template cast<Other>();
    out.requires_grad = requires_grad;
    if (grad.size() > 0) out.grad = grad.template cast<Other>();
    return out;
  }

 private:
  static void check_extents(const Shape& s) {
    for (Index d : s)
      if (d < 0) throw std::invalid_argument("Tensor: negative extent in shape " + shape_str(s));
  }
};

template <typename Scalar>
void check_finite(const Tensor<Scalar>& t, const char* op) {
  if (!t.data.isFinite().all())
    throw std::runtime_error(std::string(op) + ": non-finite value in output tensor of shape " + shape_str(t.shape));
}

// ---------------------------------------------------------------------------
// TNSR serialization: one header line "TNSR v1 <ndim> <d0> <d1> ...\n"
// followed by the values as little-endian 64-bit floats, row-major.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "TNSR writer assumes a little-endian host");

inline void write_tnsr(std::ostream& os, const Shape& shape, const double* values) {
  os << "TNSR v1 " << shape.size();
  for (Index d : shape) os << ' ' << d;
  os << '\n';
  os.write(reinterpret_cast<const char*>(values), static_cast<std::streamsize>(sizeof(double) * numel(shape)));
  if (!os) throw std::runtime_error("TNSR: write failed");
}

template <typename Scalar>
void write_tnsr(std::ostream& os, const Tensor<Scalar>& t) {
  if constexpr (std::is_same_v<Scalar, double>) {
    write_tnsr(os, t.shape, t.data.data());
  } else {
    Eigen::Array<double, Eigen::Dynamic, 1> tmp = t.data.template cast<double>();
    write_tnsr(os, t.shape, tmp.data());
  }
}

inline Tensor<double> read_tnsr(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("TNSR: missing header");
  std::istringstream hs(line);
  std::string magic, version;
  std::size_t ndim = 0;
  hs >> magic >> version >> ndim;
  if (!hs || magic != "TNSR" || version != "v1") throw std::runtime_error("TNSR: bad header '" + line + "'");
  Shape shape(ndim);
  for (auto& d : shape) {
    hs >> d;
    if (!hs || d < 0) throw std::runtime_error("TNSR: bad extent in header '" + line + "'");
  }
  Tensor<double> t(shape);
  is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
  if (!is) throw std::runtime_error("TNSR: truncated payload");
  return t;
}

template <typename Scalar>
void save_tnsr(const std::string& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("TNSR: cannot open " + path + " for writing");
  write_tnsr(os, t);
}

inline Tensor<double> load_tnsr(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("TNSR: cannot open " + path);
  return read_tnsr(is);
}

}  // namespace mtseg

#endif  // MTSEG_TENSOR_HPP
