#include "vloss/core/serialize.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vloss {
namespace {

constexpr char kMagic[4] = {'V', 'L', 'T', '1'};

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is), start_(is.tellg()) {}

  template <typename T>
  T get(const char* field) {
    unsigned char bytes[sizeof(T)];
    const auto offset = position();
    if (!is_.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
      throw ValidationError(std::string("VLT1: truncated ") + field + " at byte offset " +
                            std::to_string(offset));
    }
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  long long position() const {
    const auto here = is_.tellg();
    if (here < 0 || start_ < 0) return consumed_;
    return static_cast<long long>(here - start_);
  }

  void bump(long long n) { consumed_ += n; }

 private:
  std::istream& is_;
  std::streampos start_;
  long long consumed_ = 0;
};

template <typename Scalar>
Tensor<Scalar> read_payload(Reader& r, Shape shape) {
  std::vector<Scalar> data(numel_of(shape));
  for (auto& v : data) v = r.template get<Scalar>("payload");
  return Tensor<Scalar>(std::move(shape), std::move(data));
}

}  // namespace

template <typename Scalar>
void write_tensor(std::ostream& os, const Tensor<Scalar>& t) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (Index d : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  put_le<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<Scalar>()));
  for (Scalar v : t.data()) put_le<Scalar>(os, v);
}

AnyTensor read_any_tensor(std::istream& is) {
  Reader r(is);
  char magic[4];
  for (char& c : magic) c = static_cast<char>(r.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, kMagic, 4) != 0) throw ValidationError("VLT1: bad magic at byte offset 0");
  const auto rank = r.get<std::uint32_t>("rank");
  if (rank > 16) throw ValidationError("VLT1: implausible rank " + std::to_string(rank) + " at byte offset 4");
  Shape shape(rank);
  for (auto& d : shape) d = r.get<std::uint32_t>("dims");
  const auto tag_offset = r.position();
  const auto tag = r.get<std::uint8_t>("dtype");
  if (tag == 0) return read_payload<float>(r, std::move(shape));
  if (tag == 1) return read_payload<double>(r, std::move(shape));
  throw ValidationError("VLT1: unknown dtype tag " + std::to_string(tag) + " at byte offset " +
                        std::to_string(tag_offset));
}

template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& is) {
  AnyTensor any = read_any_tensor(is);
  return std::visit(
      [](const auto& t) {
        std::vector<Scalar> data(t.data().begin(), t.data().end());
        return Tensor<Scalar>(t.shape(), std::move(data));
      },
      any);
}

template <typename Scalar>
void save_tensor(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeAbort("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  if (!os) throw RuntimeAbort("write failed: " + path.string());
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + path.string());
  try {
    return read_tensor<Scalar>(is);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::string encode_tensor_bytes(const Tensor<float>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}
std::string encode_tensor_bytes(const Tensor<double>& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  return os.str();
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace vloss
