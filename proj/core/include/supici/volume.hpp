#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace supici {

struct Dims3 {
  int nz = 0;
  int ny = 0;
  int nx = 0;

  std::size_t total() const {
    return std::size_t(nz) * std::size_t(ny) * std::size_t(nx);
  }
  bool operator==(const Dims3&) const = default;
};

/// Dense 3D array, z-major layout: index = (z * ny + y) * nx + x.
template <typename T>
class Volume {
public:
  Volume() = default;
  Volume(Dims3 dims, T fill = T{}) : dims_(dims), v_(dims.total(), fill) {
    if (dims.nz < 0 || dims.ny < 0 || dims.nx < 0)
      throw std::invalid_argument("Volume: negative dimension");
  }

  Dims3 dims() const { return dims_; }
  std::size_t size() const { return v_.size(); }

  T& at(int z, int y, int x) { return v_[index(z, y, x)]; }
  const T& at(int z, int y, int x) const { return v_[index(z, y, x)]; }

  std::size_t index(int z, int y, int x) const {
    return (std::size_t(z) * dims_.ny + y) * dims_.nx + x;
  }

  bool contains(int z, int y, int x) const {
    return z >= 0 && z < dims_.nz && y >= 0 && y < dims_.ny && x >= 0 && x < dims_.nx;
  }

  std::vector<T>& data() { return v_; }
  const std::vector<T>& data() const { return v_; }

  bool operator==(const Volume&) const = default;

private:
  Dims3 dims_;
  std::vector<T> v_;
};

using VolumeU8 = Volume<std::uint8_t>;
using VolumeF = Volume<double>;

}  // namespace supici
