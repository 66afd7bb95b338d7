#include "aqcf/nifti.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace aqcf {

namespace {

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

// field offsets in the 348-byte header
constexpr int kDim = 40, kDatatype = 70, kBitpix = 72, kPixdim = 76, kVoxOffset = 108, kSclSlope = 112,
              kSclInter = 116, kXyztUnits = 123, kQformCode = 252, kSformCode = 254, kQuatern = 256,
              kQoffset = 268, kSrow = 280, kMagic = 344;

class HeaderReader {
 public:
  HeaderReader(const std::string& bytes, bool swap) : b_(bytes), swap_(swap) {}

  template <class T>
  T get(int offset) const {
    T v;
    char tmp[sizeof(T)];
    std::memcpy(tmp, b_.data() + offset, sizeof(T));
    if (swap_) std::reverse(tmp, tmp + sizeof(T));
    std::memcpy(&v, tmp, sizeof(T));
    return v;
  }

 private:
  const std::string& b_;
  bool swap_;
};

template <class T>
void put(std::string& b, int offset, T v) {
  std::memcpy(b.data() + offset, &v, sizeof(T));
}

int bytes_per_voxel(NiftiType t) {
  switch (t) {
    case NiftiType::uint8: return 1;
    case NiftiType::int16: return 2;
    case NiftiType::float32: return 4;
    case NiftiType::float64: return 8;
  }
  return 0;
}

NiftiType checked_type(std::int16_t code) {
  switch (code) {
    case 2: return NiftiType::uint8;
    case 4: return NiftiType::int16;
    case 16: return NiftiType::float32;
    case 64: return NiftiType::float64;
    default:
      throw std::runtime_error("nifti: unsupported datatype code " + std::to_string(code) +
                               " (supported: uint8, int16, float32, float64)");
  }
}

template <class T>
double decode(const char* p, bool swap) {
  char tmp[sizeof(T)];
  std::memcpy(tmp, p, sizeof(T));
  if (swap) std::reverse(tmp, tmp + sizeof(T));
  T v;
  std::memcpy(&v, tmp, sizeof(T));
  return static_cast<double>(v);
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("nifti: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

NiftiVolume parse(const std::string& header, const std::string& payload, std::size_t data_offset_hint, bool pair) {
  if (header.size() < kHeaderSize) throw std::runtime_error("nifti: truncated header");
  std::int32_t sizeof_hdr;
  std::memcpy(&sizeof_hdr, header.data(), 4);
  bool swap = false;
  if (sizeof_hdr != kHeaderSize) {
    if (static_cast<std::int32_t>(__builtin_bswap32(static_cast<std::uint32_t>(sizeof_hdr))) != kHeaderSize) throw std::runtime_error("nifti: bad sizeof_hdr");
    swap = true;
  }
  const std::string magic(header.data() + kMagic, 4);
  if (magic != std::string("n+1\0", 4) && magic != std::string("ni1\0", 4))
    throw std::runtime_error("nifti: bad magic bytes (expected \"n+1\" or \"ni1\")");
  if ((magic[1] == 'i') != pair)
    throw std::runtime_error(pair ? "nifti: header in a .hdr/.img pair does not carry the ni1 magic"
                                  : "nifti: ni1 header requires a separate .img file");
  HeaderReader h(header, swap);
  const auto ndim = h.get<std::int16_t>(kDim);
  if (ndim < 1 || ndim > 7) throw std::runtime_error("nifti: invalid dim[0]");
  std::array<std::int64_t, 3> n{1, 1, 1};
  for (int a = 0; a < std::min<int>(3, ndim); ++a) n[a] = h.get<std::int16_t>(kDim + 2 * (a + 1));
  for (int a = 3; a < ndim; ++a)
    if (h.get<std::int16_t>(kDim + 2 * (a + 1)) > 1) throw std::runtime_error("nifti: only 3-D volumes are supported");
  for (auto d : n)
    if (d <= 0) throw std::runtime_error("nifti: non-positive dimension");
  const NiftiType type = checked_type(h.get<std::int16_t>(kDatatype));
  if (h.get<std::int16_t>(kBitpix) != 8 * bytes_per_voxel(type)) throw std::runtime_error("nifti: bitpix mismatch");

  NiftiVolume v;
  v.datatype = type;
  std::array<double, 4> pix{};
  for (int a = 0; a < 4; ++a) pix[a] = h.get<float>(kPixdim + 4 * a);
  for (int a = 0; a < 3; ++a) v.spacing[a] = pix[a + 1] > 0 ? pix[a + 1] : 1.0;

  if (h.get<std::int16_t>(kSformCode) > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) v.affine[r][c] = h.get<float>(kSrow + 16 * r + 4 * c);
  } else if (h.get<std::int16_t>(kQformCode) > 0) {
    const double b = h.get<float>(kQuatern), c = h.get<float>(kQuatern + 4), d = h.get<float>(kQuatern + 8);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = pix[0] < 0 ? -1.0 : 1.0;
    const double r[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
    const double scale[3] = {v.spacing[0], v.spacing[1], qfac * v.spacing[2]};
    for (int row = 0; row < 3; ++row) {
      for (int col = 0; col < 3; ++col) v.affine[row][col] = r[row][col] * scale[col];
      v.affine[row][3] = h.get<float>(kQoffset + 4 * row);
    }
  } else {
    for (int row = 0; row < 3; ++row)
      for (int col = 0; col < 4; ++col) v.affine[row][col] = row == col ? v.spacing[row] : 0.0;
  }

  std::size_t offset = data_offset_hint;
  if (!pair) {
    const double vo = h.get<float>(kVoxOffset);
    offset = static_cast<std::size_t>(std::max<double>(vo, kHeaderSize));
  }
  const std::size_t bpv = static_cast<std::size_t>(bytes_per_voxel(type));
  const std::size_t count = static_cast<std::size_t>(n[0] * n[1] * n[2]);
  if (payload.size() < offset + count * bpv)
    throw std::runtime_error("nifti: truncated voxel data (need " + std::to_string(offset + count * bpv) +
                             " bytes, have " + std::to_string(payload.size()) + ")");
  double slope = h.get<float>(kSclSlope), inter = h.get<float>(kSclInter);
  const bool scaled = slope != 0.0 && std::isfinite(slope) && !(slope == 1.0 && inter == 0.0);
  if (!std::isfinite(inter)) inter = 0.0;

  // file order: x fastest; tensor order [X, Y, Z] with Z fastest
  v.data = Tensor({n[0], n[1], n[2]});
  auto dst = v.data.data<double>();
  const char* src = payload.data() + offset;
  for (std::int64_t z = 0; z < n[2]; ++z)
    for (std::int64_t y = 0; y < n[1]; ++y)
      for (std::int64_t x = 0; x < n[0]; ++x, src += bpv) {
        double val = 0.0;
        switch (type) {
          case NiftiType::uint8: val = static_cast<unsigned char>(*src); break;
          case NiftiType::int16: val = decode<std::int16_t>(src, swap); break;
          case NiftiType::float32: val = decode<float>(src, swap); break;
          case NiftiType::float64: val = decode<double>(src, swap); break;
        }
        dst[(x * n[1] + y) * n[2] + z] = scaled ? val * slope + inter : val;
      }
  return v;
}

}  // namespace

std::string orientation_of(const Affine& a) {
  static const char pos[3] = {'R', 'A', 'S'}, neg[3] = {'L', 'P', 'I'};
  std::string out;
  for (int axis = 0; axis < 3; ++axis) {
    int best = 0;
    for (int w = 1; w < 3; ++w)
      if (std::abs(a[w][axis]) > std::abs(a[best][axis])) best = w;
    out += a[best][axis] >= 0 ? pos[best] : neg[best];
  }
  return out;
}

namespace {

int world_axis(char code) {
  switch (code) {
    case 'R': case 'L': return 0;
    case 'A': case 'P': return 1;
    case 'S': case 'I': return 2;
  }
  throw std::invalid_argument(std::string("orientation: unknown axis code '") + code + "'");
}

}  // namespace

NiftiVolume reorient(const NiftiVolume& v, const std::string& target) {
  const std::string current = orientation_of(v.affine);
  if (target.size() != 3) throw std::invalid_argument("orientation: target must have 3 axis codes");
  std::array<int, 3> src{};
  std::array<bool, 3> flipped{};
  std::array<bool, 3> used{};
  for (int t = 0; t < 3; ++t) {
    const int w = world_axis(target[t]);
    int s = -1;
    for (int a = 0; a < 3; ++a)
      if (world_axis(current[a]) == w) s = a;
    if (s < 0 || used[s]) throw std::invalid_argument("orientation: affine axes are degenerate (" + current + ")");
    used[s] = true;
    src[t] = s;
    flipped[t] = current[s] != target[t];
  }
  const std::array<std::int64_t, 3> n{v.data.dim(0), v.data.dim(1), v.data.dim(2)};
  const std::array<std::int64_t, 3> o{n[src[0]], n[src[1]], n[src[2]]};
  NiftiVolume out;
  out.datatype = v.datatype;
  out.data = Tensor({o[0], o[1], o[2]});
  for (std::int64_t i = 0; i < o[0]; ++i)
    for (std::int64_t j = 0; j < o[1]; ++j)
      for (std::int64_t k = 0; k < o[2]; ++k) {
        const std::array<std::int64_t, 3> p{i, j, k};
        std::array<std::int64_t, 3> q{};
        for (int t = 0; t < 3; ++t) q[src[t]] = flipped[t] ? o[t] - 1 - p[t] : p[t];
        out.data.set((i * o[1] + j) * o[2] + k, v.data.at((q[0] * n[1] + q[1]) * n[2] + q[2]));
      }
  for (int t = 0; t < 3; ++t) {
    out.spacing[t] = v.spacing[src[t]];
    for (int r = 0; r < 3; ++r) out.affine[r][t] = (flipped[t] ? -1.0 : 1.0) * v.affine[r][src[t]];
  }
  for (int r = 0; r < 3; ++r) {
    out.affine[r][3] = v.affine[r][3];
    for (int t = 0; t < 3; ++t)
      if (flipped[t]) out.affine[r][3] += v.affine[r][src[t]] * static_cast<double>(o[t] - 1);
  }
  return out;
}

std::string canonical_orientation(Modality m) { return m == Modality::ct ? "RAS" : "LAS"; }

NiftiVolume read_nifti_bytes(const std::string& bytes, const std::optional<std::string>& target) {
  NiftiVolume v = parse(bytes, bytes, 0, false);
  return target ? reorient(v, *target) : v;
}

NiftiVolume read_nifti(const std::string& path, const std::optional<std::string>& target) {
  const std::filesystem::path p(path);
  NiftiVolume v;
  if (p.extension() == ".hdr") {
    std::filesystem::path img = p;
    img.replace_extension(".img");
    v = parse(slurp(path), slurp(img.string()), 0, true);
  } else {
    const std::string bytes = slurp(path);
    v = parse(bytes, bytes, 0, false);
  }
  return target ? reorient(v, *target) : v;
}

std::string write_nifti_bytes(const NiftiVolume& v) {
  if (v.data.rank() != 3) throw ShapeError("nifti: expected a 3-D volume, got " + shape_str(v.data.shape()));
  for (std::size_t a = 0; a < 3; ++a)
    if (v.data.dim(a) > 32767) throw std::invalid_argument("nifti: dimension exceeds the NIfTI-1 limit");
  const int bpv = bytes_per_voxel(v.datatype);
  std::string b(static_cast<std::size_t>(kDataOffset + v.data.numel() * bpv), '\0');
  put<std::int32_t>(b, 0, kHeaderSize);
  put<std::int16_t>(b, kDim, 3);
  for (int a = 0; a < 3; ++a) put<std::int16_t>(b, kDim + 2 * (a + 1), static_cast<std::int16_t>(v.data.dim(a)));
  for (int a = 4; a < 8; ++a) put<std::int16_t>(b, kDim + 2 * a, 1);
  put<std::int16_t>(b, kDatatype, static_cast<std::int16_t>(v.datatype));
  put<std::int16_t>(b, kBitpix, static_cast<std::int16_t>(8 * bpv));
  put<float>(b, kPixdim, 1.0f);
  for (int a = 0; a < 3; ++a) put<float>(b, kPixdim + 4 * (a + 1), static_cast<float>(v.spacing[a]));
  put<float>(b, kVoxOffset, static_cast<float>(kDataOffset));
  put<float>(b, kSclSlope, 1.0f);
  put<float>(b, kSclInter, 0.0f);
  b[kXyztUnits] = 2;  // millimetres
  put<std::int16_t>(b, kSformCode, 1);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 4; ++c) put<float>(b, kSrow + 16 * r + 4 * c, static_cast<float>(v.affine[r][c]));
  std::memcpy(b.data() + kMagic, "n+1\0", 4);

  const std::int64_t nx = v.data.dim(0), ny = v.data.dim(1), nz = v.data.dim(2);
  char* dst = b.data() + kDataOffset;
  for (std::int64_t z = 0; z < nz; ++z)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t x = 0; x < nx; ++x, dst += bpv) {
        const double val = v.data.at((x * ny + y) * nz + z);
        switch (v.datatype) {
          case NiftiType::uint8: {
            const auto u = static_cast<std::uint8_t>(std::clamp(std::lround(val), 0L, 255L));
            std::memcpy(dst, &u, 1);
            break;
          }
          case NiftiType::int16: {
            const auto s = static_cast<std::int16_t>(std::clamp(std::lround(val), -32768L, 32767L));
            std::memcpy(dst, &s, 2);
            break;
          }
          case NiftiType::float32: {
            const auto f = static_cast<float>(val);
            std::memcpy(dst, &f, 4);
            break;
          }
          case NiftiType::float64: std::memcpy(dst, &val, 8); break;
        }
      }
  return b;
}

void write_nifti(const std::string& path, const NiftiVolume& v) {
  const std::string bytes = write_nifti_bytes(v);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("nifti: cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("nifti: write failed for '" + path + "'");
}

RawVolume load_volume(const ManifestEntry& e) {
  const std::string target = canonical_orientation(e.modality);
  RawVolume r;
  NiftiVolume img;
  try {
    img = read_nifti(e.image_path, target);
  } catch (const std::exception& ex) {
    throw std::runtime_error("subject " + e.subject_id + ": " + ex.what());
  }
  r.image = img.data;
  r.spacing = img.spacing;
  r.modality = e.modality;
  r.subject_id = e.subject_id;
  if (!e.label_path.empty()) {
    NiftiVolume lab = read_nifti(e.label_path, target);
    if (lab.data.shape() != img.data.shape())
      throw std::runtime_error("subject " + e.subject_id + ": label grid " + shape_str(lab.data.shape()) +
                               " differs from image grid " + shape_str(img.data.shape()));
    for (std::int64_t i = 0; i < lab.data.numel(); ++i) {
      const double l = lab.data.at(i);
      if (l != 0.0 && l != 1.0 && l != 2.0)
        throw std::runtime_error("subject " + e.subject_id + ": label value " + std::to_string(l) +
                                 " outside {0, 1, 2}");
    }
    r.label = lab.data;
  }
  return r;
}

}  // namespace aqcf
