#include "dtrattunet/image_io.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "dtrattunet/errors.hpp"

namespace dtrattunet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

template <typename T>
T byteswap(T v) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &v, sizeof(T));
  std::reverse(bytes.begin(), bytes.end());
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};
using GzPtr = std::unique_ptr<std::remove_pointer_t<gzFile>, GzCloser>;

// Minimal NIfTI-1 header (348 bytes), only the fields this reader uses.
constexpr int kNiftiHeaderSize = 348;

}  // namespace

torch::Tensor read_png(const std::filesystem::path& path) {
  auto file = open_file(path, "rb");
  std::array<unsigned char, 8> sig{};
  if (std::fread(sig.data(), 1, sig.size(), file.get()) != sig.size() || png_sig_cmp(sig.data(), 0, sig.size())) {
    throw DataError("not a PNG file: " + path.string());
  }
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialisation failed for " + path.string());
  }
  torch::Tensor result;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unreadable PNG " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (depth == 16) png_set_swap(png);  // host little endian
  png_read_update_info(png, info);

  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  const int out_depth = png_get_bit_depth(png, info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const auto h = static_cast<int64_t>(height);
  const auto w = static_cast<int64_t>(width);
  if (out_depth == 16) {
    auto raw = torch::from_blob(buffer.data(), {h, w}, torch::kInt16);
    result = raw.to(torch::kInt32).bitwise_and(0xFFFF).to(torch::kFloat32);
  } else {
    result = torch::from_blob(buffer.data(), {h, w}, torch::kUInt8).to(torch::kFloat32);
  }
  return result.clone();
}

static void write_png_impl(const std::filesystem::path& path, const unsigned char* data, int64_t height,
                           int64_t width, int channels, int bit_depth) {
  auto file = open_file(path, "wb");
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_handler, png_warning_handler);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialisation failed for " + path.string());
  }
  std::vector<png_const_bytep> rows(static_cast<std::size_t>(height));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG " + path.string() + ": " + message);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  const auto stride = static_cast<std::size_t>(width * channels * (bit_depth / 8));
  for (int64_t y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = data + y * stride;
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_png_gray(const std::filesystem::path& path, const torch::Tensor& image, int bit_depth) {
  if (image.dim() != 2) throw ValidationError("write_png_gray: expected a 2-D tensor");
  if (bit_depth != 8 && bit_depth != 16) throw ValidationError("write_png_gray: bit depth must be 8 or 16");
  const double top = bit_depth == 8 ? 255.0 : 65535.0;
  auto clipped = image.to(torch::kFloat64).round().clamp(0.0, top);
  auto pixels = bit_depth == 8 ? clipped.to(torch::kUInt8).contiguous()
                               : clipped.to(torch::kInt32).to(torch::kInt16).contiguous();
  write_png_impl(path, static_cast<const unsigned char*>(pixels.data_ptr()), image.size(0), image.size(1), 1,
                 bit_depth);
}

void write_png_rgb(const std::filesystem::path& path, const torch::Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.size(2) != 3) throw ValidationError("write_png_rgb: expected (H, W, 3)");
  auto pixels = rgb.to(torch::kUInt8).contiguous();
  write_png_impl(path, pixels.data_ptr<uint8_t>(), rgb.size(0), rgb.size(1), 3, 8);
}

torch::Tensor read_nifti(const std::filesystem::path& path) {
  GzPtr gz(gzopen(path.c_str(), "rb"));
  if (!gz) throw DataError("cannot open " + path.string());
  std::array<unsigned char, kNiftiHeaderSize> header{};
  if (gzread(gz.get(), header.data(), kNiftiHeaderSize) != kNiftiHeaderSize) {
    throw DataError("truncated NIfTI header: " + path.string());
  }
  auto field = [&](auto& out, std::size_t offset) { std::memcpy(&out, header.data() + offset, sizeof(out)); };
  int32_t sizeof_hdr = 0;
  field(sizeof_hdr, 0);
  bool swapped = false;
  if (sizeof_hdr != kNiftiHeaderSize) {
    if (byteswap(sizeof_hdr) != kNiftiHeaderSize) throw DataError("not a NIfTI-1 file: " + path.string());
    swapped = true;
  }
  auto fix = [&](auto v) { return swapped ? byteswap(v) : v; };

  std::array<int16_t, 8> dim{};
  for (std::size_t i = 0; i < 8; ++i) {
    int16_t d = 0;
    field(d, 40 + 2 * i);
    dim[i] = fix(d);
  }
  int16_t datatype = 0;
  field(datatype, 70);
  datatype = fix(datatype);
  float vox_offset = 0.f, slope = 0.f, inter = 0.f;
  field(vox_offset, 108);
  field(slope, 112);
  field(inter, 116);
  vox_offset = fix(vox_offset);
  slope = fix(slope);
  inter = fix(inter);

  if (dim[0] < 2 || dim[0] > 7) throw DataError("unsupported NIfTI rank in " + path.string());
  const int64_t nx = dim[1];
  const int64_t ny = dim[2];
  const int64_t nz = dim[0] >= 3 ? std::max<int16_t>(dim[3], 1) : 1;
  for (int i = 4; i <= dim[0]; ++i) {
    if (dim[static_cast<std::size_t>(i)] > 1) throw DataError("only single-volume NIfTI files are supported: " + path.string());
  }
  if (nx <= 0 || ny <= 0) throw DataError("empty NIfTI volume: " + path.string());

  torch::ScalarType type;
  switch (datatype) {
    case 2: type = torch::kUInt8; break;
    case 4: type = torch::kInt16; break;
    case 8: type = torch::kInt32; break;
    case 16: type = torch::kFloat32; break;
    case 64: type = torch::kFloat64; break;
    case 256: type = torch::kInt8; break;
    case 512: type = torch::kInt16; break;  // uint16, fixed below
    case 768: type = torch::kInt32; break;  // uint32 read as signed then widened
    default: throw DataError("unsupported NIfTI datatype " + std::to_string(datatype) + " in " + path.string());
  }
  const auto skip = static_cast<long>(vox_offset) - kNiftiHeaderSize;
  if (skip > 0) {
    std::vector<unsigned char> ext(static_cast<std::size_t>(skip));
    if (gzread(gz.get(), ext.data(), static_cast<unsigned>(skip)) != skip) {
      throw DataError("truncated NIfTI extension: " + path.string());
    }
  }
  auto raw = torch::empty({nz, ny, nx}, torch::TensorOptions().dtype(type));
  const auto nbytes = static_cast<int64_t>(raw.numel() * raw.element_size());
  auto* dst = static_cast<char*>(raw.data_ptr());
  int64_t done = 0;
  while (done < nbytes) {
    const auto chunk = static_cast<unsigned>(std::min<int64_t>(nbytes - done, 1 << 30));
    const int got = gzread(gz.get(), dst + done, chunk);
    if (got <= 0) throw DataError("truncated NIfTI data: " + path.string());
    done += got;
  }
  if (swapped && raw.element_size() > 1) {
    auto bytes = raw.view(torch::kUInt8).view({raw.numel(), raw.element_size()});
    raw = bytes.flip(1).contiguous().view(type).view({nz, ny, nx});
  }
  torch::Tensor volume;
  if (datatype == 512) {
    volume = raw.to(torch::kInt32).bitwise_and(0xFFFF).to(torch::kFloat32);
  } else if (datatype == 768) {
    volume = raw.to(torch::kInt64).bitwise_and(0xFFFFFFFFLL).to(torch::kFloat32);
  } else {
    volume = raw.to(torch::kFloat32);
  }
  if (slope != 0.f && std::isfinite(slope) && std::isfinite(inter) && !(slope == 1.f && inter == 0.f)) {
    volume = volume * slope + inter;
  }
  return volume;
}

void write_nifti(const std::filesystem::path& path, const torch::Tensor& volume) {
  if (volume.dim() != 3) throw ValidationError("write_nifti: expected (slices, rows, cols)");
  std::array<unsigned char, 352> header{};
  auto put = [&](auto v, std::size_t offset) { std::memcpy(header.data() + offset, &v, sizeof(v)); };
  put(int32_t{kNiftiHeaderSize}, 0);
  const std::array<int16_t, 8> dim{3, static_cast<int16_t>(volume.size(2)), static_cast<int16_t>(volume.size(1)),
                                   static_cast<int16_t>(volume.size(0)), 1, 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) put(dim[i], 40 + 2 * i);
  put(int16_t{16}, 70);  // float32
  put(int16_t{32}, 72);
  for (std::size_t i = 0; i < 8; ++i) put(1.0f, 76 + 4 * i);  // pixdim
  put(352.0f, 108);
  put(1.0f, 112);
  put(0.0f, 116);
  std::memcpy(header.data() + 344, "n+1\0", 4);

  auto data = volume.to(torch::kFloat32).contiguous();
  const auto nbytes = static_cast<unsigned>(data.numel() * 4);
  const bool gzip = ends_with(path.string(), ".gz");
  GzPtr gz(gzopen(path.c_str(), gzip ? "wb6" : "wbT"));
  if (!gz) throw DataError("cannot write " + path.string());
  if (gzwrite(gz.get(), header.data(), static_cast<unsigned>(header.size())) != static_cast<int>(header.size()) ||
      gzwrite(gz.get(), data.data_ptr<float>(), nbytes) != static_cast<int>(nbytes)) {
    throw DataError("failed writing " + path.string());
  }
}

}  // namespace dtrattunet
