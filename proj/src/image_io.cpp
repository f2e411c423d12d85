#include "motis/image_io.hpp"

#include <algorithm>
#include <csetjmp>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

#include "motis/encoders.hpp"

namespace motis::img {

Format sniff(std::string_view b) {
  static constexpr unsigned char png_sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  if (b.size() >= 8 && std::memcmp(b.data(), png_sig, 8) == 0) return Format::kPng;
  if (b.size() >= 3 && static_cast<unsigned char>(b[0]) == 0xFF && static_cast<unsigned char>(b[1]) == 0xD8 &&
      static_cast<unsigned char>(b[2]) == 0xFF)
    return Format::kJpeg;
  return Format::kUnknown;
}

std::string mime_type(Format f) {
  switch (f) {
    case Format::kPng: return "image/png";
    case Format::kJpeg: return "image/jpeg";
    case Format::kUnknown: break;
  }
  return "application/octet-stream";
}

std::string extension(Format f) {
  switch (f) {
    case Format::kPng: return "png";
    case Format::kJpeg: return "jpg";
    case Format::kUnknown: break;
  }
  return "bin";
}

namespace {

constexpr std::size_t kMaxPixels = std::size_t(1) << 26;  // 64 Mpx decode cap

Image decode_png(std::string_view bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw DecodeError(std::string("png: ") + image.message);
  if (std::size_t(image.width) * image.height > kMaxPixels) {
    png_image_free(&image);
    throw DecodeError("png: image too large");
  }
  image.format = PNG_FORMAT_RGB;
  Image out;
  out.width = image.width;
  out.height = image.height;
  out.rgb.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.rgb.data(), 0, nullptr))
    throw DecodeError(std::string("png: ") + image.message);
  return out;
}

struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegError*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

void jpeg_quiet(j_common_ptr, int) {}

// Plain-C decode: no C++ objects with destructors live across setjmp.
bool decode_jpeg_into(const std::string_view bytes, Image& out, char* message) {
  jpeg_decompress_struct cinfo;
  JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  err.mgr.emit_message = jpeg_quiet;
  if (setjmp(err.jump)) {
    std::memcpy(message, err.message, JMSG_LENGTH_MAX);
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  if (std::size_t(cinfo.output_width) * cinfo.output_height > kMaxPixels || cinfo.output_components != 3) {
    std::snprintf(message, JMSG_LENGTH_MAX, "unsupported image size or channel count");
    jpeg_destroy_decompress(&cinfo);
    return false;
  }
  out.width = cinfo.output_width;
  out.height = cinfo.output_height;
  out.rgb.resize(out.width * out.height * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + std::size_t(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return true;
}

}  // namespace

Image decode(std::string_view bytes) {
  switch (sniff(bytes)) {
    case Format::kPng: return decode_png(bytes);
    case Format::kJpeg: {
      Image out;
      char message[JMSG_LENGTH_MAX] = {};
      if (!decode_jpeg_into(bytes, out, message)) throw DecodeError(std::string("jpeg: ") + message);
      return out;
    }
    case Format::kUnknown: break;
  }
  throw DecodeError("not a PNG or JPEG image");
}

Image resize(const Image& src, std::size_t width, std::size_t height) {
  if (src.width == 0 || src.height == 0 || width == 0 || height == 0)
    throw std::invalid_argument("resize: empty image or target");
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(width * height * 3);
  const double sx = double(src.width) / double(width), sy = double(src.height) / double(height);
  for (std::size_t y = 0; y < height; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (std::size_t x = 0; x < width; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double acc[3] = {0, 0, 0}, area = 0;
      // Each source pixel contributes by its overlap with the target cell.
      for (auto py = static_cast<std::size_t>(y0); py < src.height && double(py) < y1; ++py) {
        const double wy = std::min(y1, double(py + 1)) - std::max(y0, double(py));
        if (wy <= 0) continue;
        for (auto px = static_cast<std::size_t>(x0); px < src.width && double(px) < x1; ++px) {
          const double wx = std::min(x1, double(px + 1)) - std::max(x0, double(px));
          if (wx <= 0) continue;
          const double w = wx * wy;
          const auto* p = &src.rgb[(py * src.width + px) * 3];
          for (int c = 0; c < 3; ++c) acc[c] += w * p[c];
          area += w;
        }
      }
      for (int c = 0; c < 3; ++c)
        out.rgb[(y * width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(acc[c] / area, 0.0, 255.0)));
    }
  }
  return out;
}

std::string encode_png(const Image& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.rgb.data(), 0, nullptr))
    throw std::runtime_error(std::string("png encode: ") + image.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.rgb.data(), 0, nullptr))
    throw std::runtime_error(std::string("png encode: ") + image.message);
  out.resize(size);
  return out;
}

std::string encode_jpeg(const Image& img, int quality) {
  jpeg_compress_struct cinfo;
  jpeg_error_mgr jerr;
  cinfo.err = jpeg_std_error(&jerr);
  jpeg_create_compress(&cinfo);
  unsigned char* buf = nullptr;
  unsigned long size = 0;
  jpeg_mem_dest(&cinfo, &buf, &size);
  cinfo.image_width = static_cast<JDIMENSION>(img.width);
  cinfo.image_height = static_cast<JDIMENSION>(img.height);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while (cinfo.next_scanline < cinfo.image_height) {
    auto* row = const_cast<JSAMPROW>(img.rgb.data() + std::size_t(cinfo.next_scanline) * img.width * 3);
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::string out(reinterpret_cast<const char*>(buf), size);
  std::free(buf);
  return out;
}

Image thumbnail(const Image& src, std::size_t max_side) {
  const std::size_t longest = std::max(src.width, src.height);
  if (longest <= max_side) return src;
  const double f = double(max_side) / double(longest);
  return resize(src, std::max<std::size_t>(1, std::lround(src.width * f)),
                std::max<std::size_t>(1, std::lround(src.height * f)));
}

std::size_t side_for_patches(std::size_t num_patches) {
  const auto per_side = static_cast<std::size_t>(std::lround(std::sqrt(double(num_patches))));
  if (num_patches == 0 || per_side * per_side != num_patches)
    throw std::invalid_argument("patch count " + std::to_string(num_patches) + " is not a square grid");
  return per_side * kPatchSide;
}

std::vector<float> featurize(const Image& image, std::size_t side) {
  if (side == 0 || side % kPatchSide) throw std::invalid_argument("featurize: side must be a multiple of 4");
  const Image small = resize(image, side, side);
  std::vector<float> rgb(small.rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = float(small.rgb[i]) / 255.0f;
  auto out = enc::patches_from_rgb(rgb, side, kPatchSide);
  return out;
}

}  // namespace motis::img
